// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "discriminator_checks.hpp"
#include "doctest.h"
#include "ntf3d/discriminate.hpp"
#include "ntf3d/errors.hpp"
#include "oracles.hpp"

using namespace ntf3d;
using namespace ntf3d::testing;

namespace {

// D(x) = x . a per row, optionally plus a learned constant.
class LinearCritic final : public Critic {
 public:
  LinearCritic(std::vector<double> a, double scale_x) : scale_x_(scale_x) {
    const auto n = static_cast<std::int64_t>(a.size());
    a_ = params_.add("a", {n, 1}, std::move(a));
    b_ = params_.add("b", {1}, {0.25});
  }
  ad::Tensor logits(const ad::Tensor& x, const ad::Tensor&) const override {
    const auto rows = x.shape()[0];
    const ad::Tensor lin = ad::reshape(ad::matmul(ad::scale(x, scale_x_), a_), {rows});
    return ad::add(lin, ad::reshape(ad::matmul(ad::Tensor::full({rows, 1}, 1.0), ad::reshape(b_, {1, 1})), {rows}));
  }
  std::int64_t batch_of(const ad::Tensor& x) const override { return x.shape()[0]; }
  ParamSet& params() override { return params_; }
  const ParamSet& params() const override { return params_; }

 private:
  ParamSet params_;
  ad::Tensor a_;
  ad::Tensor b_;
  double scale_x_;
};

}  // namespace

TEST_CASE("g_fn matches arbitrary-precision references and stays finite") {
  for (const auto& r : g_references()) CHECK(std::abs(g_fn(r.x) - r.g) <= 1e-12);
  CHECK(g_fn(0.0) == doctest::Approx(-std::numbers::ln2).epsilon(1e-15));
  CHECK(std::isfinite(g_fn(-1000.0)));
  CHECK(g_fn(-1000.0) <= 0.0);
  CHECK(g_fn(-1000.0) > -1e-300);
  CHECK(std::isfinite(g_fn(1000.0)));
}

TEST_CASE("R1 on a linear critic is lambda ||a||^2; a constant critic gives 0") {
  const std::vector<double> a{0.5, -1.5, 2.0};
  const LinearCritic lin(a, 1.0);
  Rng rng(1);
  const ad::Tensor x = ad::Tensor::from({4, 3}, normal_vector(12, rng, 1.0));
  const ad::Tensor cond = ad::Tensor::zeros({4, 1});
  const double norm2 = 0.25 + 2.25 + 4.0;
  CHECK(r1_penalty(lin, x, cond, 0.7).value == doctest::Approx(0.7 * norm2).epsilon(1e-12));
  const ad::Tensor x2 = ad::Tensor::from({4, 3}, normal_vector(12, rng, 5.0));
  CHECK(r1_penalty(lin, x2, cond, 0.7).value == doctest::Approx(0.7 * norm2).epsilon(1e-12));

  const LinearCritic flat(a, 0.0);
  const R1Result zero = r1_penalty(flat, x, cond, 1.0);
  CHECK(zero.value == 0.0);
  CHECK(zero.surrogate.item() == 0.0);
}

TEST_CASE("R1 needs gradient tracking and leaves accumulated gradients alone") {
  const LinearCritic lin({1.0, 2.0}, 1.0);
  const ad::Tensor x = ad::Tensor::from({1, 2}, {0.3, 0.4});
  const ad::Tensor cond = ad::Tensor::zeros({1, 1});
  {
    ad::NoGradGuard off;
    CHECK_THROWS_AS(r1_penalty(lin, x, cond, 1.0), ContractError);
  }
  CHECK_THROWS_AS(r1_penalty(lin, x, cond, -1.0), InvalidInput);
  const auto& p = lin.params().params();
  for (const auto& q : p) CHECK(q.tensor.grad().empty());
  (void)r1_penalty(lin, x, cond, 1.0);
  for (const auto& q : p) {
    for (double g : q.tensor.grad()) CHECK(g == 0.0);
  }
}

TEST_CASE("R1 on the image critic: value matches finite-difference input gradients, parameters too") {
  Rng rng(2);
  const Discriminator2_5D d(small_image_critic_config(), rng);
  const auto r = check_r1(d, random_image_batch(3, rng), random_condition(3, 5 + 4, rng));
  CHECK(r.value_rel_err < 1e-3);
  CHECK(r.param_grad_rel_err < 1e-3);
  CHECK(r.value >= 0.0);
}

TEST_CASE("R1 on the point critic: value and parameter gradients match finite differences") {
  Rng rng(3);
  const Discriminator3D d(small_point_critic_config(), rng);
  const auto r = check_r1(d, random_cloud_batch(2, 16, rng), random_condition(2, 4, rng));
  CHECK(r.value_rel_err < 1e-3);
  CHECK(r.param_grad_rel_err < 1e-3);
}

TEST_CASE("zero logits give 2 ln 2 for D and ln 2 for G") {
  Rng rng(4);
  Discriminator2_5D d(small_image_critic_config(), rng);
  for (auto& p : d.params().params()) std::fill(p.tensor.mutable_values().begin(), p.tensor.mutable_values().end(), 0.0);
  const ad::Tensor px = random_image_batch(2, rng);
  std::vector<CameraPose> cams{sample_camera(rng), sample_camera(rng)};
  const ad::Tensor t = random_condition(2, 4, rng);
  const DLoss l = d_loss_2_5d(d, {px, cams}, {px, cams}, cams, t, 0.0);
  CHECK(l.value() == doctest::Approx(2.0 * std::numbers::ln2).epsilon(1e-14));
  CHECK(g_loss_2_5d(d, {px, cams}, cams, t).item() == doctest::Approx(std::numbers::ln2).epsilon(1e-14));

  Discriminator3D p(small_point_critic_config(), rng);
  for (auto& q : p.params().params()) std::fill(q.tensor.mutable_values().begin(), q.tensor.mutable_values().end(), 0.0);
  const ad::Tensor pc = random_cloud_batch(2, 16, rng);
  CHECK(d_loss_3d(p, pc, pc, t, 0.0).value() == doctest::Approx(2.0 * std::numbers::ln2).epsilon(1e-14));
  CHECK(g_loss_3d(p, pc, t).item() == doctest::Approx(std::numbers::ln2).epsilon(1e-14));
}

TEST_CASE("mismatched poses are rejected") {
  Rng rng(5);
  const Discriminator2_5D d(small_image_critic_config(), rng);
  const ad::Tensor px = random_image_batch(2, rng);
  std::vector<CameraPose> cams{sample_camera(rng), sample_camera(rng)};
  std::vector<CameraPose> other{cams[1], cams[0]};
  const ad::Tensor t = random_condition(2, 4, rng);
  CHECK_THROWS_AS(d_loss_2_5d(d, {px, other}, {px, cams}, cams, t, 1.0), InvalidInput);
  CHECK_THROWS_AS(d_loss_2_5d(d, {px, cams}, {px, other}, cams, t, 1.0), InvalidInput);
  CHECK_THROWS_AS(g_loss_2_5d(d, {px, other}, cams, t), InvalidInput);
  CHECK_THROWS_AS(pose_condition(cams, random_condition(3, 4, rng)), InvalidInput);
}

TEST_CASE("the generator loss reaches fake pixels") {
  Rng rng(6);
  const Discriminator2_5D d(small_image_critic_config(), rng);
  ad::Tensor px = random_image_batch(2, rng);
  px.set_requires_grad(true);
  std::vector<CameraPose> cams{sample_camera(rng), sample_camera(rng)};
  g_loss_2_5d(d, {px, cams}, cams, random_condition(2, 4, rng)).backward();
  double n = 0.0;
  for (double g : px.grad()) n += g * g;
  CHECK(n > 0.0);
}

TEST_CASE("the point critic is invariant to point order") {
  Rng rng(7);
  Disc3dConfig cfg;
  cfg.points = 256;
  cfg.cond_dim = 8;
  const Discriminator3D d(cfg, rng);
  const ad::Tensor pc = random_cloud_batch(2, 256, rng);
  const ad::Tensor t = random_condition(2, 8, rng);
  const ad::Tensor base = d.logits(pc, t);
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    std::vector<std::int64_t> perm(512);
    for (int c = 0; c < 2; ++c) {
      std::vector<std::int64_t> idx(256);
      std::iota(idx.begin(), idx.end(), c * 256);
      std::shuffle(idx.begin(), idx.end(), rng);
      std::copy(idx.begin(), idx.end(), perm.begin() + c * 256);
    }
    const ad::Tensor out = d.logits(ad::gather_rows(pc, perm), t);
    for (int i = 0; i < 2; ++i) worst = std::max(worst, std::abs(out.at(i) - base.at(i)));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("critic input shapes are validated") {
  Rng rng(8);
  const Discriminator2_5D d(small_image_critic_config(), rng);
  CHECK_THROWS_AS(d.logits(ad::Tensor::zeros({1, 4, 4, 3}), random_condition(1, 9, rng)), InvalidInput);
  CHECK_THROWS_AS(d.logits(random_image_batch(1, rng), random_condition(1, 3, rng)), InvalidInput);
  const Discriminator3D p(small_point_critic_config(), rng);
  CHECK_THROWS_AS(p.logits(ad::Tensor::zeros({15, 3}), random_condition(1, 4, rng)), InvalidInput);
}

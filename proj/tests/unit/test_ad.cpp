// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "fd_check.hpp"
#include "ntf3d/ad.hpp"
#include "ntf3d/errors.hpp"
#include "ntf3d/nn.hpp"

using namespace ntf3d;
using ntf3d::testing::check_gradients;

namespace {

ad::Tensor randn(ad::Shape shape, Rng& rng, double stddev = 1.0) {
  return ad::Tensor::from(shape, normal_vector(static_cast<size_t>(ad::numel_of(shape)), rng, stddev));
}

// Weighted sum so every output element gets a distinct upstream gradient.
ad::Tensor probe(const ad::Tensor& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  const ad::Tensor w = randn(x.shape(), rng);
  return ad::sum(ad::mul(x, w));
}

}  // namespace

TEST_CASE("elementwise ops match central differences") {
  Rng rng(1);
  ad::Tensor a = randn({3, 4}, rng);
  ad::Tensor b = randn({3, 4}, rng);
  ad::Tensor row = randn({4}, rng);
  ad::Tensor pos = ad::Tensor::from({5}, {0.3, 0.7, 1.2, 2.0, 0.05});

  auto check = [](auto f, std::vector<ad::Tensor> leaves) {
    const auto r = check_gradients(f, leaves);
    CHECK(r.max_rel_err < 1e-6);
  };
  check([&] { return probe(ad::add(a, b)); }, {a, b});
  check([&] { return probe(ad::sub(a, row)); }, {a, row});
  check([&] { return probe(ad::mul(a, row)); }, {a, row});
  check([&] { return probe(ad::mul(a, b)); }, {a, b});
  check([&] { return probe(ad::neg(ad::scale(ad::add_scalar(a, 0.5), 3.0))); }, {a});
  check([&] { return probe(ad::exp(a)); }, {a});
  check([&] { return probe(ad::log(pos)); }, {pos});
  check([&] { return probe(ad::sqrt(pos)); }, {pos});
  check([&] { return probe(ad::tanh(a)); }, {a});
  check([&] { return probe(ad::sigmoid(a)); }, {a});
  check([&] { return probe(ad::softplus(a)); }, {a});
  check([&] { return probe(ad::silu(a)); }, {a});
  check([&] { return probe(ad::square(a)); }, {a});
}

TEST_CASE("softplus is stable for large magnitudes") {
  const ad::Tensor x = ad::Tensor::from({3}, {-800.0, 0.0, 800.0});
  const ad::Tensor y = ad::softplus(x);
  CHECK(y.at(0) == doctest::Approx(0.0));
  CHECK(y.at(1) == doctest::Approx(std::log(2.0)));
  CHECK(y.at(2) == doctest::Approx(800.0));
}

TEST_CASE("shape ops and reductions match central differences") {
  Rng rng(2);
  ad::Tensor a = randn({3, 4}, rng);
  ad::Tensor b = randn({2, 4}, rng);
  ad::Tensor c = randn({3, 2}, rng);
  ad::Tensor s = randn({3}, rng);
  auto check = [](auto f, std::vector<ad::Tensor> leaves) {
    const auto r = check_gradients(f, leaves);
    CHECK(r.max_rel_err < 1e-6);
  };
  check([&] { return probe(ad::reshape(a, {4, 3})); }, {a});
  check([&] { return probe(ad::concat_last({a, c})); }, {a, c});
  check([&] { return probe(ad::concat_first({a, b})); }, {a, b});
  check([&] { return probe(ad::slice_last(a, 1, 3)); }, {a});
  check([&] { return probe(ad::gather_rows(a, {2, 0, 2, 1})); }, {a});
  check([&] { return probe(ad::transpose(a)); }, {a});
  check([&] { return ad::mean(ad::square(a)); }, {a});
  check([&] { return probe(ad::sum_rows(a)); }, {a});
  check([&] { return probe(ad::row_sums(a)); }, {a});
  check([&] { return probe(ad::row_norms(a)); }, {a});
  check([&] { return probe(ad::normalize_rows(a)); }, {a});
  check([&] { return probe(ad::mul_rowwise(a, s)); }, {a, s});
}

TEST_CASE("linear algebra ops match central differences") {
  Rng rng(3);
  ad::Tensor a = randn({3, 5}, rng);
  ad::Tensor w = randn({5, 4}, rng);
  ad::Tensor v = randn({6, 4}, rng);
  ad::Tensor code = randn({2, 4}, rng);
  ad::Tensor logits = randn({4, 4}, rng);
  auto check = [](auto f, std::vector<ad::Tensor> leaves) {
    const auto r = check_gradients(f, leaves);
    CHECK(r.max_rel_err < 1e-6);
  };
  check([&] { return probe(ad::matmul(a, w)); }, {a, w});
  check([&] { return probe(ad::outer_add(v, code)); }, {v, code});
  check([&] { return ad::cross_entropy_diag(logits); }, {logits});
}

TEST_CASE("cross entropy with perfect diagonal approaches zero") {
  const ad::Tensor logits = ad::Tensor::from({2, 2}, {100.0, 0.0, 0.0, 100.0});
  CHECK(ad::cross_entropy_diag(logits).item() == doctest::Approx(0.0).epsilon(1e-12));
  const ad::Tensor uniform = ad::Tensor::zeros({3, 3});
  CHECK(ad::cross_entropy_diag(uniform).item() == doctest::Approx(std::log(3.0)));
}

TEST_CASE("image and point ops match central differences") {
  Rng rng(4);
  ad::Tensor x = randn({2, 4, 4, 3}, rng);
  ad::Tensor w = randn({27, 2}, rng);
  ad::Tensor b = randn({2}, rng);
  ad::Tensor pts = randn({10, 3}, rng);
  auto check = [](auto f, std::vector<ad::Tensor> leaves) {
    const auto r = check_gradients(f, leaves);
    CHECK(r.max_rel_err < 1e-6);
  };
  check([&] { return probe(ad::conv3x3(x, w, b)); }, {x, w, b});
  check([&] { return probe(ad::avg_pool(x, 2)); }, {x});
  check([&] { return probe(ad::max_groups(pts, 2)); }, {pts});
}

TEST_CASE("conv3x3 with a centre-tap identity kernel copies its input") {
  Rng rng(5);
  const ad::Tensor x = randn({1, 3, 3, 2}, rng);
  std::vector<double> wv(18 * 2, 0.0);
  // Tap (1,1) is index 4; rows are tap-major then input channel.
  wv[(4 * 2 + 0) * 2 + 0] = 1.0;
  wv[(4 * 2 + 1) * 2 + 1] = 1.0;
  const ad::Tensor y = ad::conv3x3(x, ad::Tensor::from({18, 2}, wv), ad::Tensor::zeros({2}));
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == doctest::Approx(x.at(i)));
}

TEST_CASE("gradients accumulate across shared subexpressions") {
  ad::Tensor x = ad::Tensor::from({1}, {3.0}, true);
  const ad::Tensor y = ad::mul(x, x);
  const ad::Tensor z = ad::sum(ad::add(y, y));
  z.backward();
  CHECK(x.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("no-grad mode builds no graph") {
  ad::Tensor x = ad::Tensor::from({2}, {1.0, 2.0}, true);
  ad::NoGradGuard guard;
  const ad::Tensor y = ad::square(x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape errors are rejected") {
  const ad::Tensor a = ad::Tensor::zeros({2, 3});
  const ad::Tensor b = ad::Tensor::zeros({2, 2});
  CHECK_THROWS_AS(ad::matmul(a, b), InvalidInput);
  CHECK_THROWS_AS(ad::add(a, b), InvalidInput);
  CHECK_THROWS_AS(ad::normalize_rows(a), NumericError);
}

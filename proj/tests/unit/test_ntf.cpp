// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>

#include "doctest.h"
#include "fd_check.hpp"
#include "ntf3d/errors.hpp"
#include "ntf3d/ntf.hpp"
#include "oracles.hpp"

using namespace ntf3d;
using ntf3d::testing::brute_force_nce;
using ntf3d::testing::check_gradients;

namespace {

ad::Tensor randn(ad::Shape shape, Rng& rng, double s = 1.0) {
  return ad::Tensor::from(shape, normal_vector(static_cast<size_t>(ad::numel_of(shape)), rng, s));
}

ad::Tensor unit_rows(ad::Shape shape, Rng& rng) { return ad::normalize_rows(randn(shape, rng)); }

std::vector<std::vector<double>> rows(const ad::Tensor& t) {
  std::vector<std::vector<double>> out;
  const auto d = t.shape()[1];
  for (std::int64_t i = 0; i < t.shape()[0]; ++i) {
    out.emplace_back(t.values().begin() + i * d, t.values().begin() + (i + 1) * d);
  }
  return out;
}

double l2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

EmbedderConfig small_embedder() {
  EmbedderConfig c;
  c.dim = 8;
  c.resolution = 8;
  c.patch_grid = 4;
  c.random_features = 32;
  return c;
}

ad::Tensor random_images(std::int64_t b, int res, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> px(static_cast<size_t>(b * res * res * 3));
  for (auto& p : px) p = u(rng);
  return ad::Tensor::from({b, res, res, 3}, px);
}

std::vector<CameraPose> some_cams(int n, Rng& rng) {
  std::vector<CameraPose> cams;
  for (int i = 0; i < n; ++i) cams.push_back(sample_camera(rng));
  return cams;
}

}  // namespace

TEST_CASE("sigma is strictly inside the clamp for any finite input") {
  Rng rng(1);
  const SigmaNet net(SigmaNetConfig{16, 16, false}, rng);
  Rng tr(2);
  const ad::Tensor s = net.sigma(randn({500, 16}, tr, 1e3));
  for (double v : s.values()) {
    CHECK(v > kSigmaMin);
    CHECK(v < kSigmaMax);
  }
  const ad::Tensor extremes = squash_sigma(ad::Tensor::from({4}, {-1e300, -50.0, 50.0, 1e300}));
  for (double v : extremes.values()) {
    CHECK(v > kSigmaMin);
    CHECK(v < kSigmaMax);
  }
  CHECK(extremes.at(0) == doctest::Approx(kSigmaMin).epsilon(1e-3));
  CHECK(extremes.at(3) == doctest::Approx(kSigmaMax).epsilon(1e-3));
}

TEST_CASE("scalar sigma mode shares one scale per caption") {
  Rng rng(3);
  const SigmaNet net(SigmaNetConfig{8, 8, true}, rng);
  Rng tr(4);
  const ad::Tensor s = net.sigma(unit_rows({3, 8}, tr));
  CHECK(s.shape() == ad::Shape{3, 8});
  for (int i = 0; i < 3; ++i) {
    for (int k = 1; k < 8; ++k) CHECK(s.at(i * 8 + k) == s.at(i * 8));
  }
}

TEST_CASE("noise draws match sigma: Monte-Carlo standard deviation within 5%") {
  Rng rng(5);
  const SigmaNet net(SigmaNetConfig{16, 16, false}, rng);
  Rng tr(6);
  const ad::Tensor t = unit_rows({1, 16}, tr);
  Rng nr(7);
  std::vector<double> sum(16, 0.0);
  std::vector<double> sq(16, 0.0);
  const int n = 10000;
  ad::Tensor sigma;
  for (int k = 0; k < n; ++k) {
    const NoisyTextField f = inject_noise(t, {0}, net, nr);
    sigma = f.sigma;
    for (int d = 0; d < 16; ++d) {
      const double e = f.sample.at(d) - t.at(d);
      sum[d] += e;
      sq[d] += e * e;
    }
  }
  for (int d = 0; d < 16; ++d) {
    const double m = sum[d] / n;
    const double sd = std::sqrt((sq[d] - n * m * m) / (n - 1));
    CHECK(std::abs(sd / sigma.at(d) - 1.0) < 0.05);
  }
}

TEST_CASE("noise injection is deterministic and validates inputs") {
  Rng rng(8);
  const SigmaNet net(SigmaNetConfig{8, 8, false}, rng);
  Rng tr(9);
  const ad::Tensor t = unit_rows({2, 8}, tr);
  Rng a(10);
  Rng b(10);
  const auto fa = inject_noise(t, {0, 1}, net, a);
  const auto fb = inject_noise(t, {0, 1}, net, b);
  for (int i = 0; i < 16; ++i) CHECK(fa.sample.at(i) == fb.sample.at(i));
  CHECK(fa.caption_ids == std::vector<int>{0, 1});
  CHECK_THROWS_AS(inject_noise(ad::scale(t, 2.0), {0, 1}, net, a), InvalidInput);
  CHECK_THROWS_AS(inject_noise(t, {0}, net, a), InvalidInput);
}

TEST_CASE("noise injection is differentiable in sigma-net parameters") {
  Rng rng(11);
  SigmaNet net(SigmaNetConfig{6, 6, false}, rng);
  Rng tr(12);
  const ad::Tensor t = unit_rows({3, 6}, tr);
  Rng wr(13);
  const ad::Tensor w = randn({3, 6}, wr);
  auto f = [&] {
    Rng nr(14);
    return ad::scale(ad::sum(ad::mul(inject_noise(t, {0, 1, 2}, net, nr).sample, w)), 100.0);
  };
  std::vector<ad::Tensor> leaves;
  for (const auto& p : net.params().params()) leaves.push_back(p.tensor);
  CHECK(check_gradients(f, leaves, 1e-6).max_rel_err < 1e-3);
}

TEST_CASE("static noise: range check, vanishing limit and shared draws") {
  Rng tr(15);
  const ad::Tensor t = unit_rows({2, 8}, tr);
  Rng r(16);
  CHECK_THROWS_AS(inject_noise_static(t, {0, 1}, 0.0, r), InvalidInput);
  CHECK_THROWS_AS(inject_noise_static(t, {0, 1}, 1.0, r), InvalidInput);
  CHECK_THROWS_AS(inject_noise_static(t, {0, 1}, -0.1, r), InvalidInput);
  const auto tiny = inject_noise_static(t, {0, 1}, 1e-12, r);
  for (int i = 0; i < 16; ++i) CHECK(std::abs(tiny.sample.at(i) - t.at(i)) < 1e-9);
  const auto f = inject_noise_static(t, {0, 1}, kStaticSigma, r);
  for (double s : f.sigma.values()) CHECK(s == kStaticSigma);

  // The same generator state applied to two prompts shifts both by the same noise.
  Rng a(17);
  Rng b(17);
  const auto pa = inject_noise_static(ad::gather_rows(t, {0}), {0}, 0.01, a);
  const auto pb = inject_noise_static(ad::gather_rows(t, {1}), {1}, 0.01, b);
  for (int k = 0; k < 8; ++k) {
    CHECK((pa.sample.at(k) - pb.sample.at(k)) == doctest::Approx(t.at(k) - t.at(8 + k)).epsilon(1e-14));
  }
}

TEST_CASE("nce: degenerate batch, two-row oracle and brute force") {
  Rng rng(18);
  const ad::Tensor a1 = unit_rows({1, 8}, rng);
  CHECK(nce_loss(a1, unit_rows({1, 8}, rng), 0.07).item() == 0.0);

  const ad::Tensor e = ad::Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
  const double expected = -std::log(std::exp(1.0 / 0.07) / (std::exp(1.0 / 0.07) + std::exp(0.0)));
  CHECK(nce_loss(e, e, 0.07).item() == doctest::Approx(expected).epsilon(1e-12));

  const ad::Tensor a = unit_rows({4, 4}, rng);
  const ad::Tensor c = unit_rows({4, 4}, rng);
  const double ref = brute_force_nce(rows(a), rows(c), 0.07);
  CHECK(std::abs(nce_loss(a, c, 0.07).item() - ref) <= 1e-6 * std::abs(ref));
  CHECK(nce_loss(a, c, 0.07).item() >= 0.0);
}

TEST_CASE("nce rejects bad input") {
  Rng rng(19);
  const ad::Tensor a = unit_rows({3, 4}, rng);
  CHECK_THROWS_AS(nce_loss(a, unit_rows({2, 4}, rng), 0.07), InvalidInput);
  CHECK_THROWS_AS(nce_loss(a, a, 0.0), InvalidInput);
  ad::Tensor bad = a.detach();
  bad.mutable_values()[2] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(nce_loss(bad, a, 0.07), NumericError);
}

TEST_CASE("nce gradient matches central differences") {
  Rng rng(20);
  ad::Tensor a = unit_rows({4, 6}, rng);
  ad::Tensor c = unit_rows({4, 6}, rng);
  auto f = [&] { return nce_loss(a, c, 0.07); };
  CHECK(check_gradients(f, {a, c}).max_rel_err < 1e-3);
}

TEST_CASE("gen objective sums two nce terms and checks caption ids") {
  const Embedder emb(small_embedder());
  Rng rng(21);
  const SigmaNet net(SigmaNetConfig{8, 8, false}, rng);
  const ad::Tensor t = emb.embed_texts({"a red sphere", "a blue box", "a green cone"});
  const std::vector<int> ids{3, 7, 9};
  Rng nr(22);
  const NoisyTextField f = inject_noise(t, ids, net, nr);
  Rng ir(23);
  const ad::Tensor gen = random_images(3, 8, ir);
  const ad::Tensor gt = random_images(3, 8, ir);

  const GenObjective o = gen_objective(f, gen, ids, gt, ids, emb, 0.07);
  const double ref = brute_force_nce(rows(f.sample), rows(emb.embed_images(gen)), 0.07) +
                     brute_force_nce(rows(f.sample), rows(emb.embed_images(gt)), 0.07);
  CHECK(o.total.item() == doctest::Approx(ref).epsilon(1e-9));
  CHECK(o.total.item() == doctest::Approx(o.generated.item() + o.condition.item()).epsilon(1e-12));

  const GenObjective same = gen_objective(f, gen, ids, gen, ids, emb, 0.07);
  CHECK(same.total.item() == doctest::Approx(2.0 * same.generated.item()).epsilon(1e-12));

  CHECK_THROWS_AS(gen_objective(f, gen, {3, 9, 7}, gt, ids, emb, 0.07), InvalidInput);
  CHECK_THROWS_AS(gen_objective(f, gen, ids, gt, {1, 2, 3}, emb, 0.07), InvalidInput);

  Rng one(24);
  const NoisyTextField f1 = inject_noise(ad::gather_rows(t, {0}), {3}, net, one);
  const ad::Tensor gen1 = ad::Tensor::from({1, 8, 8, 3}, {gen.values().begin(), gen.values().begin() + 192});
  const ad::Tensor gt1 = ad::Tensor::from({1, 8, 8, 3}, {gt.values().begin(), gt.values().begin() + 192});
  CHECK(gen_objective(f1, gen1, {3}, gt1, {3}, emb, 0.07).total.item() == 0.0);
}

TEST_CASE("gen objective: the condition term reaches only the sigma network") {
  const Embedder emb(small_embedder());
  Rng rng(25);
  SigmaNet net(SigmaNetConfig{8, 8, false}, rng);
  const ad::Tensor t = emb.embed_texts({"a red sphere", "a blue box"});
  Rng ir(26);
  ad::Tensor gen = random_images(2, 8, ir);
  ad::Tensor gt = random_images(2, 8, ir);
  gen.set_requires_grad(true);
  gt.set_requires_grad(true);
  Rng nr(27);
  const NoisyTextField f = inject_noise(t, {0, 1}, net, nr);
  gen_objective(f, gen, {0, 1}, gt, {0, 1}, emb, 0.07).total.backward();
  double g_gen = 0.0;
  for (double v : gen.grad()) g_gen += std::abs(v);
  double g_gt = 0.0;
  for (double v : gt.grad()) g_gt += std::abs(v);
  CHECK(g_gen > 0.0);
  CHECK(g_gt == 0.0);
  double g_sigma = 0.0;
  for (const auto& p : net.params().params()) {
    for (double v : p.tensor.grad()) g_sigma += std::abs(v);
  }
  CHECK(g_sigma > 0.0);
}

TEST_CASE("view codes are unit norm, deterministic and differentiable in pixels") {
  const Embedder emb(small_embedder());
  Rng rng(28);
  const ViewNet vn(ViewNetConfig{8, 16}, rng);
  Rng ir(29);
  ad::Tensor img = random_images(3, 8, ir);
  const auto cams = some_cams(3, ir);
  const ad::Tensor c = view_codes(img, cams, vn, emb);
  for (const auto& r : rows(c)) CHECK(l2(r, std::vector<double>(8, 0.0)) == doctest::Approx(1.0).epsilon(1e-12));

  RenderedView v;
  v.rgb = ad::Tensor::from({8, 8, 3}, {img.values().begin(), img.values().begin() + 192});
  v.silhouette = ad::Tensor::zeros({8, 8, 1});
  v.caption_id = 4;
  const auto a = view_code(v, cams[0], vn, emb);
  const auto b = view_code(v, cams[0], vn, emb);
  CHECK(a.vector == b.vector);
  CHECK(a.caption_id == 4);
  for (int k = 0; k < 8; ++k) CHECK(a.vector[k] == doctest::Approx(c.at(k)).epsilon(1e-12));

  Rng wr(30);
  const ad::Tensor w = randn({3, 8}, wr);
  auto f = [&] { return ad::sum(ad::mul(view_codes(img, cams, vn, emb), w)); };
  CHECK(check_gradients(f, {img}).max_rel_err < 1e-3);
}

TEST_CASE("view triplet loss is unhinged and checks caption ids") {
  Rng rng(31);
  const ad::Tensor a = unit_rows({3, 8}, rng);
  const ad::Tensor p = unit_rows({3, 8}, rng);
  const ad::Tensor n = unit_rows({3, 8}, rng);
  const TripletBatch tb{a, p, n, {0, 1, 2}, {0, 1, 2}, {5, 6, 7}};
  const auto ra = rows(a);
  const auto rp = rows(p);
  const auto rn = rows(n);
  double ref = 0.0;
  for (int i = 0; i < 3; ++i) ref += l2(ra[i], rp[i]) - l2(ra[i], rn[i]);
  CHECK(view_triplet_loss(tb).item() == doctest::Approx(ref / 3.0).epsilon(1e-12));

  const TripletBatch same{a, a, n, {0, 1, 2}, {0, 1, 2}, {5, 6, 7}};
  double neg = 0.0;
  for (int i = 0; i < 3; ++i) neg -= l2(ra[i], rn[i]);
  CHECK(view_triplet_loss(same).item() == doctest::Approx(neg / 3.0).epsilon(1e-12));
  CHECK(view_triplet_loss(same).item() <= 0.0);

  CHECK_THROWS_AS(view_triplet_loss(TripletBatch{a, p, n, {0, 1, 2}, {0, 1, 3}, {5, 6, 7}}), InvalidInput);
  CHECK_THROWS_AS(view_triplet_loss(TripletBatch{a, p, n, {0, 1, 2}, {0, 1, 2}, {0, 6, 7}}), InvalidInput);

  const ViewInvariantCode ca{ra[0], {}, 1};
  const ViewInvariantCode cp{rp[0], {}, 1};
  const ViewInvariantCode cn{rn[0], {}, 2};
  CHECK(view_triplet_loss(ca, cp, cn) == doctest::Approx(l2(ra[0], rp[0]) - l2(ra[0], rn[0])).epsilon(1e-12));
  CHECK_THROWS_AS(view_triplet_loss(ca, cp, ViewInvariantCode{rn[0], {}, 1}), InvalidInput);

  ad::Tensor av = a.detach();
  ad::Tensor pv = p.detach();
  ad::Tensor nv = n.detach();
  auto f = [&] { return view_triplet_loss(TripletBatch{av, pv, nv, {0, 1, 2}, {0, 1, 2}, {5, 6, 7}}); };
  CHECK(check_gradients(f, {av, pv, nv}).max_rel_err < 1e-3);
}

TEST_CASE("binding losses: oracle, permutation invariance and additivity") {
  const Embedder emb(small_embedder());
  Rng rng(32);
  const ViewNet vn(ViewNetConfig{8, 16}, rng);
  const SigmaNet net(SigmaNetConfig{8, 8, false}, rng);
  const ad::Tensor t = emb.embed_texts({"a red sphere", "a blue box", "a green cone", "a large cyan torus"});
  const std::vector<int> ids{0, 1, 2, 3};
  Rng nr(33);
  const NoisyTextField f = inject_noise(t, ids, net, nr);
  Rng ir(34);
  const ad::Tensor gen = random_images(4, 8, ir);
  const auto cams = some_cams(4, ir);

  const double bind = ntf_bind_loss(gen, cams, ids, f, vn, emb, 0.07).item();
  CHECK(bind == doctest::Approx(brute_force_nce(rows(f.sample), rows(view_codes(gen, cams, vn, emb)), 0.07))
                    .epsilon(1e-9));

  const std::vector<std::int64_t> perm{2, 0, 3, 1};
  NoisyTextField fp{ad::gather_rows(f.base, perm), ad::gather_rows(f.sigma, perm), ad::gather_rows(f.sample, perm),
                    {2, 0, 3, 1}};
  std::vector<CameraPose> cp;
  for (auto i : perm) cp.push_back(cams[i]);
  const ad::Tensor gp = ad::reshape(ad::gather_rows(ad::reshape(gen, {4, 192}), perm), {4, 8, 8, 3});
  CHECK(std::abs(ntf_bind_loss(gp, cp, {2, 0, 3, 1}, fp, vn, emb, 0.07).item() - bind) < 1e-9);
  CHECK_THROWS_AS(ntf_bind_loss(gen, cams, {1, 0, 2, 3}, f, vn, emb, 0.07), InvalidInput);

  const ad::Tensor anchor = view_codes(gen, cams, vn, emb);
  const ad::Tensor pos = view_codes(random_images(4, 8, ir), some_cams(4, ir), vn, emb);
  const TripletBatch tb{anchor, pos, ad::gather_rows(anchor, {1, 2, 3, 0}), ids, ids, {1, 2, 3, 0}};
  const BindObjective o = bind_objective(tb, gen, cams, ids, f, vn, emb, 0.07);
  CHECK(o.total.item() == doctest::Approx(o.view.item() + o.ntf.item()).epsilon(1e-12));
  CHECK(o.view.item() == doctest::Approx(view_triplet_loss(tb).item()).epsilon(1e-12));
  CHECK(o.ntf.item() == doctest::Approx(bind).epsilon(1e-12));

  ad::Tensor g = gen.detach();
  auto fb = [&] { return ntf_bind_loss(g, cams, ids, f, vn, emb, 0.07); };
  CHECK(check_gradients(fb, {g}).max_rel_err < 1e-3);
}

// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "fd_check.hpp"
#include "ntf3d/errors.hpp"
#include "ntf3d/generator.hpp"

using namespace ntf3d;
using ntf3d::testing::check_gradients;

namespace {

GeneratorConfig small_config() {
  GeneratorConfig c;
  c.z_dim = 8;
  c.w_dim = 8;
  c.text_dim = 6;
  c.hidden = 12;
  return c;
}

ad::Tensor randn(ad::Shape shape, Rng& rng, double s = 1.0) {
  return ad::Tensor::from(shape, normal_vector(static_cast<size_t>(ad::numel_of(shape)), rng, s));
}

struct Codes {
  LatentCode geo;
  LatentCode tex;
};

Codes codes_for(const Generator& g, const ad::Tensor& tfield, std::uint64_t seed) {
  Rng rng(seed);
  const auto b = tfield.shape()[0];
  const ad::Tensor wg = g.map_latent(sample_latents(b, g.config().z_dim, rng), Branch::kGeometry);
  const ad::Tensor wt = g.map_latent(sample_latents(b, g.config().z_dim, rng), Branch::kTexture);
  return {make_code(wg, tfield), make_code(wt, tfield)};
}

}  // namespace

TEST_CASE("latent codes concatenate w and the field") {
  const ad::Tensor w = ad::Tensor::from({1, 2}, {1.0, 2.0});
  const ad::Tensor t = ad::Tensor::from({1, 3}, {3.0, 4.0, 5.0});
  const LatentCode c = make_code(w, t);
  CHECK(c.concat.shape() == ad::Shape{1, 5});
  for (int i = 0; i < 5; ++i) CHECK(c.concat.at(i) == static_cast<double>(i + 1));
  CHECK_THROWS_AS(make_code(w, ad::Tensor::zeros({2, 3})), InvalidInput);
}

TEST_CASE("mapping networks are deterministic and branch specific") {
  Rng rng(1);
  const Generator g(small_config(), rng);
  Rng zr(2);
  const ad::Tensor z = sample_latents(3, 8, zr);
  const ad::Tensor a = g.map_latent(z, Branch::kGeometry);
  const ad::Tensor b = g.map_latent(z, Branch::kGeometry);
  const ad::Tensor c = g.map_latent(z, Branch::kTexture);
  CHECK(std::vector<double>(a.values().begin(), a.values().end()) ==
        std::vector<double>(b.values().begin(), b.values().end()));
  CHECK(std::vector<double>(a.values().begin(), a.values().end()) !=
        std::vector<double>(c.values().begin(), c.values().end()));
  ad::Tensor zz = randn({2, 8}, zr);
  auto f = [&] { return ad::sum(ad::mul(g.map_latent(zz, Branch::kGeometry), g.map_latent(zz, Branch::kGeometry))); };
  CHECK(check_gradients(f, {zz}).max_rel_err < 1e-3);
}

TEST_CASE("generated meshes: fixed topology, bounded colors, bbox 0.8") {
  Rng rng(3);
  const Generator g(small_config(), rng);
  Rng tr(4);
  const ad::Tensor t = randn({4, 6}, tr, 0.4);
  const Codes c = codes_for(g, t, 5);
  const auto meshes = g.generate(c.geo, c.tex);
  REQUIRE(meshes.size() == 4);
  for (const auto& m : meshes) {
    CHECK(m.vertex_count() == 162);
    CHECK(m.face_count() == 320);
    CHECK(m.faces == g.base_mesh().faces);
    for (double v : m.colors.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    for (double v : m.vertices.values()) CHECK(std::isfinite(v));
    CHECK(bounding_box(m.vertices).longest_edge() == doctest::Approx(0.8).epsilon(1e-9));
  }
}

TEST_CASE("zeroed geometry parameters give a sphere") {
  Rng rng(6);
  Generator g(small_config(), rng);
  for (auto& p : g.params().params()) {
    if (p.name.rfind("geo", 0) == 0) {
      for (auto& v : p.tensor.mutable_values()) v = 0.0;
    }
  }
  Rng tr(7);
  const Codes c = codes_for(g, randn({1, 6}, tr), 8);
  const TexturedMesh m = g.generate(c.geo, c.tex)[0];
  const auto bb = bounding_box(m.vertices);
  for (std::int64_t i = 0; i < m.vertex_count(); ++i) {
    double r2 = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double x = m.vertices.at(3 * i + k) - 0.5 * (bb.lo[k] + bb.hi[k]);
      r2 += x * x;
    }
    CHECK(std::sqrt(r2) == doctest::Approx(0.4).epsilon(1e-9));
  }
}

TEST_CASE("displacements stay inside their bounds") {
  Rng rng(9);
  Generator g(small_config(), rng);
  for (auto& p : g.params().params()) {
    for (auto& v : p.tensor.mutable_values()) v *= 40.0;
  }
  Rng tr(10);
  const Codes c = codes_for(g, randn({3, 6}, tr), 11);
  for (const auto& m : g.generate(c.geo, c.tex)) {
    const auto bb = bounding_box(m.vertices);
    const double scale = bb.longest_edge();
    CHECK(std::isfinite(scale));
    // With radii in [0.65, 1.6] of the unit sphere the normalized extent ratio
    // along any two axes is bounded.
    double lo = 1e9;
    double hi = 0.0;
    for (int k = 0; k < 3; ++k) {
      lo = std::min(lo, bb.hi[k] - bb.lo[k]);
      hi = std::max(hi, bb.hi[k] - bb.lo[k]);
    }
    CHECK(lo / hi >= (1.0 + kMinDisplacement) / (1.0 + kMaxDisplacement) - 1e-12);
  }
}

TEST_CASE("mismatched fields across branches are rejected") {
  Rng rng(12);
  const Generator g(small_config(), rng);
  Rng tr(13);
  const Codes a = codes_for(g, randn({2, 6}, tr), 14);
  const Codes b = codes_for(g, randn({2, 6}, tr), 14);
  CHECK_THROWS_AS(g.generate(a.geo, b.tex), InvalidInput);
}

TEST_CASE("generate is differentiable in the field and the field changes the output") {
  Rng rng(15);
  const Generator g(small_config(), rng);
  Rng tr(16);
  ad::Tensor t = randn({2, 6}, tr, 0.5);
  Rng wr(17);
  const ad::Tensor wv = randn({2 * 162, 3}, wr);
  const ad::Tensor wc = randn({2 * 162, 3}, wr);
  auto f = [&] {
    const Codes c = codes_for(g, t, 18);
    const auto meshes = g.generate(c.geo, c.tex);
    std::vector<ad::Tensor> vs;
    std::vector<ad::Tensor> cs;
    for (const auto& m : meshes) {
      vs.push_back(m.vertices);
      cs.push_back(m.colors);
    }
    return ad::add(ad::sum(ad::mul(ad::concat_first(vs), wv)), ad::sum(ad::mul(ad::concat_first(cs), wc)));
  };
  const auto r = check_gradients(f, {t}, 1e-6);
  CHECK(r.max_rel_err < 1e-3);
  double gnorm = 0.0;
  for (double v : t.grad()) gnorm += v * v;
  CHECK(gnorm > 1e-12);
}

TEST_CASE("bbox normalization is differentiable") {
  Rng rng(19);
  ad::Tensor v = randn({20, 3}, rng);
  Rng wr(20);
  const ad::Tensor w = randn({20, 3}, wr);
  auto f = [&] { return ad::sum(ad::mul(normalize_bbox_tensor(v, 0.8), w)); };
  CHECK(check_gradients(f, {v}).max_rel_err < 1e-6);
}

TEST_CASE("a degenerate mesh cannot be sampled") {
  const TexturedMesh flat = make_mesh({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}}, {{0, 1, 2}}, {0.5, 0.5, 0.5});
  Rng rng(1);
  CHECK_THROWS_AS(sample_surface(flat, 10, rng), InvalidInput);
  CHECK_THROWS_AS(sample_surface(make_icosphere(1), 0, rng), InvalidInput);
}

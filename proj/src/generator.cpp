// SPDX-License-Identifier: Apache-2.0

#include "ntf3d/generator.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ntf3d/errors.hpp"

namespace ntf3d {

namespace {

// Displacement squash: bounded to (kMin, kMax) and exactly zero at zero.
constexpr double kDispMid = 0.5 * (kMaxDisplacement + kMinDisplacement);
constexpr double kDispHalf = 0.5 * (kMaxDisplacement - kMinDisplacement);

ad::Tensor bounded_displacement(const ad::Tensor& x) {
  static const double offset = std::atanh(-kDispMid / kDispHalf);
  return ad::add_scalar(ad::scale(ad::tanh(ad::add_scalar(x, offset)), kDispHalf), kDispMid);
}

std::vector<std::int64_t> row_range(std::int64_t begin, std::int64_t count) {
  std::vector<std::int64_t> rows(static_cast<size_t>(count));
  std::iota(rows.begin(), rows.end(), begin);
  return rows;
}

}  // namespace

LatentCode make_code(const ad::Tensor& w, const ad::Tensor& tfield) {
  if (w.rank() != 2 || tfield.rank() != 2 || w.shape()[0] != tfield.shape()[0]) {
    throw InvalidInput(fmt::format("make_code: incompatible shapes {} and {}", ad::shape_str(w.shape()),
                                   ad::shape_str(tfield.shape())));
  }
  return {w, tfield, ad::concat_last({w, tfield})};
}

ad::Tensor sample_latents(std::int64_t batch, int z_dim, Rng& rng) {
  if (batch < 1 || z_dim < 1) throw InvalidInput("sample_latents: sizes must be positive");
  return ad::Tensor::from({batch, z_dim}, normal_vector(static_cast<size_t>(batch * z_dim), rng));
}

ad::Tensor normalize_bbox_tensor(const ad::Tensor& vertices, double target) {
  if (vertices.rank() != 2 || vertices.shape()[1] != 3 || vertices.shape()[0] < 1) {
    throw InvalidInput(fmt::format("normalize_bbox: expected [V, 3], got {}", ad::shape_str(vertices.shape())));
  }
  const auto n = vertices.shape()[0];
  const auto v = vertices.values();
  std::array<std::int64_t, 3> imin{0, 0, 0};
  std::array<std::int64_t, 3> imax{0, 0, 0};
  for (std::int64_t i = 1; i < n; ++i) {
    for (int k = 0; k < 3; ++k) {
      if (v[i * 3 + k] < v[imin[k] * 3 + k]) imin[k] = i;
      if (v[i * 3 + k] > v[imax[k] * 3 + k]) imax[k] = i;
    }
  }
  std::array<double, 3> center{};
  int axis = 0;
  double longest = -1.0;
  for (int k = 0; k < 3; ++k) {
    const double lo = v[imin[k] * 3 + k];
    const double hi = v[imax[k] * 3 + k];
    center[k] = 0.5 * (lo + hi);
    if (hi - lo > longest) {
      longest = hi - lo;
      axis = k;
    }
  }
  if (!(longest > 0.0) || !std::isfinite(longest)) throw NumericError("normalize_bbox: degenerate bounding box");
  const double s = target / longest;
  std::vector<double> out(static_cast<size_t>(n * 3));
  for (std::int64_t i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) out[i * 3 + k] = (v[i * 3 + k] - center[k]) * s;
  }
  return ad::make_result(vertices.shape(), std::move(out), {vertices},
                         [n, imin, imax, axis, center, s, longest, target](ad::Node& self) {
                           double* gx = ad::grad_target(self, 0);
                           if (gx == nullptr) return;
                           const auto& g = self.grad;
                           const auto& x = self.inputs[0]->value;
                           std::array<double, 3> gsum{};
                           double gs = 0.0;
                           for (std::int64_t i = 0; i < n; ++i) {
                             for (int k = 0; k < 3; ++k) {
                               const double gi = g[i * 3 + k];
                               gx[i * 3 + k] += gi * s;
                               gsum[k] += gi;
                               gs += gi * (x[i * 3 + k] - center[k]);
                             }
                           }
                           for (int k = 0; k < 3; ++k) {
                             const double gc = -s * gsum[k];
                             gx[imin[k] * 3 + k] += 0.5 * gc;
                             gx[imax[k] * 3 + k] += 0.5 * gc;
                           }
                           const double ds = target / (longest * longest);
                           gx[imax[axis] * 3 + axis] -= gs * ds;
                           gx[imin[axis] * 3 + axis] += gs * ds;
                         });
}

Generator::Generator(GeneratorConfig config, Rng& rng) : config_(config) {
  if (config_.z_dim < 1 || config_.w_dim < 1 || config_.text_dim < 1 || config_.hidden < 1) {
    throw InvalidInput("Generator: dimensions must be positive");
  }
  base_ = make_icosphere(config_.icosphere_level);
  unit_positions_ = base_.vertices.detach();

  const std::int64_t in = mapping_input_dim();
  const std::int64_t w = config_.w_dim;
  const std::int64_t h = config_.hidden;
  const std::int64_t code = w + config_.text_dim;
  map_geo_ = Mlp(params_, "map_geo", {in, w, w}, rng);
  map_tex_ = Mlp(params_, "map_tex", {in, w, w}, rng);
  geo_pos_ = Linear(params_, "geo.pos", 3, h, rng, 2.0);
  geo_code_ = Linear(params_, "geo.code", code, h, rng);
  geo_rest_ = Mlp(params_, "geo.rest", {h, h, 1}, rng, Activation::kSilu, Activation::kNone, 0.1);
  tex_pos_ = Linear(params_, "tex.pos", 3, h, rng, 2.0);
  tex_code_ = Linear(params_, "tex.code", code, h, rng);
  tex_rest_ = Mlp(params_, "tex.rest", {h, h, 3}, rng, Activation::kSilu, Activation::kNone, 0.5);
}

int Generator::mapping_input_dim() const {
  return config_.z_dim + (config_.text_through_mapping ? config_.text_dim : 0);
}

ad::Tensor Generator::map_latent(const ad::Tensor& z, Branch branch) const {
  if (z.rank() != 2 || z.shape()[1] != mapping_input_dim()) {
    throw InvalidInput(fmt::format("map_latent: expected [B, {}], got {}", mapping_input_dim(),
                                   ad::shape_str(z.shape())));
  }
  return branch == Branch::kGeometry ? map_geo_(z) : map_tex_(z);
}

ad::Tensor Generator::decode(const Linear& pos, const Linear& code_proj, const Mlp& rest,
                             const ad::Tensor& code) const {
  const ad::Tensor h = ad::silu(ad::outer_add(pos(unit_positions_), code_proj(code)));
  return rest(h);
}

std::vector<TexturedMesh> Generator::generate(const LatentCode& geo, const LatentCode& tex) const {
  const std::int64_t expect = config_.w_dim + config_.text_dim;
  for (const auto* c : {&geo, &tex}) {
    if (c->concat.rank() != 2 || c->concat.shape()[1] != expect) {
      throw InvalidInput(fmt::format("generate: expected code width {}, got {}", expect,
                                     ad::shape_str(c->concat.shape())));
    }
  }
  if (geo.concat.shape()[0] != tex.concat.shape()[0]) throw InvalidInput("generate: batch sizes differ");
  const auto gt = geo.tfield.values();
  const auto tt = tex.tfield.values();
  if (gt.size() != tt.size() || !std::equal(gt.begin(), gt.end(), tt.begin())) {
    throw InvalidInput("generate: geometry and texture codes carry different text fields");
  }

  const auto b = geo.concat.shape()[0];
  const auto v = base_.vertex_count();
  const ad::Tensor disp = bounded_displacement(decode(geo_pos_, geo_code_, geo_rest_, geo.concat));
  const ad::Tensor radius = ad::reshape(ad::add_scalar(disp, 1.0), {b * v});
  std::vector<ad::Tensor> tiles(static_cast<size_t>(b), unit_positions_);
  const ad::Tensor positions = ad::mul_rowwise(ad::concat_first(tiles), radius);
  const ad::Tensor colors = ad::sigmoid(decode(tex_pos_, tex_code_, tex_rest_, tex.concat));

  std::vector<TexturedMesh> meshes;
  meshes.reserve(static_cast<size_t>(b));
  for (std::int64_t i = 0; i < b; ++i) {
    const auto rows = row_range(i * v, v);
    TexturedMesh m;
    m.vertices = normalize_bbox_tensor(ad::gather_rows(positions, rows), kBboxTarget);
    m.colors = ad::gather_rows(colors, rows);
    m.faces = base_.faces;
    meshes.push_back(std::move(m));
  }
  return meshes;
}

LabeledPointCloud sample_surface(const TexturedMesh& mesh, std::int64_t n, Rng& rng) {
  const SurfaceDraw draw = draw_surface(mesh, n, rng);
  return {barycentric_gather(mesh.vertices, mesh.faces, draw), barycentric_gather(mesh.colors, mesh.faces, draw), {}};
}

}  // namespace ntf3d

// SPDX-License-Identifier: Apache-2.0
//
// Conditional textured-mesh generator. Two mapping networks turn random
// vectors into intermediate codes; the text field is appended after mapping
// ("late concatenation") and both branches decode per-vertex quantities on a
// fixed icosphere.

#pragma once

#include <cstdint>
#include <vector>

#include "ntf3d/ad.hpp"
#include "ntf3d/mesh.hpp"
#include "ntf3d/nn.hpp"

namespace ntf3d {

inline constexpr double kBboxTarget = 0.8;
inline constexpr double kMinDisplacement = -0.35;
inline constexpr double kMaxDisplacement = 0.6;

struct GeneratorConfig {
  int z_dim = 32;
  int w_dim = 64;
  int text_dim = 64;
  int hidden = 64;
  int icosphere_level = 2;
  // Ablation modes (a)/(b) feed the text through the mapping networks instead
  // of concatenating it afterwards.
  bool text_through_mapping = false;
};

enum class Branch { kGeometry, kTexture };

// Batched latent code: rows of [w | tfield].
struct LatentCode {
  ad::Tensor w;       // [B, W]
  ad::Tensor tfield;  // [B, D]
  ad::Tensor concat;  // [B, W + D]
};

LatentCode make_code(const ad::Tensor& w, const ad::Tensor& tfield);

// [B, Z] standard normal draws.
ad::Tensor sample_latents(std::int64_t batch, int z_dim, Rng& rng);

// Differentiable recentering and uniform scaling so the longest bounding-box
// edge equals `target`. vertices: [V, 3].
ad::Tensor normalize_bbox_tensor(const ad::Tensor& vertices, double target);

class Generator {
 public:
  Generator(GeneratorConfig config, Rng& rng);

  const GeneratorConfig& config() const { return config_; }
  int mapping_input_dim() const;

  // [B, mapping_input_dim] -> [B, W]
  ad::Tensor map_latent(const ad::Tensor& z, Branch branch) const;
  // Both codes must carry the same tfield values.
  std::vector<TexturedMesh> generate(const LatentCode& geo, const LatentCode& tex) const;

  const TexturedMesh& base_mesh() const { return base_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  // [B, W + D] -> [B * V, out]
  ad::Tensor decode(const Linear& pos, const Linear& code_proj, const Mlp& rest, const ad::Tensor& code) const;

  GeneratorConfig config_;
  TexturedMesh base_;
  ad::Tensor unit_positions_;  // [V, 3]
  ParamSet params_;
  Mlp map_geo_;
  Mlp map_tex_;
  // Per-vertex decoders. The first layer is split into a position part and a
  // code part so the code term is computed once per object.
  Linear geo_pos_;
  Linear geo_code_;
  Mlp geo_rest_;
  Linear tex_pos_;
  Linear tex_code_;
  Mlp tex_rest_;
};

// Area-weighted uniform surface samples; differentiable in vertices/colors
// with the face choice and barycentrics held fixed.
LabeledPointCloud sample_surface(const TexturedMesh& mesh, std::int64_t n, Rng& rng);

}  // namespace ntf3d

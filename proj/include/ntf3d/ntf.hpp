// SPDX-License-Identifier: Apache-2.0
//
// Noisy text fields: a learned, clamped per-dimension noise scale around each
// text embedding, the contrastive objectives that align noisy fields with
// rendered images, and the view-invariant image code used for image-to-3D.

#pragma once

#include <cstdint>
#include <vector>

#include "ntf3d/ad.hpp"
#include "ntf3d/embed.hpp"
#include "ntf3d/nn.hpp"
#include "ntf3d/render.hpp"

namespace ntf3d {

inline constexpr double kSigmaMin = 0.0002;
inline constexpr double kSigmaMax = 0.016;
inline constexpr double kStaticSigma = 0.016;
inline constexpr double kDefaultTau = 0.07;

// Batched noisy text field. Row i belongs to caption_ids[i].
struct NoisyTextField {
  ad::Tensor base;    // [B, D] unit rows
  ad::Tensor sigma;   // [B, D]
  ad::Tensor sample;  // [B, D] base + sigma * n
  std::vector<int> caption_ids;
};

struct SigmaNetConfig {
  int dim = 64;
  int hidden = 64;
  // One shared scale per caption instead of one per dimension.
  bool scalar = false;
};

class SigmaNet {
 public:
  SigmaNetConfig config;

  SigmaNet(SigmaNetConfig config, Rng& rng);

  // Pre-squash output of the non-linear map, [B, D] (or [B, 1] when scalar).
  ad::Tensor raw(const ad::Tensor& t) const;
  // [B, D] scales strictly inside (kSigmaMin, kSigmaMax) for any finite input.
  ad::Tensor sigma(const ad::Tensor& t) const;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  ParamSet params_;
  Mlp net_;
};

// Maps an unbounded pre-activation into (kSigmaMin, kSigmaMax). The input is
// soft-limited first so the open interval survives fp64 rounding.
ad::Tensor squash_sigma(const ad::Tensor& raw);

NoisyTextField inject_noise(const ad::Tensor& t, const std::vector<int>& caption_ids, const SigmaNet& sigma_net,
                            Rng& rng);
NoisyTextField inject_noise_static(const ad::Tensor& t, const std::vector<int>& caption_ids, double sigma,
                                   Rng& rng);

// Mean over rows of -log softmax_j(a_i . c_j / tau)[i].
ad::Tensor nce_loss(const ad::Tensor& anchors, const ad::Tensor& candidates, double tau);

struct GenObjective {
  ad::Tensor generated;  // L_nce against embeddings of generated renders
  ad::Tensor condition;  // L_nce against embeddings of ground-truth renders
  ad::Tensor total;
};

// gen_rgb / gt_rgb are [B, H, W, 3] stacks whose rows carry the given caption ids.
GenObjective gen_objective(const NoisyTextField& field, const ad::Tensor& gen_rgb, const std::vector<int>& gen_ids,
                           const ad::Tensor& gt_rgb, const std::vector<int>& gt_ids, const Embedder& embedder,
                           double tau);

struct ViewNetConfig {
  int dim = 64;
  int hidden = 128;
};

// f_view(e, c) = normalize(e + mlp([e | pose(c)])).
class ViewNet {
 public:
  ViewNetConfig config;

  ViewNet(ViewNetConfig config, Rng& rng);

  // image_emb: [B, D] -> [B, D] unit rows.
  ad::Tensor codes(const ad::Tensor& image_emb, const std::vector<CameraPose>& cams) const;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  ParamSet params_;
  Mlp net_;
};

struct ViewInvariantCode {
  std::vector<double> vector;
  CameraPose source_camera;
  int caption_id = -1;
};

ViewInvariantCode view_code(const RenderedView& view, const CameraPose& cam, const ViewNet& view_net,
                            const Embedder& embedder);
// Batched and differentiable: rgb [B, H, W, 3] -> [B, D].
ad::Tensor view_codes(const ad::Tensor& rgb, const std::vector<CameraPose>& cams, const ViewNet& view_net,
                      const Embedder& embedder);

// Unhinged triplet ||a - p|| - ||a - n||, averaged over rows.
struct TripletBatch {
  ad::Tensor anchor;
  ad::Tensor positive;
  ad::Tensor negative;
  std::vector<int> anchor_ids;
  std::vector<int> positive_ids;
  std::vector<int> negative_ids;
};

ad::Tensor view_triplet_loss(const TripletBatch& batch);
double view_triplet_loss(const ViewInvariantCode& anchor, const ViewInvariantCode& positive,
                         const ViewInvariantCode& negative);

ad::Tensor ntf_bind_loss(const ad::Tensor& gen_rgb, const std::vector<CameraPose>& cams,
                         const std::vector<int>& gen_ids, const NoisyTextField& field, const ViewNet& view_net,
                         const Embedder& embedder, double tau);

struct BindObjective {
  ad::Tensor view;
  ad::Tensor ntf;
  ad::Tensor total;
};

BindObjective bind_objective(const TripletBatch& triplets, const ad::Tensor& gen_rgb,
                             const std::vector<CameraPose>& gen_cams, const std::vector<int>& gen_ids,
                             const NoisyTextField& field, const ViewNet& view_net, const Embedder& embedder,
                             double tau);

}  // namespace ntf3d

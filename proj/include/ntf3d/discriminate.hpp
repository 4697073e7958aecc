// SPDX-License-Identifier: Apache-2.0
//
// Conditional critics for rendered images (RGB or mask, conditioned on camera
// pose and the noisy text field) and for surface point clouds (conditioned on
// the clean text embedding), with non-saturating logistic losses and an R1
// penalty on real inputs.

#pragma once

#include <cstdint>
#include <vector>

#include "ntf3d/ad.hpp"
#include "ntf3d/nn.hpp"
#include "ntf3d/render.hpp"

namespace ntf3d {

// Projection-conditioned critic: logit = head(phi(x)) + phi(x) . embed(cond).
class Critic {
 public:
  virtual ~Critic() = default;
  // One logit per batch row of `cond`: [B].
  virtual ad::Tensor logits(const ad::Tensor& x, const ad::Tensor& cond) const = 0;
  // Batch size implied by an input tensor.
  virtual std::int64_t batch_of(const ad::Tensor& x) const = 0;
  virtual ParamSet& params() = 0;
  virtual const ParamSet& params() const = 0;
};

struct Disc2dConfig {
  int resolution = 32;
  int in_channels = 3;
  std::vector<std::int64_t> channels{16, 32, 32};
  int feature = 64;
  int cond_dim = 5 + 64;
};

class Discriminator2_5D final : public Critic {
 public:
  Discriminator2_5D(Disc2dConfig config, Rng& rng);
  ad::Tensor logits(const ad::Tensor& x, const ad::Tensor& cond) const override;
  std::int64_t batch_of(const ad::Tensor& x) const override { return x.shape()[0]; }
  ParamSet& params() override { return params_; }
  const ParamSet& params() const override { return params_; }
  const Disc2dConfig& config() const { return config_; }

 private:
  Disc2dConfig config_;
  ParamSet params_;
  std::vector<Conv3x3> stages_;
  Linear to_feature_;
  Linear head_;
  Linear cond_embed_;
  std::int64_t flat_ = 0;
};

struct Disc3dConfig {
  std::int64_t points = 1024;  // per cloud
  bool use_color = false;
  std::vector<std::int64_t> widths{32, 64};
  int feature = 64;
  int cond_dim = 64;
};

class Discriminator3D final : public Critic {
 public:
  Discriminator3D(Disc3dConfig config, Rng& rng);
  // x: [B * points, 3] (or 6 with color); row-major clouds back to back.
  ad::Tensor logits(const ad::Tensor& x, const ad::Tensor& cond) const override;
  std::int64_t batch_of(const ad::Tensor& x) const override { return x.shape()[0] / config_.points; }
  ParamSet& params() override { return params_; }
  const ParamSet& params() const override { return params_; }
  const Disc3dConfig& config() const { return config_; }

 private:
  Disc3dConfig config_;
  ParamSet params_;
  Mlp point_net_;
  Linear to_feature_;
  Linear head_;
  Linear cond_embed_;
};

// g(x) = -log(1 + e^x), evaluated without overflow.
double g_fn(double x);

struct R1Result {
  double value = 0.0;  // lambda * mean_b ||dD/dx_b||^2
  // Scalar whose parameter gradient equals that of `value`. Built from a
  // central difference of D along the input gradient, which avoids a second
  // backward pass.
  ad::Tensor surrogate;
};

// Leaves the critic's accumulated parameter gradients as they were.
R1Result r1_penalty(const Critic& d, const ad::Tensor& real_input, const ad::Tensor& cond, double lambda);

// Condition rows [pose features | field].
ad::Tensor pose_condition(const std::vector<CameraPose>& cams, const ad::Tensor& field);

struct ViewBatch {
  ad::Tensor pixels;  // [B, H, W, C]
  std::vector<CameraPose> cams;
};

struct DLoss {
  ad::Tensor adversarial;  // mean softplus(D(fake)) + mean softplus(-D(real))
  double r1 = 0.0;
  ad::Tensor objective;  // backward target: adversarial plus the R1 surrogate
  double value() const { return adversarial.item() + r1; }
};

// lambda_r1 == 0 skips the penalty entirely.
DLoss d_loss_2_5d(const Critic& d, const ViewBatch& fake, const ViewBatch& real, const std::vector<CameraPose>& cams,
                  const ad::Tensor& tfield, double lambda_r1);
ad::Tensor g_loss_2_5d(const Critic& d, const ViewBatch& fake, const std::vector<CameraPose>& cams,
                       const ad::Tensor& tfield);

DLoss d_loss_3d(const Critic& d, const ad::Tensor& fake_pc, const ad::Tensor& real_pc, const ad::Tensor& t,
                double lambda_r1);
ad::Tensor g_loss_3d(const Critic& d, const ad::Tensor& fake_pc, const ad::Tensor& t);

}  // namespace ntf3d

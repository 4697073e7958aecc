// SPDX-License-Identifier: Apache-2.0

#include "ntf3d/discriminate.hpp"

#include <fmt/format.h>

#include <cmath>

#include "ntf3d/errors.hpp"

namespace ntf3d {

namespace {

// Step along the unit input-gradient direction for the R1 parameter gradient.
constexpr double kR1Step = 1e-3;
constexpr int kFinalSpatial = 4;

ad::Tensor project_logit(const ad::Tensor& phi, const Linear& head, const Linear& cond_embed,
                         const ad::Tensor& cond) {
  const auto b = phi.shape()[0];
  const double s = 1.0 / std::sqrt(static_cast<double>(phi.shape()[1]));
  const ad::Tensor uncond = ad::reshape(head(phi), {b});
  const ad::Tensor proj = ad::row_sums(ad::mul(phi, cond_embed(cond)));
  return ad::add(uncond, ad::scale(proj, s));
}

void check_cond(const ad::Tensor& cond, std::int64_t batch, int dim, const char* who) {
  if (cond.rank() != 2 || cond.shape()[0] != batch || cond.shape()[1] != dim) {
    throw InvalidInput(fmt::format("{}: expected condition [{}, {}], got {}", who, batch, dim,
                                   ad::shape_str(cond.shape())));
  }
}

}  // namespace

Discriminator2_5D::Discriminator2_5D(Disc2dConfig config, Rng& rng) : config_(std::move(config)) {
  if (config_.resolution < kFinalSpatial || config_.channels.empty() || config_.in_channels < 1) {
    throw InvalidInput("Discriminator2_5D: invalid configuration");
  }
  int spatial = config_.resolution;
  std::int64_t in = config_.in_channels;
  size_t k = 0;
  while (spatial > kFinalSpatial) {
    if (spatial % 2 != 0) throw InvalidInput("Discriminator2_5D: resolution must be 4 times a power of two");
    const std::int64_t out = config_.channels[std::min(k, config_.channels.size() - 1)];
    stages_.emplace_back(params_, fmt::format("stage{}", k), in, out, rng);
    in = out;
    spatial /= 2;
    ++k;
  }
  flat_ = in * kFinalSpatial * kFinalSpatial;
  to_feature_ = Linear(params_, "feature", flat_, config_.feature, rng);
  head_ = Linear(params_, "head", config_.feature, 1, rng);
  cond_embed_ = Linear(params_, "cond", config_.cond_dim, config_.feature, rng);
}

ad::Tensor Discriminator2_5D::logits(const ad::Tensor& x, const ad::Tensor& cond) const {
  if (x.rank() != 4 || x.shape()[1] != config_.resolution || x.shape()[2] != config_.resolution ||
      x.shape()[3] != config_.in_channels) {
    throw InvalidInput(fmt::format("Discriminator2_5D: expected [B, {0}, {0}, {1}], got {2}", config_.resolution,
                                   config_.in_channels, ad::shape_str(x.shape())));
  }
  const auto b = x.shape()[0];
  check_cond(cond, b, config_.cond_dim, "Discriminator2_5D");
  ad::Tensor h = x;
  for (const auto& stage : stages_) h = ad::avg_pool(ad::silu(stage(h)), 2);
  const ad::Tensor phi = ad::silu(to_feature_(ad::reshape(h, {b, flat_})));
  return project_logit(phi, head_, cond_embed_, cond);
}

Discriminator3D::Discriminator3D(Disc3dConfig config, Rng& rng) : config_(std::move(config)) {
  if (config_.points < 1 || config_.widths.empty()) throw InvalidInput("Discriminator3D: invalid configuration");
  std::vector<std::int64_t> widths{config_.use_color ? 6 : 3};
  widths.insert(widths.end(), config_.widths.begin(), config_.widths.end());
  point_net_ = Mlp(params_, "point", widths, rng, Activation::kSilu, Activation::kSilu);
  to_feature_ = Linear(params_, "feature", widths.back(), config_.feature, rng);
  head_ = Linear(params_, "head", config_.feature, 1, rng);
  cond_embed_ = Linear(params_, "cond", config_.cond_dim, config_.feature, rng);
}

ad::Tensor Discriminator3D::logits(const ad::Tensor& x, const ad::Tensor& cond) const {
  const std::int64_t c = config_.use_color ? 6 : 3;
  if (x.rank() != 2 || x.shape()[1] != c || x.shape()[0] % config_.points != 0) {
    throw InvalidInput(fmt::format("Discriminator3D: expected [B * {}, {}], got {}", config_.points, c,
                                   ad::shape_str(x.shape())));
  }
  const auto b = x.shape()[0] / config_.points;
  check_cond(cond, b, config_.cond_dim, "Discriminator3D");
  const ad::Tensor pooled = ad::max_groups(point_net_(x), b);
  const ad::Tensor phi = ad::silu(to_feature_(pooled));
  return project_logit(phi, head_, cond_embed_, cond);
}

double g_fn(double x) {
  if (x > 0.0) return -(x + std::log1p(std::exp(-x)));
  return -std::log1p(std::exp(x));
}

R1Result r1_penalty(const Critic& d, const ad::Tensor& real_input, const ad::Tensor& cond, double lambda) {
  if (!ad::grad_enabled()) throw ContractError("r1_penalty: gradient tracking is disabled");
  if (lambda < 0.0) throw InvalidInput("r1_penalty: lambda must be non-negative");

  std::vector<std::vector<double>> saved;
  for (const auto& p : d.params().params()) saved.push_back(p.tensor.node()->grad);

  ad::Tensor x = ad::Tensor::from(real_input.shape(), {real_input.values().begin(), real_input.values().end()}, true);
  const ad::Tensor c = cond.detach();
  // A critic that ignores its input never reaches x; its input gradient is zero.
  const ad::Tensor total_logit = ad::sum(d.logits(x, c));
  if (total_logit.requires_grad()) total_logit.backward();
  std::vector<double> grad(x.grad().begin(), x.grad().end());
  if (grad.empty()) grad.assign(static_cast<size_t>(x.numel()), 0.0);

  auto& params = const_cast<ParamSet&>(d.params()).params();
  for (size_t i = 0; i < params.size(); ++i) params[i].tensor.node()->grad = std::move(saved[i]);
  if (grad.size() != static_cast<size_t>(x.numel())) throw ContractError("r1_penalty: input gradient unavailable");

  const auto b = d.batch_of(x);
  const auto per = x.numel() / b;
  std::vector<double> norms(static_cast<size_t>(b), 0.0);
  double total = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    double s = 0.0;
    for (std::int64_t k = 0; k < per; ++k) s += grad[i * per + k] * grad[i * per + k];
    norms[i] = std::sqrt(s);
    total += s;
  }
  R1Result out;
  out.value = lambda * total / static_cast<double>(b);
  if (lambda == 0.0 || total == 0.0) {
    out.surrogate = ad::Tensor::scalar(0.0);
    return out;
  }

  // grad_theta sum_b ||g_b||^2 = 2 grad_theta sum_b (g_b . dD/dx_b) with g_b held
  // fixed, and the directional derivative is a central difference along g_b.
  std::vector<double> plus(x.values().begin(), x.values().end());
  std::vector<double> minus = plus;
  std::vector<double> weights(static_cast<size_t>(b), 0.0);
  for (std::int64_t i = 0; i < b; ++i) {
    if (norms[i] == 0.0) continue;
    for (std::int64_t k = 0; k < per; ++k) {
      const double step = kR1Step * grad[i * per + k] / norms[i];
      plus[i * per + k] += step;
      minus[i * per + k] -= step;
    }
    weights[i] = 2.0 * lambda / static_cast<double>(b) * norms[i] / (2.0 * kR1Step);
  }
  const ad::Tensor xp = ad::Tensor::from(x.shape(), std::move(plus));
  const ad::Tensor xm = ad::Tensor::from(x.shape(), std::move(minus));
  const ad::Tensor diff = ad::sub(d.logits(xp, c), d.logits(xm, c));
  out.surrogate = ad::sum(ad::mul(diff, ad::Tensor::from({b}, std::move(weights))));
  return out;
}

ad::Tensor pose_condition(const std::vector<CameraPose>& cams, const ad::Tensor& field) {
  if (field.rank() != 2 || field.shape()[0] != static_cast<std::int64_t>(cams.size())) {
    throw InvalidInput(fmt::format("pose_condition: {} poses for field {}", cams.size(),
                                   ad::shape_str(field.shape())));
  }
  std::vector<double> rows;
  rows.reserve(cams.size() * 5);
  for (const auto& c : cams) {
    const auto f = pose_features(c);
    rows.insert(rows.end(), f.begin(), f.end());
  }
  return ad::concat_last({ad::Tensor::from({static_cast<std::int64_t>(cams.size()), 5}, std::move(rows)), field});
}

namespace {

void check_poses(const ViewBatch& v, const std::vector<CameraPose>& cams, const char* who) {
  if (v.cams != cams) throw InvalidInput(fmt::format("{}: view poses do not match the condition poses", who));
}

ad::Tensor fake_term(const ad::Tensor& logit) { return ad::mean(ad::softplus(logit)); }
ad::Tensor real_term(const ad::Tensor& logit) { return ad::mean(ad::softplus(ad::neg(logit))); }

DLoss assemble(const Critic& d, const ad::Tensor& fake, const ad::Tensor& real, const ad::Tensor& fake_cond,
               const ad::Tensor& real_cond, double lambda_r1) {
  DLoss out;
  out.adversarial = ad::add(fake_term(d.logits(fake, fake_cond)), real_term(d.logits(real, real_cond)));
  if (lambda_r1 == 0.0) {
    out.objective = out.adversarial;
    return out;
  }
  const R1Result r1 = r1_penalty(d, real, real_cond, lambda_r1);
  out.r1 = r1.value;
  out.objective = ad::add(out.adversarial, r1.surrogate);
  return out;
}

}  // namespace

DLoss d_loss_2_5d(const Critic& d, const ViewBatch& fake, const ViewBatch& real, const std::vector<CameraPose>& cams,
                  const ad::Tensor& tfield, double lambda_r1) {
  check_poses(fake, cams, "d_loss_2_5d");
  check_poses(real, cams, "d_loss_2_5d");
  const ad::Tensor cond = pose_condition(cams, tfield);
  return assemble(d, fake.pixels, real.pixels, cond, cond, lambda_r1);
}

ad::Tensor g_loss_2_5d(const Critic& d, const ViewBatch& fake, const std::vector<CameraPose>& cams,
                       const ad::Tensor& tfield) {
  check_poses(fake, cams, "g_loss_2_5d");
  return real_term(d.logits(fake.pixels, pose_condition(cams, tfield)));
}

DLoss d_loss_3d(const Critic& d, const ad::Tensor& fake_pc, const ad::Tensor& real_pc, const ad::Tensor& t,
                double lambda_r1) {
  return assemble(d, fake_pc, real_pc, t, t, lambda_r1);
}

ad::Tensor g_loss_3d(const Critic& d, const ad::Tensor& fake_pc, const ad::Tensor& t) {
  return real_term(d.logits(fake_pc, t));
}

}  // namespace ntf3d

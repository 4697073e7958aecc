// SPDX-License-Identifier: Apache-2.0

#include "ntf3d/ntf.hpp"

#include <fmt/format.h>

#include <cmath>

#include "ntf3d/errors.hpp"

namespace ntf3d {

namespace {

// sigmoid(20) = 1 - 2e-9, so the open interval is preserved after scaling.
constexpr double kSquashLimit = 20.0;
constexpr double kUnitTol = 1e-6;

void check_text_rows(const ad::Tensor& t, const std::vector<int>& ids, const char* op) {
  if (t.rank() != 2) throw InvalidInput(fmt::format("{}: expected [B, D] text embeddings", op));
  const auto b = t.shape()[0];
  const auto d = t.shape()[1];
  if (static_cast<std::int64_t>(ids.size()) != b) throw InvalidInput(fmt::format("{}: caption id count mismatch", op));
  const auto v = t.values();
  for (std::int64_t r = 0; r < b; ++r) {
    double s = 0.0;
    for (std::int64_t c = 0; c < d; ++c) s += v[r * d + c] * v[r * d + c];
    if (std::abs(std::sqrt(s) - 1.0) > kUnitTol) {
      throw InvalidInput(fmt::format("{}: row {} is not unit-norm (norm {})", op, r, std::sqrt(s)));
    }
  }
}

void check_same_ids(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
  if (a != b) throw InvalidInput(fmt::format("{}: batch is not caption-aligned", op));
}

ad::Tensor noise_like(const ad::Tensor& t, Rng& rng) {
  return ad::Tensor::from(t.shape(), normal_vector(static_cast<size_t>(t.numel()), rng));
}

ad::Tensor pose_matrix(const std::vector<CameraPose>& cams) {
  std::vector<double> rows;
  rows.reserve(cams.size() * 5);
  for (const auto& c : cams) {
    const auto f = pose_features(c);
    rows.insert(rows.end(), f.begin(), f.end());
  }
  return ad::Tensor::from({static_cast<std::int64_t>(cams.size()), 5}, std::move(rows));
}

}  // namespace

ad::Tensor squash_sigma(const ad::Tensor& raw) {
  const ad::Tensor limited = ad::scale(ad::tanh(ad::scale(raw, 1.0 / kSquashLimit)), kSquashLimit);
  return ad::add_scalar(ad::scale(ad::sigmoid(limited), kSigmaMax - kSigmaMin), kSigmaMin);
}

SigmaNet::SigmaNet(SigmaNetConfig cfg, Rng& rng) : config(cfg) {
  if (config.dim < 1 || config.hidden < 1) throw InvalidInput("SigmaNet: dimensions must be positive");
  net_ = Mlp(params_, "sigma", {config.dim, config.hidden, config.scalar ? 1 : config.dim}, rng, Activation::kSilu,
             Activation::kNone, 0.1);
}

ad::Tensor SigmaNet::raw(const ad::Tensor& t) const {
  if (t.rank() != 2 || t.shape()[1] != config.dim) {
    throw InvalidInput(fmt::format("SigmaNet: expected [B, {}], got {}", config.dim, ad::shape_str(t.shape())));
  }
  return net_(t);
}

ad::Tensor SigmaNet::sigma(const ad::Tensor& t) const {
  const ad::Tensor s = squash_sigma(raw(t));
  if (!config.scalar) return s;
  return ad::matmul(s, ad::Tensor::full({1, config.dim}, 1.0));
}

NoisyTextField inject_noise(const ad::Tensor& t, const std::vector<int>& caption_ids, const SigmaNet& sigma_net,
                            Rng& rng) {
  check_text_rows(t, caption_ids, "inject_noise");
  const ad::Tensor n = noise_like(t, rng);
  const ad::Tensor sigma = sigma_net.sigma(t);
  return {t, sigma, ad::add(t, ad::mul(sigma, n)), caption_ids};
}

NoisyTextField inject_noise_static(const ad::Tensor& t, const std::vector<int>& caption_ids, double sigma,
                                   Rng& rng) {
  if (!(sigma > 0.0 && sigma < 1.0)) throw InvalidInput(fmt::format("inject_noise_static: sigma {} not in (0, 1)", sigma));
  check_text_rows(t, caption_ids, "inject_noise_static");
  const ad::Tensor n = noise_like(t, rng);
  const ad::Tensor s = ad::Tensor::full(t.shape(), sigma);
  return {t, s, ad::add(t, ad::mul(s, n)), caption_ids};
}

ad::Tensor nce_loss(const ad::Tensor& anchors, const ad::Tensor& candidates, double tau) {
  if (anchors.rank() != 2 || anchors.shape() != candidates.shape() || anchors.shape()[0] < 1) {
    throw InvalidInput(fmt::format("nce_loss: expected matching [B, D] inputs, got {} and {}",
                                   ad::shape_str(anchors.shape()), ad::shape_str(candidates.shape())));
  }
  if (!(tau > 0.0)) throw InvalidInput("nce_loss: tau must be positive");
  for (const auto* x : {&anchors, &candidates}) {
    for (double v : x->values()) {
      if (!std::isfinite(v)) throw NumericError("nce_loss: non-finite input");
    }
  }
  return ad::cross_entropy_diag(ad::scale(ad::matmul(anchors, ad::transpose(candidates)), 1.0 / tau));
}

GenObjective gen_objective(const NoisyTextField& field, const ad::Tensor& gen_rgb, const std::vector<int>& gen_ids,
                           const ad::Tensor& gt_rgb, const std::vector<int>& gt_ids, const Embedder& embedder,
                           double tau) {
  check_same_ids(field.caption_ids, gen_ids, "gen_objective");
  check_same_ids(field.caption_ids, gt_ids, "gen_objective");
  GenObjective out;
  out.generated = nce_loss(field.sample, embedder.embed_images(gen_rgb), tau);
  ad::Tensor gt_emb;
  {
    ad::NoGradGuard no_grad;
    gt_emb = embedder.embed_images(gt_rgb);
  }
  out.condition = nce_loss(field.sample, gt_emb, tau);
  out.total = ad::add(out.generated, out.condition);
  return out;
}

ViewNet::ViewNet(ViewNetConfig cfg, Rng& rng) : config(cfg) {
  if (config.dim < 1 || config.hidden < 1) throw InvalidInput("ViewNet: dimensions must be positive");
  net_ = Mlp(params_, "view", {config.dim + 5, config.hidden, config.hidden, config.dim}, rng, Activation::kSilu,
             Activation::kNone, 0.1);
}

ad::Tensor ViewNet::codes(const ad::Tensor& image_emb, const std::vector<CameraPose>& cams) const {
  if (image_emb.rank() != 2 || image_emb.shape()[1] != config.dim ||
      image_emb.shape()[0] != static_cast<std::int64_t>(cams.size())) {
    throw InvalidInput(fmt::format("ViewNet: expected [{}, {}] embeddings, got {}", cams.size(), config.dim,
                                   ad::shape_str(image_emb.shape())));
  }
  const ad::Tensor in = ad::concat_last({image_emb, pose_matrix(cams)});
  return ad::normalize_rows(ad::add(image_emb, net_(in)));
}

ViewInvariantCode view_code(const RenderedView& view, const CameraPose& cam, const ViewNet& view_net,
                            const Embedder& embedder) {
  ad::NoGradGuard no_grad;
  const ad::Tensor rgb = ad::reshape(view.rgb, {1, view.rgb.shape()[0], view.rgb.shape()[1], 3});
  const ad::Tensor c = view_codes(rgb, {cam}, view_net, embedder);
  return {{c.values().begin(), c.values().end()}, cam, view.caption_id};
}

ad::Tensor view_codes(const ad::Tensor& rgb, const std::vector<CameraPose>& cams, const ViewNet& view_net,
                      const Embedder& embedder) {
  return view_net.codes(embedder.embed_images(rgb), cams);
}

ad::Tensor view_triplet_loss(const TripletBatch& batch) {
  const auto b = static_cast<size_t>(batch.anchor.shape()[0]);
  if (batch.positive.shape() != batch.anchor.shape() || batch.negative.shape() != batch.anchor.shape() ||
      batch.anchor_ids.size() != b || batch.positive_ids.size() != b || batch.negative_ids.size() != b) {
    throw InvalidInput("view_triplet_loss: triplet parts disagree in shape");
  }
  for (size_t i = 0; i < b; ++i) {
    if (batch.anchor_ids[i] != batch.positive_ids[i]) {
      throw InvalidInput(fmt::format("view_triplet_loss: positive {} has a different caption", i));
    }
    if (batch.anchor_ids[i] == batch.negative_ids[i]) {
      throw InvalidInput(fmt::format("view_triplet_loss: negative {} shares the anchor caption", i));
    }
  }
  const ad::Tensor pos = ad::row_norms(ad::sub(batch.anchor, batch.positive));
  const ad::Tensor neg = ad::row_norms(ad::sub(batch.anchor, batch.negative));
  return ad::mean(ad::sub(pos, neg));
}

double view_triplet_loss(const ViewInvariantCode& anchor, const ViewInvariantCode& positive,
                         const ViewInvariantCode& negative) {
  const auto d = static_cast<std::int64_t>(anchor.vector.size());
  auto row = [d](const ViewInvariantCode& c) { return ad::Tensor::from({1, d}, c.vector); };
  return view_triplet_loss({row(anchor), row(positive), row(negative), {anchor.caption_id},
                            {positive.caption_id}, {negative.caption_id}})
      .item();
}

ad::Tensor ntf_bind_loss(const ad::Tensor& gen_rgb, const std::vector<CameraPose>& cams,
                         const std::vector<int>& gen_ids, const NoisyTextField& field, const ViewNet& view_net,
                         const Embedder& embedder, double tau) {
  check_same_ids(field.caption_ids, gen_ids, "ntf_bind_loss");
  return nce_loss(field.sample, view_codes(gen_rgb, cams, view_net, embedder), tau);
}

BindObjective bind_objective(const TripletBatch& triplets, const ad::Tensor& gen_rgb,
                             const std::vector<CameraPose>& gen_cams, const std::vector<int>& gen_ids,
                             const NoisyTextField& field, const ViewNet& view_net, const Embedder& embedder,
                             double tau) {
  BindObjective out;
  out.view = view_triplet_loss(triplets);
  out.ntf = ntf_bind_loss(gen_rgb, gen_cams, gen_ids, field, view_net, embedder, tau);
  out.total = ad::add(out.view, out.ntf);
  return out;
}

}  // namespace ntf3d

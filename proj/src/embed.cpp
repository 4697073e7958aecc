// SPDX-License-Identifier: Apache-2.0

#include "ntf3d/embed.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <fmt/format.h>

#include <cctype>
#include <cmath>
#include <sstream>

#include "ntf3d/errors.hpp"

namespace ntf3d {

namespace {

constexpr double kFeatureGain = 2.0;

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    for (auto& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    tokens.push_back(tok);
  }
  return tokens;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InvalidInput("cosine: dimension mismatch");
  double ab = 0.0;
  double aa = 0.0;
  double bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

Embedder::Embedder(EmbedderConfig config) : config_(config) {
  if (config_.dim < 1 || config_.patch_grid < 1 || config_.random_features < 1 || config_.token_buckets < 1) {
    throw InvalidInput("Embedder: dimensions must be positive");
  }
  if (config_.resolution % config_.patch_grid != 0) {
    throw InvalidInput(fmt::format("Embedder: resolution {} is not divisible by patch grid {}", config_.resolution,
                                   config_.patch_grid));
  }
  Rng rng(config_.seed);
  const auto d = static_cast<std::size_t>(config_.dim);
  token_table_ = normal_vector(static_cast<std::size_t>(config_.token_buckets) * d, rng);

  const std::int64_t in = 3LL * config_.patch_grid * config_.patch_grid;
  const std::int64_t f = config_.random_features;
  projection_ = frozen_.add("proj", {in, f},
                            normal_vector(static_cast<std::size_t>(in * f), rng, kFeatureGain / std::sqrt(double(in))));
  bias_ = frozen_.add("bias", {f}, normal_vector(static_cast<std::size_t>(f), rng, 0.5));
  head_ = frozen_.add("head", {f, config_.dim},
                      normal_vector(static_cast<std::size_t>(f) * d, rng, 1.0 / std::sqrt(double(f))));
  for (auto& p : frozen_.params()) p.tensor.set_requires_grad(false);
}

TextEmbedding Embedder::embed_text(const std::string& text) const {
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw InvalidInput("embed_text: empty text");
  const auto d = static_cast<std::size_t>(config_.dim);
  std::vector<double> v(d, 0.0);
  for (const auto& tok : tokens) {
    const auto row = (fnv1a(tok) ^ config_.seed) % static_cast<std::uint64_t>(config_.token_buckets);
    for (std::size_t k = 0; k < d; ++k) v[k] += token_table_[row * d + k];
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return {std::move(v), text};
}

ad::Tensor Embedder::embed_texts(const std::vector<std::string>& texts) const {
  std::vector<double> rows;
  for (const auto& t : texts) {
    const auto e = embed_text(t);
    rows.insert(rows.end(), e.vector.begin(), e.vector.end());
  }
  return ad::Tensor::from({static_cast<std::int64_t>(texts.size()), config_.dim}, std::move(rows));
}

ad::Tensor Embedder::image_features(const ad::Tensor& rgb) const {
  if (rgb.rank() != 4 || rgb.shape()[1] != config_.resolution || rgb.shape()[2] != config_.resolution ||
      rgb.shape()[3] != 3) {
    throw InvalidInput(fmt::format("embed_image: expected [B, {0}, {0}, 3] pixels, got {1}", config_.resolution,
                                   ad::shape_str(rgb.shape())));
  }
  const auto b = rgb.shape()[0];
  const ad::Tensor patches = ad::avg_pool(rgb, config_.resolution / config_.patch_grid);
  const ad::Tensor flat = ad::reshape(patches, {b, 3LL * config_.patch_grid * config_.patch_grid});
  // White background maps to the zero vector.
  const ad::Tensor centered = ad::add_scalar(flat, -1.0);
  return ad::tanh(ad::add(ad::matmul(centered, projection_), bias_));
}

ad::Tensor Embedder::embed_images(const ad::Tensor& rgb) const {
  return ad::normalize_rows(ad::matmul(image_features(rgb), head_));
}

ImageEmbedding Embedder::embed_image(const RenderedView& view) const {
  ad::NoGradGuard no_grad;
  const ad::Tensor batch = ad::reshape(view.rgb, {1, view.rgb.shape()[0], view.rgb.shape()[1], 3});
  const ad::Tensor e = embed_images(batch);
  return {{e.values().begin(), e.values().end()}, view.camera, view.caption_id};
}

void Embedder::calibrate(const ad::Tensor& features, const std::vector<std::vector<double>>& targets, double ridge) {
  const auto n = features.shape()[0];
  const auto f = features.shape()[1];
  if (static_cast<std::int64_t>(targets.size()) != n || f != config_.random_features) {
    throw InvalidInput("calibrate: features and targets disagree in size");
  }
  if (!(ridge > 0.0)) throw InvalidInput("calibrate: ridge must be positive");
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMat> phi(features.values().data(), n, f);
  RowMat t(n, config_.dim);
  for (std::int64_t i = 0; i < n; ++i) {
    if (static_cast<int>(targets[i].size()) != config_.dim) throw InvalidInput("calibrate: target dimension mismatch");
    for (int k = 0; k < config_.dim; ++k) t(i, k) = targets[i][k];
  }
  Eigen::MatrixXd gram = phi.transpose() * phi;
  gram.diagonal().array() += ridge * static_cast<double>(n);
  const Eigen::MatrixXd head = gram.ldlt().solve(phi.transpose() * t);
  auto dst = head_.mutable_values();
  for (std::int64_t i = 0; i < f; ++i) {
    for (int k = 0; k < config_.dim; ++k) dst[i * config_.dim + k] = round_f32(head(i, k));
  }
  calibrated_ = true;
}

}  // namespace ntf3d

// SPDX-License-Identifier: Apache-2.0
//
// Frozen, deterministic stand-in for a pretrained vision-language embedder.
//
// Text: lowercase whitespace tokens are hashed into rows of a seeded Gaussian
// table, mean-pooled and L2-normalized, so captions that share words share
// directions.
//
// Image: non-overlapping patch means of the RGB image (background-centered)
// pass through a fixed random projection and tanh, then a linear head into the
// text space, then L2 normalization. The head starts as another random
// projection; calibrate() replaces it with a closed-form ridge fit to paired
// (image, caption) examples, which stands in for contrastive pretraining.
// Everything is constant afterwards and the image path is differentiable with
// respect to pixels.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ntf3d/ad.hpp"
#include "ntf3d/nn.hpp"
#include "ntf3d/render.hpp"

namespace ntf3d {

struct EmbedderConfig {
  int dim = 64;
  std::uint64_t seed = 7;
  int patch_grid = 8;
  int resolution = 64;
  int random_features = 2048;
  int token_buckets = 4096;
};

struct TextEmbedding {
  std::vector<double> vector;
  std::string source_text;
};

struct ImageEmbedding {
  std::vector<double> vector;
  CameraPose source_camera;
  int caption_id = -1;
};

// Lowercased whitespace tokens.
std::vector<std::string> tokenize(const std::string& text);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

class Embedder {
 public:
  explicit Embedder(EmbedderConfig config);

  const EmbedderConfig& config() const { return config_; }
  int dim() const { return config_.dim; }

  TextEmbedding embed_text(const std::string& text) const;
  // Rows are unit text embeddings, [N, D].
  ad::Tensor embed_texts(const std::vector<std::string>& texts) const;

  ImageEmbedding embed_image(const RenderedView& view) const;
  // [B, H, W, 3] -> [B, D] unit rows; differentiable in the pixels.
  ad::Tensor embed_images(const ad::Tensor& rgb) const;
  // [B, H, W, 3] -> [B, F] tanh random features before the head.
  ad::Tensor image_features(const ad::Tensor& rgb) const;

  // Ridge fit of the head mapping image features to the given unit targets.
  void calibrate(const ad::Tensor& features, const std::vector<std::vector<double>>& targets, double ridge);
  bool calibrated() const { return calibrated_; }

  // Frozen tensors, for checkpointing. Loading them back restores the tower.
  const ParamSet& frozen_params() const { return frozen_; }
  ParamSet& frozen_params() { return frozen_; }
  void set_calibrated(bool flag) { calibrated_ = flag; }

 private:
  EmbedderConfig config_;
  std::vector<double> token_table_;  // [buckets, D]
  ParamSet frozen_;
  ad::Tensor projection_;  // [3 * grid^2, F]
  ad::Tensor bias_;        // [F]
  ad::Tensor head_;        // [F, D]
  bool calibrated_ = false;
};

}  // namespace ntf3d

// SPDX-License-Identifier: Apache-2.0
//
// Evaluation protocols: top-1 text retrieval precision of generated renders
// (1-shot and N-shot), front/back view-invariance metrics, a hue probe and the
// noise-scale trend over caption detail.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ntf3d/data.hpp"
#include "ntf3d/embed.hpp"
#include "ntf3d/ntf.hpp"
#include "ntf3d/render.hpp"

namespace ntf3d {

// Produces `shots` views for one prompt, all from the evaluation camera.
using ShotRenderer =
    std::function<std::vector<RenderedView>(std::size_t prompt_index, const TextEmbedding& text, int shots, Rng& rng)>;

struct PromptRecord {
  std::string prompt;
  int selected_shot = 0;
  std::string retrieved;
  bool hit = false;
  RenderedView view;  // the kept render
};

struct RPrecision {
  double precision = 0.0;
  std::vector<PromptRecord> records;
};

// Keeps, per prompt, the shot whose image embedding is closest to the prompt
// text; precision is the fraction of kept renders whose nearest prompt (over
// all prompts) is their own.
RPrecision r_precision(const std::vector<std::string>& prompts, const ShotRenderer& renderer, int shots,
                       const Embedder& embedder, Rng& rng);

// Fraction of rows i whose most similar column j of (queries . keys^T) is i.
double top1_retrieval(const std::vector<std::vector<double>>& queries, const std::vector<std::vector<double>>& keys);

struct ViewInvariance {
  double s = 0.0;        // mean cosine of plain front/back embeddings
  double s_tilde = 0.0;  // same for view-invariant codes
  double r = 0.0;        // front -> back top-1 retrieval with plain embeddings
  double r_tilde = 0.0;  // same with view-invariant codes
};

// Pairs front[i] with back[i]; poses come from the views' cameras.
ViewInvariance view_invariance_metrics(const std::vector<RenderedView>& front, const std::vector<RenderedView>& back,
                                       const ViewNet& view_net, const Embedder& embedder);
// Renders each mesh from a front/back camera pair first.
ViewInvariance view_invariance_metrics(const std::vector<TexturedMesh>& meshes, const ViewNet& view_net,
                                       const Embedder& embedder, const RenderSettings& settings, Rng& rng);

struct SigmaGroup {
  int modifiers = 0;
  double mean_sigma = 0.0;
  // Sum over dimensions of the empirical variance of noisy-field draws,
  // averaged over the group's captions.
  double field_variance = 0.0;
};

// Captions "a {shape}", "a {color} {shape}", "a {size} {color} {shape}".
std::vector<std::vector<std::string>> captions_by_modifier_count(const DatasetConfig& config);

std::vector<SigmaGroup> sigma_trend(const std::vector<std::vector<std::string>>& groups, const SigmaNet& sigma_net,
                                    const Embedder& embedder, Rng& rng, int draws = 256);

// Mean foreground albedo of a view: silhouette > 0.5 pixels, background
// composited out.
std::array<double, 3> foreground_color(const RenderedView& view, const std::array<double, 3>& background);
std::string nearest_color(const std::array<double, 3>& rgb, const std::vector<NamedColor>& anchors);
double hue_match(const std::vector<RenderedView>& views, const std::vector<std::string>& colors,
                 const std::vector<NamedColor>& anchors, const std::array<double, 3>& background);

struct EvalReport {
  std::map<std::string, double> metrics;
  std::vector<PromptRecord> records;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;

  void write(const std::filesystem::path& path) const;      // key=value lines
  void write_csv(const std::filesystem::path& path) const;  // per-prompt rows
};

}  // namespace ntf3d

// SPDX-License-Identifier: Apache-2.0
//
// Procedural captioned-shape dataset and mesh curation.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ntf3d/embed.hpp"
#include "ntf3d/mesh.hpp"
#include "ntf3d/nn.hpp"
#include "ntf3d/render.hpp"

namespace ntf3d {

inline constexpr double kCurationLow = 1e-6;
inline constexpr double kCurationHigh = 1e-1;

struct NamedColor {
  std::string name;
  std::array<double, 3> rgb;
};

const std::vector<std::string>& default_shapes();
const std::vector<NamedColor>& default_colors();
// "" is the unsized variant.
const std::vector<std::string>& default_sizes();

struct Attributes {
  std::string shape;
  std::string color;
  std::string size;  // may be empty

  // Number of modifiers in the caption (size and color).
  int modifier_count() const { return static_cast<int>(!color.empty()) + static_cast<int>(!size.empty()); }
};

// "a {size} {color} {shape}" with empty slots dropped.
std::string make_caption(const Attributes& a);

struct CaptionedObject {
  int id = -1;
  std::string caption;
  Attributes attributes;
  TexturedMesh mesh;
  std::vector<RenderedView> views;
  LabeledPointCloud cloud;
  std::vector<double> text_embedding;
};

struct DatasetConfig {
  std::vector<std::string> shapes = default_shapes();
  std::vector<NamedColor> colors = default_colors();
  std::vector<std::string> sizes = default_sizes();
  int views_per_object = 8;
  std::int64_t points_per_cloud = 1024;
  double color_jitter = 0.05;
  double max_tilt_deg = 25.0;
  RenderSettings render;
  std::uint64_t seed = 1;
};

// Primitive mesh of the named shape with uniform color, not yet normalized.
TexturedMesh make_primitive(const std::string& shape, const std::array<double, 3>& color);

// Cross product of shapes x colors x sizes, ids in that order.
std::vector<CaptionedObject> make_dataset(const DatasetConfig& config, const Embedder& embedder);

// Ridge-fits the embedder's image head so renders of each object (its stored
// views plus one from the evaluation camera) map onto its caption embedding.
void calibrate_embedder(Embedder& embedder, const std::vector<CaptionedObject>& objects,
                        const RenderSettings& settings, double ridge = 1e-4);

// Per-vertex ||v_i - mean of one-ring neighbours||.
std::vector<double> laplacian_delta(const TexturedMesh& mesh);
int connected_components(const TexturedMesh& mesh);

struct CurationReport {
  int object_id = -1;
  double mean_delta = 0.0;
  bool accepted = false;
  std::string rejection_reason;
};

CurationReport curate(const TexturedMesh& mesh, std::pair<double, double> band = {kCurationLow, kCurationHigh},
                      int object_id = -1);

// Uniform scale and recentre so the longest bounding-box edge is `target`.
TexturedMesh normalize_bbox(const TexturedMesh& mesh, double target = 0.8);

// Rigid rotation about the origin: tilt about +x, then yaw about +y.
TexturedMesh rotate_mesh(const TexturedMesh& mesh, double tilt, double yaw);

// Meshes (OFF), views (PPM + PGM), clouds (binary fp32) and manifest.jsonl
// under `dir`. Returns the manifest path.
std::filesystem::path write_dataset(const std::vector<CaptionedObject>& objects, const std::filesystem::path& dir);

}  // namespace ntf3d

// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "ntf3d/ad.hpp"
#include "ntf3d/nn.hpp"

namespace ntf3d {

using Face = std::array<std::int32_t, 3>;

// Triangle mesh with per-vertex RGB. vertices and colors are [V, 3] tensors so
// generated meshes stay differentiable; faces are CCW seen from outside.
struct TexturedMesh {
  ad::Tensor vertices;
  ad::Tensor colors;
  std::vector<Face> faces;

  std::int64_t vertex_count() const { return vertices.defined() ? vertices.shape()[0] : 0; }
  std::int64_t face_count() const { return static_cast<std::int64_t>(faces.size()); }
};

// Builds a mesh from plain arrays (no gradient tracking).
TexturedMesh make_mesh(const std::vector<std::array<double, 3>>& vertices, const std::vector<Face>& faces,
                       const std::array<double, 3>& color);

// Unit-radius icosphere; level n has 10 * 4^n + 2 vertices and 20 * 4^n faces.
TexturedMesh make_icosphere(int level);

// Throws InvalidInput if a face references a missing vertex.
void validate_faces(const TexturedMesh& mesh);

std::vector<double> face_areas(const TexturedMesh& mesh);

struct BoundingBox {
  std::array<double, 3> lo;
  std::array<double, 3> hi;
  double longest_edge() const;
};
BoundingBox bounding_box(const ad::Tensor& vertices);

// A fixed set of surface locations: face index plus barycentric weights per
// sample. Holding a draw constant makes interpolated points a smooth function
// of vertex positions and colors.
struct SurfaceDraw {
  std::vector<std::int32_t> face;
  std::vector<std::array<double, 3>> bary;
  std::size_t size() const { return face.size(); }
};

// Area-weighted face choice with uniform barycentric coordinates.
SurfaceDraw draw_surface(const TexturedMesh& mesh, std::int64_t n, Rng& rng);

// Per-sample barycentric blend of per-vertex rows: values [V, C] -> [n, C].
ad::Tensor barycentric_gather(const ad::Tensor& values, const std::vector<Face>& faces, const SurfaceDraw& draw);

// Point samples with colors and the caption embedding they are paired with.
struct LabeledPointCloud {
  ad::Tensor points;  // [N, 3]
  ad::Tensor colors;  // [N, 3]
  std::vector<double> caption_embedding;
};

// ASCII OFF variant: "OFF" line, "V F 0" counts, vertex lines "x y z r g b",
// face lines "3 i j k".
void write_off(const std::filesystem::path& path, const TexturedMesh& mesh);
TexturedMesh read_off(const std::filesystem::path& path);

// Binary little-endian fp32, N rows of x y z r g b.
void write_point_cloud(const std::filesystem::path& path, const LabeledPointCloud& cloud);
LabeledPointCloud read_point_cloud(const std::filesystem::path& path);

}  // namespace ntf3d

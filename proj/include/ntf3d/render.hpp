// SPDX-License-Identifier: Apache-2.0
//
// Camera model and a differentiable soft point-splat renderer. Ground-truth and
// generated meshes go through the same renderer.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <utility>

#include "ntf3d/ad.hpp"
#include "ntf3d/mesh.hpp"
#include "ntf3d/nn.hpp"

namespace ntf3d {

inline constexpr double kCameraRadius = 1.2;
inline constexpr double kCameraFovDeg = 49.13;
inline constexpr double kMaxTrainElevation = std::numbers::pi / 6.0;

struct CameraPose {
  double elevation = 0.0;  // radians
  double rotation = 0.0;   // radians, azimuth about +y
  double radius = kCameraRadius;
  double fov_deg = kCameraFovDeg;

  bool operator==(const CameraPose&) const = default;
};

// elevation ~ U[0, pi/6), rotation ~ U[0, 2 pi), radius 1.2, fov 49.13 deg.
CameraPose sample_camera(Rng& rng);
// 45 deg elevation, 30 deg rotation; the fixed retrieval-evaluation pose.
CameraPose eval_camera();
// Shared elevation from the training range, rotations exactly pi apart.
std::pair<CameraPose, CameraPose> front_back_cameras(Rng& rng);

// [sin e, cos e, sin r, cos r, radius]
std::array<double, 5> pose_features(const CameraPose& cam);

struct RenderSettings {
  int resolution = 64;
  double kernel_sigma = 1.0;  // pixels
  double depth_temp = 0.1;    // scene units
  std::int64_t points = 4096;
  std::array<double, 3> background{1.0, 1.0, 1.0};
  std::uint64_t sample_seed = 0x5eed;
};

struct RenderedView {
  ad::Tensor rgb;         // [H, W, 3] in [0, 1]
  ad::Tensor silhouette;  // [H, W, 1] in [0, 1]
  CameraPose camera;
  int caption_id = -1;
};

// Splats `points` [M, 3] with `colors` [M, 3]. Returns [H, W, 4]: composited RGB
// over the background, then the silhouette 1 - exp(-total weight).
ad::Tensor splat_points(const ad::Tensor& points, const ad::Tensor& colors, const CameraPose& cam,
                        const RenderSettings& settings);

// Samples settings.points surface points with a draw seeded by
// settings.sample_seed, so the result is a pure function of its inputs.
RenderedView render(const TexturedMesh& mesh, const CameraPose& cam, const RenderSettings& settings);

// Stacks views into NHWC batches: [B, H, W, 3] and [B, H, W, 1].
ad::Tensor stack_rgb(const std::vector<RenderedView>& views);
ad::Tensor stack_silhouette(const std::vector<RenderedView>& views);

// 8-bit binary PPM (P6) for RGB and PGM (P5) for the mask; row-major from the
// top-left pixel.
void write_view_images(const RenderedView& view, const std::filesystem::path& rgb_path,
                       const std::filesystem::path& mask_path);
// Reads a P6 PPM into a view with an all-ones silhouette.
RenderedView read_ppm_view(const std::filesystem::path& path);

}  // namespace ntf3d

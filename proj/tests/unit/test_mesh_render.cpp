// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "fd_check.hpp"
#include "ntf3d/data.hpp"
#include "ntf3d/errors.hpp"
#include "ntf3d/generator.hpp"
#include "ntf3d/mesh.hpp"
#include "ntf3d/render.hpp"
#include "oracles.hpp"

using namespace ntf3d;
using ntf3d::testing::check_gradients;

namespace {

// Two triangles sharing an edge, face areas 3:1.
TexturedMesh two_face_mesh() {
  return make_mesh({{0, 0, 0}, {3, 0, 0}, {0, 1, 0}, {-1, 0, 0}}, {{0, 1, 2}, {0, 2, 3}}, {0.5, 0.5, 0.5});
}

// A small quad facing the default camera direction, colored per vertex.
TexturedMesh quad_mesh() {
  TexturedMesh m = make_mesh({{-0.3, -0.25, 0.05}, {0.3, -0.2, -0.05}, {0.25, 0.3, 0.0}, {-0.3, 0.25, 0.02}},
                             {{0, 1, 2}, {0, 2, 3}}, {0.5, 0.5, 0.5});
  m.colors = ad::Tensor::from({4, 3}, {0.9, 0.1, 0.2, 0.2, 0.8, 0.1, 0.1, 0.3, 0.9, 0.6, 0.6, 0.1});
  return m;
}

double mean_abs_diff(const ad::Tensor& a, const ad::Tensor& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += std::abs(a.at(i) - b.at(i));
  return s / static_cast<double>(a.numel());
}

}  // namespace

TEST_CASE("icosphere level 2 has 162 vertices and 320 faces") {
  const TexturedMesh s = make_icosphere(2);
  CHECK(s.vertex_count() == 162);
  CHECK(s.face_count() == 320);
  for (std::int64_t i = 0; i < s.vertex_count(); ++i) {
    const double r = std::hypot(s.vertices.at(3 * i), s.vertices.at(3 * i + 1), s.vertices.at(3 * i + 2));
    CHECK(r == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("face areas and bounding box") {
  const auto areas = face_areas(two_face_mesh());
  CHECK(areas[0] == doctest::Approx(1.5));
  CHECK(areas[1] == doctest::Approx(0.5));
  const auto bb = bounding_box(two_face_mesh().vertices);
  CHECK(bb.longest_edge() == doctest::Approx(4.0));
}

TEST_CASE("invalid face indices are rejected") {
  TexturedMesh m = two_face_mesh();
  m.faces.push_back({0, 1, 7});
  CHECK_THROWS_AS(validate_faces(m), InvalidInput);
}

TEST_CASE("area-weighted sampling passes a chi-square test on a 3:1 mesh") {
  Rng rng(11);
  const auto draw = draw_surface(two_face_mesh(), 100000, rng);
  double counts[2] = {0, 0};
  for (auto f : draw.face) counts[f] += 1;
  const double expected[2] = {75000.0, 25000.0};
  double stat = 0.0;
  for (int k = 0; k < 2; ++k) stat += (counts[k] - expected[k]) * (counts[k] - expected[k]) / expected[k];
  CHECK(ntf3d::testing::chi_square_1dof_pvalue(stat) > 0.01);
  bool valid = true;
  for (const auto& b : draw.bary) {
    valid = valid && b[0] >= 0.0 && b[1] >= 0.0 && b[2] >= 0.0 && std::abs(b[0] + b[1] + b[2] - 1.0) < 1e-12;
  }
  CHECK(valid);
}

TEST_CASE("sample_surface points lie on the mesh and default to 8192") {
  Rng rng(3);
  const auto cloud = sample_surface(two_face_mesh(), 8192, rng);
  CHECK(cloud.points.shape()[0] == 8192);
  for (std::int64_t i = 0; i < 8192; ++i) CHECK(cloud.points.at(3 * i + 2) == 0.0);
}

TEST_CASE("surface samples are differentiable in vertices") {
  const TexturedMesh m = quad_mesh();
  auto f = [&] {
    Rng rng(5);
    const auto c = sample_surface(m, 64, rng);
    return ad::add(ad::sum(ad::square(c.points)), ad::sum(ad::mul(c.colors, c.colors)));
  };
  CHECK(check_gradients(f, {m.vertices, m.colors}).max_rel_err < 1e-6);
}

TEST_CASE("camera sampling ranges and constants") {
  Rng rng(17);
  double sum = 0.0;
  double sumsq = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const CameraPose c = sample_camera(rng);
    CHECK(c.elevation >= 0.0);
    CHECK(c.elevation < std::numbers::pi / 6.0);
    CHECK(c.rotation >= 0.0);
    CHECK(c.rotation < 2.0 * std::numbers::pi);
    CHECK(c.radius == 1.2);
    sum += c.elevation;
    sumsq += c.elevation * c.elevation;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sumsq / n - mean * mean) / n);
  CHECK(std::abs(mean - std::numbers::pi / 12.0) < 3.0 * se);

  const CameraPose e = eval_camera();
  CHECK(e.elevation == doctest::Approx(std::numbers::pi / 4.0));
  CHECK(e.rotation == doctest::Approx(std::numbers::pi / 6.0));
  CHECK(e.radius == 1.2);
  CHECK(e.fov_deg == 49.13);
  CHECK(e == eval_camera());

  Rng a(9);
  Rng b(9);
  const auto [f1, b1] = front_back_cameras(a);
  const auto [f2, b2] = front_back_cameras(b);
  CHECK(f1 == f2);
  CHECK(b1 == b2);
  CHECK(std::abs(std::abs(b1.rotation - f1.rotation) - std::numbers::pi) < 1e-12);
  CHECK(f1.elevation == b1.elevation);
  CHECK(f1.elevation <= std::numbers::pi / 6.0);
}

TEST_CASE("empty pixels show the background with zero silhouette") {
  RenderSettings rs;
  rs.resolution = 32;
  rs.points = 1;
  const ad::Tensor p = ad::Tensor::from({1, 3}, {0.0, 0.0, 0.0});
  const ad::Tensor c = ad::Tensor::from({1, 3}, {1.0, 1.0, 1.0});
  CameraPose cam;
  const RenderedView v = render(make_mesh({{0, 0, 0}, {1e-4, 0, 0}, {0, 1e-4, 0}}, {{0, 1, 2}}, {1, 1, 1}), cam, rs);
  CHECK(v.rgb.at(0) == 1.0);
  CHECK(v.silhouette.at(0) == 0.0);
  for (std::int64_t i = 0; i < v.silhouette.numel(); ++i) {
    CHECK(v.silhouette.at(i) >= 0.0);
    CHECK(v.silhouette.at(i) <= 1.0);
  }
  // A single white point at the origin lands at the image centre; splat_points
  // returns RGB plus silhouette per pixel.
  rs.background = {0.0, 0.0, 0.0};
  const ad::Tensor img = splat_points(p, c, cam, rs);
  std::int64_t best = 0;
  for (std::int64_t i = 0; i < 32 * 32; ++i) {
    if (img.at(4 * i) > img.at(4 * best)) best = i;
  }
  CHECK(std::abs(best / 32 - 15.5) <= 0.5);
  CHECK(std::abs(best % 32 - 15.5) <= 0.5);
}

TEST_CASE("a mesh behind the camera renders as background; NaN vertices are numeric errors") {
  RenderSettings rs;
  rs.resolution = 32;
  rs.points = 64;
  CameraPose cam;
  TexturedMesh m = quad_mesh();
  TexturedMesh behind = normalize_bbox(m, 0.1);
  {
    // Move the quad past the eye along the eye direction.
    auto v = behind.vertices.mutable_values();
    const double ce = std::cos(cam.elevation);
    const double dir[3] = {ce * std::sin(cam.rotation), std::sin(cam.elevation), ce * std::cos(cam.rotation)};
    for (std::int64_t i = 0; i < behind.vertex_count(); ++i) {
      for (int k = 0; k < 3; ++k) v[3 * i + k] += 3.0 * dir[k];
    }
  }
  const RenderedView away = render(behind, cam, rs);
  double sil = 0.0;
  for (std::int64_t i = 0; i < away.silhouette.numel(); ++i) sil += away.silhouette.at(i);
  CHECK(sil == 0.0);

  m.vertices.mutable_values()[0] = std::nan("");
  CHECK_THROWS_AS(render(m, cam, rs), NumericError);
}

TEST_CASE("render gradients match central differences on a 2-triangle mesh at 32x32") {
  RenderSettings rs;
  rs.resolution = 32;
  rs.points = 96;
  rs.kernel_sigma = 1.5;
  const TexturedMesh m = quad_mesh();
  const CameraPose cam{0.3, 0.4, 1.2, 49.13};
  Rng wr(21);
  const ad::Tensor w_rgb = ad::Tensor::from({32, 32, 3}, normal_vector(32 * 32 * 3, wr, 1.0));
  const ad::Tensor w_sil = ad::Tensor::from({32, 32, 1}, normal_vector(32 * 32, wr, 1.0));
  auto f = [&] {
    const RenderedView v = render(m, cam, rs);
    return ad::add(ad::sum(ad::mul(v.rgb, w_rgb)), ad::sum(ad::mul(v.silhouette, w_sil)));
  };
  const auto r = check_gradients(f, {m.vertices, m.colors}, 1e-6);
  CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("rotating mesh and camera together leaves the image unchanged") {
  RenderSettings rs;
  rs.resolution = 32;
  rs.points = 512;
  const TexturedMesh m = normalize_bbox(make_primitive("cone", {0.2, 0.6, 0.9}));
  const CameraPose cam{0.35, 0.7, 1.2, 49.13};
  const RenderedView a = render(m, cam, rs);
  for (double phi : {0.4, 2.0, -1.1}) {
    CameraPose moved = cam;
    moved.rotation += phi;
    const RenderedView b = render(rotate_mesh(m, 0.0, phi), moved, rs);
    double worst = 0.0;
    for (std::int64_t i = 0; i < a.rgb.numel(); ++i) worst = std::max(worst, std::abs(a.rgb.at(i) - b.rgb.at(i)));
    for (std::int64_t i = 0; i < a.silhouette.numel(); ++i) {
      worst = std::max(worst, std::abs(a.silhouette.at(i) - b.silhouette.at(i)));
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("a downsampled 64px render is close to the 32px render") {
  const TexturedMesh m = normalize_bbox(make_primitive("torus", {0.9, 0.8, 0.1}));
  const CameraPose cam = eval_camera();
  RenderSettings lo;
  lo.resolution = 32;
  lo.points = 4096;
  RenderSettings hi = lo;
  hi.resolution = 64;
  hi.kernel_sigma = 2.0 * lo.kernel_sigma;
  const RenderedView a = render(m, cam, lo);
  const RenderedView b = render(m, cam, hi);
  const ad::Tensor down = ad::avg_pool(ad::reshape(b.rgb, {1, 64, 64, 3}), 2);
  CHECK(mean_abs_diff(ad::reshape(a.rgb, {1, 32, 32, 3}), down) < 0.1);
}

TEST_CASE("silhouette grows with the number of covering points") {
  RenderSettings rs;
  rs.resolution = 32;
  CameraPose cam;
  double prev = -1.0;
  for (int n = 1; n <= 8; ++n) {
    TexturedMesh tiny = make_mesh({{0, 0, 0}, {1e-6, 0, 0}, {0, 1e-6, 0}}, {{0, 1, 2}}, {0.5, 0.5, 0.5});
    rs.points = n;
    const RenderedView v = render(tiny, cam, rs);
    const double centre = v.silhouette.at(16 * 32 + 16);
    CHECK(centre >= prev);
    prev = centre;
  }
}

TEST_CASE("OFF and point-cloud files round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "ntf3d_mesh_io";
  std::filesystem::create_directories(dir);
  const TexturedMesh m = quad_mesh();
  write_off(dir / "q.off", m);
  const TexturedMesh back = read_off(dir / "q.off");
  CHECK(back.faces == m.faces);
  for (std::int64_t i = 0; i < m.vertices.numel(); ++i) CHECK(back.vertices.at(i) == doctest::Approx(m.vertices.at(i)));
  Rng rng(2);
  const auto cloud = sample_surface(m, 100, rng);
  write_point_cloud(dir / "c.bin", cloud);
  const auto cb = read_point_cloud(dir / "c.bin");
  CHECK(cb.points.shape()[0] == 100);
  CHECK(std::filesystem::file_size(dir / "c.bin") == 100 * 6 * 4);
  for (std::int64_t i = 0; i < 300; ++i) CHECK(cb.points.at(i) == doctest::Approx(cloud.points.at(i)).epsilon(1e-6));
  std::filesystem::remove_all(dir);
}

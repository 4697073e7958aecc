// SPDX-License-Identifier: Apache-2.0

#include "ntf3d/mesh.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "ntf3d/errors.hpp"

namespace ntf3d {

namespace {

using Vec3 = std::array<double, 3>;

Vec3 vertex_at(std::span<const double> v, std::int32_t i) { return {v[3 * i], v[3 * i + 1], v[3 * i + 2]}; }

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 u{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  const Vec3 w{c[0] - a[0], c[1] - a[1], c[2] - a[2]};
  const Vec3 n{u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]};
  return 0.5 * std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
}

void put_f32(std::ostream& os, float f) {
  auto bits = std::bit_cast<std::uint32_t>(f);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  os.write(reinterpret_cast<const char*>(&bits), 4);
}

float get_f32(std::istream& is) {
  std::uint32_t bits = 0;
  is.read(reinterpret_cast<char*>(&bits), 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  return std::bit_cast<float>(bits);
}

}  // namespace

TexturedMesh make_mesh(const std::vector<std::array<double, 3>>& vertices, const std::vector<Face>& faces,
                       const std::array<double, 3>& color) {
  const auto n = static_cast<std::int64_t>(vertices.size());
  std::vector<double> pos;
  std::vector<double> col;
  pos.reserve(vertices.size() * 3);
  col.reserve(vertices.size() * 3);
  for (const auto& v : vertices) {
    pos.insert(pos.end(), v.begin(), v.end());
    col.insert(col.end(), color.begin(), color.end());
  }
  TexturedMesh mesh{ad::Tensor::from({n, 3}, std::move(pos)), ad::Tensor::from({n, 3}, std::move(col)), faces};
  validate_faces(mesh);
  return mesh;
}

TexturedMesh make_icosphere(int level) {
  if (level < 0) throw InvalidInput("make_icosphere: negative subdivision level");
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> verts{{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                          {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  std::vector<Face> faces{{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                          {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                          {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  auto project = [](Vec3 v) {
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return Vec3{v[0] / n, v[1] / n, v[2] / n};
  };
  for (auto& v : verts) v = project(v);

  for (int l = 0; l < level; ++l) {
    std::map<std::pair<std::int32_t, std::int32_t>, std::int32_t> midpoints;
    auto midpoint = [&](std::int32_t a, std::int32_t b) {
      const auto key = std::minmax(a, b);
      if (auto it = midpoints.find(key); it != midpoints.end()) return it->second;
      const Vec3& p = verts[a];
      const Vec3& q = verts[b];
      verts.push_back(project({(p[0] + q[0]) / 2, (p[1] + q[1]) / 2, (p[2] + q[2]) / 2}));
      const auto id = static_cast<std::int32_t>(verts.size() - 1);
      midpoints.emplace(key, id);
      return id;
    };
    std::vector<Face> next;
    next.reserve(faces.size() * 4);
    for (const auto& f : faces) {
      const auto ab = midpoint(f[0], f[1]);
      const auto bc = midpoint(f[1], f[2]);
      const auto ca = midpoint(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }
  return make_mesh(verts, faces, {1.0, 1.0, 1.0});
}

void validate_faces(const TexturedMesh& mesh) {
  const auto n = mesh.vertex_count();
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    for (auto i : mesh.faces[f]) {
      if (i < 0 || i >= n) throw InvalidInput(fmt::format("face {} references vertex {} of {}", f, i, n));
    }
  }
}

std::vector<double> face_areas(const TexturedMesh& mesh) {
  const auto v = mesh.vertices.values();
  std::vector<double> areas(mesh.faces.size());
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& face = mesh.faces[f];
    areas[f] = triangle_area(vertex_at(v, face[0]), vertex_at(v, face[1]), vertex_at(v, face[2]));
  }
  return areas;
}

double BoundingBox::longest_edge() const {
  return std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
}

BoundingBox bounding_box(const ad::Tensor& vertices) {
  const auto v = vertices.values();
  if (v.empty()) throw InvalidInput("bounding_box: empty vertex set");
  BoundingBox box{{v[0], v[1], v[2]}, {v[0], v[1], v[2]}};
  for (std::size_t i = 0; i < v.size(); i += 3) {
    for (int k = 0; k < 3; ++k) {
      box.lo[k] = std::min(box.lo[k], v[i + k]);
      box.hi[k] = std::max(box.hi[k], v[i + k]);
    }
  }
  return box;
}

SurfaceDraw draw_surface(const TexturedMesh& mesh, std::int64_t n, Rng& rng) {
  if (n < 1) throw InvalidInput("draw_surface: sample count must be >= 1");
  const auto areas = face_areas(mesh);
  std::vector<double> cdf(areas.size());
  double total = 0.0;
  for (std::size_t f = 0; f < areas.size(); ++f) {
    total += areas[f];
    cdf[f] = total;
  }
  if (!(total > 0.0) || !std::isfinite(total)) throw InvalidInput("draw_surface: mesh has zero surface area");

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SurfaceDraw draw;
  draw.face.resize(static_cast<std::size_t>(n));
  draw.bary.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const double u = unit(rng) * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) --it;
    // Skip zero-area faces that share a cdf value with their successor.
    while (areas[static_cast<std::size_t>(it - cdf.begin())] == 0.0 && it + 1 != cdf.end()) ++it;
    const double r1 = std::sqrt(unit(rng));
    const double r2 = unit(rng);
    draw.face[i] = static_cast<std::int32_t>(it - cdf.begin());
    draw.bary[i] = {1.0 - r1, r1 * (1.0 - r2), r1 * r2};
  }
  return draw;
}

ad::Tensor barycentric_gather(const ad::Tensor& values, const std::vector<Face>& faces, const SurfaceDraw& draw) {
  if (values.rank() != 2) throw InvalidInput("barycentric_gather: values must be [V, C]");
  const auto c = values.shape()[1];
  const auto n = static_cast<std::int64_t>(draw.size());
  std::vector<double> out(static_cast<std::size_t>(n * c), 0.0);
  const auto v = values.values();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& face = faces[static_cast<std::size_t>(draw.face[i])];
    for (int k = 0; k < 3; ++k) {
      const double w = draw.bary[i][k];
      for (std::int64_t q = 0; q < c; ++q) out[i * c + q] += w * v[face[k] * c + q];
    }
  }
  return ad::make_result({n, c}, std::move(out), {values}, [faces, draw, n, c](ad::Node& self) {
    double* g = ad::grad_target(self, 0);
    if (!g) return;
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& face = faces[static_cast<std::size_t>(draw.face[i])];
      for (int k = 0; k < 3; ++k) {
        const double w = draw.bary[i][k];
        for (std::int64_t q = 0; q < c; ++q) g[face[k] * c + q] += w * self.grad[i * c + q];
      }
    }
  });
}

void write_off(const std::filesystem::path& path, const TexturedMesh& mesh) {
  std::ofstream os(path);
  if (!os) throw ConfigError(fmt::format("cannot write mesh file {}", path.string()));
  const auto v = mesh.vertices.values();
  const auto c = mesh.colors.values();
  os << "OFF\n" << mesh.vertex_count() << ' ' << mesh.face_count() << " 0\n";
  for (std::int64_t i = 0; i < mesh.vertex_count(); ++i) {
    os << fmt::format("{} {} {} {} {} {}\n", v[3 * i], v[3 * i + 1], v[3 * i + 2], c[3 * i], c[3 * i + 1],
                      c[3 * i + 2]);
  }
  for (const auto& f : mesh.faces) os << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
}

TexturedMesh read_off(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(fmt::format("cannot read mesh file {}", path.string()));
  std::string magic;
  std::int64_t nv = 0;
  std::int64_t nf = 0;
  std::int64_t ne = 0;
  is >> magic >> nv >> nf >> ne;
  if (magic != "OFF" || !is || nv < 0 || nf < 0) throw InvalidInput(fmt::format("{}: bad OFF header", path.string()));
  std::vector<double> pos(static_cast<std::size_t>(nv * 3));
  std::vector<double> col(static_cast<std::size_t>(nv * 3));
  for (std::int64_t i = 0; i < nv; ++i) {
    is >> pos[3 * i] >> pos[3 * i + 1] >> pos[3 * i + 2] >> col[3 * i] >> col[3 * i + 1] >> col[3 * i + 2];
  }
  std::vector<Face> faces(static_cast<std::size_t>(nf));
  for (auto& f : faces) {
    int k = 0;
    is >> k >> f[0] >> f[1] >> f[2];
    if (k != 3) throw InvalidInput(fmt::format("{}: only triangles are supported", path.string()));
  }
  if (!is) throw InvalidInput(fmt::format("{}: truncated OFF file", path.string()));
  TexturedMesh mesh{ad::Tensor::from({nv, 3}, std::move(pos)), ad::Tensor::from({nv, 3}, std::move(col)),
                    std::move(faces)};
  validate_faces(mesh);
  return mesh;
}

void write_point_cloud(const std::filesystem::path& path, const LabeledPointCloud& cloud) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError(fmt::format("cannot write point cloud {}", path.string()));
  const auto p = cloud.points.values();
  const auto c = cloud.colors.values();
  for (std::int64_t i = 0; i < cloud.points.shape()[0]; ++i) {
    for (int k = 0; k < 3; ++k) put_f32(os, static_cast<float>(p[3 * i + k]));
    for (int k = 0; k < 3; ++k) put_f32(os, static_cast<float>(c[3 * i + k]));
  }
}

LabeledPointCloud read_point_cloud(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw ConfigError(fmt::format("cannot read point cloud {}", path.string()));
  const auto bytes = static_cast<std::int64_t>(is.tellg());
  if (bytes % 24 != 0) throw InvalidInput(fmt::format("{}: size is not a multiple of 24 bytes", path.string()));
  is.seekg(0);
  const std::int64_t n = bytes / 24;
  std::vector<double> pts(static_cast<std::size_t>(n * 3));
  std::vector<double> col(static_cast<std::size_t>(n * 3));
  for (std::int64_t i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) pts[3 * i + k] = get_f32(is);
    for (int k = 0; k < 3; ++k) col[3 * i + k] = get_f32(is);
  }
  return {ad::Tensor::from({n, 3}, std::move(pts)), ad::Tensor::from({n, 3}, std::move(col)), {}};
}

}  // namespace ntf3d

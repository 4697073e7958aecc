// SPDX-License-Identifier: Apache-2.0

#include "ntf3d/data.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "json.hpp"
#include "ntf3d/errors.hpp"
#include "ntf3d/generator.hpp"

namespace ntf3d {

namespace {

using Profile = std::vector<std::array<double, 2>>;  // (radius, height), poles at both ends
constexpr double kPi = std::numbers::pi;

// Surface of revolution about +y with `segments` samples around the axis. With
// `square` the cross-sections are axis-aligned squares of half-width radius.
TexturedMesh revolve(const Profile& profile, int segments, bool square, const std::array<double, 3>& color) {
  const int rings = static_cast<int>(profile.size()) - 2;
  std::vector<std::array<double, 3>> verts;
  verts.push_back({0.0, profile.front()[1], 0.0});
  for (int k = 1; k <= rings; ++k) {
    for (int j = 0; j < segments; ++j) {
      const double phi = 2.0 * kPi * j / segments;
      const double m = square ? 1.0 / std::max(std::abs(std::cos(phi)), std::abs(std::sin(phi))) : 1.0;
      verts.push_back({m * profile[k][0] * std::cos(phi), profile[k][1], m * profile[k][0] * std::sin(phi)});
    }
  }
  verts.push_back({0.0, profile.back()[1], 0.0});
  const auto top = static_cast<std::int32_t>(verts.size() - 1);
  auto ring = [segments](int k, int j) { return static_cast<std::int32_t>(1 + (k - 1) * segments + (j % segments)); };

  std::vector<Face> faces;
  for (int j = 0; j < segments; ++j) faces.push_back({0, ring(1, j), ring(1, j + 1)});
  for (int k = 1; k < rings; ++k) {
    for (int j = 0; j < segments; ++j) {
      const auto a = ring(k, j);
      const auto b = ring(k, j + 1);
      const auto c = ring(k + 1, j + 1);
      const auto d = ring(k + 1, j);
      faces.push_back({a, c, b});
      faces.push_back({a, d, c});
    }
  }
  for (int j = 0; j < segments; ++j) faces.push_back({top, ring(rings, j + 1), ring(rings, j)});
  return make_mesh(verts, faces, color);
}

Profile sphere_profile(int steps) {
  Profile p;
  for (int k = 0; k <= steps; ++k) {
    const double t = -kPi / 2.0 + kPi * k / steps;
    p.push_back({k == 0 || k == steps ? 0.0 : std::cos(t), std::sin(t)});
  }
  return p;
}

// Flat caps with interior rings plus straight or tapered sides.
Profile capped_profile(double bottom_r, double top_r, double half_h, int side_steps, int cap_steps) {
  Profile p{{0.0, -half_h}};
  for (int k = 1; k <= cap_steps; ++k) p.push_back({bottom_r * k / cap_steps, -half_h});
  for (int k = 1; k <= side_steps; ++k) {
    const double t = static_cast<double>(k) / side_steps;
    p.push_back({bottom_r + (top_r - bottom_r) * t, -half_h + 2.0 * half_h * t});
  }
  if (top_r > 0.0) {
    for (int k = cap_steps - 1; k >= 1; --k) p.push_back({top_r * k / cap_steps, half_h});
    p.push_back({0.0, half_h});
  } else {
    p.back()[0] = 0.0;
  }
  return p;
}

Profile capsule_profile(double r, double half_len, int cap_steps, int side_steps) {
  Profile p{{0.0, -half_len - r}};
  for (int k = 1; k <= cap_steps; ++k) {
    const double t = -kPi / 2.0 + (kPi / 2.0) * k / cap_steps;
    p.push_back({r * std::cos(t), -half_len + r * std::sin(t)});
  }
  for (int k = 1; k <= side_steps; ++k) p.push_back({r, -half_len + 2.0 * half_len * k / side_steps});
  for (int k = 1; k < cap_steps; ++k) {
    const double t = (kPi / 2.0) * k / cap_steps;
    p.push_back({r * std::cos(t), half_len + r * std::sin(t)});
  }
  p.push_back({0.0, half_len + r});
  return p;
}

TexturedMesh torus(double major, double minor, int u_steps, int v_steps, const std::array<double, 3>& color) {
  std::vector<std::array<double, 3>> verts;
  for (int u = 0; u < u_steps; ++u) {
    const double a = 2.0 * kPi * u / u_steps;
    for (int v = 0; v < v_steps; ++v) {
      const double b = 2.0 * kPi * v / v_steps;
      const double rr = major + minor * std::cos(b);
      verts.push_back({rr * std::cos(a), minor * std::sin(b), rr * std::sin(a)});
    }
  }
  auto idx = [&](int u, int v) { return static_cast<std::int32_t>((u % u_steps) * v_steps + (v % v_steps)); };
  std::vector<Face> faces;
  for (int u = 0; u < u_steps; ++u) {
    for (int v = 0; v < v_steps; ++v) {
      faces.push_back({idx(u, v), idx(u + 1, v), idx(u + 1, v + 1)});
      faces.push_back({idx(u, v), idx(u + 1, v + 1), idx(u, v + 1)});
    }
  }
  return make_mesh(verts, faces, color);
}

double signed_volume(const TexturedMesh& mesh) {
  const auto v = mesh.vertices.values();
  double vol = 0.0;
  for (const auto& f : mesh.faces) {
    const double* a = &v[3 * f[0]];
    const double* b = &v[3 * f[1]];
    const double* c = &v[3 * f[2]];
    vol += a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0]);
  }
  return vol / 6.0;
}

TexturedMesh orient_outward(TexturedMesh mesh) {
  if (signed_volume(mesh) < 0.0) {
    for (auto& f : mesh.faces) std::swap(f[1], f[2]);
  }
  return mesh;
}

TexturedMesh scale_axes(const TexturedMesh& mesh, const std::array<double, 3>& s) {
  std::vector<double> v(mesh.vertices.values().begin(), mesh.vertices.values().end());
  for (size_t i = 0; i < v.size(); ++i) v[i] *= s[i % 3];
  TexturedMesh out = mesh;
  out.vertices = ad::Tensor::from(mesh.vertices.shape(), std::move(v));
  return out;
}

double size_factor(const std::string& size) {
  if (size.empty()) return 1.0;
  if (size == "small") return 0.6;
  if (size == "large") return 1.6;
  throw ConfigError(fmt::format("unknown size attribute '{}'", size));
}

std::vector<std::vector<std::int32_t>> one_rings(const TexturedMesh& mesh) {
  std::vector<std::vector<std::int32_t>> nbr(static_cast<size_t>(mesh.vertex_count()));
  for (const auto& f : mesh.faces) {
    for (int e = 0; e < 3; ++e) {
      const auto i = f[e];
      const auto j = f[(e + 1) % 3];
      nbr[i].push_back(j);
      nbr[j].push_back(i);
    }
  }
  for (auto& n : nbr) {
    std::sort(n.begin(), n.end());
    n.erase(std::unique(n.begin(), n.end()), n.end());
  }
  return nbr;
}

std::string rel(const std::filesystem::path& p) { return p.generic_string(); }

}  // namespace

const std::vector<std::string>& default_shapes() {
  static const std::vector<std::string> shapes{"sphere", "box",      "cylinder", "cone",
                                               "torus",  "ellipsoid", "pyramid", "capsule"};
  return shapes;
}

const std::vector<NamedColor>& default_colors() {
  static const std::vector<NamedColor> colors{
      {"red", {0.85, 0.1, 0.1}},   {"green", {0.1, 0.7, 0.15}}, {"blue", {0.1, 0.2, 0.85}},
      {"yellow", {0.9, 0.85, 0.1}}, {"purple", {0.55, 0.1, 0.7}}, {"cyan", {0.1, 0.8, 0.85}}};
  return colors;
}

const std::vector<std::string>& default_sizes() {
  static const std::vector<std::string> sizes{"", "small", "large"};
  return sizes;
}

std::string make_caption(const Attributes& a) {
  std::string out = "a";
  for (const auto* part : {&a.size, &a.color, &a.shape}) {
    if (!part->empty()) out += " " + *part;
  }
  return out;
}

TexturedMesh make_primitive(const std::string& shape, const std::array<double, 3>& color) {
  TexturedMesh m;
  if (shape == "sphere") {
    m = revolve(sphere_profile(10), 20, false, color);
  } else if (shape == "ellipsoid") {
    m = scale_axes(revolve(sphere_profile(10), 20, false, color), {1.0, 0.5, 0.5});
  } else if (shape == "box") {
    m = revolve(capped_profile(0.5, 0.5, 0.5, 6, 4), 24, true, color);
  } else if (shape == "cylinder") {
    m = revolve(capped_profile(0.5, 0.5, 0.8, 6, 3), 20, false, color);
  } else if (shape == "cone") {
    m = revolve(capped_profile(0.7, 0.0, 0.7, 5, 3), 20, false, color);
  } else if (shape == "pyramid") {
    m = revolve(capped_profile(0.6, 0.0, 0.55, 6, 4), 24, true, color);
  } else if (shape == "capsule") {
    m = revolve(capsule_profile(0.4, 0.6, 4, 4), 20, false, color);
  } else if (shape == "torus") {
    m = torus(1.0, 0.35, 24, 10, color);
  } else {
    throw ConfigError(fmt::format("unknown shape '{}'", shape));
  }
  return orient_outward(std::move(m));
}

TexturedMesh rotate_mesh(const TexturedMesh& mesh, double tilt, double yaw) {
  const double ct = std::cos(tilt), st = std::sin(tilt), cy = std::cos(yaw), sy = std::sin(yaw);
  std::vector<double> v(mesh.vertices.values().begin(), mesh.vertices.values().end());
  for (size_t i = 0; i < v.size(); i += 3) {
    const double x = v[i];
    const double y = v[i + 1] * ct - v[i + 2] * st;
    const double z = v[i + 1] * st + v[i + 2] * ct;
    v[i] = x * cy + z * sy;
    v[i + 1] = y;
    v[i + 2] = -x * sy + z * cy;
  }
  TexturedMesh out = mesh;
  out.vertices = ad::Tensor::from(mesh.vertices.shape(), std::move(v));
  return out;
}

TexturedMesh normalize_bbox(const TexturedMesh& mesh, double target) {
  if (!(target > 0.0)) throw InvalidInput("normalize_bbox: target must be positive");
  ad::NoGradGuard no_grad;
  TexturedMesh out = mesh;
  out.vertices = normalize_bbox_tensor(mesh.vertices.detach(), target);
  return out;
}

std::vector<CaptionedObject> make_dataset(const DatasetConfig& config, const Embedder& embedder) {
  if (config.shapes.empty() || config.colors.empty() || config.sizes.empty()) {
    throw ConfigError("make_dataset: shape, color and size lists must be non-empty");
  }
  if (config.views_per_object < 1 || config.points_per_cloud < 1) {
    throw ConfigError("make_dataset: views and points per object must be positive");
  }
  ad::NoGradGuard no_grad;
  std::vector<CaptionedObject> objects;
  const double max_tilt = config.max_tilt_deg * kPi / 180.0;
  for (const auto& shape : config.shapes) {
    for (const auto& color : config.colors) {
      for (const auto& size : config.sizes) {
        CaptionedObject obj;
        obj.id = static_cast<int>(objects.size());
        obj.attributes = {shape, color.name, size};
        obj.caption = make_caption(obj.attributes);
        std::seed_seq seq{config.seed, static_cast<std::uint64_t>(obj.id)};
        Rng rng(seq);

        TexturedMesh m = scale_axes(make_primitive(shape, color.rgb), {1.0, size_factor(size), 1.0});
        std::uniform_real_distribution<double> tilt(-max_tilt, max_tilt);
        std::uniform_real_distribution<double> yaw(0.0, 2.0 * kPi);
        const double a = tilt(rng);
        m = normalize_bbox(rotate_mesh(m, a, yaw(rng)), kBboxTarget);

        std::uniform_real_distribution<double> jitter(-config.color_jitter, config.color_jitter);
        auto cv = m.colors.mutable_values();
        for (auto& c : cv) c = std::clamp(c + jitter(rng), 0.0, 1.0);
        obj.mesh = std::move(m);

        for (int k = 0; k < config.views_per_object; ++k) {
          RenderedView view = render(obj.mesh, sample_camera(rng), config.render);
          view.caption_id = obj.id;
          obj.views.push_back(std::move(view));
        }
        obj.text_embedding = embedder.embed_text(obj.caption).vector;
        obj.cloud = sample_surface(obj.mesh, config.points_per_cloud, rng);
        obj.cloud.caption_embedding = obj.text_embedding;
        objects.push_back(std::move(obj));
      }
    }
  }
  return objects;
}

void calibrate_embedder(Embedder& embedder, const std::vector<CaptionedObject>& objects,
                        const RenderSettings& settings, double ridge) {
  if (objects.empty()) throw InvalidInput("calibrate_embedder: no objects");
  ad::NoGradGuard no_grad;
  std::vector<ad::Tensor> feature_blocks;
  std::vector<std::vector<double>> targets;
  for (const auto& obj : objects) {
    std::vector<RenderedView> views = obj.views;
    views.push_back(render(obj.mesh, eval_camera(), settings));
    feature_blocks.push_back(embedder.image_features(stack_rgb(views)));
    for (size_t k = 0; k < views.size(); ++k) targets.push_back(obj.text_embedding);
  }
  embedder.calibrate(ad::concat_first(feature_blocks), targets, ridge);
}

std::vector<double> laplacian_delta(const TexturedMesh& mesh) {
  const auto nbr = one_rings(mesh);
  const auto v = mesh.vertices.values();
  std::vector<double> delta(nbr.size());
  for (size_t i = 0; i < nbr.size(); ++i) {
    if (nbr[i].empty()) throw InvalidInput(fmt::format("laplacian_delta: vertex {} has no neighbours", i));
    std::array<double, 3> mean{};
    for (auto j : nbr[i]) {
      for (int k = 0; k < 3; ++k) mean[k] += v[3 * j + k];
    }
    double s = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double d = v[3 * i + k] - mean[k] / static_cast<double>(nbr[i].size());
      s += d * d;
    }
    delta[i] = std::sqrt(s);
  }
  return delta;
}

int connected_components(const TexturedMesh& mesh) {
  std::vector<std::int32_t> parent(static_cast<size_t>(mesh.vertex_count()));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::int32_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& f : mesh.faces) {
    for (int e = 1; e < 3; ++e) parent[find(f[e])] = find(f[0]);
  }
  int count = 0;
  for (size_t i = 0; i < parent.size(); ++i) count += find(static_cast<std::int32_t>(i)) == static_cast<std::int32_t>(i);
  return count;
}

CurationReport curate(const TexturedMesh& mesh, std::pair<double, double> band, int object_id) {
  if (!(band.first >= 0.0 && band.first <= band.second)) throw InvalidInput("curate: band must satisfy 0 <= lo <= hi");
  CurationReport r;
  r.object_id = object_id;
  validate_faces(mesh);
  if (connected_components(mesh) > 1) {
    r.rejection_reason = "multiple components";
    return r;
  }
  std::vector<double> delta;
  try {
    delta = laplacian_delta(mesh);
  } catch (const InvalidInput& e) {
    r.rejection_reason = e.what();
    return r;
  }
  r.mean_delta = std::accumulate(delta.begin(), delta.end(), 0.0) / static_cast<double>(delta.size());
  if (r.mean_delta < band.first) {
    r.rejection_reason = "too flat";
  } else if (r.mean_delta > band.second) {
    r.rejection_reason = "too rough";
  } else {
    r.accepted = true;
  }
  return r;
}

std::filesystem::path write_dataset(const std::vector<CaptionedObject>& objects, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  for (const char* sub : {"meshes", "views", "clouds"}) fs::create_directories(dir / sub);
  const fs::path manifest = dir / "manifest.jsonl";
  std::ofstream os(manifest);
  if (!os) throw ConfigError(fmt::format("cannot write {}", manifest.string()));
  for (const auto& obj : objects) {
    const fs::path mesh_rel = fs::path("meshes") / fmt::format("obj_{:04d}.off", obj.id);
    const fs::path cloud_rel = fs::path("clouds") / fmt::format("obj_{:04d}.bin", obj.id);
    write_off(dir / mesh_rel, obj.mesh);
    write_point_cloud(dir / cloud_rel, obj.cloud);
    nlohmann::json views = nlohmann::json::array();
    nlohmann::json cams = nlohmann::json::array();
    for (size_t k = 0; k < obj.views.size(); ++k) {
      const fs::path rgb = fs::path("views") / fmt::format("obj_{:04d}_v{}.ppm", obj.id, k);
      const fs::path mask = fs::path("views") / fmt::format("obj_{:04d}_v{}.pgm", obj.id, k);
      write_view_images(obj.views[k], dir / rgb, dir / mask);
      views.push_back({{"rgb", rel(rgb)}, {"mask", rel(mask)}});
      const auto& c = obj.views[k].camera;
      cams.push_back({{"elevation", c.elevation}, {"rotation", c.rotation}, {"radius", c.radius}, {"fov", c.fov_deg}});
    }
    nlohmann::json rec{{"id", obj.id},
                       {"caption", obj.caption},
                       {"attributes", {{"shape", obj.attributes.shape}, {"color", obj.attributes.color},
                                       {"size", obj.attributes.size}}},
                       {"mesh", rel(mesh_rel)},
                       {"views", views},
                       {"cameras", cams},
                       {"point_cloud", rel(cloud_rel)}};
    os << rec.dump() << '\n';
  }
  return manifest;
}

}  // namespace ntf3d

// SPDX-License-Identifier: Apache-2.0

#include "ntf3d/render.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ntf3d/errors.hpp"

namespace ntf3d {

namespace {

using Vec3 = std::array<double, 3>;

constexpr double kNearPlane = 1e-3;
constexpr double kCutoffSigmas = 3.0;
constexpr double kBlendEps = 1e-12;

struct CameraFrame {
  Vec3 eye;
  Vec3 right;
  Vec3 up;
  Vec3 forward;
  double focal;  // pixels
  double center;
};

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

Vec3 normalized(const Vec3& v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

CameraFrame make_frame(const CameraPose& cam, int resolution) {
  if (!(cam.radius > 0.0)) throw InvalidInput("camera radius must be positive");
  if (!(cam.fov_deg > 0.0 && cam.fov_deg < 180.0)) throw InvalidInput("camera fov must lie in (0, 180)");
  CameraFrame f;
  const double ce = std::cos(cam.elevation);
  f.eye = {cam.radius * ce * std::sin(cam.rotation), cam.radius * std::sin(cam.elevation),
           cam.radius * ce * std::cos(cam.rotation)};
  f.forward = normalized({-f.eye[0], -f.eye[1], -f.eye[2]});
  f.right = normalized(cross(f.forward, {0.0, 1.0, 0.0}));
  f.up = cross(f.right, f.forward);
  const double half_fov = cam.fov_deg * std::numbers::pi / 360.0;
  f.center = resolution / 2.0;
  f.focal = f.center / std::tan(half_fov);
  return f;
}

}  // namespace

CameraPose sample_camera(Rng& rng) {
  std::uniform_real_distribution<double> elev(0.0, kMaxTrainElevation);
  std::uniform_real_distribution<double> rot(0.0, 2.0 * std::numbers::pi);
  CameraPose cam;
  cam.elevation = elev(rng);
  cam.rotation = rot(rng);
  return cam;
}

CameraPose eval_camera() {
  CameraPose cam;
  cam.elevation = 45.0 * std::numbers::pi / 180.0;
  cam.rotation = 30.0 * std::numbers::pi / 180.0;
  return cam;
}

std::pair<CameraPose, CameraPose> front_back_cameras(Rng& rng) {
  CameraPose front = sample_camera(rng);
  CameraPose back = front;
  back.rotation = front.rotation + std::numbers::pi;
  return {front, back};
}

std::array<double, 5> pose_features(const CameraPose& cam) {
  return {std::sin(cam.elevation), std::cos(cam.elevation), std::sin(cam.rotation), std::cos(cam.rotation),
          cam.radius};
}

ad::Tensor splat_points(const ad::Tensor& points, const ad::Tensor& colors, const CameraPose& cam,
                        const RenderSettings& settings) {
  if (points.rank() != 2 || points.shape()[1] != 3 || colors.shape() != points.shape()) {
    throw InvalidInput(fmt::format("splat_points: expected matching [M, 3] inputs, got {} and {}",
                                   ad::shape_str(points.shape()), ad::shape_str(colors.shape())));
  }
  const int res = settings.resolution;
  if (res <= 0) throw InvalidInput("splat_points: resolution must be positive");
  const double sigma = settings.kernel_sigma;
  const double temp = settings.depth_temp;
  if (!(sigma > 0.0) || !(temp > 0.0)) throw InvalidInput("splat_points: kernel_sigma and depth_temp must be > 0");
  const auto pv = points.values();
  for (double v : pv) {
    if (!std::isfinite(v)) throw NumericError("splat_points: non-finite point coordinate");
  }
  const auto cv = colors.values();
  const CameraFrame frame = make_frame(cam, res);
  const std::int64_t m = points.shape()[0];
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  const double cutoff = kCutoffSigmas * sigma;
  const double cutoff_val = std::exp(-cutoff * cutoff * inv2s2);
  const double kscale = 1.0 / (1.0 - cutoff_val);

  // Per-point projection, kept for the backward pass.
  struct Projected {
    double u, v, xc, yc, zc, w;
    bool visible;
  };
  std::vector<Projected> proj(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    const Vec3 d{pv[3 * i] - frame.eye[0], pv[3 * i + 1] - frame.eye[1], pv[3 * i + 2] - frame.eye[2]};
    Projected& p = proj[i];
    p.xc = dot(d, frame.right);
    p.yc = dot(d, frame.up);
    p.zc = dot(d, frame.forward);
    p.visible = p.zc > kNearPlane;
    if (!p.visible) continue;
    p.u = frame.center + frame.focal * p.xc / p.zc;
    p.v = frame.center - frame.focal * p.yc / p.zc;
    p.w = std::exp(-(p.zc - cam.radius) / temp);
  }

  // Accumulate weight and weighted color per pixel.
  const std::size_t npix = static_cast<std::size_t>(res) * res;
  std::vector<double> wsum(npix, 0.0);
  std::vector<double> csum(npix * 3, 0.0);
  auto for_each_pixel = [res, cutoff, inv2s2, cutoff_val, kscale](const Projected& p, auto&& fn) {
    const int x0 = std::max(0, static_cast<int>(std::floor(p.u - cutoff)));
    const int x1 = std::min(res - 1, static_cast<int>(std::ceil(p.u + cutoff)));
    const int y0 = std::max(0, static_cast<int>(std::floor(p.v - cutoff)));
    const int y1 = std::min(res - 1, static_cast<int>(std::ceil(p.v + cutoff)));
    for (int y = y0; y <= y1; ++y) {
      const double dy = (y + 0.5) - p.v;
      for (int x = x0; x <= x1; ++x) {
        const double dx = (x + 0.5) - p.u;
        const double r2 = dx * dx + dy * dy;
        if (r2 >= cutoff * cutoff) continue;
        const double g = std::exp(-r2 * inv2s2);
        fn(static_cast<std::size_t>(y) * res + x, dx, dy, (g - cutoff_val) * kscale, g * kscale);
      }
    }
  };
  for (std::int64_t i = 0; i < m; ++i) {
    const Projected& p = proj[i];
    if (!p.visible) continue;
    const double c0 = cv[3 * i];
    const double c1 = cv[3 * i + 1];
    const double c2 = cv[3 * i + 2];
    for_each_pixel(p, [&](std::size_t q, double, double, double k, double) {
      const double a = p.w * k;
      wsum[q] += a;
      csum[3 * q] += a * c0;
      csum[3 * q + 1] += a * c1;
      csum[3 * q + 2] += a * c2;
    });
  }

  std::vector<double> out(npix * 4);
  const auto& bg = settings.background;
  for (std::size_t q = 0; q < npix; ++q) {
    const double s = -std::expm1(-wsum[q]);
    for (int k = 0; k < 3; ++k) {
      const double blend = csum[3 * q + k] / (wsum[q] + kBlendEps);
      out[4 * q + k] = s * blend + (1.0 - s) * bg[k];
    }
    out[4 * q + 3] = s;
  }

  return ad::make_result(
      {res, res, 4}, std::move(out), {points, colors},
      [proj = std::move(proj), wsum = std::move(wsum), csum = std::move(csum), frame, bg, res, m, inv2s2, temp,
       for_each_pixel](ad::Node& self) {
        const auto& cv = self.inputs[1]->value;
        double* gp = ad::grad_target(self, 0);
        double* gc = ad::grad_target(self, 1);
        const std::size_t npix = static_cast<std::size_t>(res) * res;
        // Upstream gradient expressed on the per-pixel accumulators.
        std::vector<double> g_w(npix);
        std::vector<double> g_c(npix * 3);
        for (std::size_t q = 0; q < npix; ++q) {
          const double denom = wsum[q] + kBlendEps;
          const double s = -std::expm1(-wsum[q]);
          double g_s = self.grad[4 * q + 3];
          double g_w_blend = 0.0;
          for (int k = 0; k < 3; ++k) {
            const double blend = csum[3 * q + k] / denom;
            const double g_rgb = self.grad[4 * q + k];
            g_s += g_rgb * (blend - bg[k]);
            const double g_blend = g_rgb * s;
            g_c[3 * q + k] = g_blend / denom;
            g_w_blend -= g_blend * blend / denom;
          }
          g_w[q] = g_w_blend + g_s * (1.0 - s);
        }
        for (std::int64_t i = 0; i < m; ++i) {
          const auto& p = proj[i];
          if (!p.visible) continue;
          const double c0 = cv[3 * i];
          const double c1 = cv[3 * i + 1];
          const double c2 = cv[3 * i + 2];
          double g_u = 0.0;
          double g_v = 0.0;
          double g_pw = 0.0;
          double gc0 = 0.0;
          double gc1 = 0.0;
          double gc2 = 0.0;
          for_each_pixel(p, [&](std::size_t q, double dx, double dy, double k, double g_raw) {
            const double g_a = g_w[q] + g_c[3 * q] * c0 + g_c[3 * q + 1] * c1 + g_c[3 * q + 2] * c2;
            const double a = p.w * k;
            gc0 += a * g_c[3 * q];
            gc1 += a * g_c[3 * q + 1];
            gc2 += a * g_c[3 * q + 2];
            g_pw += g_a * k;
            // dK/du = g_raw * (dx / sigma^2), since dx = pixel - u.
            const double dk = g_a * p.w * g_raw * 2.0 * inv2s2;
            g_u += dk * dx;
            g_v += dk * dy;
          });
          if (gc) {
            gc[3 * i] += gc0;
            gc[3 * i + 1] += gc1;
            gc[3 * i + 2] += gc2;
          }
          if (gp) {
            const double inv_z = 1.0 / p.zc;
            const double g_xc = g_u * frame.focal * inv_z;
            const double g_yc = -g_v * frame.focal * inv_z;
            const double g_zc = -g_u * frame.focal * p.xc * inv_z * inv_z + g_v * frame.focal * p.yc * inv_z * inv_z -
                                g_pw * p.w / temp;
            for (int k = 0; k < 3; ++k) {
              gp[3 * i + k] += g_xc * frame.right[k] + g_yc * frame.up[k] + g_zc * frame.forward[k];
            }
          }
        }
      });
}

RenderedView render(const TexturedMesh& mesh, const CameraPose& cam, const RenderSettings& settings) {
  for (double v : mesh.vertices.values()) {
    if (!std::isfinite(v)) throw NumericError("render: mesh has non-finite vertices");
  }
  Rng rng(settings.sample_seed);
  const SurfaceDraw draw = draw_surface(mesh, settings.points, rng);
  const ad::Tensor pts = barycentric_gather(mesh.vertices, mesh.faces, draw);
  const ad::Tensor col = barycentric_gather(mesh.colors, mesh.faces, draw);
  const ad::Tensor image = splat_points(pts, col, cam, settings);
  return {ad::slice_last(image, 0, 3), ad::slice_last(image, 3, 4), cam, -1};
}

namespace {

ad::Tensor stack_field(const std::vector<RenderedView>& views, bool rgb) {
  if (views.empty()) throw InvalidInput("stack: no views");
  std::vector<ad::Tensor> parts;
  parts.reserve(views.size());
  for (const auto& v : views) {
    const ad::Tensor& t = rgb ? v.rgb : v.silhouette;
    ad::Shape s{1};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    parts.push_back(ad::reshape(t, s));
  }
  return ad::concat_first(parts);
}

}  // namespace

ad::Tensor stack_rgb(const std::vector<RenderedView>& views) { return stack_field(views, true); }
ad::Tensor stack_silhouette(const std::vector<RenderedView>& views) { return stack_field(views, false); }

void write_view_images(const RenderedView& view, const std::filesystem::path& rgb_path,
                       const std::filesystem::path& mask_path) {
  const auto h = view.rgb.shape()[0];
  const auto w = view.rgb.shape()[1];
  auto to_byte = [](double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  {
    std::ofstream os(rgb_path, std::ios::binary);
    if (!os) throw ConfigError(fmt::format("cannot write {}", rgb_path.string()));
    os << "P6\n" << w << ' ' << h << "\n255\n";
    for (double v : view.rgb.values()) os.put(static_cast<char>(to_byte(v)));
  }
  std::ofstream os(mask_path, std::ios::binary);
  if (!os) throw ConfigError(fmt::format("cannot write {}", mask_path.string()));
  os << "P5\n" << w << ' ' << h << "\n255\n";
  for (double v : view.silhouette.values()) os.put(static_cast<char>(to_byte(v)));
}

RenderedView read_ppm_view(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError(fmt::format("cannot read image {}", path.string()));
  std::string magic;
  int w = 0;
  int h = 0;
  int maxval = 0;
  is >> magic >> w >> h >> maxval;
  is.get();
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) {
    throw InvalidInput(fmt::format("{}: expected an 8-bit binary PPM", path.string()));
  }
  std::vector<double> rgb(static_cast<std::size_t>(w) * h * 3);
  std::vector<double> sil(static_cast<std::size_t>(w) * h);
  for (auto& v : rgb) v = static_cast<unsigned char>(is.get()) / 255.0;
  if (!is) throw InvalidInput(fmt::format("{}: truncated image", path.string()));
  for (std::size_t q = 0; q < sil.size(); ++q) {
    const bool background = rgb[3 * q] > 0.99 && rgb[3 * q + 1] > 0.99 && rgb[3 * q + 2] > 0.99;
    sil[q] = background ? 0.0 : 1.0;
  }
  RenderedView view;
  view.rgb = ad::Tensor::from({h, w, 3}, std::move(rgb));
  view.silhouette = ad::Tensor::from({h, w, 1}, std::move(sil));
  return view;
}

}  // namespace ntf3d

// SPDX-License-Identifier: Apache-2.0

#include "ntf3d/eval.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "ntf3d/errors.hpp"

namespace ntf3d {

namespace {

std::vector<std::vector<double>> rows_of(const ad::Tensor& t) {
  const auto n = t.shape()[0];
  const auto d = t.shape()[1];
  std::vector<std::vector<double>> out(static_cast<size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[i].assign(t.values().begin() + i * d, t.values().begin() + (i + 1) * d);
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::size_t argmax_dot(const std::vector<double>& q, const std::vector<std::vector<double>>& keys) {
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < keys.size(); ++j) {
    const double s = dot(q, keys[j]);
    if (s > best_score) {
      best_score = s;
      best = j;
    }
  }
  return best;
}

}  // namespace

double top1_retrieval(const std::vector<std::vector<double>>& queries, const std::vector<std::vector<double>>& keys) {
  if (queries.empty() || queries.size() != keys.size()) throw InvalidInput("top1_retrieval: need matching rows");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) hits += argmax_dot(queries[i], keys) == i;
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

RPrecision r_precision(const std::vector<std::string>& prompts, const ShotRenderer& renderer, int shots,
                       const Embedder& embedder, Rng& rng) {
  if (shots < 1) throw InvalidInput("r_precision: shots must be >= 1");
  if (prompts.empty()) throw ConfigError("r_precision: no prompts");
  if (std::set<std::string>(prompts.begin(), prompts.end()).size() != prompts.size()) {
    throw ConfigError("r_precision: duplicate prompts make retrieval ill-posed");
  }
  ad::NoGradGuard no_grad;
  std::vector<TextEmbedding> texts;
  std::vector<std::vector<double>> text_rows;
  for (const auto& p : prompts) {
    texts.push_back(embedder.embed_text(p));
    text_rows.push_back(texts.back().vector);
  }
  RPrecision out;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    std::vector<RenderedView> views = renderer(i, texts[i], shots, rng);
    if (static_cast<int>(views.size()) != shots) throw ContractError("r_precision: renderer returned wrong shot count");
    const auto emb = rows_of(embedder.embed_images(stack_rgb(views)));
    const std::size_t keep = argmax_dot(text_rows[i], emb);
    const std::size_t retrieved = argmax_dot(emb[keep], text_rows);
    PromptRecord rec{prompts[i], static_cast<int>(keep), prompts[retrieved], retrieved == i, views[keep]};
    hits += rec.hit;
    out.records.push_back(std::move(rec));
  }
  out.precision = static_cast<double>(hits) / static_cast<double>(prompts.size());
  return out;
}

ViewInvariance view_invariance_metrics(const std::vector<RenderedView>& front, const std::vector<RenderedView>& back,
                                       const ViewNet& view_net, const Embedder& embedder) {
  if (front.empty() || front.size() != back.size()) {
    throw InvalidInput("view_invariance_metrics: need matching, non-empty front and back views");
  }
  ad::NoGradGuard no_grad;
  std::vector<CameraPose> front_cams;
  std::vector<CameraPose> back_cams;
  for (std::size_t i = 0; i < front.size(); ++i) {
    front_cams.push_back(front[i].camera);
    back_cams.push_back(back[i].camera);
  }
  const ad::Tensor ef = embedder.embed_images(stack_rgb(front));
  const ad::Tensor eb = embedder.embed_images(stack_rgb(back));
  const auto pf = rows_of(ef);
  const auto pb = rows_of(eb);
  const auto vf = rows_of(view_net.codes(ef, front_cams));
  const auto vb = rows_of(view_net.codes(eb, back_cams));
  ViewInvariance out;
  for (std::size_t i = 0; i < front.size(); ++i) {
    out.s += dot(pf[i], pb[i]);
    out.s_tilde += dot(vf[i], vb[i]);
  }
  out.s /= static_cast<double>(front.size());
  out.s_tilde /= static_cast<double>(front.size());
  out.r = top1_retrieval(pf, pb);
  out.r_tilde = top1_retrieval(vf, vb);
  return out;
}

ViewInvariance view_invariance_metrics(const std::vector<TexturedMesh>& meshes, const ViewNet& view_net,
                                       const Embedder& embedder, const RenderSettings& settings, Rng& rng) {
  if (meshes.empty()) throw InvalidInput("view_invariance_metrics: no objects");
  ad::NoGradGuard no_grad;
  std::vector<RenderedView> front;
  std::vector<RenderedView> back;
  for (const auto& m : meshes) {
    const auto [cf, cb] = front_back_cameras(rng);
    front.push_back(render(m, cf, settings));
    back.push_back(render(m, cb, settings));
  }
  return view_invariance_metrics(front, back, view_net, embedder);
}

std::vector<std::vector<std::string>> captions_by_modifier_count(const DatasetConfig& config) {
  std::vector<std::vector<std::string>> groups(3);
  for (const auto& shape : config.shapes) {
    groups[0].push_back(make_caption({shape, "", ""}));
    for (const auto& color : config.colors) {
      groups[1].push_back(make_caption({shape, color.name, ""}));
      for (const auto& size : config.sizes) {
        if (!size.empty()) groups[2].push_back(make_caption({shape, color.name, size}));
      }
    }
  }
  return groups;
}

std::vector<SigmaGroup> sigma_trend(const std::vector<std::vector<std::string>>& groups, const SigmaNet& sigma_net,
                                    const Embedder& embedder, Rng& rng, int draws) {
  if (draws < 2) throw InvalidInput("sigma_trend: need at least two draws");
  ad::NoGradGuard no_grad;
  std::vector<SigmaGroup> out;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) continue;
    SigmaGroup sg;
    sg.modifiers = static_cast<int>(g);
    const ad::Tensor t = embedder.embed_texts(groups[g]);
    const ad::Tensor sigma = sigma_net.sigma(t);
    double sum = 0.0;
    for (double v : sigma.values()) sum += v;
    sg.mean_sigma = sum / static_cast<double>(sigma.numel());

    const auto n = t.shape()[0];
    const auto d = t.shape()[1];
    std::vector<int> ids(static_cast<size_t>(n), -1);
    std::vector<double> mean(static_cast<size_t>(n * d), 0.0);
    std::vector<double> sq(static_cast<size_t>(n * d), 0.0);
    for (int k = 0; k < draws; ++k) {
      const auto sample = inject_noise(t, ids, sigma_net, rng).sample;
      for (std::int64_t i = 0; i < n * d; ++i) {
        mean[i] += sample.at(i);
        sq[i] += sample.at(i) * sample.at(i);
      }
    }
    double var = 0.0;
    for (std::int64_t i = 0; i < n * d; ++i) {
      const double m = mean[i] / draws;
      var += (sq[i] / draws - m * m) * draws / (draws - 1.0);
    }
    sg.field_variance = var / static_cast<double>(n);
    out.push_back(sg);
  }
  return out;
}

std::array<double, 3> foreground_color(const RenderedView& view, const std::array<double, 3>& background) {
  const auto rgb = view.rgb.values();
  const auto sil = view.silhouette.values();
  std::array<double, 3> acc{};
  std::size_t count = 0;
  for (std::size_t p = 0; p < sil.size(); ++p) {
    const double s = sil[p];
    if (s <= 0.5) continue;
    for (int c = 0; c < 3; ++c) acc[c] += (rgb[3 * p + c] - (1.0 - s) * background[c]) / s;
    ++count;
  }
  if (count == 0) return {std::nan(""), std::nan(""), std::nan("")};
  for (auto& a : acc) a /= static_cast<double>(count);
  return acc;
}

std::string nearest_color(const std::array<double, 3>& rgb, const std::vector<NamedColor>& anchors) {
  if (anchors.empty()) throw InvalidInput("nearest_color: empty anchor table");
  if (!std::isfinite(rgb[0])) return "";
  std::string best;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& a : anchors) {
    double d = 0.0;
    for (int c = 0; c < 3; ++c) d += (rgb[c] - a.rgb[c]) * (rgb[c] - a.rgb[c]);
    if (d < best_d) {
      best_d = d;
      best = a.name;
    }
  }
  return best;
}

double hue_match(const std::vector<RenderedView>& views, const std::vector<std::string>& colors,
                 const std::vector<NamedColor>& anchors, const std::array<double, 3>& background) {
  if (views.empty() || views.size() != colors.size()) throw InvalidInput("hue_match: need one color per view");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    hits += nearest_color(foreground_color(views[i], background), anchors) == colors[i];
  }
  return static_cast<double>(hits) / static_cast<double>(views.size());
}

void EvalReport::write(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw ConfigError(fmt::format("cannot write {}", path.string()));
  os << fmt::format("config_hash={:016x}\nseed={}\n", config_hash, seed);
  for (const auto& [k, v] : metrics) os << fmt::format("{}={:.6f}\n", k, v);
}

void EvalReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw ConfigError(fmt::format("cannot write {}", path.string()));
  os << "prompt,selected_shot,retrieved,hit\n";
  for (const auto& r : records) os << fmt::format("\"{}\",{},\"{}\",{}\n", r.prompt, r.selected_shot, r.retrieved, r.hit ? 1 : 0);
}

}  // namespace ntf3d

// SPDX-License-Identifier: Apache-2.0

#include "ntf3d/pipeline.hpp"

#include <fmt/format.h>

#include <algorithm>

#include "ntf3d/errors.hpp"

namespace ntf3d {

Workspace prepare_workspace(const ExperimentConfig& config) {
  Workspace ws{resolve(config), Embedder(embedder_config(config)), {}, {}};
  for (auto& obj : make_dataset(ws.config.dataset, ws.embedder)) {
    CurationReport r = curate(obj.mesh, ws.config.curation_band, obj.id);
    if (r.accepted) {
      ws.objects.push_back(std::move(obj));
    } else {
      ws.rejected.push_back(std::move(r));
    }
  }
  if (ws.objects.empty()) throw ConfigError("every object was rejected by curation");
  calibrate_embedder(ws.embedder, ws.objects, ws.config.dataset.render);
  return ws;
}

ShotRenderer text_shot_renderer(const Trainer& trainer, const RenderSettings& settings) {
  return [&trainer, settings](std::size_t, const TextEmbedding& text, int shots, Rng& rng) {
    std::vector<double> rows;
    for (int k = 0; k < shots; ++k) rows.insert(rows.end(), text.vector.begin(), text.vector.end());
    const auto dim = static_cast<std::int64_t>(text.vector.size());
    const auto meshes = trainer.generate_from_text(ad::Tensor::from({shots, dim}, std::move(rows)), rng);
    std::vector<RenderedView> views;
    for (const auto& m : meshes) views.push_back(render(m, eval_camera(), settings));
    return views;
  };
}

EvalReport evaluate(const Trainer& trainer, const Workspace& ws, const std::vector<std::string>& metrics,
                    std::uint64_t seed) {
  for (const auto& m : metrics) {
    if (std::find(known_metrics().begin(), known_metrics().end(), m) == known_metrics().end()) {
      throw ConfigError(fmt::format("unknown metric '{}'", m));
    }
  }
  auto wants = [&](const char* m) { return std::find(metrics.begin(), metrics.end(), m) != metrics.end(); };
  EvalReport report;
  report.config_hash = config_hash(ws.config);
  report.seed = seed;
  const RenderSettings& rs = ws.config.dataset.render;
  std::vector<std::string> prompts;
  std::vector<std::string> colors;
  for (const auto& o : ws.objects) {
    prompts.push_back(o.caption);
    colors.push_back(o.attributes.color);
  }
  // Each metric draws from its own stream so selecting a subset does not
  // change the others.
  auto stream = [seed](std::uint64_t k) { return Rng(seed * 0x9e3779b97f4a7c15ULL + k); };

  if (wants("rprec1") || wants("hue")) {
    Rng rng = stream(1);
    RPrecision r = r_precision(prompts, text_shot_renderer(trainer, rs), 1, ws.embedder, rng);
    if (wants("rprec1")) report.metrics["rprec1"] = r.precision;
    if (wants("hue")) {
      std::vector<RenderedView> kept;
      for (const auto& rec : r.records) kept.push_back(rec.view);
      report.metrics["hue"] = hue_match(kept, colors, ws.config.dataset.colors, rs.background);
    }
    report.records = std::move(r.records);
  }
  if (wants("rprec9")) {
    Rng rng = stream(2);
    report.metrics["rprec9"] = r_precision(prompts, text_shot_renderer(trainer, rs), 9, ws.embedder, rng).precision;
  }
  if (wants("viewinv")) {
    Rng rng = stream(3);
    std::vector<TexturedMesh> meshes;
    for (const auto& o : ws.objects) meshes.push_back(o.mesh);
    const ViewInvariance v = view_invariance_metrics(meshes, trainer.models().view_net, ws.embedder, rs, rng);
    report.metrics["viewinv_s"] = v.s;
    report.metrics["viewinv_s_tilde"] = v.s_tilde;
    report.metrics["viewinv_r"] = v.r;
    report.metrics["viewinv_r_tilde"] = v.r_tilde;
  }
  if (wants("sigma_trend")) {
    Rng rng = stream(4);
    const auto groups = captions_by_modifier_count(ws.config.dataset);
    for (const auto& g : sigma_trend(groups, trainer.models().sigma_net, ws.embedder, rng, ws.config.eval.sigma_draws)) {
      report.metrics[fmt::format("sigma_m{}", g.modifiers)] = g.mean_sigma;
      report.metrics[fmt::format("field_var_m{}", g.modifiers)] = g.field_variance;
    }
  }
  return report;
}

}  // namespace ntf3d

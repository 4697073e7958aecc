// SPDX-License-Identifier: Apache-2.0
//
// End-to-end glue shared by the command-line tool and the acceptance runner:
// building the curated, calibrated workspace, generator-backed shot renderers
// and the metric suite over a trainer.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ntf3d/config.hpp"
#include "ntf3d/data.hpp"
#include "ntf3d/embed.hpp"
#include "ntf3d/eval.hpp"
#include "ntf3d/train.hpp"

namespace ntf3d {

struct Workspace {
  ExperimentConfig config;  // resolved
  Embedder embedder;        // calibrated on the accepted objects
  std::vector<CaptionedObject> objects;
  std::vector<CurationReport> rejected;
};

// Generates the dataset, drops objects outside the curation band and
// calibrates the embedder. Deterministic in the config.
Workspace prepare_workspace(const ExperimentConfig& config);

// Renders `shots` text-conditioned generations from the evaluation camera.
ShotRenderer text_shot_renderer(const Trainer& trainer, const RenderSettings& settings);

// Evaluates the named metrics (see known_metrics()). Metric keys written:
// rprec1, rprec9, hue, viewinv_s, viewinv_s_tilde, viewinv_r, viewinv_r_tilde,
// sigma_m{0,1,2} and field_var_m{0,1,2}. Records hold the 1-shot selections.
EvalReport evaluate(const Trainer& trainer, const Workspace& workspace, const std::vector<std::string>& metrics,
                    std::uint64_t seed);

}  // namespace ntf3d

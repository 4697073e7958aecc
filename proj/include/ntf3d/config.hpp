// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: one INI-style file with a section per module
// ([train], [embed], [dataset], [eval], [output]). Unknown sections and keys
// are rejected; values round-trip through dump_config exactly.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ntf3d/data.hpp"
#include "ntf3d/embed.hpp"
#include "ntf3d/train.hpp"

namespace ntf3d {

struct EvalConfig {
  std::vector<std::string> metrics{"rprec1", "rprec9", "hue", "viewinv", "sigma_trend"};
  int sigma_draws = 256;
};

struct ExperimentConfig {
  TrainConfig train;
  // dim and resolution follow [train] embed_dim and resolution.
  EmbedderConfig embed;
  // render settings and cloud size follow [train].
  DatasetConfig dataset;
  std::pair<double, double> curation_band{kCurationLow, kCurationHigh};
  std::int64_t image_steps = 1000;
  std::int64_t checkpoint_every = 500;
  std::int64_t log_every = 50;
  EvalConfig eval;
  std::filesystem::path out_dir = "runs";
};

// Names accepted by the [eval] metrics key and the eval command.
const std::vector<std::string>& known_metrics();

// Throws ConfigError on unreadable files, syntax errors, unknown sections or
// keys, and unparsable values.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& text);
std::string dump_config(const ExperimentConfig& config);

// "section.key=value", as given on the command line.
void apply_override(ExperimentConfig& config, const std::string& assignment);

// Fills the fields that follow [train] and validates cross-section ranges.
ExperimentConfig resolve(ExperimentConfig config);
DatasetConfig dataset_config(const ExperimentConfig& config);
EmbedderConfig embedder_config(const ExperimentConfig& config);

// FNV-1a of the dumped, resolved config with the output directory cleared.
std::uint64_t config_hash(const ExperimentConfig& config);

}  // namespace ntf3d

// SPDX-License-Identifier: Apache-2.0

#include "ntf3d/config.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "ntf3d/errors.hpp"

namespace ntf3d {

namespace {

using Getter = std::function<std::string(const ExperimentConfig&)>;
using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

struct Key {
  std::string section;
  std::string name;
  Getter get;
  Setter set;
};

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError(fmt::format("{}: cannot parse '{}'", key, text));
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(fmt::format("{}: expected true or false, got '{}'", key, text));
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Binds a numeric or boolean field reached through `field`.
template <typename T, typename Access>
Key bind(std::string section, std::string name, Access field) {
  const std::string full = section + "." + name;
  Getter get = [field](const ExperimentConfig& c) {
    const T& v = field(const_cast<ExperimentConfig&>(c));
    if constexpr (std::is_same_v<T, bool>) {
      return std::string(v ? "true" : "false");
    } else {
      return fmt::format("{}", v);
    }
  };
  Setter set = [field, full](ExperimentConfig& c, const std::string& text) {
    if constexpr (std::is_same_v<T, bool>) {
      field(c) = parse_bool(full, text);
    } else {
      field(c) = parse_number<T>(full, text);
    }
  };
  return {std::move(section), std::move(name), std::move(get), std::move(set)};
}

const std::vector<std::string>& sections() {
  static const std::vector<std::string> s{"train", "embed", "dataset", "eval", "output"};
  return s;
}

#define NTF3D_FIELD(type, section, name, expr) \
  bind<type>(section, name, [](ExperimentConfig& c) -> type& { return expr; })

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k{
        NTF3D_FIELD(double, "train", "lr", c.train.lr),
        NTF3D_FIELD(double, "train", "beta1", c.train.beta1),
        NTF3D_FIELD(double, "train", "beta2", c.train.beta2),
        NTF3D_FIELD(int, "train", "batch", c.train.batch),
        NTF3D_FIELD(std::int64_t, "train", "steps", c.train.steps),
        NTF3D_FIELD(double, "train", "lambda_pc", c.train.lambda_pc),
        NTF3D_FIELD(double, "train", "lambda_gen", c.train.lambda_gen),
        NTF3D_FIELD(double, "train", "lambda_bind", c.train.lambda_bind),
        NTF3D_FIELD(double, "train", "lambda_r1", c.train.lambda_r1),
        NTF3D_FIELD(int, "train", "r1_interval", c.train.r1_interval),
        NTF3D_FIELD(double, "train", "tau", c.train.tau),
        NTF3D_FIELD(double, "train", "static_sigma", c.train.static_sigma),
        NTF3D_FIELD(std::uint64_t, "train", "seed", c.train.seed),
        NTF3D_FIELD(int, "train", "resolution", c.train.resolution),
        NTF3D_FIELD(std::int64_t, "train", "points_per_cloud", c.train.points_per_cloud),
        NTF3D_FIELD(std::int64_t, "train", "render_points", c.train.render_points),
        NTF3D_FIELD(double, "train", "kernel_sigma", c.train.kernel_sigma),
        NTF3D_FIELD(double, "train", "depth_temp", c.train.depth_temp),
        NTF3D_FIELD(int, "train", "embed_dim", c.train.embed_dim),
        NTF3D_FIELD(int, "train", "z_dim", c.train.z_dim),
        NTF3D_FIELD(int, "train", "w_dim", c.train.w_dim),
        NTF3D_FIELD(int, "train", "gen_hidden", c.train.gen_hidden),
        NTF3D_FIELD(bool, "train", "pc_color", c.train.pc_color),
        NTF3D_FIELD(std::int64_t, "train", "image_steps", c.image_steps),
        NTF3D_FIELD(std::int64_t, "train", "checkpoint_every", c.checkpoint_every),
        NTF3D_FIELD(std::int64_t, "train", "log_every", c.log_every),
        NTF3D_FIELD(std::uint64_t, "embed", "seed", c.embed.seed),
        NTF3D_FIELD(int, "embed", "patch_grid", c.embed.patch_grid),
        NTF3D_FIELD(int, "embed", "random_features", c.embed.random_features),
        NTF3D_FIELD(int, "embed", "token_buckets", c.embed.token_buckets),
        NTF3D_FIELD(std::uint64_t, "dataset", "seed", c.dataset.seed),
        NTF3D_FIELD(int, "dataset", "views_per_object", c.dataset.views_per_object),
        NTF3D_FIELD(double, "dataset", "color_jitter", c.dataset.color_jitter),
        NTF3D_FIELD(double, "dataset", "max_tilt_deg", c.dataset.max_tilt_deg),
        NTF3D_FIELD(double, "dataset", "curation_low", c.curation_band.first),
        NTF3D_FIELD(double, "dataset", "curation_high", c.curation_band.second),
        NTF3D_FIELD(int, "eval", "sigma_draws", c.eval.sigma_draws),
    };
    k.push_back({"train", "mode", [](const ExperimentConfig& c) { return mode_name(c.train.mode); },
                 [](ExperimentConfig& c, const std::string& v) { c.train.mode = parse_mode(v); }});
    k.push_back({"eval", "metrics",
                 [](const ExperimentConfig& c) {
                   std::string out;
                   for (const auto& m : c.eval.metrics) out += (out.empty() ? "" : ",") + m;
                   return out;
                 },
                 [](ExperimentConfig& c, const std::string& v) { c.eval.metrics = split_list(v); }});
    k.push_back({"output", "dir", [](const ExperimentConfig& c) { return c.out_dir.string(); },
                 [](ExperimentConfig& c, const std::string& v) { c.out_dir = v; }});
    auto rank = [](const Key& key) {
      return std::find(sections().begin(), sections().end(), key.section) - sections().begin();
    };
    std::stable_sort(k.begin(), k.end(), [&](const Key& a, const Key& b) { return rank(a) < rank(b); });
    return k;
  }();
  return table;
}

#undef NTF3D_FIELD

const Key& find_key(const std::string& section, const std::string& name) {
  for (const auto& k : keys()) {
    if (k.section == section && k.name == name) return k;
  }
  throw ConfigError(fmt::format("unknown config key '{}.{}'", section, name));
}

}  // namespace

const std::vector<std::string>& known_metrics() {
  static const std::vector<std::string> m{"rprec1", "rprec9", "hue", "viewinv", "sigma_trend"};
  return m;
}

ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(fmt::format("config syntax error at line {}: {}", e.line(), e.message()));
  }
  ExperimentConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError(fmt::format("config key '{}' is outside any section", section));
    }
    if (std::find(sections().begin(), sections().end(), section) == sections().end()) {
      throw ConfigError(fmt::format("unknown config section [{}]", section));
    }
    for (const auto& [name, value] : body) find_key(section, name).set(c, trim(value.data()));
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(fmt::format("cannot read config file {}", path.string()));
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const ExperimentConfig& config) {
  std::string out;
  std::string section;
  for (const auto& k : keys()) {
    if (k.section != section) {
      out += fmt::format("{}[{}]\n", section.empty() ? "" : "\n", k.section);
      section = k.section;
    }
    out += fmt::format("{} = {}\n", k.name, k.get(config));
  }
  return out;
}

void apply_override(ExperimentConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError(fmt::format("override '{}' is not section.key=value", assignment));
  }
  find_key(trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)))
      .set(config, trim(assignment.substr(eq + 1)));
}

ExperimentConfig resolve(ExperimentConfig c) {
  c.embed.dim = c.train.embed_dim;
  c.embed.resolution = c.train.resolution;
  c.dataset.render = render_settings(c.train);
  c.dataset.points_per_cloud = c.train.points_per_cloud;
  if (c.embed.patch_grid < 1 || c.train.resolution % c.embed.patch_grid != 0) {
    throw ConfigError("embed.patch_grid must divide train.resolution");
  }
  if (c.embed.random_features < 1 || c.embed.token_buckets < 1 || c.embed.dim < 1) {
    throw ConfigError("embed sizes must be positive");
  }
  if (c.dataset.views_per_object < 1 || c.dataset.color_jitter < 0.0 || c.dataset.max_tilt_deg < 0.0) {
    throw ConfigError("dataset: views_per_object must be positive, jitter and tilt non-negative");
  }
  if (!(c.curation_band.first >= 0.0 && c.curation_band.first <= c.curation_band.second)) {
    throw ConfigError("dataset: need 0 <= curation_low <= curation_high");
  }
  if (c.train.steps < 0 || c.image_steps < 0 || c.checkpoint_every < 1 || c.log_every < 1) {
    throw ConfigError("train: step counts must be non-negative and intervals positive");
  }
  if (c.eval.sigma_draws < 2) throw ConfigError("eval.sigma_draws must be at least 2");
  for (const auto& m : c.eval.metrics) {
    if (std::find(known_metrics().begin(), known_metrics().end(), m) == known_metrics().end()) {
      throw ConfigError(fmt::format("unknown metric '{}' (expected rprec1, rprec9, hue, viewinv or sigma_trend)", m));
    }
  }
  (void)make_models(c.train);
  return c;
}

DatasetConfig dataset_config(const ExperimentConfig& config) { return resolve(config).dataset; }

EmbedderConfig embedder_config(const ExperimentConfig& config) { return resolve(config).embed; }

std::uint64_t config_hash(const ExperimentConfig& config) {
  ExperimentConfig c = resolve(config);
  c.out_dir.clear();
  return fnv1a(dump_config(c));
}

}  // namespace ntf3d

// SPDX-License-Identifier: Apache-2.0
//
// ntf3d: dataset, train, generate and eval commands over one experiment config.
// Exit codes: 0 ok, 2 configuration or usage error, 3 numeric abort.

#include <fmt/format.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "ntf3d/config.hpp"
#include "ntf3d/errors.hpp"
#include "ntf3d/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ntf3d;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  // Config key --seed writes: dataset.seed for the dataset command, train.seed
  // (training and evaluation draws) for the others.
  std::string seed_key = "train.seed";
};

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig{} : load_config(c.config_path);
  if (const char* env = std::getenv("NTF3D_OUT"); env != nullptr && *env != '\0') cfg.out_dir = env;
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (c.seed) apply_override(cfg, fmt::format("{}={}", c.seed_key, *c.seed));
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg = resolve(cfg);
  fmt::print("config_hash={:016x}\nseed={}\n", config_hash(cfg),
             c.seed_key == "dataset.seed" ? cfg.dataset.seed : cfg.train.seed);
  return cfg;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw ConfigError(fmt::format("cannot write {}", p.string()));
  os << text;
}

int cmd_dataset(const Common& common) {
  Common c = common;
  c.seed_key = "dataset.seed";
  const ExperimentConfig cfg = load(c);
  const Workspace ws = prepare_workspace(cfg);
  const fs::path manifest = write_dataset(ws.objects, cfg.out_dir / "dataset");
  for (const auto& r : ws.rejected) {
    fmt::print("rejected object {}: {} (mean delta {:.3g})\n", r.object_id, r.rejection_reason, r.mean_delta);
  }
  fmt::print("objects={}\naccepted={}\nrejected={}\nmanifest={}\nmanifest_hash={:016x}\n",
             ws.objects.size() + ws.rejected.size(), ws.objects.size(), ws.rejected.size(), manifest.string(),
             fnv1a(read_file(manifest)));
  return 0;
}

struct TrainArgs {
  std::string mode;
  std::string pipeline = "text";
  std::string init;
  bool resume = false;
};

int cmd_train(const Common& common, const TrainArgs& args) {
  Common c = common;
  if (!args.mode.empty()) c.overrides.push_back("train.mode=" + args.mode);
  if (args.pipeline != "text" && args.pipeline != "image") {
    throw ConfigError(fmt::format("--pipeline must be text or image, got '{}'", args.pipeline));
  }
  const ExperimentConfig cfg = load(c);
  const Workspace ws = prepare_workspace(cfg);
  const bool image = args.pipeline == "image";
  const fs::path run = cfg.out_dir / (image ? "image" : "text");
  const fs::path last = run / "checkpoints" / "last.ckpt";
  write_file(run / "config.ini", dump_config(cfg));

  Trainer trainer(cfg.train, ws.objects, ws.embedder);
  if (args.resume) {
    trainer.load_checkpoint(last);
    fmt::print("resumed from {} at step {}\n", last.string(), trainer.step_count());
  } else {
    if (!args.init.empty()) trainer.load_parameters(args.init);
    if (image && !trainer.image_mode()) trainer.begin_image_to_3d();
    if (fs::exists(run / "losses.csv")) fs::remove(run / "losses.csv");
  }
  const std::int64_t target = image ? cfg.image_steps : cfg.train.steps;
  LossLog log(run / "losses.csv");
  while (trainer.step_count() < target) {
    LossReport report;
    try {
      report = trainer.step();
    } catch (const NumericError& e) {
      const fs::path snap = run / "checkpoints" / "nan_snapshot.ckpt";
      trainer.save_checkpoint(snap);
      if (const auto* abort = dynamic_cast<const NumericAbort*>(&e)) log.append(abort->report());
      fmt::print(stderr, "numeric abort: {}\nsnapshot={}\n", e.what(), snap.string());
      return kExitNumeric;
    }
    log.append(report);
    const auto s = trainer.step_count();
    if (s % cfg.log_every == 0 || s == target) {
      fmt::print("step {} d_total={:.4f} g_total={:.4f}\n", s, report.d_total, report.g_total);
      std::fflush(stdout);
    }
    if (s % cfg.checkpoint_every == 0 || s == target) {
      trainer.save_checkpoint(run / "checkpoints" / fmt::format("step_{:06d}.ckpt", s));
      trainer.save_checkpoint(last);
    }
  }
  fmt::print("checkpoint={}\n", last.string());
  return 0;
}

struct GenerateArgs {
  std::string checkpoint;
  std::string prompt;
  std::string image;
  int shots = 1;
  std::string out;
};

int cmd_generate(const Common& common, const GenerateArgs& args) {
  if (args.prompt.empty() == args.image.empty()) throw ConfigError("give exactly one of --prompt or --image");
  if (args.shots < 1) throw ConfigError("--shots must be at least 1");
  const ExperimentConfig cfg = load(common);
  const Workspace ws = prepare_workspace(cfg);
  Trainer trainer(cfg.train, ws.objects, ws.embedder);
  trainer.load_checkpoint(args.checkpoint);
  Rng rng(cfg.train.seed);
  const RenderSettings& rs = cfg.dataset.render;

  std::vector<TexturedMesh> meshes;
  std::vector<double> target;
  if (!args.prompt.empty()) {
    const TextEmbedding t = ws.embedder.embed_text(args.prompt);
    target = t.vector;
    std::vector<double> rows;
    for (int k = 0; k < args.shots; ++k) rows.insert(rows.end(), t.vector.begin(), t.vector.end());
    meshes = trainer.generate_from_text(
        ad::Tensor::from({args.shots, static_cast<std::int64_t>(t.vector.size())}, std::move(rows)), rng);
  } else {
    if (!trainer.image_mode()) throw ConfigError("image input needs an image-to-3D checkpoint");
    RenderedView view = read_ppm_view(args.image);
    if (view.rgb.shape()[0] != rs.resolution || view.rgb.shape()[1] != rs.resolution) {
      throw ConfigError(fmt::format("input image must be {0}x{0}", rs.resolution));
    }
    view.camera = eval_camera();
    target = ws.embedder.embed_image(view).vector;
    meshes = trainer.generate_from_views(std::vector<RenderedView>(static_cast<size_t>(args.shots), view), rng);
  }

  const fs::path out = args.out.empty() ? cfg.out_dir / "generate" : fs::path(args.out);
  fs::create_directories(out);
  int best = 0;
  double best_cos = -2.0;
  for (size_t k = 0; k < meshes.size(); ++k) {
    const RenderedView v = render(meshes[k], eval_camera(), rs);
    write_off(out / fmt::format("gen_{}.off", k), meshes[k]);
    write_view_images(v, out / fmt::format("gen_{}.ppm", k), out / fmt::format("gen_{}.pgm", k));
    const double c = cosine(ws.embedder.embed_image(v).vector, target);
    if (c > best_cos) {
      best_cos = c;
      best = static_cast<int>(k);
    }
  }
  write_file(out / "selected.txt", fmt::format("{}\n", best));
  fmt::print("meshes={}\nselected={}\nout={}\n", meshes.size(), best, out.string());
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string metrics;
};

int cmd_eval(const Common& common, const EvalArgs& args) {
  Common c = common;
  if (!args.metrics.empty()) c.overrides.push_back("eval.metrics=" + args.metrics);
  const ExperimentConfig cfg = load(c);
  const Workspace ws = prepare_workspace(cfg);
  Trainer trainer(cfg.train, ws.objects, ws.embedder);
  trainer.load_checkpoint(args.checkpoint);
  const EvalReport report = evaluate(trainer, ws, cfg.eval.metrics, cfg.train.seed);
  const fs::path out = cfg.out_dir / "eval";
  fs::create_directories(out);
  report.write(out / "report.txt");
  report.write_csv(out / "records.csv");
  for (const auto& [k, v] : report.metrics) fmt::print("{}={:.6f}\n", k, v);
  fmt::print("report={}\n", (out / "report.txt").string());
  return 0;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path, "Experiment config file (INI)");
  app->add_option("--seed", c.seed, "Overrides train.seed");
  app->add_option("--out", c.out, "Output root (overrides NTF3D_OUT and output.dir)");
  app->add_option("--set", c.overrides, "Override a config key: section.key=value")->take_all();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noisy-text-field 3D generation: dataset, train, generate, eval"};
  app.require_subcommand(1);
  Common common;

  auto* dataset = app.add_subcommand("dataset", "Generate, curate and write the captioned dataset");
  add_common(dataset, common);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train text-to-3D or image-to-3D");
  add_common(train, common);
  train->add_option("--mode", train_args.mode, "a, b, c, full or static_noise");
  train->add_option("--pipeline", train_args.pipeline, "text or image");
  train->add_option("--init", train_args.init, "Checkpoint whose parameters seed this run");
  train->add_flag("--resume", train_args.resume, "Continue from the run's last checkpoint");

  GenerateArgs gen_args;
  auto* generate = app.add_subcommand("generate", "Generate meshes and renders from a prompt or image");
  add_common(generate, common);
  generate->add_option("--checkpoint", gen_args.checkpoint)->required();
  generate->add_option("--prompt", gen_args.prompt);
  generate->add_option("--image", gen_args.image, "PPM view at the configured resolution");
  generate->add_option("--shots", gen_args.shots);
  generate->add_option("--dir", gen_args.out, "Output directory");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval, common);
  eval->add_option("--checkpoint", eval_args.checkpoint)->required();
  eval->add_option("--metrics", eval_args.metrics, "Comma list of rprec1, rprec9, hue, viewinv, sigma_trend");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (dataset->parsed()) return cmd_dataset(common);
    if (train->parsed()) return cmd_train(common, train_args);
    if (generate->parsed()) return cmd_generate(common, gen_args);
    if (eval->parsed()) return cmd_eval(common, eval_args);
  } catch (const NumericError& e) {
    fmt::print(stderr, "numeric error: {}\n", e.what());
    return kExitNumeric;
  } catch (const ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kExitConfig;
  } catch (const InvalidInput& e) {
    fmt::print(stderr, "invalid input: {}\n", e.what());
    return kExitConfig;
  } catch (const ChecksumError& e) {
    fmt::print(stderr, "checkpoint error: {}\n", e.what());
    return kExitConfig;
  } catch (const ContractError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitConfig;
  }
  return 0;
}

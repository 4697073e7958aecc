// SPDX-License-Identifier: Apache-2.0
//
// Training: model bundle, Adam, the text-to-3D and image-to-3D alternating
// steps, ablation modes, checkpoints and the loss log.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ntf3d/data.hpp"
#include "ntf3d/discriminate.hpp"
#include "ntf3d/embed.hpp"
#include "ntf3d/errors.hpp"
#include "ntf3d/generator.hpp"
#include "ntf3d/ntf.hpp"
#include "ntf3d/render.hpp"

namespace ntf3d {

enum class Mode { kA, kB, kC, kFull, kStaticNoise };
enum class Pipeline { kTextTo3D, kImageTo3D };
enum class NoiseKind { kNone, kDynamic, kStatic };

Mode parse_mode(const std::string& name);
std::string mode_name(Mode mode);

struct TrainConfig {
  double lr = 0.002;
  double beta1 = 0.0;
  double beta2 = 0.99;
  int batch = 16;
  std::int64_t steps = 2000;
  double lambda_pc = 0.01;
  double lambda_gen = 2.0;
  double lambda_bind = 0.1;
  double lambda_r1 = 1.0;
  int r1_interval = 1;
  double tau = kDefaultTau;
  double static_sigma = kStaticSigma;
  Mode mode = Mode::kFull;
  Pipeline pipeline = Pipeline::kTextTo3D;
  std::uint64_t seed = 0;
  int resolution = 32;
  std::int64_t points_per_cloud = 1024;
  std::int64_t render_points = 2048;
  double kernel_sigma = 1.0;
  double depth_temp = 0.1;
  int embed_dim = 64;
  int z_dim = 32;
  int w_dim = 64;
  int gen_hidden = 64;
  bool pc_color = false;
};

// Loss terms switched on by a mode.
struct EnabledLosses {
  bool adversarial_2_5d = true;
  bool image_alignment = false;  // mode (b): nce(t, embed(generated render))
  bool gen = false;              // nce on generated and ground-truth renders
  bool point_cloud = false;
  bool text_through_mapping = false;
  NoiseKind noise = NoiseKind::kNone;
};

EnabledLosses ablation_mode(const TrainConfig& config);

RenderSettings render_settings(const TrainConfig& config);
EmbedderConfig embedder_config(const TrainConfig& config);

// Hash of everything that fixes parameter shapes; checkpoints with a different
// hash are refused unless forced.
std::uint64_t architecture_hash(const TrainConfig& config);

struct Models {
  Generator generator;
  SigmaNet sigma_net;
  ViewNet view_net;
  Discriminator2_5D d_img;
  Discriminator2_5D d_mask;
  Discriminator3D d_pc;

  // Every trainable set with its checkpoint prefix.
  std::vector<std::pair<std::string, ParamSet*>> named_sets();
};

std::unique_ptr<Models> make_models(const TrainConfig& config);

class Adam {
 public:
  Adam() = default;
  Adam(std::vector<ParamSet*> sets, double lr, double beta1, double beta2, double eps = 1e-8);

  void zero_grad();
  // Updates every parameter with a gradient; values and moments stay
  // representable in fp32 so checkpoints round-trip exactly.
  void step();

  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<ad::Tensor*>& tensors() const { return tensors_; }

 private:
  std::vector<ad::Tensor*> tensors_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double lr_ = 0.0;
  double beta1_ = 0.0;
  double beta2_ = 0.0;
  double eps_ = 1e-8;
  std::int64_t t_ = 0;
};

struct LossTerm {
  std::string name;
  double value = 0.0;
  double weight = 1.0;
  bool generator_side = false;
};

struct LossReport {
  std::int64_t step = 0;
  std::vector<LossTerm> terms;
  double d_total = 0.0;
  double g_total = 0.0;

  double value(const std::string& name) const;
  bool has(const std::string& name) const;
};

class NumericAbort : public NumericError {
 public:
  NumericAbort(const std::string& what, LossReport report) : NumericError(what), report_(std::move(report)) {}
  const LossReport& report() const { return report_; }

 private:
  LossReport report_;
};

// Owns models, optimizers and the step RNG; borrows the dataset and embedder.
class Trainer {
 public:
  Trainer(TrainConfig config, const std::vector<CaptionedObject>& objects, const Embedder& embedder);

  const TrainConfig& config() const { return config_; }
  Models& models() { return *models_; }
  const Models& models() const { return *models_; }
  std::int64_t step_count() const { return step_; }
  Rng& rng() { return rng_; }

  // One alternating D/G update for the configured pipeline.
  LossReport step();
  LossReport text_to_3d_step();
  LossReport image_to_3d_step();

  // Switches to the image-to-3D pipeline: sigma_net leaves the optimizer and
  // the view network joins the generator side. Optimizer state restarts.
  void begin_image_to_3d();
  bool image_mode() const { return config_.pipeline == Pipeline::kImageTo3D; }

  void save_checkpoint(const std::filesystem::path& path) const;
  // Refuses a different architecture hash unless `force`.
  void load_checkpoint(const std::filesystem::path& path, bool force = false);
  // Loads only parameters (no optimizer, RNG or step), as when seeding the
  // image-to-3D stage from a text-to-3D run.
  void load_parameters(const std::filesystem::path& path, bool force = false);

  // Generates one mesh per text embedding row with fresh latents and noise.
  std::vector<TexturedMesh> generate_from_text(const ad::Tensor& t, Rng& rng) const;
  // Image-to-3D generation conditioned on the view codes of the given views.
  std::vector<TexturedMesh> generate_from_views(const std::vector<RenderedView>& views, Rng& rng) const;

 private:
  struct Batch {
    std::vector<int> ids;
    std::vector<CameraPose> cams;
    ad::Tensor real_rgb;
    ad::Tensor real_mask;
    ad::Tensor real_pc;
    ad::Tensor text;
  };
  Batch sample_batch();
  void rebuild_optimizers();

  TrainConfig config_;
  EnabledLosses enabled_;
  const std::vector<CaptionedObject>* objects_;
  const Embedder* embedder_;
  std::unique_ptr<Models> models_;
  Adam opt_g_;
  Adam opt_d_;
  Rng rng_;
  std::int64_t step_ = 0;
};

// Appends `step,loss_name,value` rows; writes the header for a new file.
class LossLog {
 public:
  explicit LossLog(const std::filesystem::path& path);
  void append(const LossReport& report);

 private:
  std::ofstream os_;
};

}  // namespace ntf3d

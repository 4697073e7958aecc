// SPDX-License-Identifier: Apache-2.0

#include "ntf3d/train.hpp"

#include <fmt/format.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "ntf3d/errors.hpp"

namespace ntf3d {

namespace {

constexpr char kMagic[8] = {'N', 'T', 'F', '3', 'D', 'C', 'K', 'P'};
constexpr std::uint32_t kFormatVersion = 1;

ad::Tensor sum_all(const std::vector<ad::Tensor>& parts) {
  ad::Tensor acc = parts.front();
  for (size_t i = 1; i < parts.size(); ++i) acc = ad::add(acc, parts[i]);
  return acc;
}

// Random index in [0, n) from the raw engine, so draws do not depend on the
// standard library's distribution implementation.
std::int64_t draw_index(Rng& rng, std::int64_t n) {
  return static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(n));
}

}  // namespace

Mode parse_mode(const std::string& name) {
  if (name == "a") return Mode::kA;
  if (name == "b") return Mode::kB;
  if (name == "c") return Mode::kC;
  if (name == "full" || name == "d") return Mode::kFull;
  if (name == "static_noise") return Mode::kStaticNoise;
  throw ConfigError(fmt::format("unknown mode '{}' (expected a, b, c, full or static_noise)", name));
}

std::string mode_name(Mode mode) {
  switch (mode) {
    case Mode::kA: return "a";
    case Mode::kB: return "b";
    case Mode::kC: return "c";
    case Mode::kFull: return "full";
    case Mode::kStaticNoise: return "static_noise";
  }
  return "?";
}

EnabledLosses ablation_mode(const TrainConfig& config) {
  EnabledLosses e;
  switch (config.mode) {
    case Mode::kA:
      e.text_through_mapping = true;
      break;
    case Mode::kB:
      e.text_through_mapping = true;
      e.image_alignment = true;
      break;
    case Mode::kC:
      e.gen = true;
      e.noise = NoiseKind::kDynamic;
      break;
    case Mode::kFull:
      e.gen = true;
      e.point_cloud = true;
      e.noise = NoiseKind::kDynamic;
      break;
    case Mode::kStaticNoise:
      e.gen = true;
      e.point_cloud = true;
      e.noise = NoiseKind::kStatic;
      break;
  }
  return e;
}

RenderSettings render_settings(const TrainConfig& config) {
  RenderSettings s;
  s.resolution = config.resolution;
  s.kernel_sigma = config.kernel_sigma;
  s.depth_temp = config.depth_temp;
  s.points = config.render_points;
  return s;
}

EmbedderConfig embedder_config(const TrainConfig& config) {
  EmbedderConfig e;
  e.dim = config.embed_dim;
  e.resolution = config.resolution;
  return e;
}

std::uint64_t architecture_hash(const TrainConfig& c) {
  return fnv1a(fmt::format("embed={} z={} w={} hidden={} res={} points={} color={} mapping_text={}", c.embed_dim,
                           c.z_dim, c.w_dim, c.gen_hidden, c.resolution, c.points_per_cloud, c.pc_color,
                           ablation_mode(c).text_through_mapping));
}

std::vector<std::pair<std::string, ParamSet*>> Models::named_sets() {
  return {{"gen.", &generator.params()},  {"sigma.", &sigma_net.params()}, {"view.", &view_net.params()},
          {"d_img.", &d_img.params()},    {"d_mask.", &d_mask.params()},   {"d_pc.", &d_pc.params()}};
}

std::unique_ptr<Models> make_models(const TrainConfig& c) {
  if (c.batch < 1 || c.resolution < 4 || c.points_per_cloud < 1 || c.render_points < 1) {
    throw ConfigError("train: batch, resolution and point counts must be positive");
  }
  if (c.lr <= 0.0 || c.tau <= 0.0 || c.lambda_pc < 0.0 || c.lambda_gen < 0.0 || c.lambda_bind < 0.0 ||
      c.lambda_r1 < 0.0 || c.r1_interval < 1) {
    throw ConfigError("train: learning rate, tau and r1_interval must be positive, loss weights non-negative");
  }
  Rng rng(c.seed);
  GeneratorConfig g;
  g.z_dim = c.z_dim;
  g.w_dim = c.w_dim;
  g.text_dim = c.embed_dim;
  g.hidden = c.gen_hidden;
  g.text_through_mapping = ablation_mode(c).text_through_mapping;
  Disc2dConfig img;
  img.resolution = c.resolution;
  img.in_channels = 3;
  img.cond_dim = 5 + c.embed_dim;
  Disc2dConfig mask = img;
  mask.in_channels = 1;
  Disc3dConfig pc;
  pc.points = c.points_per_cloud;
  pc.use_color = c.pc_color;
  pc.cond_dim = c.embed_dim;
  return std::unique_ptr<Models>(new Models{Generator(g, rng), SigmaNet({c.embed_dim, 64, false}, rng),
                                            ViewNet({c.embed_dim, 128}, rng), Discriminator2_5D(img, rng),
                                            Discriminator2_5D(mask, rng), Discriminator3D(pc, rng)});
}

// ---------------------------------------------------------------- Adam

Adam::Adam(std::vector<ParamSet*> sets, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto* set : sets) {
    for (auto& p : set->params()) {
      tensors_.push_back(&p.tensor);
      m_.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0);
      v_.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0);
    }
  }
}

void Adam::zero_grad() {
  for (auto* t : tensors_) t->zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < tensors_.size(); ++i) {
    auto& t = *tensors_[i];
    const auto g = t.grad();
    if (g.size() != static_cast<size_t>(t.numel())) continue;
    auto p = t.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t k = 0; k < p.size(); ++k) {
      m[k] = round_f32(beta1_ * m[k] + (1.0 - beta1_) * g[k]);
      v[k] = round_f32(beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k]);
      p[k] = round_f32(p[k] - lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_));
    }
  }
}

// ---------------------------------------------------------------- reports

double LossReport::value(const std::string& name) const {
  for (const auto& t : terms) {
    if (t.name == name) return t.value;
  }
  throw InvalidInput(fmt::format("loss report has no term '{}'", name));
}

bool LossReport::has(const std::string& name) const {
  return std::any_of(terms.begin(), terms.end(), [&](const LossTerm& t) { return t.name == name; });
}

namespace {

void finish_report(LossReport& r) {
  r.d_total = 0.0;
  r.g_total = 0.0;
  for (const auto& t : r.terms) (t.generator_side ? r.g_total : r.d_total) += t.weight * t.value;
  for (const auto& t : r.terms) {
    if (!std::isfinite(t.value)) {
      throw NumericAbort(fmt::format("non-finite loss '{}' at step {}", t.name, r.step), r);
    }
  }
}

// Aborts before any parameter is touched by a non-finite update.
void abort_if_nonfinite(LossReport& r) {
  for (const auto& t : r.terms) {
    if (!std::isfinite(t.value)) finish_report(r);
  }
}

}  // namespace

LossLog::LossLog(const std::filesystem::path& path) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  os_.open(path, std::ios::app);
  if (!os_) throw ConfigError(fmt::format("cannot open loss log {}", path.string()));
  if (fresh) os_ << "step,loss_name,value\n";
}

void LossLog::append(const LossReport& report) {
  for (const auto& t : report.terms) os_ << fmt::format("{},{},{:.9g}\n", report.step, t.name, t.value);
  os_ << fmt::format("{},d_total,{:.9g}\n{},g_total,{:.9g}\n", report.step, report.d_total, report.step,
                     report.g_total);
  os_.flush();
}

// ---------------------------------------------------------------- trainer

Trainer::Trainer(TrainConfig config, const std::vector<CaptionedObject>& objects, const Embedder& embedder)
    : config_(std::move(config)), enabled_(ablation_mode(config_)), objects_(&objects), embedder_(&embedder) {
  if (objects.empty()) throw ConfigError("train: empty dataset");
  if (config_.batch > static_cast<int>(objects.size())) {
    throw ConfigError(fmt::format("train: batch {} exceeds dataset size {}", config_.batch, objects.size()));
  }
  if (embedder.dim() != config_.embed_dim || embedder.config().resolution != config_.resolution) {
    throw ConfigError("train: embedder does not match the configured dimension and resolution");
  }
  models_ = make_models(config_);
  std::seed_seq seq{static_cast<std::uint32_t>(config_.seed), static_cast<std::uint32_t>(config_.seed >> 32), 0x7472U};
  rng_.seed(seq);
  if (config_.pipeline == Pipeline::kImageTo3D && enabled_.text_through_mapping) {
    throw ConfigError("image-to-3D training requires a late-concatenation mode (c, full or static_noise)");
  }
  rebuild_optimizers();
}

void Trainer::rebuild_optimizers() {
  auto& m = *models_;
  opt_d_ = Adam({&m.d_img.params(), &m.d_mask.params(), &m.d_pc.params()}, config_.lr, config_.beta1, config_.beta2);
  if (image_mode()) {
    opt_g_ = Adam({&m.generator.params(), &m.view_net.params()}, config_.lr, config_.beta1, config_.beta2);
  } else {
    opt_g_ = Adam({&m.generator.params(), &m.sigma_net.params()}, config_.lr, config_.beta1, config_.beta2);
  }
}

void Trainer::begin_image_to_3d() {
  if (enabled_.text_through_mapping) {
    throw ConfigError("image-to-3D training requires a late-concatenation mode (c, full or static_noise)");
  }
  config_.pipeline = Pipeline::kImageTo3D;
  rebuild_optimizers();
}

Trainer::Batch Trainer::sample_batch() {
  const auto n = static_cast<std::int64_t>(objects_->size());
  std::vector<std::int64_t> order(static_cast<size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[i] = i;
  Batch b;
  std::vector<RenderedView> views;
  std::vector<ad::Tensor> clouds;
  std::vector<double> text;
  for (int i = 0; i < config_.batch; ++i) {
    const auto j = i + draw_index(rng_, n - i);
    std::swap(order[i], order[j]);
    const auto& obj = (*objects_)[order[i]];
    const auto& view = obj.views[draw_index(rng_, static_cast<std::int64_t>(obj.views.size()))];
    b.ids.push_back(obj.id);
    b.cams.push_back(view.camera);
    views.push_back(view);
    if (obj.cloud.points.shape()[0] != config_.points_per_cloud) {
      throw ConfigError("train: dataset clouds do not have points_per_cloud points");
    }
    clouds.push_back(config_.pc_color ? ad::concat_last({obj.cloud.points, obj.cloud.colors}) : obj.cloud.points);
    text.insert(text.end(), obj.text_embedding.begin(), obj.text_embedding.end());
  }
  b.real_rgb = stack_rgb(views);
  b.real_mask = stack_silhouette(views);
  b.real_pc = ad::concat_first(clouds);
  b.text = ad::Tensor::from({config_.batch, config_.embed_dim}, std::move(text));
  return b;
}

namespace {

struct Fakes {
  std::vector<TexturedMesh> meshes;
  ad::Tensor rgb;
  ad::Tensor mask;
  ad::Tensor pc;
};

Fakes render_fakes(std::vector<TexturedMesh> meshes, const std::vector<CameraPose>& cams, const RenderSettings& rs,
                   bool want_pc, std::int64_t points, bool color, Rng& rng) {
  Fakes f;
  std::vector<RenderedView> views;
  std::vector<ad::Tensor> clouds;
  for (size_t i = 0; i < meshes.size(); ++i) {
    views.push_back(render(meshes[i], cams[i], rs));
    if (want_pc) {
      const auto cloud = sample_surface(meshes[i], points, rng);
      clouds.push_back(color ? ad::concat_last({cloud.points, cloud.colors}) : cloud.points);
    }
  }
  f.meshes = std::move(meshes);
  f.rgb = stack_rgb(views);
  f.mask = stack_silhouette(views);
  if (want_pc) f.pc = ad::concat_first(clouds);
  return f;
}

// Critic update on detached fakes. R1 is lazy: every `r1_interval` steps with
// its weight multiplied by the interval.
void update_critics(Models& m, Adam& opt, const TrainConfig& cfg, bool with_pc, std::int64_t step, const Fakes& fake,
                    const std::vector<CameraPose>& cams, const ad::Tensor& real_rgb, const ad::Tensor& real_mask,
                    const ad::Tensor& real_pc, const ad::Tensor& cond_field, const ad::Tensor& pc_cond,
                    LossReport& report) {
  const bool regularize = cfg.lambda_r1 > 0.0 && step % cfg.r1_interval == 0;
  const double lambda = regularize ? cfg.lambda_r1 * cfg.r1_interval : 0.0;
  opt.zero_grad();
  const DLoss di = d_loss_2_5d(m.d_img, {fake.rgb.detach(), cams}, {real_rgb, cams}, cams, cond_field, lambda);
  const DLoss dm = d_loss_2_5d(m.d_mask, {fake.mask.detach(), cams}, {real_mask, cams}, cams, cond_field, lambda);
  std::vector<ad::Tensor> parts{di.objective, dm.objective};
  report.terms.push_back({"d_img", di.adversarial.item(), 1.0, false});
  if (regularize) report.terms.push_back({"r1_img", di.r1, 1.0, false});
  report.terms.push_back({"d_mask", dm.adversarial.item(), 1.0, false});
  if (regularize) report.terms.push_back({"r1_mask", dm.r1, 1.0, false});
  if (with_pc) {
    const DLoss dp = d_loss_3d(m.d_pc, fake.pc.detach(), real_pc, pc_cond, lambda);
    parts.push_back(ad::scale(dp.objective, cfg.lambda_pc));
    report.terms.push_back({"d_pc", dp.adversarial.item(), cfg.lambda_pc, false});
    if (regularize) report.terms.push_back({"r1_pc", dp.r1, cfg.lambda_pc, false});
  }
  abort_if_nonfinite(report);
  sum_all(parts).backward();
  opt.step();
}

}  // namespace

LossReport Trainer::step() { return image_mode() ? image_to_3d_step() : text_to_3d_step(); }

LossReport Trainer::text_to_3d_step() {
  if (image_mode()) throw ContractError("text_to_3d_step called on an image-to-3D trainer");
  auto& m = *models_;
  const auto& cfg = config_;
  const Batch b = sample_batch();
  const std::int64_t bs = cfg.batch;

  NoisyTextField field;
  switch (enabled_.noise) {
    case NoiseKind::kNone:
      field = {b.text, ad::Tensor::zeros(b.text.shape()), b.text, b.ids};
      break;
    case NoiseKind::kDynamic:
      field = inject_noise(b.text, b.ids, m.sigma_net, rng_);
      break;
    case NoiseKind::kStatic:
      field = inject_noise_static(b.text, b.ids, cfg.static_sigma, rng_);
      break;
  }
  const ad::Tensor z_geo = sample_latents(bs, cfg.z_dim, rng_);
  const ad::Tensor z_tex = sample_latents(bs, cfg.z_dim, rng_);
  const bool through = enabled_.text_through_mapping;
  const ad::Tensor tcode = through ? ad::Tensor::zeros({bs, cfg.embed_dim}) : field.sample;
  const ad::Tensor w_geo = m.generator.map_latent(through ? ad::concat_last({z_geo, b.text}) : z_geo, Branch::kGeometry);
  const ad::Tensor w_tex = m.generator.map_latent(through ? ad::concat_last({z_tex, b.text}) : z_tex, Branch::kTexture);
  Fakes fake = render_fakes(m.generator.generate(make_code(w_geo, tcode), make_code(w_tex, tcode)), b.cams,
                            render_settings(cfg), enabled_.point_cloud, cfg.points_per_cloud, cfg.pc_color, rng_);
  const ad::Tensor& dfield = field.sample;

  LossReport report;
  report.step = step_ + 1;

  update_critics(m, opt_d_, cfg, enabled_.point_cloud, step_, fake, b.cams, b.real_rgb, b.real_mask, b.real_pc,
                 dfield.detach(), b.text, report);

  // Generator losses are evaluated against the updated critics.
  opt_g_.zero_grad();
  const ad::Tensor gi = g_loss_2_5d(m.d_img, {fake.rgb, b.cams}, b.cams, dfield);
  const ad::Tensor gm = g_loss_2_5d(m.d_mask, {fake.mask, b.cams}, b.cams, dfield);
  std::vector<ad::Tensor> g_parts{gi, gm};
  report.terms.push_back({"g_img", gi.item(), 1.0, true});
  report.terms.push_back({"g_mask", gm.item(), 1.0, true});
  if (enabled_.point_cloud) {
    const ad::Tensor gp = g_loss_3d(m.d_pc, fake.pc, b.text);
    g_parts.push_back(ad::scale(gp, cfg.lambda_pc));
    report.terms.push_back({"g_pc", gp.item(), cfg.lambda_pc, true});
  }
  if (enabled_.image_alignment) {
    const ad::Tensor align = nce_loss(b.text, embedder_->embed_images(fake.rgb), cfg.tau);
    g_parts.push_back(ad::scale(align, cfg.lambda_gen));
    report.terms.push_back({"img_align", align.item(), cfg.lambda_gen, true});
  }
  if (enabled_.gen) {
    const GenObjective gen = gen_objective(field, fake.rgb, b.ids, b.real_rgb, b.ids, *embedder_, cfg.tau);
    g_parts.push_back(ad::scale(gen.total, cfg.lambda_gen));
    report.terms.push_back({"gen", gen.total.item(), cfg.lambda_gen, true});
  }
  finish_report(report);
  sum_all(g_parts).backward();
  opt_g_.step();
  ++step_;
  return report;
}

LossReport Trainer::image_to_3d_step() {
  if (!image_mode()) throw ContractError("image_to_3d_step requires begin_image_to_3d() after loading a checkpoint");
  auto& m = *models_;
  const auto& cfg = config_;
  const std::uint64_t sigma_before = m.sigma_net.params().hash();
  const Batch b = sample_batch();
  const std::int64_t bs = cfg.batch;

  // Conditioning view, a second view of the same object, and the anchor of a
  // different object as the negative.
  std::vector<RenderedView> cond_views;
  std::vector<RenderedView> pos_views;
  std::vector<CameraPose> cond_cams;
  std::vector<CameraPose> pos_cams;
  for (int id : b.ids) {
    const auto& views = (*objects_)[id].views;
    const auto n = static_cast<std::int64_t>(views.size());
    if (n < 2) throw ConfigError("image-to-3D training needs at least two views per object");
    const auto k1 = draw_index(rng_, n);
    const auto k2 = (k1 + 1 + draw_index(rng_, n - 1)) % n;
    cond_views.push_back(views[k1]);
    pos_views.push_back(views[k2]);
    cond_cams.push_back(views[k1].camera);
    pos_cams.push_back(views[k2].camera);
  }
  std::vector<std::int64_t> neg_rows;
  std::vector<int> neg_ids;
  for (std::int64_t i = 0; i < bs; ++i) {
    const auto j = (i + 1 + draw_index(rng_, bs - 1)) % bs;
    neg_rows.push_back(j);
    neg_ids.push_back(b.ids[j]);
  }

  NoisyTextField field;
  {
    ad::NoGradGuard frozen;
    field = inject_noise(b.text, b.ids, m.sigma_net, rng_);
  }
  const ad::Tensor anchor = view_codes(stack_rgb(cond_views), cond_cams, m.view_net, *embedder_);
  const ad::Tensor z_geo = sample_latents(bs, cfg.z_dim, rng_);
  const ad::Tensor z_tex = sample_latents(bs, cfg.z_dim, rng_);
  const ad::Tensor w_geo = m.generator.map_latent(z_geo, Branch::kGeometry);
  const ad::Tensor w_tex = m.generator.map_latent(z_tex, Branch::kTexture);
  Fakes fake = render_fakes(m.generator.generate(make_code(w_geo, anchor), make_code(w_tex, anchor)), b.cams,
                            render_settings(cfg), enabled_.point_cloud, cfg.points_per_cloud, cfg.pc_color, rng_);

  LossReport report;
  report.step = step_ + 1;
  update_critics(m, opt_d_, cfg, enabled_.point_cloud, step_, fake, b.cams, b.real_rgb, b.real_mask, b.real_pc,
                 field.sample, b.text, report);

  opt_g_.zero_grad();
  const ad::Tensor gi = g_loss_2_5d(m.d_img, {fake.rgb, b.cams}, b.cams, field.sample);
  const ad::Tensor gm = g_loss_2_5d(m.d_mask, {fake.mask, b.cams}, b.cams, field.sample);
  std::vector<ad::Tensor> g_parts{gi, gm};
  report.terms.push_back({"g_img", gi.item(), 1.0, true});
  report.terms.push_back({"g_mask", gm.item(), 1.0, true});
  if (enabled_.point_cloud) {
    const ad::Tensor gp = g_loss_3d(m.d_pc, fake.pc, b.text);
    g_parts.push_back(ad::scale(gp, cfg.lambda_pc));
    report.terms.push_back({"g_pc", gp.item(), cfg.lambda_pc, true});
  }
  TripletBatch triplets{anchor,
                        view_codes(stack_rgb(pos_views), pos_cams, m.view_net, *embedder_),
                        ad::gather_rows(anchor, neg_rows),
                        b.ids,
                        b.ids,
                        neg_ids};
  const BindObjective bind =
      bind_objective(triplets, fake.rgb, b.cams, b.ids, field, m.view_net, *embedder_, cfg.tau);
  g_parts.push_back(ad::scale(bind.total, cfg.lambda_bind));
  report.terms.push_back({"bind", bind.total.item(), cfg.lambda_bind, true});
  finish_report(report);
  sum_all(g_parts).backward();
  opt_g_.step();
  ++step_;
  if (m.sigma_net.params().hash() != sigma_before) throw ContractError("sigma_net changed during image-to-3D training");
  return report;
}

std::vector<TexturedMesh> Trainer::generate_from_text(const ad::Tensor& t, Rng& rng) const {
  ad::NoGradGuard no_grad;
  const auto& m = *models_;
  const auto bs = t.shape()[0];
  std::vector<int> ids(static_cast<size_t>(bs), -1);
  ad::Tensor sample = t;
  if (enabled_.noise == NoiseKind::kDynamic) sample = inject_noise(t, ids, m.sigma_net, rng).sample;
  if (enabled_.noise == NoiseKind::kStatic) sample = inject_noise_static(t, ids, config_.static_sigma, rng).sample;
  const bool through = enabled_.text_through_mapping;
  const ad::Tensor tcode = through ? ad::Tensor::zeros({bs, config_.embed_dim}) : sample;
  const ad::Tensor z_geo = sample_latents(bs, config_.z_dim, rng);
  const ad::Tensor z_tex = sample_latents(bs, config_.z_dim, rng);
  const ad::Tensor w_geo = m.generator.map_latent(through ? ad::concat_last({z_geo, t}) : z_geo, Branch::kGeometry);
  const ad::Tensor w_tex = m.generator.map_latent(through ? ad::concat_last({z_tex, t}) : z_tex, Branch::kTexture);
  return m.generator.generate(make_code(w_geo, tcode), make_code(w_tex, tcode));
}

std::vector<TexturedMesh> Trainer::generate_from_views(const std::vector<RenderedView>& views, Rng& rng) const {
  if (!image_mode()) throw ContractError("image-conditioned generation requires an image-to-3D checkpoint");
  ad::NoGradGuard no_grad;
  const auto& m = *models_;
  std::vector<CameraPose> cams;
  for (const auto& v : views) cams.push_back(v.camera);
  const ad::Tensor codes = view_codes(stack_rgb(views), cams, m.view_net, *embedder_);
  const auto bs = codes.shape()[0];
  const ad::Tensor w_geo = m.generator.map_latent(sample_latents(bs, config_.z_dim, rng), Branch::kGeometry);
  const ad::Tensor w_tex = m.generator.map_latent(sample_latents(bs, config_.z_dim, rng), Branch::kTexture);
  return m.generator.generate(make_code(w_geo, codes), make_code(w_tex, codes));
}

// ---------------------------------------------------------------- checkpoints

namespace {

struct Blob {
  std::string name;
  bool raw = false;
  std::vector<float> floats;
  std::string bytes;
};

Blob float_blob(std::string name, std::span<const double> values) {
  Blob b{std::move(name), false, {}, {}};
  b.floats.reserve(values.size());
  for (double v : values) b.floats.push_back(static_cast<float>(v));
  return b;
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) v = byteswap_value(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf.append(p, sizeof(T));
  }
  void put_bytes(const std::string& s) { buf.append(s); }
  std::string buf;

 private:
  template <typename T>
  static T byteswap_value(T v) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
};

class Reader {
 public:
  explicit Reader(const std::string& data) : data_(data) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    std::array<unsigned char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw ChecksumError("checkpoint is truncated");
  }
  const std::string& data_;
  std::size_t pos_ = 0;
};

struct CheckpointData {
  std::uint64_t hash = 0;
  std::int64_t step = 0;
  std::map<std::string, Blob> blobs;
};

void write_checkpoint_file(const std::filesystem::path& path, std::uint64_t hash, std::int64_t step,
                           const std::vector<Blob>& blobs) {
  Writer w;
  w.put_bytes(std::string(kMagic, sizeof(kMagic)));
  w.put<std::uint32_t>(kFormatVersion);
  w.put<std::uint64_t>(hash);
  w.put<std::int64_t>(step);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(blobs.size()));
  for (const auto& b : blobs) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.name.size()));
    w.put_bytes(b.name);
    w.put<std::uint8_t>(b.raw ? 1 : 0);
    if (b.raw) {
      w.put<std::uint64_t>(b.bytes.size());
      w.put_bytes(b.bytes);
    } else {
      w.put<std::uint64_t>(b.floats.size());
      for (float f : b.floats) w.put<float>(f);
    }
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(w.buf.data()), static_cast<uInt>(w.buf.size())));
  w.put<std::uint32_t>(crc);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError(fmt::format("cannot write checkpoint {}", path.string()));
  os.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
}

CheckpointData read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError(fmt::format("checkpoint {} not found", path.string()));
  const std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (data.size() < sizeof(kMagic) + 4 || data.compare(0, sizeof(kMagic), std::string(kMagic, sizeof(kMagic))) != 0) {
    throw ChecksumError(fmt::format("{} is not a checkpoint", path.string()));
  }
  const std::string body = data.substr(0, data.size() - 4);
  Reader tail(data);
  (void)tail.get_bytes(data.size() - 4);
  const auto stored = tail.get<std::uint32_t>();
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
  if (crc != stored) throw ChecksumError(fmt::format("checkpoint {} failed its checksum", path.string()));

  Reader r(body);
  (void)r.get_bytes(sizeof(kMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) throw ConfigError(fmt::format("unsupported checkpoint version {}", version));
  CheckpointData out;
  out.hash = r.get<std::uint64_t>();
  out.step = r.get<std::int64_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Blob b;
    b.name = r.get_bytes(r.get<std::uint32_t>());
    b.raw = r.get<std::uint8_t>() != 0;
    const auto n = r.get<std::uint64_t>();
    if (b.raw) {
      b.bytes = r.get_bytes(n);
    } else {
      b.floats.resize(n);
      for (auto& f : b.floats) f = r.get<float>();
    }
    out.blobs[b.name] = std::move(b);
  }
  return out;
}

void restore_values(std::span<double> dst, const Blob& b) {
  if (b.raw || b.floats.size() != dst.size()) {
    throw ContractError(fmt::format("checkpoint blob '{}' has the wrong size", b.name));
  }
  for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(b.floats[i]);
}

const Blob& find_blob(const CheckpointData& d, const std::string& name) {
  const auto it = d.blobs.find(name);
  if (it == d.blobs.end()) throw ContractError(fmt::format("checkpoint is missing '{}'", name));
  return it->second;
}

void add_optimizer_blobs(std::vector<Blob>& blobs, const std::string& prefix, Adam& opt) {
  for (size_t i = 0; i < opt.tensors().size(); ++i) {
    blobs.push_back(float_blob(fmt::format("{}m.{}", prefix, i), opt.first_moments()[i]));
    blobs.push_back(float_blob(fmt::format("{}v.{}", prefix, i), opt.second_moments()[i]));
  }
  Blob t{prefix + "t", true, {}, std::to_string(opt.steps())};
  blobs.push_back(std::move(t));
}

void restore_optimizer(const CheckpointData& d, const std::string& prefix, Adam& opt) {
  for (size_t i = 0; i < opt.tensors().size(); ++i) {
    restore_values(opt.first_moments()[i], find_blob(d, fmt::format("{}m.{}", prefix, i)));
    restore_values(opt.second_moments()[i], find_blob(d, fmt::format("{}v.{}", prefix, i)));
  }
  opt.set_steps(std::stoll(find_blob(d, prefix + "t").bytes));
}

}  // namespace

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  std::vector<Blob> blobs;
  for (auto& [prefix, set] : models_->named_sets()) {
    for (const auto& p : set->params()) blobs.push_back(float_blob(prefix + p.name, p.tensor.values()));
  }
  for (const auto& p : embedder_->frozen_params().params()) blobs.push_back(float_blob("embed." + p.name, p.tensor.values()));
  auto& self = const_cast<Trainer&>(*this);
  add_optimizer_blobs(blobs, "opt_g.", self.opt_g_);
  add_optimizer_blobs(blobs, "opt_d.", self.opt_d_);
  std::ostringstream rng_state;
  rng_state << rng_;
  blobs.push_back({"rng", true, {}, rng_state.str()});
  blobs.push_back({"pipeline", true, {}, image_mode() ? "image" : "text"});
  blobs.push_back({"mode", true, {}, mode_name(config_.mode)});
  write_checkpoint_file(path, architecture_hash(config_), step_, blobs);
}

namespace {

void restore_parameters(const CheckpointData& d, Models& models, const Embedder& embedder) {
  for (auto& [prefix, set] : models.named_sets()) {
    for (auto& p : set->params()) restore_values(p.tensor.mutable_values(), find_blob(d, prefix + p.name));
  }
  for (const auto& p : embedder.frozen_params().params()) {
    const Blob& b = find_blob(d, "embed." + p.name);
    const auto v = p.tensor.values();
    for (size_t i = 0; i < v.size(); ++i) {
      if (b.floats.size() != v.size() || static_cast<float>(v[i]) != b.floats[i]) {
        throw ContractError("checkpoint was trained with a different embedder");
      }
    }
  }
}

}  // namespace

void Trainer::load_checkpoint(const std::filesystem::path& path, bool force) {
  const CheckpointData d = read_checkpoint_file(path);
  if (d.hash != architecture_hash(config_) && !force) {
    throw ConfigError(fmt::format("checkpoint {} has config hash {:016x}, expected {:016x}", path.string(), d.hash,
                                  architecture_hash(config_)));
  }
  restore_parameters(d, *models_, *embedder_);
  const bool ckpt_image = find_blob(d, "pipeline").bytes == "image";
  if (ckpt_image != image_mode()) {
    config_.pipeline = ckpt_image ? Pipeline::kImageTo3D : Pipeline::kTextTo3D;
    rebuild_optimizers();
  }
  restore_optimizer(d, "opt_g.", opt_g_);
  restore_optimizer(d, "opt_d.", opt_d_);
  std::istringstream rng_state(find_blob(d, "rng").bytes);
  rng_state >> rng_;
  step_ = d.step;
}

void Trainer::load_parameters(const std::filesystem::path& path, bool force) {
  const CheckpointData d = read_checkpoint_file(path);
  if (d.hash != architecture_hash(config_) && !force) {
    throw ConfigError(fmt::format("checkpoint {} has config hash {:016x}, expected {:016x}", path.string(), d.hash,
                                  architecture_hash(config_)));
  }
  restore_parameters(d, *models_, *embedder_);
  if (find_blob(d, "pipeline").bytes == "image" && !image_mode()) begin_image_to_3d();
}

}  // namespace ntf3d

#include "dali/ldm.hpp"

#include <nlohmann/json.hpp>

#include "dali/ops.hpp"

namespace dali::model {

using nlohmann::json;

int LatentDiffusionModel::size_multiple() const {
  return cfg.vae.factor() * (1 << (cfg.unet.levels() - 1));
}

LatentDiffusionModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.unet.latent_channels != cfg.vae.latent_channels || cfg.unet.d_L != cfg.encoder.d_L)
    throw ConfigError("model: U-Net latent channels and d_L must match the VAE and encoder");
  LatentDiffusionModel m;
  m.cfg = cfg;
  m.schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  const Rng master(seed, 0x6d6f64656cu);
  Rng r1 = master.split("vae"), r2 = master.split("encoder"), r3 = master.split("unet");
  init_vae(m.vae, cfg.vae, r1);
  init_encoder(m.diffusion, cfg.encoder, r2);
  init_unet(m.diffusion, cfg.unet, r3);
  return m;
}

namespace {

json vae_json(const VaeConfig& c) {
  return {{"in_channels", c.in_channels},
          {"latent_channels", c.latent_channels},
          {"widths", c.widths},
          {"kl_weight", c.kl_weight}};
}

VaeConfig vae_from(const json& j) {
  VaeConfig c;
  c.in_channels = j.at("in_channels");
  c.latent_channels = j.at("latent_channels");
  c.widths = j.at("widths").get<std::vector<int>>();
  c.kl_weight = j.at("kl_weight");
  return c;
}

json read_meta(const std::filesystem::path& path, ParamStore& out) {
  std::string header;
  out = num::load_checkpoint(path, &header);
  try {
    return json::parse(header);
  } catch (const json::exception& e) {
    throw FormatError("checkpoint '" + path.string() + "': " + e.what());
  }
}

}  // namespace

void save_vae(const LatentDiffusionModel& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const json meta = {{"kind", "vae"},
                     {"vae", vae_json(m.cfg.vae)},
                     {"latent_scale", m.latent_scale},
                     {"calibration", m.calibration}};
  num::save_checkpoint(m.vae, dir / kVaeCheckpoint, meta.dump());
}

void save_diffusion(const LatentDiffusionModel& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& u = m.cfg.unet;
  const auto& e = m.cfg.encoder;
  std::vector<int> attention(u.attention.begin(), u.attention.end());
  const json meta = {
      {"kind", "diffusion"},
      {"encoder",
       {{"k", e.k}, {"d_L", e.d_L}, {"max_clock_period", e.max_clock_period},
        {"identity_phi", e.identity_phi}}},
      {"unet",
       {{"latent_channels", u.latent_channels},
        {"base_channels", u.base_channels},
        {"multipliers", u.multipliers},
        {"attention", attention},
        {"d_attn", u.d_attn},
        {"d_L", u.d_L},
        {"time_dim", u.time_dim}}},
      {"schedule", {{"T", m.cfg.T}, {"beta_start", m.cfg.beta_start}, {"beta_end", m.cfg.beta_end}}},
      {"sampler",
       {{"steps", m.cfg.sampler.steps}, {"guidance_scale", m.cfg.sampler.guidance_scale}}}};
  num::save_checkpoint(m.diffusion, dir / kDiffusionCheckpoint, meta.dump());
}

LatentDiffusionModel load_model(const std::filesystem::path& dir, bool with_diffusion) {
  LatentDiffusionModel m;
  try {
    const json v = read_meta(dir / kVaeCheckpoint, m.vae);
    if (v.value("kind", "") != "vae") throw FormatError("vae.ckpt does not hold a VAE");
    m.cfg.vae = vae_from(v.at("vae"));
    m.latent_scale = v.at("latent_scale");
    m.calibration = v.at("calibration");
    if (with_diffusion) {
      const json d = read_meta(dir / kDiffusionCheckpoint, m.diffusion);
      if (d.value("kind", "") != "diffusion")
        throw FormatError("diffusion.ckpt does not hold a diffusion model");
      const auto& e = d.at("encoder");
      m.cfg.encoder.k = e.at("k");
      m.cfg.encoder.d_L = e.at("d_L");
      m.cfg.encoder.max_clock_period = e.at("max_clock_period");
      m.cfg.encoder.identity_phi = e.at("identity_phi");
      const auto& u = d.at("unet");
      m.cfg.unet.latent_channels = u.at("latent_channels");
      m.cfg.unet.base_channels = u.at("base_channels");
      m.cfg.unet.multipliers = u.at("multipliers").get<std::vector<int>>();
      const auto att = u.at("attention").get<std::vector<int>>();
      m.cfg.unet.attention.assign(att.begin(), att.end());
      m.cfg.unet.d_attn = u.at("d_attn");
      m.cfg.unet.d_L = u.at("d_L");
      m.cfg.unet.time_dim = u.at("time_dim");
      const auto& s = d.at("schedule");
      m.cfg.T = s.at("T");
      m.cfg.beta_start = s.at("beta_start");
      m.cfg.beta_end = s.at("beta_end");
      m.cfg.sampler.steps = d.at("sampler").at("steps");
      m.cfg.sampler.guidance_scale = d.at("sampler").at("guidance_scale");
      m.schedule = make_schedule(m.cfg.T, m.cfg.beta_start, m.cfg.beta_end);
    }
  } catch (const json::exception& e) {
    throw FormatError("checkpoint header in '" + dir.string() + "': " + e.what());
  }
  return m;
}

std::vector<LatentItem> make_latent_set(const LatentDiffusionModel& m,
                                        const std::vector<data::HeatmapSet>& samples,
                                        bool augment) {
  const ParamStore vae = m.vae.ema_snapshot();
  std::vector<LatentItem> items;
  num::NoGradGuard guard;
  for (const auto& s : samples)
    for (int a = 0; a <= (augment ? data::kAugmentations : 0); ++a) {
      const data::HeatmapSet v = a == 0 ? s : data::augment(s, a);
      if (v.params.macro_count() > m.cfg.encoder.k) continue;
      const Tensor mu = vae_encode(vae, m.cfg.vae, to_batch({&v})).mu;
      items.push_back({num::scale(mu, m.latent_scale), v.params});
    }
  return items;
}

TrainLog train_diffusion(LatentDiffusionModel& m, const std::vector<LatentItem>& items,
                         const DiffusionTrainConfig& cfg,
                         const std::function<void(int, double)>& on_step) {
  if (items.empty()) throw ConfigError("train_diffusion: no training latents");
  if (cfg.steps < 0 || cfg.step.batch < 1) throw ConfigError("train_diffusion: invalid schedule");
  const auto& shape = items.front().z.shape();
  for (const auto& it : items)
    if (it.z.shape() != shape)
      throw ShapeError("train_diffusion: latents must share one shape (mixed sample sizes)");
  const Rng master(cfg.seed, 0x646966u);
  TrainLog log;
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng = master.split(static_cast<std::uint64_t>(step));
    std::vector<Tensor> zs;
    std::vector<data::CircuitParams> conds;
    for (int b = 0; b < cfg.step.batch; ++b) {
      const auto& it = items[rng.below(items.size())];
      zs.push_back(it.z);
      conds.push_back(it.params);
    }
    const auto stats = diffusion_train_step(m.diffusion, m.cfg.unet, m.cfg.encoder, m.schedule,
                                            num::concat(zs, 0), conds, cfg.step, rng);
    log.loss.push_back(stats.loss);
    if (on_step) on_step(step, stats.loss);
  }
  return log;
}

LatentDiffusionGenerator::LatentDiffusionGenerator(const LatentDiffusionModel& m)
    : cfg_(m.cfg),
      schedule_(m.schedule),
      vae_(m.vae.ema_snapshot()),
      diffusion_(m.diffusion.ema_snapshot()),
      latent_scale_(m.latent_scale),
      multiple_(m.size_multiple()) {
  if (schedule_.T == 0) throw ConfigError("generator: model has no diffusion schedule");
}

std::vector<float> LatentDiffusionGenerator::generate(const data::CircuitParams& params,
                                                      Rng& rng) const {
  num::NoGradGuard guard;
  const int f = cfg_.vae.factor();
  const Tensor L =
      num::reshape(encode(params, diffusion_, cfg_.encoder), {1, cfg_.encoder.k, cfg_.encoder.d_L});
  const NoisePredictor predictor = [this](const Tensor& x, const std::vector<int>& t,
                                          const Tensor& l) {
    return predict_noise(diffusion_, cfg_.unet, x, t, l);
  };
  const Tensor z = sample_loop({1, cfg_.vae.latent_channels, params.height / f, params.width / f},
                               L, schedule_, predictor, cfg_.sampler, rng);
  const Tensor x = vae_decode(vae_, cfg_.vae, num::scale(z, 1.0 / latent_scale_));
  const auto v = x.to_vector();
  return {v.begin(), v.end()};
}

}  // namespace dali::model

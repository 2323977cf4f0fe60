#include "config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>

extern char** environ;

namespace dali::cli {

json default_config() {
  return json{
      {"run", {{"seed", 0}, {"precision", "f32"}}},
      {"vae",
       {{"latent_channels", 4},
        {"widths", {32, 64, 128}},
        {"kl_weight", 1e-6},
        {"steps", 2000},
        {"batch", 8},
        {"crop", 24},
        {"augment", true},
        {"lr", 1e-3},
        {"weight_decay", 1e-4},
        {"ema_decay", 0.999}}},
      {"diffusion",
       {{"k", 64},
        {"d_L", 64},
        {"max_clock_period", 10.0},
        {"base_channels", 32},
        {"multipliers", {1, 2}},
        {"attention", {true, true}},
        {"d_attn", 64},
        {"time_dim", 128},
        {"T", 1000},
        {"beta_start", 1e-4},
        {"beta_end", 0.02},
        {"sampling_steps", 100},
        {"guidance_scale", 1.0},
        {"steps", 4000},
        {"batch", 16},
        {"cond_dropout", 0.1},
        {"lr", 5e-4},
        {"weight_decay", 1e-4},
        {"ema_decay", 0.999},
        {"augment", true}}},
      {"pipeline",
       {{"aspect_lo", 0.5},
        {"aspect_hi", 2.0},
        {"min_gap", 0.0625},
        {"max_tries", 1000},
        {"area_lo", 0.1},
        {"area_hi", 0.4},
        {"threshold", 0.5},
        {"min_component", 4},
        {"power_floor", 0.05},
        {"utilization_tolerance", 0.05},
        {"area_tolerance", 0.2}}},
      {"metrics", {{"pairwise_bins", 20}, {"histogram_bins", 20}}},
      {"downstream",
       {{"task", "ir_drop"},
        {"kernel", 5},
        {"deconv_kernel", 5},
        {"channels", {16, 64, 128, 512}},
        {"lr", 5e-5},
        {"weight_decay", 0.0},
        {"batch", 64},
        {"steps", 125},
        {"finetune_steps", 125}}},
  };
}

namespace {

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return a.type() == b.type();
}

void merge(json& base, const json& over, const std::string& where) {
  if (!over.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [section, body] : over.items()) {
    if (!base.contains(section)) throw ConfigError(where + ": unknown section '" + section + "'");
    if (!body.is_object()) throw ConfigError(where + ": section '" + section + "' must be an object");
    for (const auto& [key, value] : body.items()) {
      auto& slot = base[section];
      if (!slot.contains(key))
        throw ConfigError(where + ": unknown key '" + section + "." + key + "'");
      if (!same_kind(slot[key], value))
        throw ConfigError(where + ": '" + section + "." + key + "' has the wrong type");
      slot[key] = value;
    }
  }
}

std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

std::map<std::string, std::string> dali_environment() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv = *e;
    const auto eq = kv.find('=');
    if (eq != std::string::npos && kv.rfind("DALI_", 0) == 0) out[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  return out;
}

json resolve_config(const std::filesystem::path& file, const std::map<std::string, std::string>& env) {
  json cfg = default_config();
  if (!file.empty()) {
    std::ifstream is(file);
    if (!is) throw ConfigError("cannot open config '" + file.string() + "'");
    json j;
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError("config '" + file.string() + "': " + e.what());
    }
    merge(cfg, j, file.string());
  }
  json over = json::object();
  for (const auto& [name, raw] : env) {
    std::string matched;
    for (const auto& [section, body] : cfg.items())
      if (name.rfind("DALI_" + upper(section) + "_", 0) == 0) matched = section;
    if (matched.empty()) continue;  // not a config override
    const std::string key_upper = name.substr(6 + matched.size());
    std::string key;
    for (const auto& [k, _] : cfg[matched].items())
      if (upper(k) == key_upper) key = k;
    if (key.empty()) throw ConfigError("environment: unknown key in " + name);
    json v;
    try {
      v = json::parse(raw);
    } catch (const json::exception&) {
      v = raw;  // bare strings
    }
    over[matched][key] = v;
  }
  merge(cfg, over, "environment");
  return cfg;
}

RunConfig typed_config(const json& c) {
  RunConfig r;
  try {
    r.seed = c.at("run").at("seed").get<std::uint64_t>();
    r.precision = c.at("run").at("precision").get<std::string>();
    if (r.precision != "f32" && r.precision != "f64")
      throw ConfigError("run.precision must be f32 or f64");

    const auto& v = c.at("vae");
    auto& vc = r.model.vae;
    vc.latent_channels = v.at("latent_channels");
    vc.widths = v.at("widths").get<std::vector<int>>();
    vc.kl_weight = v.at("kl_weight");
    auto& vt = r.vae_train;
    vt.steps = v.at("steps");
    vt.batch = v.at("batch");
    vt.crop = v.at("crop");
    vt.augment = v.at("augment");
    vt.lr = v.at("lr");
    vt.weight_decay = v.at("weight_decay");
    vt.ema_decay = v.at("ema_decay");
    vt.seed = r.seed;

    const auto& d = c.at("diffusion");
    auto& ec = r.model.encoder;
    ec.k = d.at("k");
    ec.d_L = d.at("d_L");
    ec.max_clock_period = d.at("max_clock_period");
    auto& uc = r.model.unet;
    uc.latent_channels = vc.latent_channels;
    uc.base_channels = d.at("base_channels");
    uc.multipliers = d.at("multipliers").get<std::vector<int>>();
    uc.attention = d.at("attention").get<std::vector<bool>>();
    uc.d_attn = d.at("d_attn");
    uc.d_L = ec.d_L;
    uc.time_dim = d.at("time_dim");
    r.model.T = d.at("T");
    r.model.beta_start = d.at("beta_start");
    r.model.beta_end = d.at("beta_end");
    r.model.sampler.steps = d.at("sampling_steps");
    r.model.sampler.guidance_scale = d.at("guidance_scale");
    auto& dt = r.diffusion_train;
    dt.steps = d.at("steps");
    dt.step.batch = d.at("batch");
    dt.step.cond_dropout = d.at("cond_dropout");
    dt.step.lr = d.at("lr");
    dt.step.weight_decay = d.at("weight_decay");
    dt.step.ema_decay = d.at("ema_decay");
    dt.seed = r.seed;
    r.diffusion_augment = d.at("augment");

    const auto& p = c.at("pipeline");
    auto& b = r.pipeline.boxes;
    b.aspect_lo = p.at("aspect_lo");
    b.aspect_hi = p.at("aspect_hi");
    b.min_gap = p.at("min_gap");
    b.max_tries = p.at("max_tries");
    b.area_lo = p.at("area_lo");
    b.area_hi = p.at("area_hi");
    r.pipeline.post.threshold = p.at("threshold");
    r.pipeline.post.min_component = p.at("min_component");
    r.pipeline.post.power_floor = p.at("power_floor");
    r.pipeline.check.utilization_tolerance = p.at("utilization_tolerance");
    r.pipeline.check.area_tolerance = p.at("area_tolerance");

    r.pairwise_bins = c.at("metrics").at("pairwise_bins");
    r.histogram_bins = c.at("metrics").at("histogram_bins");

    const auto& ds = c.at("downstream");
    r.task = ds.at("task");
    auto& pc = r.predictor;
    pc.kernel = ds.at("kernel");
    pc.deconv_kernel = ds.at("deconv_kernel");
    pc.channels = ds.at("channels").get<std::vector<int>>();
    pc.lr = ds.at("lr");
    pc.weight_decay = ds.at("weight_decay");
    pc.batch = ds.at("batch");
    pc.steps = ds.at("steps");
    r.finetune_steps = ds.at("finetune_steps");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (r.vae_train.steps < 0 || r.diffusion_train.steps < 0 || r.predictor.steps < 0 ||
      r.finetune_steps < 0)
    throw ConfigError("config: step counts must be non-negative");
  if (r.pairwise_bins < 1 || r.histogram_bins < 1) throw ConfigError("config: bins must be positive");
  downstream::task(r.task);
  return r;
}

void write_json(const json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
  os << j.dump(2) << '\n';
}

}  // namespace dali::cli

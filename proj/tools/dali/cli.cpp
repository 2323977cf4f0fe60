#include "cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <thread>

#include "config.hpp"
#include "dali/metrics.hpp"
#include "dali/param_store.hpp"
#include "selfcheck.hpp"

namespace dali::cli {

namespace fs = std::filesystem;

namespace {

constexpr char kResolvedConfig[] = "resolved_config.json";
constexpr char kReport[] = "report.json";
constexpr char kTiming[] = "timing.json";

struct Globals {
  std::string config;
  int workers = std::max(1u, std::thread::hardware_concurrency());
  std::optional<std::uint64_t> seed;
};

struct Context {
  json resolved;
  RunConfig cfg;
  int workers = 1;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::vector<data::HeatmapSet> load_set(const fs::path& manifest) {
  auto samples = data::load_manifest(manifest).load_all();
  if (samples.empty()) throw FormatError("manifest '" + manifest.string() + "' lists no samples");
  return samples;
}

void write_outputs(const Context& ctx, const fs::path& dir, const json& report,
                   const json& timing) {
  fs::create_directories(dir);
  write_json(ctx.resolved, dir / kResolvedConfig);
  if (!report.is_null()) write_json(report, dir / kReport);
  if (!timing.is_null()) write_json(timing, dir / kTiming);
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_loss_csv(const std::vector<double>& loss, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
  os << "step,loss\n";
  for (std::size_t i = 0; i < loss.size(); ++i) os << i << ',' << num(loss[i]) << '\n';
}

std::function<void(int, double)> progress(std::ostream& err, const std::string& what, int steps) {
  const int every = std::max(1, steps / 10);
  return [&err, what, steps, every](int step, double loss) {
    if (step % every == 0 || step + 1 == steps)
      err << what << " step " << step + 1 << '/' << steps << " loss " << num(loss) << '\n';
  };
}

num::DType precision(const RunConfig& c) {
  return c.precision == "f64" ? num::DType::f64 : num::DType::f32;
}

// ---------------------------------------------------------------------------

struct ToyDataArgs {
  int n = 0;
  int size = 48;
  int height = 0;
  int width = 0;
  std::string out;
};

void toy_data(const Context& ctx, const ToyDataArgs& a) {
  const int h = a.height > 0 ? a.height : a.size, w = a.width > 0 ? a.width : a.size;
  if (a.n < 1 || h < 1 || w < 1) throw ConfigError("toy-data: --n and the map size must be positive");
  const auto m = data::make_toy_dataset(a.n, h, w, ctx.cfg.seed, a.out);
  write_outputs(ctx, a.out, json::object({{"command", "toy-data"},
                                          {"samples", m.size()},
                                          {"height", h},
                                          {"width", w},
                                          {"seed", ctx.cfg.seed}}),
                nullptr);
  *ctx.out << "wrote " << m.size() << " samples to " << a.out << '\n';
}

struct SplitArgs {
  std::string manifest;
  std::string out;
  std::vector<std::string> designs;
  std::vector<std::string> options;
};

void split(const Context& ctx, const SplitArgs& a) {
  std::vector<data::ParamOption> opts;
  for (const auto& o : a.options) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("split: --option expects key=value, got '" + o + "'");
    const std::string key = o.substr(0, eq);
    if (key != "clock_period" && key != "utilization" && key != "num_macros")
      throw ConfigError("split: unknown option key '" + key + "'");
    try {
      opts.push_back({key, std::stod(o.substr(eq + 1))});
    } catch (const std::exception&) {
      throw ConfigError("split: option value in '" + o + "' is not a number");
    }
  }
  const auto m = data::load_manifest(a.manifest);
  const auto r = data::split_dataset(m, a.designs, opts);
  fs::create_directories(a.out);
  data::save_manifest(r.train, fs::path(a.out) / "train.json");
  data::save_manifest(r.test, fs::path(a.out) / "test.json");
  write_outputs(ctx, a.out,
                {{"command", "split"}, {"train", r.train.size()}, {"test", r.test.size()}}, nullptr);
  *ctx.out << "train " << r.train.size() << ", test " << r.test.size() << '\n';
}

struct AugmentArgs {
  std::string manifest;
  std::string out;
  std::vector<int> indices;
};

void augment(const Context& ctx, AugmentArgs a) {
  if (a.indices.empty())
    for (int i = 1; i <= data::kAugmentations; ++i) a.indices.push_back(i);
  for (int i : a.indices)
    if (i < 1 || i > data::kAugmentations)
      throw ConfigError("augment: index " + std::to_string(i) + " outside 1.." +
                        std::to_string(data::kAugmentations));
  const auto samples = load_set(a.manifest);
  std::vector<data::HeatmapSet> all;
  for (const auto& s : samples) {
    all.push_back(s);
    for (int i : a.indices) {
      auto t = data::augment(s, i);
      t.id = s.id + "_aug" + std::to_string(i);
      all.push_back(std::move(t));
    }
  }
  const auto m = data::write_dataset(all, a.out, "train");
  write_outputs(ctx, a.out, {{"command", "augment"}, {"samples", m.size()}}, nullptr);
  *ctx.out << "wrote " << m.size() << " samples to " << a.out << '\n';
}

struct TrainVaeArgs {
  std::string data;
  std::string out;
};

void train_vae(const Context& ctx, const TrainVaeArgs& a) {
  const auto& c = ctx.cfg;
  const auto samples = load_set(a.data);
  num::PrecisionScope scope(precision(c));
  auto m = model::init_model(c.model, c.seed);
  Stopwatch sw;
  const auto log = model::train_vae(m.vae, c.model.vae, samples, c.vae_train,
                                    progress(*ctx.err, "vae", c.vae_train.steps));
  const double train_s = sw.seconds();
  m.latent_scale = model::fit_latent_scale(m.vae.ema_snapshot(), c.model.vae, samples);
  m.calibration = pipeline::fit_utilization_calibration(samples);
  model::save_vae(m, a.out);
  write_loss_csv(log.loss, fs::path(a.out) / "vae_loss.csv");
  write_outputs(ctx, a.out,
                {{"command", "train-vae"},
                 {"samples", samples.size()},
                 {"steps", log.loss.size()},
                 {"final_loss", log.loss.empty() ? 0.0 : log.loss.back()},
                 {"latent_scale", m.latent_scale},
                 {"calibration", m.calibration},
                 {"parameters", m.vae.parameter_count()}},
                {{"train_seconds", train_s}, {"total_seconds", sw.seconds()}});
  *ctx.out << "vae trained: scale " << num(m.latent_scale) << ", calibration "
           << num(m.calibration) << '\n';
}

struct TrainDiffusionArgs {
  std::string data;
  std::string ckpt;
  std::string out;
};

void train_diffusion(const Context& ctx, const TrainDiffusionArgs& a) {
  const auto& c = ctx.cfg;
  const auto samples = load_set(a.data);
  auto loaded = model::load_model(a.ckpt, false);
  num::PrecisionScope scope(precision(c));
  model::ModelConfig mc = c.model;
  mc.vae = loaded.cfg.vae;
  mc.unet.latent_channels = mc.vae.latent_channels;
  auto m = model::init_model(mc, c.seed);
  m.vae = std::move(loaded.vae);
  m.latent_scale = loaded.latent_scale;
  m.calibration = loaded.calibration;
  Stopwatch sw;
  const auto items = model::make_latent_set(m, samples, c.diffusion_augment);
  const double encode_s = sw.seconds();
  const auto log = model::train_diffusion(m, items, c.diffusion_train,
                                          progress(*ctx.err, "diffusion", c.diffusion_train.steps));
  const fs::path out = a.out.empty() ? fs::path(a.ckpt) : fs::path(a.out);
  if (!a.out.empty()) model::save_vae(m, out);
  model::save_diffusion(m, out);
  write_loss_csv(log.loss, out / "diffusion_loss.csv");
  write_outputs(ctx, out,
                {{"command", "train-diffusion"},
                 {"samples", samples.size()},
                 {"latents", items.size()},
                 {"steps", log.loss.size()},
                 {"final_loss", log.loss.empty() ? 0.0 : log.loss.back()},
                 {"parameters", m.diffusion.parameter_count()}},
                {{"encode_seconds", encode_s}, {"total_seconds", sw.seconds()}});
  *ctx.out << "diffusion trained on " << items.size() << " latents\n";
}

struct GenerateArgs {
  std::string requests;
  std::string ckpt;
  std::string out;
};

void generate(const Context& ctx, const GenerateArgs& a) {
  const auto& c = ctx.cfg;
  const auto requests = pipeline::load_requests(a.requests);
  if (requests.empty()) throw FormatError("request file lists no requests");
  auto m = model::load_model(a.ckpt, true);
  m.cfg.sampler = c.model.sampler;
  const model::LatentDiffusionGenerator g(m);
  for (const auto& r : requests) pipeline::validate_request(r, g);
  auto opt = c.pipeline;
  opt.calibration = m.calibration;
  Stopwatch sw;
  const auto res = pipeline::generate_dataset(requests, g, opt, c.seed, ctx.workers, a.out);
  json reps = json::array(), times = json::array();
  int accepted = 0;
  long iterations = 0;
  for (const auto& r : res.reports) {
    reps.push_back({{"id", r.id},
                    {"accepted", r.accepted},
                    {"iterations", r.iterations},
                    {"rejections", r.rejections}});
    times.push_back({{"id", r.id}, {"attempt_seconds", r.seconds}});
    if (r.accepted) ++accepted, iterations += r.iterations;
  }
  write_outputs(ctx, a.out,
                {{"command", "generate"},
                 {"requested", requests.size()},
                 {"accepted", accepted},
                 {"mean_iterations", accepted ? static_cast<double>(iterations) / accepted : 0.0},
                 {"requests", reps}},
                {{"total_seconds", sw.seconds()}, {"requests", times}});
  *ctx.out << "accepted " << accepted << " of " << requests.size() << " requests\n";
  if (accepted < static_cast<int>(requests.size()))
    *ctx.err << "warning: " << requests.size() - accepted
             << " requests hit their iteration cap; see " << (fs::path(a.out) / kReport).string()
             << '\n';
}

struct EvaluateArgs {
  std::string a;
  std::string b;
  std::string out;
};

json set_stats(const std::vector<metrics::MapRef>& maps, const RunConfig& c, int workers) {
  double hot = 0, low = 0;
  for (const auto& m : maps) {
    const auto f = metrics::hotspot_fraction(m);
    hot += f.hot, low += f.low;
  }
  hot /= static_cast<double>(maps.size());
  low /= static_cast<double>(maps.size());
  json j = {{"hotspot", {{"hot", hot}, {"low", low}, {"middle", 1.0 - hot - low}}}};
  if (maps.size() >= 2) {
    const auto p = metrics::pairwise_ssim(maps, workers, c.pairwise_bins);
    j["pairwise_ssim"] = {{"average", p.average},
                          {"stdv", p.stdv},
                          {"comparisons", p.comparisons},
                          {"histogram", p.histogram}};
  } else {
    j["pairwise_ssim"] = nullptr;
  }
  return j;
}

void evaluate(const Context& ctx, const EvaluateArgs& args) {
  const auto& c = ctx.cfg;
  const auto a = load_set(args.a), b = load_set(args.b);
  const fs::path out(args.out);
  const fs::path dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  Stopwatch sw;
  json channels = json::object();
  std::vector<std::pair<std::string, metrics::HistogramStats>> hists_a, hists_b;
  for (int ci = 0; ci < data::kChannels; ++ci) {
    const auto ch = static_cast<data::Channel>(ci);
    const std::string name = data::channel_name(ch);
    const auto ma = metrics::channel_maps(a, ch), mb = metrics::channel_maps(b, ch);
    json j;
    j["fid"] = metrics::fid(ma, mb);
    // L1 between the per-pixel mean maps; needs matching sizes.
    const bool same = std::all_of(a.begin(), a.end(), [&](const auto& s) {
      return s.height() == b[0].height() && s.width() == b[0].width();
    }) && std::all_of(b.begin(), b.end(), [&](const auto& s) {
      return s.height() == b[0].height() && s.width() == b[0].width();
    });
    if (same) {
      const std::size_t n = b[0].plane();
      std::vector<float> mean_a(n, 0.0f), mean_b(n, 0.0f);
      for (const auto& m : ma)
        for (std::size_t i = 0; i < n; ++i) mean_a[i] += m.values[i] / static_cast<float>(ma.size());
      for (const auto& m : mb)
        for (std::size_t i = 0; i < n; ++i) mean_b[i] += m.values[i] / static_cast<float>(mb.size());
      j["mean_map_l1"] = metrics::l1_map({mean_a, b[0].height(), b[0].width()},
                                         {mean_b, b[0].height(), b[0].width()});
    } else {
      j["mean_map_l1"] = nullptr;
    }
    const auto ha = metrics::histogram_stats(ma, c.histogram_bins);
    const auto hb = metrics::histogram_stats(mb, c.histogram_bins);
    j["a"] = set_stats(ma, c, ctx.workers);
    j["b"] = set_stats(mb, c, ctx.workers);
    j["a"]["pixel_mean"] = ha.mean;
    j["a"]["pixel_stdv"] = ha.stdv;
    j["b"]["pixel_mean"] = hb.mean;
    j["b"]["pixel_stdv"] = hb.stdv;
    channels[name] = j;
    hists_a.emplace_back(name, ha);
    hists_b.emplace_back(name, hb);
  }
  fs::create_directories(dir);
  for (std::size_t i = 0; i < hists_a.size(); ++i) {
    const auto path = dir / ("histogram_" + hists_a[i].first + ".csv");
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write '" + path.string() + "'");
    os << "bin_lo,bin_hi,a_count,a_frequency,b_count,b_frequency\n";
    const auto& ha = hists_a[i].second;
    const auto& hb = hists_b[i].second;
    const int bins = static_cast<int>(ha.counts.size());
    for (int k = 0; k < bins; ++k)
      os << num(static_cast<double>(k) / bins) << ',' << num(static_cast<double>(k + 1) / bins) << ','
         << ha.counts[k] << ',' << num(ha.frequencies[k]) << ',' << hb.counts[k] << ','
         << num(hb.frequencies[k]) << '\n';
  }
  metrics::write_features_csv(metrics::export_features(a), dir / "features_a.csv");
  metrics::write_features_csv(metrics::export_features(b), dir / "features_b.csv");
  write_json({{"command", "evaluate"},
              {"a", {{"manifest", args.a}, {"samples", a.size()}}},
              {"b", {{"manifest", args.b}, {"samples", b.size()}}},
              {"feature_extractor", metrics::default_extractor().name},
              {"channels", channels}},
             out);
  write_json(ctx.resolved, dir / kResolvedConfig);
  write_json({{"total_seconds", sw.seconds()}}, dir / kTiming);
  *ctx.out << "wrote " << out.string() << '\n';
}

struct FeaturesArgs {
  std::string data;
  std::string out;
};

void features(const Context& ctx, const FeaturesArgs& a) {
  const auto samples = load_set(a.data);
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  metrics::write_features_csv(metrics::export_features(samples), out);
  write_json(ctx.resolved, (out.has_parent_path() ? out.parent_path() : fs::path(".")) / kResolvedConfig);
  *ctx.out << "wrote " << samples.size() << " feature rows to " << a.out << '\n';
}

void check_sizes(const std::vector<data::HeatmapSet>& samples, int multiple) {
  for (const auto& s : samples)
    if (s.height() % multiple != 0 || s.width() % multiple != 0)
      throw ConfigError("sample '" + s.id + "' is " + std::to_string(s.height()) + "x" +
                        std::to_string(s.width()) + "; predictor sizes must be multiples of " +
                        std::to_string(multiple));
}

struct DownstreamTrainArgs {
  std::string data;
  std::string out;
  std::string task;
};

void downstream_train(const Context& ctx, const DownstreamTrainArgs& a) {
  const auto& c = ctx.cfg;
  const auto t = downstream::task(a.task.empty() ? c.task : a.task);
  const auto samples = load_set(a.data);
  num::PrecisionScope scope(precision(c));
  auto p = downstream::build_predictor(c.predictor, t, c.seed);
  check_sizes(samples, p.size_multiple());
  Stopwatch sw;
  const auto log = downstream::train_predictor(p, samples, c.predictor.steps, c.seed);
  const double train_s = sw.seconds();
  const auto fit = downstream::evaluate_predictor(p, samples, ctx.workers);
  fs::create_directories(a.out);
  downstream::save_predictor(p, fs::path(a.out) / "predictor.ckpt");
  write_loss_csv(log.loss, fs::path(a.out) / "loss.csv");
  write_outputs(ctx, a.out,
                {{"command", "downstream-train"},
                 {"task", t.name},
                 {"samples", samples.size()},
                 {"steps", log.loss.size()},
                 {"final_loss", log.loss.empty() ? 0.0 : log.loss.back()},
                 {"train_l1", fit.l1},
                 {"train_hotspot_l1", fit.hotspot_l1},
                 {"parameters", p.params.parameter_count()}},
                {{"train_seconds", train_s}, {"total_seconds", sw.seconds()}});
  *ctx.out << t.name << " predictor: train L1 " << num(fit.l1) << '\n';
}

struct DownstreamEvalArgs {
  std::string model;
  std::string data;
  std::string out;
};

void downstream_eval(const Context& ctx, const DownstreamEvalArgs& a) {
  const auto p = downstream::load_predictor(a.model);
  const auto samples = load_set(a.data);
  check_sizes(samples, p.size_multiple());
  Stopwatch sw;
  const auto s = downstream::evaluate_predictor(p, samples, ctx.workers);
  const fs::path out(a.out);
  const fs::path dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  write_json({{"command", "downstream-eval"},
              {"task", p.task.name},
              {"samples", samples.size()},
              {"l1", s.l1},
              {"hotspot_l1", s.hotspot_l1}},
             out);
  write_json(ctx.resolved, dir / kResolvedConfig);
  write_json({{"total_seconds", sw.seconds()}}, dir / kTiming);
  *ctx.out << p.task.name << ": L1 " << num(s.l1) << ", hotspot L1 " << num(s.hotspot_l1) << '\n';
}

struct SweepArgs {
  std::string model;
  std::string train;
  std::string test;
  std::vector<int> sizes;
  std::string out;
};

void finetune_sweep(const Context& ctx, const SweepArgs& a) {
  const auto& c = ctx.cfg;
  auto p = downstream::load_predictor(a.model);
  p.cfg.lr = c.predictor.lr;
  p.cfg.weight_decay = c.predictor.weight_decay;
  p.cfg.batch = c.predictor.batch;
  const auto train = load_set(a.train), test = load_set(a.test);
  check_sizes(train, p.size_multiple());
  check_sizes(test, p.size_multiple());
  for (int n : a.sizes)
    if (n < 0 || static_cast<std::size_t>(n) > train.size())
      throw RangeError("finetune-sweep: size " + std::to_string(n) + " exceeds the " +
                       std::to_string(train.size()) + " real training samples");
  Stopwatch sw;
  const auto r = downstream::fine_tune_sweep(p, train, test, a.sizes, c.finetune_steps, c.seed,
                                             ctx.workers);
  fs::create_directories(a.out);
  {
    std::ofstream os(fs::path(a.out) / "sweep.csv");
    os << "n_real,l1,hotspot_l1,baseline_l1,baseline_hotspot_l1\n";
    for (const auto& pt : r.curve)
      os << pt.n_real << ',' << num(pt.scores.l1) << ',' << num(pt.scores.hotspot_l1) << ','
         << num(r.baseline.l1) << ',' << num(r.baseline.hotspot_l1) << '\n';
  }
  json curve = json::array();
  for (const auto& pt : r.curve)
    curve.push_back({{"n_real", pt.n_real}, {"l1", pt.scores.l1}, {"hotspot_l1", pt.scores.hotspot_l1}});
  write_outputs(ctx, a.out,
                {{"command", "finetune-sweep"},
                 {"task", p.task.name},
                 {"steps", c.finetune_steps},
                 {"baseline", {{"l1", r.baseline.l1}, {"hotspot_l1", r.baseline.hotspot_l1}}},
                 {"curve", curve}},
                {{"total_seconds", sw.seconds()}});
  *ctx.out << "sweep over " << r.curve.size() << " sizes written to " << a.out << '\n';
}

bool selfcheck(const Context& ctx, const std::string& out) {
  Stopwatch sw;
  const auto results = run_selfcheck(ctx.workers);
  bool ok = true;
  json rows = json::array();
  for (const auto& r : results) {
    *ctx.out << (r.pass ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ")\n";
    rows.push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
    ok = ok && r.pass;
  }
  if (!out.empty()) write_outputs(ctx, out, {{"command", "selfcheck"}, {"checks", rows}, {"pass", ok}},
                                  {{"total_seconds", sw.seconds()}});
  return ok;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Latent-diffusion generator and benchmark tools for circuit layout heatmaps", "dali"};
  app.set_version_flag("--version", std::string("dali ") + kVersion + "\nsample format " +
                                        data::kSampleMagic + "\ncheckpoint format " +
                                        num::kCheckpointMagic);
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--workers", g.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--seed", g.seed, "Override run.seed");

  std::function<int(const Context&)> action;

  ToyDataArgs toy;
  auto* s = app.add_subcommand("toy-data", "Write a procedural toy dataset");
  s->add_option("--n", toy.n, "Sample count")->required();
  s->add_option("--size", toy.size, "Square map side");
  s->add_option("--height", toy.height, "Map height (overrides --size)");
  s->add_option("--width", toy.width, "Map width (overrides --size)");
  s->add_option("--out", toy.out, "Output directory")->required();
  s->callback([&] { action = [&](const Context& c) { return toy_data(c, toy), 0; }; });

  SplitArgs sp;
  s = app.add_subcommand("split", "Hold out designs and parameter values");
  s->add_option("--manifest", sp.manifest)->required()->check(CLI::ExistingFile);
  s->add_option("--out", sp.out, "Directory for train.json and test.json")->required();
  s->add_option("--design", sp.designs, "Held-out design name (repeatable)");
  s->add_option("--option", sp.options, "Held-out key=value (repeatable)");
  s->callback([&] { action = [&](const Context& c) { return split(c, sp), 0; }; });

  AugmentArgs au;
  s = app.add_subcommand("augment", "Write each sample with its augmented copies");
  s->add_option("--manifest", au.manifest)->required()->check(CLI::ExistingFile);
  s->add_option("--out", au.out)->required();
  s->add_option("--index", au.indices, "Augmentation index 1..11 (repeatable; default all)");
  s->callback([&] { action = [&](const Context& c) { return augment(c, au), 0; }; });

  TrainVaeArgs tv;
  s = app.add_subcommand("train-vae", "Train the VAE and fit latent scale and calibration");
  s->add_option("--data", tv.data, "Training manifest")->required()->check(CLI::ExistingFile);
  s->add_option("--out", tv.out, "Checkpoint directory")->required();
  s->callback([&] { action = [&](const Context& c) { return train_vae(c, tv), 0; }; });

  TrainDiffusionArgs td;
  s = app.add_subcommand("train-diffusion", "Train the encoder and U-Net on VAE latents");
  s->add_option("--data", td.data, "Training manifest")->required()->check(CLI::ExistingFile);
  s->add_option("--ckpt", td.ckpt, "Directory holding vae.ckpt")->required()->check(CLI::ExistingDirectory);
  s->add_option("--out", td.out, "Output directory (default: --ckpt)");
  s->callback([&] { action = [&](const Context& c) { return train_diffusion(c, td), 0; }; });

  GenerateArgs ge;
  s = app.add_subcommand("generate", "Sample, post-process and check until accepted");
  s->add_option("--requests", ge.requests, "JSON array of requests")->required()->check(CLI::ExistingFile);
  s->add_option("--ckpt", ge.ckpt, "Model directory")->required()->check(CLI::ExistingDirectory);
  s->add_option("--out", ge.out, "Output dataset directory")->required();
  s->callback([&] { action = [&](const Context& c) { return generate(c, ge), 0; }; });

  EvaluateArgs ev;
  s = app.add_subcommand("evaluate", "Compare two datasets");
  s->add_option("--a", ev.a, "First manifest")->required()->check(CLI::ExistingFile);
  s->add_option("--b", ev.b, "Second manifest")->required()->check(CLI::ExistingFile);
  s->add_option("--out", ev.out, "Report path; CSVs are written beside it")->required();
  s->callback([&] { action = [&](const Context& c) { return evaluate(c, ev), 0; }; });

  FeaturesArgs fe;
  s = app.add_subcommand("features", "Export the per-sample feature table");
  s->add_option("--data", fe.data)->required()->check(CLI::ExistingFile);
  s->add_option("--out", fe.out, "CSV path")->required();
  s->callback([&] { action = [&](const Context& c) { return features(c, fe), 0; }; });

  DownstreamTrainArgs dt;
  s = app.add_subcommand("downstream-train", "Train an IR-drop or RUDY predictor");
  s->add_option("--data", dt.data)->required()->check(CLI::ExistingFile);
  s->add_option("--out", dt.out, "Output directory")->required();
  s->add_option("--task", dt.task, "ir_drop or rudy (default: downstream.task)");
  s->callback([&] { action = [&](const Context& c) { return downstream_train(c, dt), 0; }; });

  DownstreamEvalArgs de;
  s = app.add_subcommand("downstream-eval", "Score a predictor on a dataset");
  s->add_option("--model", de.model, "predictor.ckpt")->required()->check(CLI::ExistingFile);
  s->add_option("--data", de.data)->required()->check(CLI::ExistingFile);
  s->add_option("--out", de.out, "Report path")->required();
  s->callback([&] { action = [&](const Context& c) { return downstream_eval(c, de), 0; }; });

  SweepArgs sw;
  s = app.add_subcommand("finetune-sweep", "Fine-tune on growing real subsets");
  s->add_option("--model", sw.model, "Pretrained predictor.ckpt")->required()->check(CLI::ExistingFile);
  s->add_option("--train", sw.train, "Real training manifest")->required()->check(CLI::ExistingFile);
  s->add_option("--test", sw.test, "Real test manifest")->required()->check(CLI::ExistingFile);
  s->add_option("--sizes", sw.sizes, "Subset sizes")->required()->delimiter(',');
  s->add_option("--out", sw.out, "Output directory")->required();
  s->callback([&] { action = [&](const Context& c) { return finetune_sweep(c, sw), 0; }; });

  std::string check_out;
  s = app.add_subcommand("selfcheck", "Run the invariant suite");
  s->add_option("--out", check_out, "Optional report directory");
  s->callback([&] { action = [&](const Context& c) { return selfcheck(c, check_out) ? 0 : 1; }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    Context ctx;
    ctx.resolved = resolve_config(g.config, dali_environment());
    if (g.seed) ctx.resolved["run"]["seed"] = *g.seed;
    ctx.cfg = typed_config(ctx.resolved);
    ctx.workers = g.workers;
    ctx.out = &out;
    ctx.err = &err;
    return action(ctx);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"dali"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace dali::cli

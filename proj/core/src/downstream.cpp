#include "dali/downstream.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>
#include <thread>

#include "dali/nn.hpp"
#include "dali/ops.hpp"
#include "dali/rng.hpp"

namespace dali::downstream {

using data::Channel;
using num::Buffer;

TaskSpec task(const std::string& name) {
  if (name == "ir_drop")
    return {name, {Channel::cell_density, Channel::power, Channel::scaled_power}, Channel::ir_drop};
  if (name == "rudy") return {name, {Channel::cell_density, Channel::macro_region}, Channel::rudy};
  throw ConfigError("unknown downstream task '" + name + "' (expected ir_drop or rudy)");
}

namespace {

std::string enc(int i) { return "pred.enc" + std::to_string(i); }
std::string dec(int i) { return "pred.dec" + std::to_string(i); }

void validate(const PredictorConfig& cfg, const TaskSpec& t) {
  if (t.inputs.empty()) throw ConfigError("downstream task has no input channels");
  for (auto c : t.inputs)
    if (data::idx(c) < 0 || data::idx(c) >= data::kChannels)
      throw ConfigError("downstream task lists an invalid channel");
  if (cfg.channels.empty() || cfg.kernel < 1 || cfg.kernel % 2 == 0 || cfg.deconv_kernel < 1 ||
      cfg.deconv_kernel % 2 == 0)
    throw ConfigError("predictor needs channels and odd kernel sizes");
  if (cfg.batch < 1) throw ConfigError("predictor batch must be positive");
}

// Channel counts entering each decoder stage, last stage first.
std::vector<std::pair<int, int>> decoder_stages(const std::vector<int>& c) {
  const int n = static_cast<int>(c.size());
  std::vector<std::pair<int, int>> st;
  for (int i = n - 1; i >= 0; --i) {
    const int in = i == n - 1 ? c[i] : 2 * c[i];
    st.emplace_back(in, c[std::max(i - 1, 0)]);
  }
  return st;
}

}  // namespace

std::int64_t predictor_parameter_count(const PredictorConfig& cfg, int in_channels) {
  const std::int64_t k2 = static_cast<std::int64_t>(cfg.kernel) * cfg.kernel;
  const std::int64_t d2 = static_cast<std::int64_t>(cfg.deconv_kernel) * cfg.deconv_kernel;
  std::int64_t total = 0;
  std::int64_t prev = in_channels;
  for (int c : cfg.channels) {
    total += c * prev * k2 + c + 2 * c;  // conv weight, bias, group norm
    prev = c;
  }
  for (auto [in, out] : decoder_stages(cfg.channels)) total += std::int64_t{in} * out * d2 + out + 2 * out;
  total += cfg.channels.front() * k2 + 1;  // output conv
  return total;
}

Predictor build_predictor(const PredictorConfig& cfg, const TaskSpec& t, std::uint64_t seed) {
  validate(cfg, t);
  Predictor p{cfg, t, {}};
  Rng rng(seed, 0x70726564u);
  int prev = static_cast<int>(t.inputs.size());
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    nn::init_conv(p.params, enc(static_cast<int>(i)), prev, cfg.channels[i], cfg.kernel, rng);
    nn::init_group_norm(p.params, enc(static_cast<int>(i)) + ".norm", cfg.channels[i]);
    prev = cfg.channels[i];
  }
  int i = static_cast<int>(cfg.channels.size()) - 1;
  for (auto [in, out] : decoder_stages(cfg.channels)) {
    nn::init_conv_transpose(p.params, dec(i), in, out, cfg.deconv_kernel, rng);
    nn::init_group_norm(p.params, dec(i) + ".norm", out);
    --i;
  }
  nn::init_conv(p.params, "pred.out", cfg.channels.front(), 1, cfg.kernel, rng);
  return p;
}

Tensor Predictor::forward(const Tensor& x) const {
  const int n = static_cast<int>(cfg.channels.size());
  const std::int64_t f = size_multiple();
  if (x.ndim() != 4 || x.dim(1) != static_cast<std::int64_t>(task.inputs.size()))
    throw ShapeError("predictor: expected [N, " + std::to_string(task.inputs.size()) + ", H, W]");
  if (x.dim(2) % f != 0 || x.dim(3) % f != 0)
    throw ShapeError("predictor: H and W must be divisible by " + std::to_string(f));
  const int pad = cfg.kernel / 2, dpad = cfg.deconv_kernel / 2;
  std::vector<Tensor> skips;
  Tensor h = x;
  for (int i = 0; i < n; ++i) {
    h = nn::conv(params, enc(i), h, 2, pad);
    h = num::silu(nn::group_norm(params, enc(i) + ".norm", h));
    skips.push_back(h);
  }
  for (int i = n - 1; i >= 0; --i) {
    if (i < n - 1) h = num::concat({h, skips[static_cast<std::size_t>(i)]}, 1);
    h = nn::conv_transpose(params, dec(i), h, 2, dpad, 1);
    h = num::silu(nn::group_norm(params, dec(i) + ".norm", h));
  }
  return num::sigmoid(nn::conv(params, "pred.out", h, 1, pad));
}

namespace {

Tensor stack(const std::vector<const data::HeatmapSet*>& samples,
             const std::vector<Channel>& channels) {
  if (samples.empty()) throw ShapeError("downstream: empty sample set");
  const int h = samples[0]->height(), w = samples[0]->width();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Buffer buf(num::default_dtype(), samples.size() * channels.size() * plane);
  num::visit_dtype(buf.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto out = buf.as<T>();
    std::size_t o = 0;
    for (const auto* s : samples) {
      if (s->height() != h || s->width() != w)
        throw ShapeError("downstream: samples differ in size (" + s->id + ")");
      for (auto c : channels)
        for (float v : s->channel(c)) out[o++] = static_cast<T>(v);
    }
  });
  return Tensor::from_buffer({static_cast<std::int64_t>(samples.size()),
                              static_cast<std::int64_t>(channels.size()), h, w},
                             std::move(buf));
}

std::vector<const data::HeatmapSet*> pointers(const std::vector<data::HeatmapSet>& s) {
  std::vector<const data::HeatmapSet*> out;
  for (const auto& x : s) out.push_back(&x);
  return out;
}

}  // namespace

Tensor task_inputs(const std::vector<data::HeatmapSet>& samples, const TaskSpec& t) {
  return stack(pointers(samples), t.inputs);
}

Tensor task_targets(const std::vector<data::HeatmapSet>& samples, const TaskSpec& t) {
  return stack(pointers(samples), {t.target});
}

TrainResult train_predictor(Predictor& p, const std::vector<data::HeatmapSet>& samples, int steps,
                            std::uint64_t seed) {
  if (steps < 0) throw ConfigError("train_predictor: negative step count");
  TrainResult r;
  if (steps == 0) return r;
  if (samples.empty()) throw ConfigError("train_predictor: empty training set");
  const num::AdamWOptions adam{p.cfg.lr, 0.9, 0.999, 1e-8, p.cfg.weight_decay};
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(p.cfg.batch), samples.size());
  Rng rng(seed, 0x6473u);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = samples.size();
  for (int step = 0; step < steps; ++step) {
    std::vector<const data::HeatmapSet*> b;
    while (b.size() < batch) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        cursor = 0;
      }
      b.push_back(&samples[order[cursor++]]);
    }
    const Tensor loss = num::l1_loss(p.forward(stack(b, p.task.inputs)), stack(b, {p.task.target}));
    p.params.zero_grad();
    loss.backward();
    num::adamw_step(p.params, adam);
    r.loss.push_back(loss.item());
  }
  return r;
}

std::int64_t hotspot_pixels(std::int64_t pixels) { return (pixels + 9) / 10; }

namespace {

Scores score_one(std::span<const float> pred, std::span<const float> truth) {
  const auto n = static_cast<std::int64_t>(truth.size());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  const auto k = hotspot_pixels(n);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](std::int64_t a, std::int64_t b) {
    return truth[a] != truth[b] ? truth[a] > truth[b] : a < b;
  });
  Scores s;
  for (std::int64_t i = 0; i < n; ++i) s.l1 += std::abs(static_cast<double>(pred[i]) - truth[i]);
  for (std::int64_t i = 0; i < k; ++i)
    s.hotspot_l1 += std::abs(static_cast<double>(pred[idx[i]]) - truth[idx[i]]);
  s.l1 /= static_cast<double>(n);
  s.hotspot_l1 /= static_cast<double>(k);
  return s;
}

Scores average(const std::vector<Scores>& per) {
  Scores s;
  for (const auto& p : per) s.l1 += p.l1, s.hotspot_l1 += p.hotspot_l1;
  s.l1 /= static_cast<double>(per.size());
  s.hotspot_l1 /= static_cast<double>(per.size());
  return s;
}

}  // namespace

Scores score_predictions(const std::vector<std::vector<float>>& predictions,
                         const std::vector<data::HeatmapSet>& samples, const TaskSpec& t) {
  if (samples.empty()) throw ShapeError("evaluate: empty test set");
  if (predictions.size() != samples.size()) throw ShapeError("evaluate: one prediction per sample");
  std::vector<Scores> per;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto truth = samples[i].channel(t.target);
    if (predictions[i].size() != truth.size()) throw ShapeError("evaluate: prediction size mismatch");
    per.push_back(score_one(predictions[i], truth));
  }
  return average(per);
}

Scores evaluate_predictor(const Predictor& p, const std::vector<data::HeatmapSet>& samples,
                          int workers) {
  if (samples.empty()) throw ShapeError("evaluate: empty test set");
  std::vector<Scores> per(samples.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    num::NoGradGuard guard;
    for (std::size_t i = next++; i < samples.size(); i = next++) {
      const Tensor y = p.forward(stack({&samples[i]}, p.task.inputs));
      const auto v = y.to_vector();
      const std::vector<float> pred(v.begin(), v.end());
      per[i] = score_one(pred, samples[i].channel(p.task.target));
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < std::min<int>(std::max(1, workers), static_cast<int>(samples.size())); ++t)
    pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  return average(per);
}

SweepResult fine_tune_sweep(const Predictor& pretrained, std::vector<data::HeatmapSet> real_train,
                            const std::vector<data::HeatmapSet>& real_test,
                            const std::vector<int>& sizes, int steps, std::uint64_t seed,
                            int workers) {
  for (int n : sizes)
    if (n < 0 || static_cast<std::size_t>(n) > real_train.size())
      throw RangeError("fine_tune_sweep: size " + std::to_string(n) + " exceeds the " +
                       std::to_string(real_train.size()) + " available real samples");
  std::stable_sort(real_train.begin(), real_train.end(),
                   [](const auto& a, const auto& b) { return a.id < b.id; });
  SweepResult r;
  r.baseline = evaluate_predictor(pretrained, real_test, workers);
  for (int n : sizes) {
    Predictor p = build_predictor(pretrained.cfg, pretrained.task, seed);
    p.params.copy_values_from(pretrained.params);
    if (n > 0) {
      const std::vector<data::HeatmapSet> subset(real_train.begin(), real_train.begin() + n);
      train_predictor(p, subset, steps, seed + static_cast<std::uint64_t>(n));
    }
    r.curve.push_back({n, evaluate_predictor(p, real_test, workers)});
  }
  return r;
}

void save_predictor(const Predictor& p, const std::filesystem::path& path) {
  const nlohmann::json meta = {{"kind", "predictor"},
                               {"task", p.task.name},
                               {"kernel", p.cfg.kernel},
                               {"deconv_kernel", p.cfg.deconv_kernel},
                               {"channels", p.cfg.channels},
                               {"lr", p.cfg.lr},
                               {"weight_decay", p.cfg.weight_decay},
                               {"batch", p.cfg.batch},
                               {"steps", p.cfg.steps}};
  num::save_checkpoint(p.params, path, meta.dump());
}

Predictor load_predictor(const std::filesystem::path& path) {
  std::string header;
  ParamStore ps = num::load_checkpoint(path, &header);
  try {
    const auto j = nlohmann::json::parse(header);
    if (j.value("kind", "") != "predictor")
      throw FormatError("'" + path.string() + "' does not hold a downstream predictor");
    PredictorConfig cfg;
    cfg.kernel = j.at("kernel");
    cfg.deconv_kernel = j.at("deconv_kernel");
    cfg.channels = j.at("channels").get<std::vector<int>>();
    cfg.lr = j.at("lr");
    cfg.weight_decay = j.at("weight_decay");
    cfg.batch = j.at("batch");
    cfg.steps = j.at("steps");
    Predictor p = build_predictor(cfg, task(j.at("task").get<std::string>()), 0);
    p.params.copy_values_from(ps);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("predictor header in '" + path.string() + "': " + e.what());
  }
}

}  // namespace dali::downstream

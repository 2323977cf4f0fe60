#include <gtest/gtest.h>

#include <filesystem>

#include "dali/downstream.hpp"
#include "dali/heatmap.hpp"

using namespace dali;
using namespace dali::downstream;

namespace {

PredictorConfig small_config() {
  PredictorConfig c;
  c.kernel = 3;
  c.deconv_kernel = 3;
  c.channels = {4, 8};
  c.batch = 4;
  return c;
}

std::vector<data::HeatmapSet> toy(int n, int size, std::uint64_t seed) {
  data::ToyOptions opt;
  opt.max_macros = 1;
  return data::make_toy_samples(n, size, size, seed, opt);
}

std::int64_t stored_parameters(const Predictor& p) {
  std::int64_t n = 0;
  for (const auto& name : p.params.names()) n += p.params.get(name).numel();
  return n;
}

}  // namespace

TEST(Downstream, ParameterCountHandComputed) {
  PredictorConfig c;
  c.kernel = c.deconv_kernel = 3;
  c.channels = {2, 3};
  // enc0 18+2+4, enc1 54+3+6, dec1 54+2+4, dec0 72+2+4, out 18+1
  EXPECT_EQ(predictor_parameter_count(c, 1), 244);
  EXPECT_EQ(stored_parameters(build_predictor(c, {"t", {data::Channel::power}, data::Channel::ir_drop}, 0)),
            244);
}

TEST(Downstream, ParameterCountMatchesDefaultTopology) {
  for (const char* name : {"ir_drop", "rudy"}) {
    const auto t = task(name);
    const auto p = build_predictor({}, t, 1);
    EXPECT_EQ(stored_parameters(p), predictor_parameter_count({}, static_cast<int>(t.inputs.size())));
  }
}

TEST(Downstream, TaskChannels) {
  const auto ir = task("ir_drop");
  EXPECT_EQ(ir.inputs.size(), 3u);
  EXPECT_EQ(ir.target, data::Channel::ir_drop);
  const auto ru = task("rudy");
  EXPECT_EQ(ru.inputs.size(), 2u);
  EXPECT_EQ(ru.target, data::Channel::rudy);
  EXPECT_THROW(task("timing"), ConfigError);
}

TEST(Downstream, ForwardShapeAndRange) {
  const auto samples = toy(3, 16, 5);
  const auto p = build_predictor(small_config(), task("ir_drop"), 2);
  const auto y = p.forward(task_inputs(samples, p.task));
  ASSERT_EQ(y.shape(), (num::Shape{3, 1, 16, 16}));
  for (double v : y.to_vector()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_THROW(p.forward(num::Tensor::zeros({1, 3, 10, 16})), ShapeError);
  EXPECT_THROW(p.forward(num::Tensor::zeros({1, 2, 16, 16})), ShapeError);
}

TEST(Downstream, InputStacking) {
  const auto samples = toy(2, 16, 9);
  const auto t = task("rudy");
  const auto x = task_inputs(samples, t).to_vector();
  const auto y = task_targets(samples, t).to_vector();
  ASSERT_EQ(x.size(), 2u * 2 * 256);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 256; ++i) {
      EXPECT_FLOAT_EQ(x[(n * 2 + 0) * 256 + i], samples[n].channel(data::Channel::cell_density)[i]);
      EXPECT_FLOAT_EQ(x[(n * 2 + 1) * 256 + i], samples[n].channel(data::Channel::macro_region)[i]);
      EXPECT_FLOAT_EQ(y[n * 256 + i], samples[n].channel(data::Channel::rudy)[i]);
    }
}

TEST(Downstream, HotspotPixelCount) {
  EXPECT_EQ(hotspot_pixels(100), 10);
  EXPECT_EQ(hotspot_pixels(101), 11);
  EXPECT_EQ(hotspot_pixels(2304), 231);
  EXPECT_EQ(hotspot_pixels(1), 1);
}

TEST(Downstream, ScoresConstantOffsetAndPerfect) {
  auto samples = toy(3, 16, 4);
  const auto t = task("ir_drop");
  std::vector<std::vector<float>> exact, offset;
  for (auto& s : samples) {
    for (auto& v : s.channel(t.target)) v = std::min(v, 0.85f);
    const auto truth = s.channel(t.target);
    exact.emplace_back(truth.begin(), truth.end());
    offset.emplace_back();
    for (float v : truth) offset.back().push_back(v + 0.1f);
  }
  const auto perfect = score_predictions(exact, samples, t);
  EXPECT_EQ(perfect.l1, 0.0);
  EXPECT_EQ(perfect.hotspot_l1, 0.0);
  const auto shifted = score_predictions(offset, samples, t);
  EXPECT_NEAR(shifted.l1, 0.1, 1e-6);
  EXPECT_NEAR(shifted.hotspot_l1, 0.1, 1e-6);
}

TEST(Downstream, HotspotTiesBreakByIndex) {
  data::CircuitParams cp{4.0, 0.7, 4, 5, {}};
  data::HeatmapSet s("a_0", cp);
  // 20 pixels, 2 hotspot pixels; three tied maxima at indices 3, 7, 11.
  auto truth = s.channel(data::Channel::ir_drop);
  truth[3] = truth[7] = truth[11] = 0.5f;
  std::vector<float> pred(20, 0.0f);
  pred[11] = 0.5f;  // only the third tied pixel is predicted right
  const auto sc = score_predictions({pred}, {s}, task("ir_drop"));
  EXPECT_DOUBLE_EQ(sc.hotspot_l1, 0.5);  // pixels 3 and 7 are the hotspots
  EXPECT_DOUBLE_EQ(sc.l1, 1.0 / 20.0);
}

TEST(Downstream, ScoreShapeErrors) {
  const auto samples = toy(2, 16, 1);
  EXPECT_THROW(score_predictions({std::vector<float>(256)}, samples, task("rudy")), ShapeError);
  EXPECT_THROW(score_predictions({std::vector<float>(256), std::vector<float>(255)}, samples,
                                 task("rudy")),
               ShapeError);
  EXPECT_THROW(score_predictions({}, {}, task("rudy")), ShapeError);
}

TEST(Downstream, ZeroStepsLeaveParametersUnchanged) {
  const auto samples = toy(4, 16, 3);
  auto p = build_predictor(small_config(), task("ir_drop"), 7);
  const auto before = p.params.get("pred.enc0.weight").to_vector();
  EXPECT_TRUE(train_predictor(p, samples, 0, 1).loss.empty());
  EXPECT_EQ(p.params.get("pred.enc0.weight").to_vector(), before);
}

TEST(Downstream, ZeroLearningRateLeavesMetricsUnchanged) {
  const auto samples = toy(4, 16, 3);
  auto cfg = small_config();
  cfg.lr = 0.0;
  auto p = build_predictor(cfg, task("ir_drop"), 7);
  const auto before = evaluate_predictor(p, samples);
  train_predictor(p, samples, 3, 1);
  const auto after = evaluate_predictor(p, samples);
  EXPECT_EQ(before.l1, after.l1);
  EXPECT_EQ(before.hotspot_l1, after.hotspot_l1);
}

TEST(Downstream, TrainingReducesLoss) {
  const auto samples = toy(4, 16, 3);
  auto cfg = small_config();
  cfg.lr = 3e-3;
  auto p = build_predictor(cfg, task("ir_drop"), 7);
  const auto before = evaluate_predictor(p, samples);
  const auto r = train_predictor(p, samples, 150, 2);
  ASSERT_EQ(r.loss.size(), 150u);
  const auto after = evaluate_predictor(p, samples);
  EXPECT_LT(after.l1, 0.5 * before.l1);
}

TEST(Downstream, EvaluationIndependentOfWorkers) {
  const auto samples = toy(5, 16, 8);
  const auto p = build_predictor(small_config(), task("rudy"), 3);
  const auto a = evaluate_predictor(p, samples, 1);
  const auto b = evaluate_predictor(p, samples, 3);
  EXPECT_EQ(a.l1, b.l1);
  EXPECT_EQ(a.hotspot_l1, b.hotspot_l1);
}

TEST(Downstream, SweepAtZeroReproducesBaseline) {
  const auto train = toy(4, 16, 11);
  const auto test = toy(3, 16, 12);
  const auto p = build_predictor(small_config(), task("ir_drop"), 3);
  const auto r = fine_tune_sweep(p, train, test, {0, 2}, 5, 1);
  ASSERT_EQ(r.curve.size(), 2u);
  EXPECT_EQ(r.curve[0].n_real, 0);
  EXPECT_EQ(r.curve[0].scores.l1, r.baseline.l1);
  EXPECT_EQ(r.curve[0].scores.hotspot_l1, r.baseline.hotspot_l1);
  EXPECT_NE(r.curve[1].scores.l1, r.baseline.l1);
  EXPECT_THROW(fine_tune_sweep(p, train, test, {5}, 1, 1), RangeError);
}

TEST(Downstream, CheckpointRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "dali_downstream_ckpt";
  std::filesystem::create_directories(dir);
  const auto samples = toy(2, 16, 6);
  const auto p = build_predictor(small_config(), task("rudy"), 5);
  save_predictor(p, dir / "p.ckpt");
  const auto q = load_predictor(dir / "p.ckpt");
  EXPECT_EQ(q.task.name, "rudy");
  EXPECT_EQ(q.cfg.channels, p.cfg.channels);
  EXPECT_EQ(p.forward(task_inputs(samples, p.task)).to_vector(),
            q.forward(task_inputs(samples, q.task)).to_vector());
  std::filesystem::remove_all(dir);
}

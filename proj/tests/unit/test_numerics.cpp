#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "dali/ops.hpp"
#include "dali/param_store.hpp"
#include "dali/rng.hpp"

using namespace dali;
using namespace dali::num;

namespace {

// Direct loop reference for cross-correlation.
std::vector<double> conv_loops(const Tensor& x, const Tensor& w, const Tensor& b, int s, int p) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto o = w.dim(0), k = w.dim(2);
  const auto oh = (h + 2 * p - k) / s + 1, ow = (wd + 2 * p - k) / s + 1;
  std::vector<double> out(static_cast<std::size_t>(n * o * oh * ow), 0.0);
  for (int64_t in = 0; in < n; ++in)
    for (int64_t oc = 0; oc < o; ++oc)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
          double acc = b.defined() ? b.at(oc) : 0.0;
          for (int64_t ic = 0; ic < c; ++ic)
            for (int64_t ki = 0; ki < k; ++ki)
              for (int64_t kj = 0; kj < k; ++kj) {
                const int64_t y = i * s - p + ki, xx = j * s - p + kj;
                if (y < 0 || y >= h || xx < 0 || xx >= wd) continue;
                acc += x.at(((in * c + ic) * h + y) * wd + xx) *
                       w.at(((oc * c + ic) * k + ki) * k + kj);
              }
          out[((in * o + oc) * oh + i) * ow + j] = acc;
        }
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (int64_t i = 0; i < a.numel(); ++i) s += a.at(i) * b.at(i);
  return s;
}

struct F64 : ::testing::Test {
  PrecisionScope scope{DType::f64};
};

}  // namespace

using Conv = F64;

TEST_F(Conv, PointwiseUnitKernelIsIdentity) {
  Rng rng(1);
  auto x = Tensor::randn({2, 1, 4, 5}, rng);
  auto w = Tensor::full({1, 1, 1, 1}, 1.0);
  auto b = Tensor::zeros({1});
  auto y = conv2d(x, w, b);
  EXPECT_EQ(y.to_vector(), x.to_vector());
}

TEST_F(Conv, AllOnesGivesNine) {
  auto y = conv2d(Tensor::full({1, 1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), Tensor());
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0);
}

TEST_F(Conv, MatchesLoopReference) {
  Rng rng(2);
  auto x = Tensor::randn({1, 2, 5, 5}, rng);
  auto w = Tensor::randn({3, 2, 3, 3}, rng);
  auto b = Tensor::randn({3}, rng);
  for (int s : {1, 2})
    for (int p : {0, 1, 2}) {
      auto y = conv2d(x, w, b, {s, p});
      auto ref = conv_loops(x, w, b, s, p);
      ASSERT_EQ(static_cast<size_t>(y.numel()), ref.size());
      for (size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.at(i), ref[i], 1e-12);
    }
}

TEST_F(Conv, OutputSizeFormula) {
  auto y = conv2d(Tensor::zeros({1, 1, 7, 9}), Tensor::zeros({2, 1, 3, 3}), Tensor(), {2, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 2, 4, 5}));
}

TEST_F(Conv, RejectsChannelMismatchAndOversizedKernel) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor()),
               ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), Tensor()),
               ShapeError);
}

TEST_F(Conv, TransposeUnitKernelIsIdentity) {
  Rng rng(3);
  auto x = Tensor::randn({1, 1, 3, 4}, rng);
  auto y = conv_transpose2d(x, Tensor::full({1, 1, 1, 1}, 1.0), Tensor());
  EXPECT_EQ(y.to_vector(), x.to_vector());
}

TEST_F(Conv, AdjointInnerProductIdentity) {
  Rng rng(4);
  struct Case { int s, p, k, h; };
  for (auto cs : {Case{1, 0, 3, 6}, Case{2, 1, 3, 7}, Case{2, 2, 5, 8}, Case{2, 1, 4, 8}}) {
    auto x = Tensor::randn({2, 3, cs.h, cs.h}, rng);
    auto w = Tensor::randn({4, 3, cs.k, cs.k}, rng);
    auto y0 = conv2d(x, w, Tensor(), {cs.s, cs.p});
    auto y = Tensor::randn(y0.shape(), rng);
    const int op = (cs.h + 2 * cs.p - cs.k) % cs.s;
    auto xt = conv_transpose2d(y, w, Tensor(), {cs.s, cs.p, op});
    ASSERT_EQ(xt.shape(), x.shape());
    const double lhs = dot(y0, y), rhs = dot(x, xt);
    EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_F(Conv, StrideTwoTransposeSpreadsOnEvenGrid) {
  auto x = Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
  // Unit kernel: only the top-left tap is one.
  auto w = Tensor::from_vector({1, 1, 2, 2}, {1, 0, 0, 0});
  auto y = conv_transpose2d(x, w, Tensor(), {2, 0, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  std::vector<double> expect(16, 0.0);
  expect[0] = 1;
  expect[2] = 2;
  expect[8] = 3;
  expect[10] = 4;
  EXPECT_EQ(y.to_vector(), expect);
}

using Softmax = F64;

TEST_F(Softmax, Uniform) {
  auto y = softmax(Tensor::full({1, 4}, 3.0), 1);
  for (double v : y.to_vector()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST_F(Softmax, ClosedForm) {
  auto y = softmax(Tensor::from_vector({2}, {0.0, std::log(3.0)}), 0);
  EXPECT_NEAR(y.at(0), 0.25, 1e-15);
  EXPECT_NEAR(y.at(1), 0.75, 1e-15);
}

TEST_F(Softmax, RowsSumToOneOnLargeInputs) {
  Rng rng(5);
  auto x = scale(Tensor::randn({3, 7, 5}, rng), 300.0);
  for (int axis : {0, 1, 2}) {
    auto y = softmax(x, axis);
    auto s = y.shape();
    const int64_t n = s[axis];
    int64_t inner = 1;
    for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const int64_t outer = y.numel() / (n * inner);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        double acc = 0;
        for (int64_t j = 0; j < n; ++j) {
          double v = y.at((o * n + j) * inner + i);
          EXPECT_GE(v, 0.0);
          acc += v;
        }
        EXPECT_NEAR(acc, 1.0, 1e-6);
      }
  }
}

TEST_F(F64, NonFiniteIsAnError) {
  EXPECT_THROW(log(Tensor::from_vector({2}, {1.0, 0.0})), NumericError);
  EXPECT_THROW(div(Tensor::full({1}, 1.0), Tensor::zeros({1})), NumericError);
}

using GradCheck = F64;

TEST_F(GradCheck, SumOfSquares) {
  auto x = Tensor::from_vector({2}, {1.0, 2.0}).set_requires_grad();
  auto f = [&] { return sum(square(x)); };
  auto y = f();
  y.backward();
  EXPECT_EQ(x.grad().to_vector(), (std::vector<double>{2.0, 4.0}));
  EXPECT_LT(grad_check(f, {x}), 1e-8);
}

TEST_F(GradCheck, ConstantHasZeroGradient) {
  auto x = Tensor::from_vector({3}, {1.0, -2.0, 0.5}).set_requires_grad();
  auto c = Tensor::scalar(4.0);
  EXPECT_EQ(grad_check([&] { return c; }, {x}), 0.0);
}

TEST_F(GradCheck, TwoLayerConvNetMse) {
  Rng rng(6);
  auto x = Tensor::randn({2, 2, 6, 6}, rng);
  auto w1 = Tensor::randn({3, 2, 3, 3}, rng, 0.4).set_requires_grad();
  auto b1 = Tensor::randn({3}, rng, 0.1).set_requires_grad();
  auto w2 = Tensor::randn({1, 3, 3, 3}, rng, 0.4).set_requires_grad();
  auto b2 = Tensor::randn({1}, rng, 0.1).set_requires_grad();
  auto target = Tensor::randn({2, 1, 3, 3}, rng);
  auto f = [&] {
    auto h = silu(conv2d(x, w1, b1, {1, 1}));
    return mse_loss(conv2d(h, w2, b2, {2, 1}), target);
  };
  EXPECT_LT(grad_check(f, {w1, b1, w2, b2}, 1e-4), 1e-4);
}

TEST_F(GradCheck, EveryOp) {
  Rng rng(7);
  auto a = Tensor::uniform({2, 3}, rng, 0.5, 1.5).set_requires_grad();
  auto b = Tensor::uniform({2, 3}, rng, 0.5, 1.5).set_requires_grad();
  auto r = Tensor::randn({2, 3}, rng);
  auto wsum = [&](const Tensor& t) {
    // Random projection keeps every output coordinate in play.
    Rng local(99);
    return sum(mul(t, Tensor::randn(t.shape(), local)));
  };
  std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
      {"add", [&] { return wsum(add(a, b)); }},
      {"sub", [&] { return wsum(sub(a, b)); }},
      {"mul", [&] { return wsum(mul(a, b)); }},
      {"div", [&] { return wsum(div(a, b)); }},
      {"neg", [&] { return wsum(neg(a)); }},
      {"scale", [&] { return wsum(scale(a, -1.7)); }},
      {"add_scalar", [&] { return wsum(add_scalar(a, 0.3)); }},
      {"exp", [&] { return wsum(exp(a)); }},
      {"log", [&] { return wsum(log(a)); }},
      {"sqrt", [&] { return wsum(sqrt(a)); }},
      {"square", [&] { return wsum(square(a)); }},
      {"abs", [&] { return wsum(abs(a)); }},
      {"silu", [&] { return wsum(silu(sub(a, b))); }},
      {"sigmoid", [&] { return wsum(sigmoid(sub(a, b))); }},
      {"tanh", [&] { return wsum(tanh(sub(a, b))); }},
      {"relu", [&] { return wsum(relu(add(sub(a, b), r))); }},
      {"clamp", [&] { return wsum(clamp(a, 0.7, 1.2)); }},
      {"mean", [&] { return mean(square(a)); }},
      {"mse", [&] { return mse_loss(a, b); }},
      {"l1", [&] { return l1_loss(a, r); }},
      {"reshape", [&] { return wsum(reshape(square(a), {3, 2})); }},
      {"permute", [&] { return wsum(reshape(permute(reshape(a, {1, 2, 3}), {2, 0, 1}), {3, 2})); }},
      {"concat", [&] { return wsum(concat({a, square(b)}, 0)); }},
      {"slice", [&] { return wsum(slice(mul(a, b), 1, 1, 2)); }},
      {"index_rows", [&] { return wsum(index_rows(mul(a, b), {1, 0, 1})); }},
      {"scale_leading", [&] { return wsum(scale_leading(mul(a, b), {0.5, -2.0})); }},
      {"matmul", [&] { return wsum(matmul(a, reshape(b, {3, 2}))); }},
      {"bmm", [&] { return wsum(bmm(reshape(a, {1, 2, 3}), reshape(b, {1, 3, 2}))); }},
      {"linear", [&] { return wsum(linear(a, reshape(b, {3, 2}), slice(reshape(a, {6}), 0, 0, 2))); }},
      {"softmax", [&] { return wsum(softmax(mul(a, b), 1)); }},
  };
  for (auto& [name, f] : cases) {
    SCOPED_TRACE(name);
    EXPECT_LT(grad_check(f, {a, b}), 1e-6);
  }
}

TEST_F(GradCheck, SpatialOps) {
  Rng rng(8);
  auto x = Tensor::randn({2, 4, 4, 4}, rng).set_requires_grad();
  auto g = Tensor::uniform({4}, rng, 0.5, 1.5).set_requires_grad();
  auto be = Tensor::randn({4}, rng, 0.1).set_requires_grad();
  auto v = Tensor::randn({2, 4}, rng).set_requires_grad();
  auto w = Tensor::randn({4, 3, 5, 5}, rng, 0.3).set_requires_grad();
  auto bw = Tensor::randn({3}, rng).set_requires_grad();
  Rng proj(12);
  auto wsum = [&](const Tensor& t) {
    Rng local(77);
    return sum(mul(t, Tensor::randn(t.shape(), local)));
  };
  EXPECT_LT(grad_check([&] { return wsum(group_norm(x, 2, g, be)); }, {x, g, be}), 1e-5);
  EXPECT_LT(grad_check([&] { return wsum(add_channel(x, v)); }, {x, v}), 1e-6);
  EXPECT_LT(grad_check([&] { return wsum(avg_pool2d(x, 2)); }, {x}), 1e-6);
  EXPECT_LT(grad_check([&] { return wsum(upsample_nearest2d(x, 2)); }, {x}), 1e-6);
  EXPECT_LT(grad_check([&] { return wsum(conv_transpose2d(x, w, bw, {2, 2, 1})); }, {x, w, bw}),
            1e-6);
  EXPECT_LT(grad_check([&] { return wsum(conv2d(x, reshape(permute(w, {1, 0, 2, 3}), {3, 4, 5, 5}),
                                                bw, {2, 2})); },
                       {x, w, bw}),
            1e-6);
}

using Optim = F64;

TEST_F(Optim, ZeroGradientIsIdentity) {
  ParamStore ps;
  Rng rng(9);
  ps.add("w", Tensor::randn({3, 2}, rng));
  auto before = ps.get("w").to_vector();
  ps.get("w").impl()->grad_buffer();  // populated with zeros
  adamw_step(ps, {.lr = 0.1});
  EXPECT_EQ(ps.get("w").to_vector(), before);
  EXPECT_EQ(ps.step("w"), 1);
}

TEST_F(Optim, ZeroLearningRateStillUpdatesMoments) {
  ParamStore ps;
  ps.add("p", Tensor::from_vector({1}, {1.0}));
  ps.get("p").impl()->grad_buffer().fill(2.0);
  adamw_step(ps, {.lr = 0.0, .weight_decay = 0.1});
  EXPECT_EQ(ps.get("p").item(), 1.0);
  EXPECT_NEAR(ps.first_moment("p").item(), 0.2, 1e-15);
  EXPECT_NEAR(ps.second_moment("p").item(), 0.004, 1e-15);
}

TEST_F(Optim, SingleStepClosedForm) {
  ParamStore ps;
  ps.add("p", Tensor::from_vector({1}, {1.0}));
  ps.get("p").impl()->grad_buffer().fill(1.0);
  adamw_step(ps, {.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8});
  // m_hat = v_hat = 1 so the update is lr / (1 + eps).
  EXPECT_NEAR(ps.get("p").item(), 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST_F(Optim, MissingGradientThrows) {
  ParamStore ps;
  ps.add("p", Tensor::zeros({2}));
  EXPECT_THROW(adamw_step(ps, {}), Error);
}

TEST_F(Optim, EmaUpdates) {
  ParamStore ps;
  ps.add("p", Tensor::from_vector({1}, {0.0}));
  ps.get("p").mutable_buffer().fill(2.0);
  ema_update(ps, 1.0);
  EXPECT_EQ(ps.ema("p").item(), 0.0);
  ema_update(ps, 0.5);
  EXPECT_EQ(ps.ema("p").item(), 1.0);
  ema_update(ps, 0.0);
  EXPECT_EQ(ps.ema("p").item(), 2.0);
  EXPECT_THROW(ema_update(ps, 1.5), RangeError);
}

TEST_F(Optim, EmaShadowStartsAsCopy) {
  ParamStore ps;
  Rng rng(10);
  ps.add("w", Tensor::randn({4}, rng));
  EXPECT_EQ(ps.ema("w").to_vector(), ps.get("w").to_vector());
}

TEST_F(Optim, CheckpointRoundTrip) {
  ParamStore ps;
  Rng rng(11);
  ps.add("a.weight", Tensor::randn({2, 3}, rng));
  ps.add("b", Tensor::randn({5}, rng, 1.0, DType::f32));
  ps.get("a.weight").impl()->grad_buffer().fill(0.5);
  ps.get("b").impl()->grad_buffer().fill(-0.25);
  adamw_step(ps, {.lr = 0.01});
  ema_update(ps, 0.9);
  auto path = std::filesystem::temp_directory_path() / "dali_ckpt_roundtrip.bin";
  save_checkpoint(ps, path, R"({"tag":"x"})");
  std::string header;
  auto back = load_checkpoint(path, &header);
  EXPECT_EQ(header, R"({"tag":"x"})");
  ASSERT_EQ(back.names(), ps.names());
  for (const auto& n : ps.names()) {
    EXPECT_EQ(back.get(n).dtype(), ps.get(n).dtype());
    EXPECT_EQ(back.get(n).to_vector(), ps.get(n).to_vector());
    EXPECT_EQ(back.first_moment(n).to_vector(), ps.first_moment(n).to_vector());
    EXPECT_EQ(back.second_moment(n).to_vector(), ps.second_moment(n).to_vector());
    EXPECT_EQ(back.ema(n).to_vector(), ps.ema(n).to_vector());
    EXPECT_EQ(back.step(n), 1);
  }
  std::filesystem::remove(path);
}

TEST_F(Optim, CheckpointRejectsBadMagic) {
  auto path = std::filesystem::temp_directory_path() / "dali_ckpt_bad.bin";
  { std::ofstream(path) << "XXXXXXXXXXXXXXXX"; }
  EXPECT_THROW(load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}

TEST_F(Optim, ImportRequiresCompleteMapping) {
  ParamStore target, ext;
  target.add("w", Tensor::zeros({2}));
  target.add("b", Tensor::zeros({1}));
  ext.add("ext.w", Tensor::full({2}, 3.0));
  ext.add("ext.b", Tensor::full({1}, 4.0));
  EXPECT_THROW(import_weights(target, ext, {{"w", "ext.w"}}), Error);
  EXPECT_EQ(target.get("w").at(0), 0.0);
  import_weights(target, ext, {{"w", "ext.w"}, {"b", "ext.b"}});
  EXPECT_EQ(target.get("w").at(1), 3.0);
  EXPECT_EQ(target.get("b").item(), 4.0);
}

TEST(Rng, CounterBasedDeterminism) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c = Rng(42).split("x"), d = Rng(42).split("y");
  EXPECT_NE(c.next_u64(), d.next_u64());
}

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "unips/numkit/adamw.hpp"
#include "unips/numkit/checkpoint.hpp"
#include "unips/numkit/gradcheck.hpp"
#include "unips/numkit/nn.hpp"
#include "unips/numkit/ops.hpp"

using namespace unips::nk;
using TD = Tensor<double>;

namespace {

std::vector<double> randn(Rng& rng, std::int64_t n, double s = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.normal() * s;
  return v;
}

TD rand_param(Rng& rng, Shape s, double scale = 1.0) {
  const auto n = numel_of(s);
  return TD::parameter(std::move(s), randn(rng, n, scale));
}

// Contracts every output element against a fixed random weight so the
// scalar depends on all of them.
TD probe_loss(const TD& out, std::uint64_t seed) {
  Rng rng(seed ^ 0xABCDu);
  auto w = TD::from(out.shape(), randn(rng, out.numel()));
  return sum(mul(out, w));
}

constexpr int kSeeds = 5;
constexpr double kLayerTol = 1e-4;

}  // namespace

TEST(Softmax, SymmetricPairIsHalf) {
  auto y = softmax_last(Tensor<float>::from({1, 2}, {0.f, 0.f}));
  EXPECT_FLOAT_EQ(y.data()[0], 0.5f);
  EXPECT_FLOAT_EQ(y.data()[1], 0.5f);
}

TEST(Softmax, RowsAreProbabilitySimplex) {
  Rng rng(3);
  auto x = TD::from({17, 9}, randn(rng, 17 * 9, 20.0));
  auto y = softmax_last(x);
  for (int r = 0; r < 17; ++r) {
    double s = 0;
    for (int c = 0; c < 9; ++c) {
      EXPECT_GE(y.data()[r * 9 + c], 0.0);
      s += y.data()[r * 9 + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  Rng rng(11);
  Builder b(1);
  LayerNorm<double> ln("ln", 32);
  auto x = TD::from({4, 32}, randn(rng, 128, 3.0));
  auto y = ln(x);
  for (int r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (int c = 0; c < 32; ++c) m += y.data()[r * 32 + c];
    m /= 32;
    for (int c = 0; c < 32; ++c) v += (y.data()[r * 32 + c] - m) * (y.data()[r * 32 + c] - m);
    v /= 32;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(Attention, SingleHeadTwoElementsMatchesHandEvaluation) {
  // Hand-set projections: q = x*Wq, k = x*Wk, v = x*Wv with 2-d features.
  Builder b(0);
  MultiHeadAttention<double> mha("mha", 2, 1, b);
  const std::vector<double> wq{1, 0, 0, 2}, wk{0, 1, 1, 0}, wv{1, 1, 0, 1}, wo{1, 0, 0, 1};
  std::copy(wq.begin(), wq.end(), mha.q_proj().weight().data().begin());
  std::copy(wk.begin(), wk.end(), mha.k_proj().weight().data().begin());
  std::copy(wv.begin(), wv.end(), mha.v_proj().weight().data().begin());
  std::copy(wo.begin(), wo.end(), mha.o_proj().weight().data().begin());
  const double x0[2] = {0.5, -1.0}, x1[2] = {2.0, 0.25};
  auto x = TD::from({1, 2, 2}, {x0[0], x0[1], x1[0], x1[1]});
  auto y = mha(x, x);

  // Oracle: explicit formula, row-vector convention.
  auto proj = [](const double* v, const std::vector<double>& W) {
    return std::array<double, 2>{v[0] * W[0] + v[1] * W[2], v[0] * W[1] + v[1] * W[3]};
  };
  const std::array<std::array<double, 2>, 2> Q{proj(x0, wq), proj(x1, wq)}, K{proj(x0, wk), proj(x1, wk)},
      V{proj(x0, wv), proj(x1, wv)};
  for (int i = 0; i < 2; ++i) {
    double s[2];
    for (int j = 0; j < 2; ++j) s[j] = (Q[i][0] * K[j][0] + Q[i][1] * K[j][1]) / std::sqrt(2.0);
    const double e0 = std::exp(s[0]), e1 = std::exp(s[1]);
    const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    for (int d = 0; d < 2; ++d) EXPECT_NEAR(y.data()[i * 2 + d], p0 * V[0][d] + p1 * V[1][d], 1e-12);
  }
}

TEST(Backward, SumOfSquares) {
  auto x = Tensor<double>::parameter({2}, {1.0, 2.0});
  sum(mul(x, x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  // y = (x + x) * x -> dy/dx = 4x
  auto x = Tensor<double>::parameter({1}, {3.0});
  auto s = add(x, x);
  sum(mul(s, x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, RejectsNonScalar) {
  auto x = Tensor<double>::parameter({2}, {1.0, 2.0});
  auto y = scale(x, 2.0);
  EXPECT_THROW(y.backward(), ShapeError);
}

// ------------------------------------------------------------ gradient checks

class LayerGrad : public ::testing::TestWithParam<int> {};

TEST_P(LayerGrad, Linear) {
  Rng rng(GetParam());
  auto x = rand_param(rng, {3, 4, 5});
  auto w = rand_param(rng, {5, 6});
  auto b = rand_param(rng, {6});
  auto r = grad_check([&] { return probe_loss(linear(x, w, b), GetParam()); }, {{"x", &x}, {"w", &w}, {"b", &b}},
                      GetParam());
  EXPECT_LT(r.max_rel_error, kLayerTol);
}

TEST_P(LayerGrad, Matmul) {
  Rng rng(GetParam());
  auto a = rand_param(rng, {4, 3});
  auto b = rand_param(rng, {3, 5});
  auto r = grad_check([&] { return probe_loss(matmul(a, b), GetParam()); }, {{"a", &a}, {"b", &b}}, GetParam());
  EXPECT_LT(r.max_rel_error, kLayerTol);
}

TEST_P(LayerGrad, LayerNorm) {
  Rng rng(GetParam());
  auto x = rand_param(rng, {5, 7}, 2.0);
  auto g = rand_param(rng, {7});
  auto b = rand_param(rng, {7});
  auto r = grad_check([&] { return probe_loss(layer_norm(x, g, b), GetParam()); },
                      {{"x", &x}, {"g", &g}, {"b", &b}}, GetParam());
  EXPECT_LT(r.max_rel_error, kLayerTol);
}

TEST_P(LayerGrad, SoftmaxGeluRelu) {
  Rng rng(GetParam());
  auto x = rand_param(rng, {4, 6});
  auto r1 = grad_check([&] { return probe_loss(softmax_last(x), GetParam()); }, {{"x", &x}}, GetParam());
  auto r2 = grad_check([&] { return probe_loss(gelu(x), GetParam()); }, {{"x", &x}}, GetParam());
  // Keep ReLU inputs away from the kink.
  for (auto& v : x.data())
    if (std::abs(v) < 0.05) v = 0.3;
  auto r3 = grad_check([&] { return probe_loss(relu(x), GetParam()); }, {{"x", &x}}, GetParam());
  EXPECT_LT(r1.max_rel_error, kLayerTol);
  EXPECT_LT(r2.max_rel_error, kLayerTol);
  EXPECT_LT(r3.max_rel_error, kLayerTol);
}

TEST_P(LayerGrad, Conv2dStrides) {
  Rng rng(GetParam());
  auto x = rand_param(rng, {2, 6, 5, 3});
  auto w = rand_param(rng, {3, 3, 3, 4});
  auto b = rand_param(rng, {4});
  for (int stride : {1, 2}) {
    auto r = grad_check([&] { return probe_loss(conv2d(x, w, b, stride, 1), GetParam()); },
                        {{"x", &x}, {"w", &w}, {"b", &b}}, GetParam());
    EXPECT_LT(r.max_rel_error, kLayerTol) << "stride " << stride;
  }
}

TEST_P(LayerGrad, Attention) {
  Rng rng(GetParam());
  auto q = rand_param(rng, {3, 2, 8});
  auto k = rand_param(rng, {3, 5, 8});
  auto v = rand_param(rng, {3, 5, 8});
  auto r = grad_check([&] { return probe_loss(attention(q, k, v, 2), GetParam()); },
                      {{"q", &q}, {"k", &k}, {"v", &v}}, GetParam());
  EXPECT_LT(r.max_rel_error, kLayerTol);
}

TEST_P(LayerGrad, ResizeAndGridSample) {
  Rng rng(GetParam());
  auto x = rand_param(rng, {2, 5, 4, 3});
  auto r1 = grad_check([&] { return probe_loss(resize_bilinear(x, 7, 9), GetParam()); }, {{"x", &x}}, GetParam());
  auto r2 = grad_check([&] { return probe_loss(resize_bilinear(x, 2, 3), GetParam()); }, {{"x", &x}}, GetParam());
  std::vector<std::array<double, 2>> pts;
  for (int i = 0; i < 6; ++i) pts.push_back({rng.uniform(-1, 5), rng.uniform(-1, 4)});
  auto r3 = grad_check([&] { return probe_loss(grid_sample<double>(x, pts), GetParam()); }, {{"x", &x}}, GetParam());
  EXPECT_LT(r1.max_rel_error, kLayerTol);
  EXPECT_LT(r2.max_rel_error, kLayerTol);
  EXPECT_LT(r3.max_rel_error, kLayerTol);
}

TEST_P(LayerGrad, ShapeOps) {
  Rng rng(GetParam());
  auto a = rand_param(rng, {2, 3, 4});
  auto b = rand_param(rng, {2, 3, 2});
  auto s = rand_param(rng, {1, 4});
  auto r1 = grad_check([&] { return probe_loss(permute(a, {2, 0, 1}), GetParam()); }, {{"a", &a}}, GetParam());
  auto r2 = grad_check([&] { return probe_loss(concat_last(a, b), GetParam()); }, {{"a", &a}, {"b", &b}},
                       GetParam());
  auto r3 = grad_check([&] { return probe_loss(repeat_rows(s, 5), GetParam()); }, {{"s", &s}}, GetParam());
  auto r4 = grad_check([&] { return probe_loss(mean_spatial(reshape(a, {2, 3, 2, 2})), GetParam()); },
                       {{"a", &a}}, GetParam());
  auto r5 = grad_check([&] { return probe_loss(max_over_set(a), GetParam()); }, {{"a", &a}}, GetParam());
  EXPECT_LT(r1.max_rel_error, kLayerTol);
  EXPECT_LT(r2.max_rel_error, kLayerTol);
  EXPECT_LT(r3.max_rel_error, kLayerTol);
  EXPECT_LT(r4.max_rel_error, kLayerTol);
  EXPECT_LT(r5.max_rel_error, kLayerTol);
}

TEST_P(LayerGrad, NormalizeAndMse) {
  Rng rng(GetParam());
  auto x = rand_param(rng, {6, 3});
  auto t = TD::from({6, 3}, randn(rng, 18));
  auto r = grad_check([&] { return mse_rows(l2_normalize_rows(x), t); }, {{"x", &x}}, GetParam());
  EXPECT_LT(r.max_rel_error, kLayerTol);
}

TEST_P(LayerGrad, DropoutFixedKey) {
  Rng rng(GetParam());
  auto x = rand_param(rng, {40});
  auto r = grad_check([&] { return probe_loss(dropout(x, 0.1, 9, 2, GetParam()), GetParam()); }, {{"x", &x}},
                      GetParam());
  EXPECT_LT(r.max_rel_error, kLayerTol);
}

TEST_P(LayerGrad, TransformerLayerAndPool) {
  Builder b(GetParam());
  TransformerLayer<double> layer("tf", 8, 2, 16, 0.1, b);
  AttentionPool<double> pool("pma", 8, 2, 16, 0.1, b);
  Rng rng(GetParam());
  auto x = rand_param(rng, {3, 4, 8});
  ParamList<double> ps{{"x", &x}};
  layer.params(ps);
  pool.params(ps);
  ForwardCtx ctx{true, 5, 1};
  auto r = grad_check([&] { return probe_loss(pool(layer(x, ctx), ctx), GetParam()); }, ps, GetParam(), 150);
  EXPECT_LT(r.max_rel_error, kLayerTol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, LayerGrad, ::testing::Range(1, 1 + kSeeds));

// ------------------------------------------------------------------- errors

TEST(Errors, ShapeMismatchNamesDimensions) {
  Builder b(0);
  Linear<float> fc("decoder.proj", 5, 3, b);
  try {
    fc(Tensor<float>::zeros({2, 4}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.proj"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("4"), std::string::npos);
  }
}

TEST(Errors, NonFiniteInputNamesLayer) {
  Builder b(0);
  Linear<float> fc("encoder.fuse", 2, 2, b);
  auto x = Tensor<float>::from({1, 2}, {1.f, std::nanf("")});
  try {
    fc(x);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.fuse"), std::string::npos);
  }
}

TEST(Determinism, DoubleForwardIsBitIdentical) {
  auto run = [] {
    Builder b(42);
    TransformerLayer<double> layer("tf", 16, 8, 32, 0.1, b);
    Rng rng(1);
    auto x = TD::from({5, 6, 16}, randn(rng, 5 * 6 * 16));
    auto y = layer(x, ForwardCtx{true, 3, 7});
    return std::vector<double>(y.data().begin(), y.data().end());
  };
  EXPECT_EQ(run(), run());
}

// ------------------------------------------------------------------- AdamW

TEST(AdamW, ZeroGradientZeroDecayIsFixedPoint) {
  auto p = Tensor<float>::parameter({3}, {1.f, -2.f, 0.5f});
  ParamList<float> ps{{"p", &p}};
  AdamW<float> opt({.lr = 1e-4, .weight_decay = 0.0});
  p.grad();
  opt.step(ps);
  EXPECT_EQ(p.data()[0], 1.f);
  EXPECT_EQ(p.data()[1], -2.f);
  EXPECT_EQ(p.data()[2], 0.5f);
}

TEST(AdamW, ZeroGradientDecaysMultiplicatively) {
  auto p = Tensor<double>::parameter({2}, {1.0, -3.0});
  ParamList<double> ps{{"p", &p}};
  AdamW<double> opt({.lr = 1e-4, .weight_decay = 0.05});
  p.grad();
  opt.step(ps);
  EXPECT_DOUBLE_EQ(p.data()[0], 1.0 * (1 - 1e-4 * 0.05));
  EXPECT_DOUBLE_EQ(p.data()[1], -3.0 * (1 - 1e-4 * 0.05));
}

TEST(AdamW, FirstStepMatchesHandFormula) {
  const double lr = 1e-3, wd = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double p0 = 0.7, g = -0.3;
  auto p = Tensor<double>::parameter({1}, {p0});
  ParamList<double> ps{{"p", &p}};
  AdamW<double> opt({.lr = lr, .beta1 = b1, .beta2 = b2, .eps = eps, .weight_decay = wd});
  p.grad()[0] = g;
  opt.step(ps);
  // m = (1-b1) g, v = (1-b2) g^2, mhat = g, vhat = g^2.
  const double m = (1 - b1) * g, v = (1 - b2) * g * g;
  const double expected = p0 * (1 - lr * wd) - lr * (m / (1 - b1)) / (std::sqrt(v / (1 - b2)) + eps);
  EXPECT_NEAR(p.data()[0], expected, 1e-15);
  EXPECT_FALSE(p.has_grad());
}

TEST(AdamW, RejectsNonFiniteGradient) {
  auto p = Tensor<double>::parameter({2}, {1.0, 2.0});
  ParamList<double> ps{{"p", &p}};
  AdamW<double> opt;
  p.grad()[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(opt.step(ps), NumericError);
  EXPECT_EQ(p.data()[0], 1.0);
  EXPECT_EQ(opt.step_count(), 0);
}

TEST(StepDecay, EightyPercentEveryThreeEpochs) {
  StepDecay s{1e-4, 0.8, 3};
  EXPECT_DOUBLE_EQ(s.lr_at(0), 1e-4);
  EXPECT_DOUBLE_EQ(s.lr_at(2), 1e-4);
  EXPECT_DOUBLE_EQ(s.lr_at(3), 0.8e-4);
  EXPECT_NEAR(s.lr_at(6), 0.64e-4, 1e-18);
}

// --------------------------------------------------------------- checkpoint

TEST(Checkpoint, RoundTripAndLayout) {
  Builder b(5);
  Linear<float> fc("fc", 3, 2, b);
  ParamList<float> ps;
  fc.params(ps);
  std::stringstream ss;
  write_checkpoint(ss, snapshot(ps));
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.substr(0, 4), "UPSW");
  std::uint32_t version, count;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&count, bytes.data() + 8, 4);
  EXPECT_EQ(version, 1u);
  EXPECT_EQ(count, 2u);
  // "fc.weight": u16 len, name, rank u8 = 2, extents 3,2, then 6 floats.
  std::uint16_t len;
  std::memcpy(&len, bytes.data() + 12, 2);
  EXPECT_EQ(len, 9);
  EXPECT_EQ(bytes.substr(14, 9), "fc.weight");
  EXPECT_EQ(static_cast<unsigned char>(bytes[23]), 2);
  const std::size_t expected = 12 + (2 + 9 + 1 + 8 + 24) + (2 + 7 + 1 + 4 + 8);
  EXPECT_EQ(bytes.size(), expected);

  Builder b2(99);
  Linear<float> other("fc", 3, 2, b2);
  ParamList<float> ps2;
  other.params(ps2);
  restore(ps2, read_checkpoint(ss));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(other.weight().data()[i], fc.weight().data()[i]);
}

TEST(Checkpoint, RejectsBadMagicAndShapeMismatch) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_checkpoint(bad), CheckpointError);
  Builder b(5);
  Linear<float> fc("fc", 3, 2, b);
  Linear<float> wide("fc", 3, 4, b);
  ParamList<float> a, w;
  fc.params(a);
  wide.params(w);
  EXPECT_THROW(restore(w, snapshot(a)), CheckpointError);
}

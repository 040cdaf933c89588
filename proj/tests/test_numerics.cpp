// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include "agentps/autodiff.hpp"
#include "agentps/grad_check.hpp"
#include "agentps/rng.hpp"
#include "agentps/tensor.hpp"
#include "test_util.hpp"

namespace agentps {
namespace {

using testing::random_tensor;

// ---------------------------------------------------------------------------
// Rng

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a(), b());
}

TEST(Rng, SplitStreamsDifferAndAreStable) {
  const Rng base(7);
  Rng x = base.split("init"), y = base.split("shuffle"), x2 = base.split("init");
  EXPECT_NE(x(), y());
  Rng x3 = base.split("init");
  x2();
  EXPECT_EQ(x3(), Rng(7).split("init")());
}

TEST(Rng, UniformMomentsAndRange) {
  Rng r(1);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sq += u * u;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.005);
  EXPECT_NEAR(sq / n - (sum / n) * (sum / n), 1.0 / 12.0, 0.002);
}

TEST(Rng, NormalMoments) {
  Rng r(2);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(Rng, BelowCoversRangeUniformly) {
  Rng r(3);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) counts[r.below(7)]++;
  for (int c : counts) EXPECT_NEAR(c, 10000, 450);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(4);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  r.shuffle(v.begin(), v.end());
  std::set<int> s(v.begin(), v.end());
  EXPECT_EQ(s.size(), 50u);
}

TEST(Rng, StateRoundTrip) {
  Rng r(9);
  r();
  Rng copy;
  copy.set_state(r.key(), r.state());
  EXPECT_EQ(copy, r);
  EXPECT_EQ(copy(), r());
}

// ---------------------------------------------------------------------------
// Tensor

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
  EXPECT_THROW(Tensor<float>({2, 0}), DimensionError);
}

TEST(Tensor, MatrixLayoutIsRowMajor) {
  auto m = Tensor<double>::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m.at(1, 0), 4.0);
  EXPECT_EQ(m[2], 3.0);
}

// ---------------------------------------------------------------------------
// Forward values against independent reference implementations

TEST(Ops, MatmulMatchesNaiveTripleLoop) {
  Rng rng(11);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 2}, {7, 4, 9}, {16, 16, 3}}) {
    auto a = random_tensor<double>({std::size_t(m), std::size_t(k)}, rng);
    auto b = random_tensor<double>({std::size_t(k), std::size_t(n)}, rng);
    Tape<double> tape;
    auto c = ad::matmul(tape.constant(a), tape.constant(b)).value();
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        long double ref = 0;
        for (int p = 0; p < k; ++p) ref += (long double)a.at(i, p) * b.at(p, j);
        EXPECT_NEAR(c.at(i, j), (double)ref, 1e-12);
      }
    }
  }
}

TEST(Ops, MatmulShapeErrorNamesBothShapes) {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2, 3}));
  auto b = tape.constant(Tensor<float>({4, 5}));
  try {
    ad::matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
}

TEST(Ops, SoftmaxMatchesLongDoubleReference) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> logits(6);
    for (auto& l : logits) l = static_cast<float>(rng.uniform(-30, 30));
    const auto p = softmax<float>(logits);
    long double mx = *std::max_element(logits.begin(), logits.end()), z = 0;
    for (float l : logits) z += std::exp((long double)l - mx);
    double total = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const long double ref = std::exp((long double)logits[i] - mx) / z;
      EXPECT_NEAR(p[i], (double)ref, 1e-6);
      total += p[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Ops, SoftmaxIsStableForHugeLogits) {
  std::vector<float> logits{1000.0f, 999.0f, -1000.0f};
  const auto p = softmax<float>(logits);
  for (float v : p) EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-6);
}

TEST(Ops, GeluMatchesErfDefinition) {
  for (double x = -5; x <= 5; x += 0.25) {
    const double ref = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    EXPECT_NEAR(kernels::gelu(x), ref, 1e-14);
  }
}

TEST(Ops, LayerNormMatchesDirectFormula) {
  Rng rng(13);
  auto x = random_tensor<double>({3, 8}, rng, -2, 2);
  auto g = random_tensor<double>({8}, rng, 0.5, 1.5);
  auto b = random_tensor<double>({8}, rng);
  Tape<double> tape;
  auto y = ad::layer_norm(tape.constant(x), tape.constant(g), tape.constant(b)).value();
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < 8; ++j) mean += x.at(i, j) / 8;
    for (std::size_t j = 0; j < 8; ++j) var += (x.at(i, j) - mean) * (x.at(i, j) - mean) / 8;
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_NEAR(y.at(i, j), (x.at(i, j) - mean) / std::sqrt(var + 1e-5) * g[j] + b[j], 1e-12);
    }
  }
}

// Naive attention: full score matrix with -inf above the diagonal, then a
// standard softmax per row.
std::vector<double> naive_attention(const Tensor<double>& q, const Tensor<double>& k,
                                    const Tensor<double>& v, std::size_t heads) {
  const std::size_t len = q.rows(), width = q.cols(), dh = width / heads;
  std::vector<double> out(len * width, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < len; ++i) {
      std::vector<double> s(len);
      for (std::size_t j = 0; j < len; ++j) {
        if (j > i) {
          s[j] = -std::numeric_limits<double>::infinity();
          continue;
        }
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += q.at(i, h * dh + c) * k.at(j, h * dh + c);
        s[j] = dot / std::sqrt(double(dh));
      }
      double mx = *std::max_element(s.begin(), s.end()), z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < len; ++j) {
        for (std::size_t c = 0; c < dh; ++c) out[i * width + h * dh + c] += s[j] / z * v.at(j, h * dh + c);
      }
    }
  }
  return out;
}

TEST(Ops, CausalAttentionMatchesNaiveMaskedSoftmax) {
  Rng rng(14);
  for (std::size_t heads : {1u, 2u, 4u}) {
    auto q = random_tensor<double>({7, 8}, rng, -2, 2);
    auto k = random_tensor<double>({7, 8}, rng, -2, 2);
    auto v = random_tensor<double>({7, 8}, rng, -2, 2);
    Tape<double> tape;
    auto y = ad::causal_attention(tape.constant(q), tape.constant(k), tape.constant(v), heads).value();
    const auto ref = naive_attention(q, k, v, heads);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Ops, CausalAttentionRowsIgnoreLaterRows) {
  Rng rng(15);
  auto q = random_tensor<double>({6, 4}, rng), k = random_tensor<double>({6, 4}, rng),
       v = random_tensor<double>({6, 4}, rng);
  Tape<double> t1;
  auto y1 = ad::causal_attention(t1.constant(q), t1.constant(k), t1.constant(v), 2).value();
  for (std::size_t c = 0; c < 4; ++c) {
    k.at(5, c) += 10;
    v.at(5, c) -= 3;
  }
  Tape<double> t2;
  auto y2 = ad::causal_attention(t2.constant(q), t2.constant(k), t2.constant(v), 2).value();
  for (std::size_t i = 0; i < 5 * 4; ++i) EXPECT_EQ(y1[i], y2[i]);
}

TEST(Ops, CrossEntropyMatchesLogSumExp) {
  Tape<double> tape;
  auto logits = tape.constant(Tensor<double>({3}, {1.0, 2.0, 0.5}));
  const double ref = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5)) - 2.0;
  EXPECT_NEAR(ad::softmax_cross_entropy(logits, 1).value()[0], ref, 1e-14);
}

TEST(Ops, CrossEntropyErrors) {
  Tape<float> tape;
  EXPECT_THROW(ad::softmax_cross_entropy(tape.constant(Tensor<float>({3})), 3), IndexError);
  EXPECT_THROW(ad::softmax_cross_entropy(tape.constant(Tensor<float>({1})), 0), DimensionError);
}

TEST(Ops, GatherRowsRejectsOutOfRangeIds) {
  Tape<float> tape;
  auto table = tape.constant(Tensor<float>({4, 2}));
  EXPECT_THROW(ad::gather_rows(table, {0, 4}), IndexError);
}

TEST(Tape, BackwardRequiresScalar) {
  Tape<double> tape;
  Tensor<double> x({2, 2}, 1.0);
  auto v = tape.parameter(x);
  EXPECT_THROW(tape.backward(ad::gelu(v)), ContractError);
}

TEST(Tape, ReusedNodeAccumulatesBothPaths) {
  // y = sum(x * x) => dy/dx = 2x
  Tensor<double> x({3}, {1.0, -2.0, 0.5});
  Tape<double> tape;
  auto v = tape.parameter(x);
  tape.backward(ad::sum(ad::mul(v, v)));
  ASSERT_TRUE(x.has_grad());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x[i]);
}

TEST(Tape, ViewsReceiveNoGradient) {
  Tensor<double> w({2, 2}, 1.0), x({1, 2}, 2.0);
  Tape<double> tape;
  auto loss = ad::sum(ad::matmul(tape.view(x), tape.parameter(w)));
  tape.backward(loss);
  EXPECT_FALSE(x.has_grad());
  EXPECT_TRUE(w.has_grad());
}

// ---------------------------------------------------------------------------
// Gradients against central finite differences (64-bit)

constexpr double kEps = 1e-6;
constexpr double kTol = 1e-6;

TEST(Gradients, Matmul) {
  Rng rng(21);
  auto a = random_tensor<double>({3, 4}, rng), b = random_tensor<double>({4, 2}, rng);
  auto w = random_tensor<double>({3, 2}, rng);
  auto res = grad_check_tensors<double>(
      [&](Tape<double>& t) {
        return ad::sum(ad::mul(ad::matmul(t.parameter(a), t.parameter(b)), t.constant(w)));
      },
      {&a, &b}, {"a", "b"}, kEps);
  EXPECT_LT(res.max_relative_error, kTol) << res.worst;
}

TEST(Gradients, ElementwiseAndBias) {
  Rng rng(22);
  auto x = random_tensor<double>({3, 4}, rng), y = random_tensor<double>({3, 4}, rng);
  auto bias = random_tensor<double>({4}, rng);
  auto res = grad_check_tensors<double>(
      [&](Tape<double>& t) {
        auto px = t.parameter(x), py = t.parameter(y);
        auto z = ad::add_bias(ad::add(ad::mul(px, py), ad::scale(px, 0.3)), t.parameter(bias));
        return ad::sum(ad::gelu(z));
      },
      {&x, &y, &bias}, {"x", "y", "bias"}, kEps);
  EXPECT_LT(res.max_relative_error, kTol) << res.worst;
}

TEST(Gradients, LayerNorm) {
  Rng rng(23);
  auto x = random_tensor<double>({4, 6}, rng, -2, 2);
  auto g = random_tensor<double>({6}, rng, 0.5, 1.5), b = random_tensor<double>({6}, rng);
  auto w = random_tensor<double>({4, 6}, rng);
  auto res = grad_check_tensors<double>(
      [&](Tape<double>& t) {
        auto y = ad::layer_norm(t.parameter(x), t.parameter(g), t.parameter(b));
        return ad::sum(ad::mul(y, t.constant(w)));
      },
      {&x, &g, &b}, {"x", "gain", "bias"}, kEps);
  EXPECT_LT(res.max_relative_error, kTol) << res.worst;
}

TEST(Gradients, CausalAttention) {
  Rng rng(24);
  auto q = random_tensor<double>({5, 4}, rng), k = random_tensor<double>({5, 4}, rng),
       v = random_tensor<double>({5, 4}, rng), w = random_tensor<double>({5, 4}, rng);
  auto res = grad_check_tensors<double>(
      [&](Tape<double>& t) {
        auto y = ad::causal_attention(t.parameter(q), t.parameter(k), t.parameter(v), 2);
        return ad::sum(ad::mul(y, t.constant(w)));
      },
      {&q, &k, &v}, {"q", "k", "v"}, kEps);
  EXPECT_LT(res.max_relative_error, kTol) << res.worst;
}

TEST(Gradients, RowOpsAndCrossEntropy) {
  Rng rng(25);
  auto table = random_tensor<double>({6, 3}, rng);
  auto extra = random_tensor<double>({2, 3}, rng);
  auto res = grad_check_tensors<double>(
      [&](Tape<double>& t) {
        auto rows = ad::gather_rows(t.parameter(table), {1, 4, 1});
        auto all = ad::concat_rows<double>({rows, t.parameter(extra)});
        auto mid = ad::slice_rows(all, 1, 3);
        auto a = ad::softmax_cross_entropy(ad::select_row(mid, 0), 2);
        auto b = ad::softmax_cross_entropy(ad::select_row(mid, 2), 0);
        return ad::weighted_sum<double>({a, b}, {0.25, 1.0});
      },
      {&table, &extra}, {"table", "extra"}, kEps);
  EXPECT_LT(res.max_relative_error, kTol) << res.worst;
}

}  // namespace
}  // namespace agentps

// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "agentps/training.hpp"
#include "test_util.hpp"

namespace agentps {
namespace {

using testing::default_vocab;
using testing::tiny_dataset;
using testing::tiny_model;

// Binary logits [0, z] whose cross-entropy for class 0 is exactly `ce`.
Tensor<double> logits_with_ce(double ce) { return Tensor<double>({2}, {0.0, std::log(std::exp(ce) - 1.0)}); }

std::vector<HeadOutput<double>> outputs_with_ce(Tape<double>& tape, const std::vector<double>& ce,
                                                std::vector<Tensor<double>>& storage) {
  storage.clear();
  for (double c : ce) storage.push_back(logits_with_ce(c));
  std::vector<HeadOutput<double>> out;
  for (std::size_t q = 0; q < ce.size(); ++q) out.push_back({q, 0, tape.parameter(storage[q])});
  return out;
}

TEST(Loss, DefaultWeightsGiveHandComputedValue) {
  Tape<double> tape;
  std::vector<Tensor<double>> storage;
  auto out = outputs_with_ce(tape, {1.0, 2.0, 3.0}, storage);
  auto loss = compute_loss(tape, out, {{0, 0}, {1, 0}, {2, 0}}, TrainConfig::default_weights(2));
  EXPECT_NEAR(loss.total.value()[0], 3.3, 1e-6);
  EXPECT_NEAR(*loss.per_question[1], 2.0, 1e-12);
  EXPECT_NEAR(weighted_loss({1.0, 2.0, 3.0}, TrainConfig::default_weights(2)), 3.3, 1e-12);
}

TEST(Loss, MissingAncillaryLabelsLeaveFinalTermAlone) {
  Tape<double> tape;
  std::vector<Tensor<double>> storage;
  auto out = outputs_with_ce(tape, {1.0, 2.0, 3.0}, storage);
  auto loss = compute_loss(tape, out, {{0, std::nullopt}, {1, std::nullopt}, {2, 0}},
                           TrainConfig::default_weights(2));
  EXPECT_NEAR(loss.total.value()[0], 3.0, 1e-12);
  EXPECT_FALSE(loss.per_question[0].has_value());
  tape.backward(loss.total);
  EXPECT_FALSE(storage[0].has_grad() && (storage[0].grad()[0] != 0 || storage[0].grad()[1] != 0));
  ASSERT_TRUE(storage[2].has_grad());
  EXPECT_NE(storage[2].grad()[0], 0.0);
}

TEST(Loss, RandomCasesMatchScalarRecomputation) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(5);
    std::vector<Tensor<double>> logits;
    std::vector<double> weights;
    std::vector<std::pair<std::size_t, Label>> labels;
    for (std::size_t q = 0; q <= n; ++q) {
      const std::size_t classes = 2 + rng.below(3);
      logits.push_back(testing::random_tensor<double>({classes}, rng, -4, 4));
      weights.push_back(rng.uniform(0, 2));
      labels.emplace_back(q, rng.bernoulli(0.3) ? Label{} : Label(static_cast<int>(rng.below(classes))));
    }
    Tape<double> tape;
    std::vector<HeadOutput<double>> out;
    for (std::size_t q = 0; q <= n; ++q) out.push_back({q, 0, tape.constant(logits[q])});
    auto loss = compute_loss(tape, out, labels, weights);
    double expected = 0;
    std::vector<std::optional<double>> ce(n + 1);
    for (std::size_t q = 0; q <= n; ++q) {
      if (!labels[q].second) continue;
      double z = 0, mx = -1e300;
      for (double v : logits[q].values()) mx = std::max(mx, v);
      for (double v : logits[q].values()) z += std::exp(v - mx);
      ce[q] = std::log(z) + mx - logits[q][static_cast<std::size_t>(*labels[q].second)];
      expected += weights[q] * *ce[q];
    }
    EXPECT_NEAR(loss.total.value()[0], expected, 1e-6);
    EXPECT_NEAR(weighted_loss(ce, weights), expected, 1e-9);
  }
}

TEST(Loss, Errors) {
  Tape<double> tape;
  std::vector<Tensor<double>> storage;
  auto out = outputs_with_ce(tape, {1.0, 2.0}, storage);
  const auto w = TrainConfig::default_weights(1);
  EXPECT_THROW(compute_loss(tape, out, {{0, 2}}, w), LabelError);
  EXPECT_THROW(compute_loss(tape, out, {{0, -1}}, w), LabelError);
  EXPECT_THROW(compute_loss(tape, out, {{3, 0}}, w), ContractError);
  // A missing label needs no head.
  EXPECT_NO_THROW(compute_loss(tape, out, {{3, std::nullopt}}, w));
}

// Summed parameter gradients of a set of examples.
std::vector<double> summed_gradient(ModelBundle<double>& model,
                                    const std::vector<std::pair<const Example<double>*, std::vector<Label>>>& items,
                                    const std::vector<double>& weights) {
  model.zero_grad();
  for (const auto& [ex, labels] : items) {
    Tape<double> tape;
    auto out = forward_variant(tape, model, ex->layout, ex->images);
    std::vector<std::pair<std::size_t, Label>> lab;
    for (const auto& o : out) lab.emplace_back(o.question, labels[o.question]);
    tape.backward(compute_loss(tape, out, lab, weights).total);
  }
  std::vector<double> g;
  model.for_each_parameter([&](const std::string&, Tensor<double>& t) {
    for (std::size_t i = 0; i < t.size(); ++i) g.push_back(t.has_grad() ? t.grad()[i] : 0.0);
  });
  return g;
}

TEST(Loss, MaskedRowsContributeExactlyNothing) {
  const auto cfg = tiny_model(Variant::kAgentPS);
  auto model = ModelBundle<double>::init(cfg, Rng(4));
  const auto samples = generate_dataset(tiny_dataset(6));
  const auto ex = make_examples<double>(samples, default_vocab(), cfg);
  const auto w = TrainConfig::default_weights(4);
  const std::vector<Label> all_missing(5, std::nullopt);
  const auto with_missing = summed_gradient(
      model, {{&ex[0], ex[0].labels}, {&ex[1], all_missing}, {&ex[2], ex[2].labels}, {&ex[3], all_missing}}, w);
  const auto dropped = summed_gradient(model, {{&ex[0], ex[0].labels}, {&ex[2], ex[2].labels}}, w);
  EXPECT_EQ(with_missing, dropped);

  // A partially missing row equals the same row with those questions removed
  // from the loss by zero weights.
  auto partial = ex[4].labels;
  partial[1] = std::nullopt;
  partial[4] = std::nullopt;
  const auto masked = summed_gradient(model, {{&ex[4], partial}}, w);
  auto w0 = w;
  w0[1] = 0.0;
  w0[4] = 0.0;
  const auto zeroed = summed_gradient(model, {{&ex[4], ex[4].labels}}, w0);
  ASSERT_EQ(masked.size(), zeroed.size());
  for (std::size_t i = 0; i < masked.size(); ++i) ASSERT_NEAR(masked[i], zeroed[i], 1e-15);
}

// ---------------------------------------------------------------------------
// Training loop

TrainConfig quick_train(Variant v, std::size_t epochs) {
  TrainConfig tc;
  tc.variant = v;
  tc.epochs = epochs;
  tc.batch_size = 8;
  tc.learning_rate = 1e-3;
  tc.seed = 5;
  return tc;
}

template <class T>
std::vector<T> flat_params(const ModelBundle<T>& m) {
  std::vector<T> out;
  m.for_each_parameter([&](const std::string&, const Tensor<T>& t) {
    out.insert(out.end(), t.values().begin(), t.values().end());
  });
  return out;
}

TEST(Trainer, ZeroLearningRateLeavesParametersUnchanged) {
  const auto cfg = tiny_model(Variant::kAgentPS);
  const auto ex = make_examples<float>(generate_dataset(tiny_dataset(40)), default_vocab(), cfg);
  auto tc = quick_train(Variant::kAgentPS, 3);
  tc.learning_rate = 0.0;
  auto state = initial_state<float>(cfg, tc);
  const auto before = flat_params(state.model);
  Trainer<float>(state, tc).train(ex);
  EXPECT_EQ(flat_params(state.model), before);
  EXPECT_EQ(state.epoch, 3u);
  EXPECT_EQ(state.adam.step, 15u);
}

TEST(Trainer, SameSeedSameTrajectory) {
  const auto cfg = tiny_model(Variant::kMultitask);
  const auto ex = make_examples<float>(generate_dataset(tiny_dataset(40)), default_vocab(), cfg);
  const auto tc = quick_train(Variant::kMultitask, 3);
  auto a = train(cfg, ex, tc);
  auto b = train(cfg, ex, tc);
  ASSERT_EQ(a.second.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(a.second[e].total_loss, b.second[e].total_loss);
    EXPECT_EQ(a.second[e].question_loss, b.second[e].question_loss);
  }
  EXPECT_EQ(flat_params(a.first.model), flat_params(b.first.model));
  auto tc2 = tc;
  tc2.seed = 6;
  EXPECT_NE(train(cfg, ex, tc2).second[0].total_loss, a.second[0].total_loss);
}

TEST(Trainer, InterruptedRunContinuesIdentically) {
  const auto cfg = tiny_model(Variant::kAgentPS);
  const auto ex = make_examples<float>(generate_dataset(tiny_dataset(40)), default_vocab(), cfg);
  auto tc = quick_train(Variant::kAgentPS, 3);
  tc.lr_schedule = "cosine";
  auto full = train(cfg, ex, tc);

  auto state = initial_state<float>(cfg, tc);
  Trainer<float>(state, tc).run_epoch(ex);
  TrainState<float> copy = state;  // what a checkpoint carries
  Trainer<float> resumed(copy, tc);
  auto log = resumed.train(ex);
  ASSERT_EQ(log.size(), 2u);
  EXPECT_EQ(log.back().total_loss, full.second.back().total_loss);
  EXPECT_EQ(flat_params(copy.model), flat_params(full.first.model));
}

// With zero ancillary weights the ancillary heads must not influence any
// update, so training matches a run that never evaluates them.
TEST(Trainer, ZeroAncillaryWeightsMatchFinalOnlyTraining) {
  const auto cfg = tiny_model(Variant::kAgentPS);
  const auto ex = make_examples<double>(generate_dataset(tiny_dataset(32)), default_vocab(), cfg);
  auto tc = quick_train(Variant::kAgentPS, 2);
  tc.weights = {0, 0, 0, 0, 1};
  auto zero_weights = train(cfg, ex, tc);
  tc.weights.clear();
  tc.ancillary_heads = false;
  auto final_only = train(cfg, ex, tc);
  const auto a = flat_params(zero_weights.first.model), b = flat_params(final_only.first.model);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], 1e-7) << i;
}

TEST(Trainer, FullBatchLossIsMonotone) {
  const auto cfg = tiny_model(Variant::kAgentPS);
  const auto ex = make_examples<double>(generate_dataset(tiny_dataset(16)), default_vocab(), cfg);
  TrainConfig tc;  // default learning rate
  tc.variant = Variant::kAgentPS;
  tc.batch_size = 16;
  tc.epochs = 25;
  auto [state, log] = train(cfg, ex, tc);
  ASSERT_EQ(log.size(), 25u);
  for (std::size_t e = 1; e < log.size(); ++e) {
    EXPECT_LE(log[e].total_loss, log[e - 1].total_loss + 1e-12) << "step " << e;
  }
  EXPECT_LT(log.back().total_loss, log.front().total_loss);
}

TEST(Trainer, OverfitsSmallNoiselessSet) {
  const auto cfg = tiny_model(Variant::kAgentPS);
  auto spec = tiny_dataset(200, 12);
  spec.noise_sigma = 0.0;
  const auto ex = make_examples<float>(generate_dataset(spec), default_vocab(), cfg);
  auto tc = quick_train(Variant::kAgentPS, 30);
  tc.batch_size = 16;
  auto [state, log] = train(cfg, ex, tc);
  std::size_t correct = 0;
  for (const auto& e : ex) {
    const auto p = predict(state.model, e.layout, e.images, HeadSelection::kFinalOnly);
    correct += (p[0].logits[1] > p[0].logits[0] ? 1 : 0) == *e.labels.back();
  }
  EXPECT_GE(correct / 200.0, 0.95) << "final training loss " << log.back().total_loss;
}

TEST(Trainer, NonFiniteLossNamesStepAndBatch) {
  const auto cfg = tiny_model(Variant::kVanilla);
  const auto ex = make_examples<float>(generate_dataset(tiny_dataset(16)), default_vocab(), cfg);
  auto tc = quick_train(Variant::kVanilla, 1);
  auto state = initial_state<float>(cfg, tc);
  state.model.heads[0].out.bias[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    Trainer<float>(state, tc).run_epoch(ex);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch 0"), std::string::npos) << msg;
  }
}

TEST(Trainer, ValidatesConfiguration) {
  const auto cfg = tiny_model(Variant::kAgentPS);
  auto tc = quick_train(Variant::kVanilla, 1);
  auto state = initial_state<float>(cfg, tc);
  EXPECT_THROW(Trainer<float>(state, tc), ConfigError);
  tc.variant = Variant::kAgentPS;
  tc.weights = {0.1, 0.1, 0.1, 0.1, 0.0};
  EXPECT_THROW(Trainer<float>(state, tc), ConfigError);
  tc.weights = {0.1, 0.1, 1.0};
  EXPECT_THROW(Trainer<float>(state, tc), ConfigError);
  tc.weights.clear();
  tc.lr_schedule = "step";
  EXPECT_THROW(Trainer<float>(state, tc), ConfigError);
  tc.lr_schedule = "constant";
  EXPECT_THROW(Trainer<float>(state, tc).run_epoch({}), ContractError);
}

TEST(Trainer, LogRecordsPerQuestionLosses) {
  const auto cfg = tiny_model(Variant::kAgentPS);
  auto samples = generate_dataset(tiny_dataset(24));
  const auto ex = make_examples<float>(samples, default_vocab(), cfg, [](const Sample& s) {
    auto l = ground_truth_labels(s);
    l[2] = std::nullopt;
    return l;
  });
  auto [state, log] = train(cfg, ex, quick_train(Variant::kAgentPS, 1));
  ASSERT_EQ(log[0].question_loss.size(), 5u);
  EXPECT_FALSE(log[0].question_loss[2].has_value());
  EXPECT_TRUE(log[0].question_loss[4].has_value());
  EXPECT_EQ(log[0].steps, 3u);
  std::ostringstream csv;
  write_epoch_csv(csv, log, 4);
  const std::string text = csv.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "epoch,total_loss,loss_q1,loss_q2,loss_q3,loss_q4,loss_q5");
  const std::string row = text.substr(text.find('\n') + 1);
  EXPECT_EQ(row.rfind("1,", 0), 0u);
  EXPECT_NE(row.find(",,"), std::string::npos);  // the masked question is an empty cell
}

TEST(Trainer, ExamplesRejectMismatchedImages) {
  auto cfg = tiny_model(Variant::kAgentPS);
  cfg.image_size = 12;
  EXPECT_THROW(make_examples<float>(generate_dataset(tiny_dataset(2)), default_vocab(), cfg), SchemaError);
}

TEST(LabelSources, ParseAndPrint) {
  for (auto s : {LabelSource::kGroundTruth, LabelSource::kSimulated, LabelSource::kRemote}) {
    EXPECT_EQ(parse_label_source(to_string(s)), s);
  }
  EXPECT_THROW(parse_label_source("oracle"), ConfigError);
}

}  // namespace
}  // namespace agentps

// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "agentps/assembly.hpp"
#include "agentps/autodiff.hpp"
#include "agentps/config.hpp"
#include "agentps/data.hpp"
#include "agentps/errors.hpp"
#include "agentps/model.hpp"
#include "agentps/rng.hpp"

namespace agentps {

/// A label or MISSING (std::nullopt).
using Label = std::optional<int>;

enum class LabelSource { kGroundTruth, kSimulated, kRemote };

inline std::string_view to_string(LabelSource s) {
  switch (s) {
    case LabelSource::kGroundTruth: return "ground_truth";
    case LabelSource::kSimulated: return "simulated";
    case LabelSource::kRemote: return "remote";
  }
  return "?";
}

inline LabelSource parse_label_source(std::string_view s) {
  if (s == "ground_truth") return LabelSource::kGroundTruth;
  if (s == "simulated") return LabelSource::kSimulated;
  if (s == "remote") return LabelSource::kRemote;
  throw ConfigError("unknown label source '" + std::string(s) +
                    "' (ground_truth|simulated|remote)");
}

struct TrainConfig {
  // w_1..w_{N+1}; empty means 0.1 for every ancillary question and 1 for the
  // final one.
  std::vector<double> weights;
  double learning_rate = 3e-4;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  std::string lr_schedule = "constant";  // constant | cosine
  std::uint64_t seed = 1;
  Variant variant = Variant::kAgentPS;
  LabelSource label_source = LabelSource::kGroundTruth;
  // When false the ancillary heads are never evaluated during training.
  bool ancillary_heads = true;

  static std::vector<double> default_weights(std::size_t n_questions) {
    std::vector<double> w(n_questions + 1, 0.1);
    w.back() = 1.0;
    return w;
  }

  std::vector<double> resolved_weights(std::size_t n_questions) const {
    return weights.empty() ? default_weights(n_questions) : weights;
  }

  void validate(std::size_t n_questions) const {
    const auto w = resolved_weights(n_questions);
    if (w.size() != n_questions + 1) {
      throw ConfigError("train.weights needs N+1 = " + std::to_string(n_questions + 1) +
                        " entries, got " + std::to_string(w.size()));
    }
    for (double x : w) {
      if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError("loss weights must be >= 0");
    }
    if (!(w.back() > 0.0)) throw ConfigError("the final-question weight must be > 0");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
    if (lr_schedule != "constant" && lr_schedule != "cosine") {
      throw ConfigError("unknown lr_schedule '" + lr_schedule + "' (constant|cosine)");
    }
  }
};

/// One prepared training/evaluation item.
template <class T>
struct Example {
  std::string id;
  PromptLayout layout;
  Tensor<T> images;
  std::vector<Label> labels;  // N+1 entries, final last
};

inline std::vector<Label> ground_truth_labels(const Sample& s) {
  std::vector<Label> out(s.process_labels.begin(), s.process_labels.end());
  out.emplace_back(s.final_label);
  return out;
}

/// Builds layouts and image tensors. `labels(sample)` supplies the N+1
/// training labels; ground truth by default.
template <class T>
std::vector<Example<T>> make_examples(
    const std::vector<Sample>& samples, const SpecialVocab& vocab, const ModelConfig& cfg,
    const std::function<std::vector<Label>(const Sample&)>& labels = ground_truth_labels) {
  std::vector<Example<T>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.image.frames != cfg.frames || s.image.size != cfg.image_size) {
      throw SchemaError("sample " + s.id + " has " + std::to_string(s.image.frames) + "x" +
                        std::to_string(s.image.size) + " images, model expects " +
                        std::to_string(cfg.frames) + "x" + std::to_string(cfg.image_size));
    }
    auto lab = labels(s);
    if (lab.size() != cfg.n_questions + 1) {
      throw SchemaError("sample " + s.id + " carries " + std::to_string(lab.size()) +
                        " labels, expected N+1 = " + std::to_string(cfg.n_questions + 1));
    }
    out.push_back({s.id, build_sequence(s, vocab, cfg), s.image.tensor<T>(), std::move(lab)});
  }
  return out;
}

template <class T>
struct LossTerms {
  Var<T> total;
  // Unweighted cross-entropy per question (N+1 entries); nullopt when the
  // label is MISSING or the question has no head output.
  std::vector<std::optional<T>> per_question;
};

/// Σ_i w_i CE(ŷ^i, y^i) over questions whose label is present. MISSING labels
/// contribute nothing, value or gradient.
template <class T>
LossTerms<T> compute_loss(Tape<T>& tape, const std::vector<HeadOutput<T>>& outputs,
                          const std::vector<std::pair<std::size_t, Label>>& labels,
                          const std::vector<double>& weights) {
  std::size_t n_q = weights.size();
  for (const auto& [q, _] : labels) n_q = std::max(n_q, q + 1);
  LossTerms<T> result;
  result.per_question.assign(n_q, std::nullopt);
  std::vector<Var<T>> terms;
  std::vector<T> w;
  for (const auto& [q, label] : labels) {
    if (!label) continue;
    const HeadOutput<T>* out = nullptr;
    for (const auto& o : outputs) {
      if (o.question == q) out = &o;
    }
    if (!out) {
      throw ContractError("label for question " + std::to_string(q + 1) +
                          " has no matching head output");
    }
    const std::size_t classes = out->logits.value().size();
    if (*label < 0 || static_cast<std::size_t>(*label) >= classes) {
      throw LabelError("label " + std::to_string(*label) + " for question " +
                       std::to_string(q + 1) + " outside [0, " + std::to_string(classes) + ")");
    }
    if (q >= weights.size()) throw ContractError("no loss weight for question " + std::to_string(q + 1));
    Var<T> ce = ad::softmax_cross_entropy(out->logits, static_cast<std::size_t>(*label));
    result.per_question[q] = ce.value()[0];
    terms.push_back(ce);
    w.push_back(static_cast<T>(weights[q]));
  }
  result.total = terms.empty() ? tape.constant(Tensor<T>::scalar(T{0})) : ad::weighted_sum(terms, w);
  return result;
}

/// Scalar convenience form of compute_loss over precomputed per-question CE
/// values (used for reporting and for checking the weighting arithmetic).
inline double weighted_loss(const std::vector<std::optional<double>>& ce,
                            const std::vector<double>& weights) {
  double total = 0.0;
  for (std::size_t i = 0; i < ce.size() && i < weights.size(); ++i) {
    if (ce[i]) total += weights[i] * *ce[i];
  }
  return total;
}

template <class T>
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<T>> m, v;  // canonical parameter order
};

/// Everything needed to resume a run exactly.
template <class T>
struct TrainState {
  ModelBundle<T> model;
  AdamState<T> adam;
  Rng rng;
  std::size_t epoch = 0;  // completed epochs
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double total_loss = 0.0;
  std::vector<std::optional<double>> question_loss;  // N+1 entries
  std::size_t steps = 0;
};

inline void write_epoch_csv(std::ostream& out, const std::vector<EpochStats>& log,
                            std::size_t n_questions, bool header = true) {
  if (header) {
    out << "epoch,total_loss";
    for (std::size_t q = 0; q <= n_questions; ++q) out << ",loss_q" << q + 1;
    out << '\n';
  }
  for (const auto& e : log) {
    out << e.epoch << ',' << std::setprecision(9) << e.total_loss;
    for (std::size_t q = 0; q <= n_questions; ++q) {
      out << ',';
      if (q < e.question_loss.size() && e.question_loss[q]) out << *e.question_loss[q];
    }
    out << '\n';
  }
}

template <class T>
void adam_update(ModelBundle<T>& model, AdamState<T>& state, const TrainConfig& cfg, double lr) {
  std::size_t count = 0;
  model.for_each_parameter([&](const std::string&, Tensor<T>&) { ++count; });
  if (state.m.size() != count) {
    state.m.clear();
    state.v.clear();
    model.for_each_parameter([&](const std::string&, Tensor<T>& t) {
      state.m.emplace_back(t.size(), T{0});
      state.v.emplace_back(t.size(), T{0});
    });
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T eps = static_cast<T>(cfg.epsilon), step = static_cast<T>(lr);
  const T decay = static_cast<T>(cfg.weight_decay * lr);
  std::size_t idx = 0;
  model.for_each_parameter([&](const std::string&, Tensor<T>& p) {
    auto& m = state.m[idx];
    auto& v = state.v[idx];
    ++idx;
    const bool has = p.has_grad();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T g = has ? p.grad()[j] : T{0};
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      const T mhat = m[j] / c1;
      const T vhat = v[j] / c2;
      p[j] -= step * mhat / (std::sqrt(vhat) + eps) + decay * p[j];
    }
  });
}

template <class T>
TrainState<T> initial_state(const ModelConfig& model_cfg, const TrainConfig& cfg) {
  const Rng master(cfg.seed);
  return TrainState<T>{ModelBundle<T>::init(model_cfg, master.split("init")), {},
                       master.split("shuffle"), 0};
}

/// Mini-batch Adam over the examples until `state.epoch == cfg.epochs`.
/// `on_epoch(state, stats)` runs after every completed epoch (checkpointing).
template <class T>
class Trainer {
 public:
  using EpochCallback = std::function<void(const TrainState<T>&, const EpochStats&)>;

  Trainer(TrainState<T>& state, TrainConfig cfg) : state_(state), cfg_(std::move(cfg)) {
    const auto& mc = state_.model.config;
    cfg_.validate(mc.n_questions);
    if (cfg_.variant != mc.variant) {
      throw ConfigError("train variant " + std::string(to_string(cfg_.variant)) +
                        " does not match model variant " + std::string(to_string(mc.variant)));
    }
    weights_ = cfg_.resolved_weights(mc.n_questions);
  }

  EpochStats run_epoch(const std::vector<Example<T>>& data) {
    if (data.empty()) throw ContractError("training set is empty");
    const auto& mc = state_.model.config;
    const std::size_t n_q = mc.n_questions + 1;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    state_.rng.shuffle(order.begin(), order.end());

    const bool vanilla = mc.variant == Variant::kVanilla;
    const auto which = (vanilla || !cfg_.ancillary_heads) ? HeadSelection::kFinalOnly
                                                          : HeadSelection::kAll;
    const std::size_t steps_per_epoch = (data.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    const std::size_t total_steps = steps_per_epoch * std::max<std::size_t>(cfg_.epochs, 1);

    EpochStats stats;
    stats.epoch = state_.epoch + 1;
    std::vector<double> q_sum(n_q, 0.0);
    std::vector<std::size_t> q_count(n_q, 0);
    double total = 0.0;
    Tape<T> tape;
    state_.model.zero_grad();
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t begin = b * cfg_.batch_size;
      const std::size_t end = std::min(begin + cfg_.batch_size, data.size());
      const T inv_batch = T(1) / static_cast<T>(end - begin);
      for (std::size_t k = begin; k < end; ++k) {
        const auto& ex = data[order[k]];
        tape.clear();
        auto outputs = forward_variant(tape, state_.model, ex.layout, ex.images, which);
        std::vector<std::pair<std::size_t, Label>> labels;
        for (const auto& o : outputs) labels.emplace_back(o.question, ex.labels.at(o.question));
        auto loss = compute_loss(tape, outputs, labels, weights_);
        const T value = loss.total.value()[0];
        if (!std::isfinite(value)) {
          throw NumericError("non-finite loss at step " + std::to_string(state_.adam.step + 1) +
                             " (epoch " + std::to_string(stats.epoch) + ", batch " +
                             std::to_string(b) + ", sample " + ex.id + ")");
        }
        total += value;
        for (std::size_t q = 0; q < n_q && q < loss.per_question.size(); ++q) {
          if (loss.per_question[q]) {
            q_sum[q] += *loss.per_question[q];
            ++q_count[q];
          }
        }
        tape.backward(ad::scale(loss.total, inv_batch));
      }
      adam_update(state_.model, state_.adam, cfg_, learning_rate(total_steps));
      state_.model.zero_grad();
      ++stats.steps;
    }
    stats.total_loss = total / static_cast<double>(data.size());
    stats.question_loss.resize(n_q);
    for (std::size_t q = 0; q < n_q; ++q) {
      if (q_count[q]) stats.question_loss[q] = q_sum[q] / static_cast<double>(q_count[q]);
    }
    ++state_.epoch;
    return stats;
  }

  std::vector<EpochStats> train(const std::vector<Example<T>>& data,
                                const EpochCallback& on_epoch = {}) {
    std::vector<EpochStats> log;
    while (state_.epoch < cfg_.epochs) {
      log.push_back(run_epoch(data));
      if (on_epoch) on_epoch(state_, log.back());
    }
    return log;
  }

  const std::vector<double>& weights() const noexcept { return weights_; }

 private:
  double learning_rate(std::size_t total_steps) const {
    if (cfg_.lr_schedule == "cosine" && total_steps > 0) {
      const double progress =
          std::min(1.0, static_cast<double>(state_.adam.step) / static_cast<double>(total_steps));
      return cfg_.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
    return cfg_.learning_rate;
  }

  TrainState<T>& state_;
  TrainConfig cfg_;
  std::vector<double> weights_;
};

/// Convenience wrapper: fresh state, full run.
template <class T>
std::pair<TrainState<T>, std::vector<EpochStats>> train(const ModelConfig& model_cfg,
                                                        const std::vector<Example<T>>& data,
                                                        const TrainConfig& cfg) {
  TrainState<T> state = initial_state<T>(model_cfg, cfg);
  Trainer<T> trainer(state, cfg);
  auto log = trainer.train(data);
  return {std::move(state), std::move(log)};
}

}  // namespace agentps

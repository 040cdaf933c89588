// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "agentps/config.hpp"
#include "agentps/data.hpp"
#include "agentps/errors.hpp"
#include "agentps/metrics.hpp"
#include "agentps/model.hpp"
#include "agentps/training.hpp"

namespace agentps {

struct MetricSettings {
  double f1_threshold = 0.5;
  std::vector<double> precision_floors{0.60, 0.65, 0.70, 0.75, 0.80};
  std::vector<double> recall_floors{0.50};

  void validate() const {
    if (!(f1_threshold >= 0.0 && f1_threshold <= 1.0)) {
      throw ConfigError("f1_threshold must lie in [0, 1]");
    }
    for (double p : precision_floors) {
      if (!(p > 0.0 && p <= 1.0)) throw ConfigError("precision floors must lie in (0, 1]");
    }
    for (double r : recall_floors) {
      if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("recall floors must lie in [0, 1]");
    }
  }
};

struct EvalResult {
  std::vector<ScoredPrediction> scores;                // final question
  std::vector<std::optional<double>> question_accuracy;  // N ancillary heads; empty for vanilla
  double final_accuracy = 0.0;
};

/// Runs every example through the model. Accuracy compares the argmax of each
/// head with the example labels, skipping MISSING ones.
template <class T>
EvalResult evaluate(const ModelBundle<T>& model, const std::vector<Example<T>>& data) {
  const auto& cfg = model.config;
  const std::size_t n = cfg.n_questions;
  const bool ancillary = cfg.variant != Variant::kVanilla;
  std::vector<std::size_t> correct(n + 1, 0), seen(n + 1, 0);
  EvalResult r;
  r.scores.reserve(data.size());
  for (const auto& ex : data) {
    const auto preds = predict(model, ex.layout, ex.images);
    for (const auto& p : preds) {
      const auto& label = ex.labels.at(p.question);
      if (p.question == n) {
        if (!label) throw LabelError("test example " + ex.id + " has no final label");
        const auto probs = softmax<T>(p.logits);
        r.scores.push_back({ex.id, std::clamp(static_cast<double>(probs.at(1)), 0.0, 1.0), *label});
      }
      if (!label) continue;
      const auto arg = static_cast<int>(
          std::max_element(p.logits.begin(), p.logits.end()) - p.logits.begin());
      ++seen[p.question];
      if (arg == *label) ++correct[p.question];
    }
  }
  if (ancillary) {
    for (std::size_t q = 0; q < n; ++q) {
      r.question_accuracy.push_back(seen[q] ? std::optional<double>(static_cast<double>(correct[q]) /
                                                                    static_cast<double>(seen[q]))
                                            : std::nullopt);
    }
  }
  r.final_accuracy = seen[n] ? static_cast<double>(correct[n]) / static_cast<double>(seen[n]) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricsRow {
  std::string variant;
  std::uint64_t seed = 0;
  double f1 = 0.0;
  double f1_best = 0.0;
  double f1_best_threshold = 0.5;
  std::vector<double> recall_at_precision;  // aligned with precision_floors
  std::vector<double> precision_at_recall;  // aligned with recall_floors
  std::vector<std::optional<double>> question_accuracy;
  double final_accuracy = 0.0;
};

struct MetricsReport {
  MetricsRow row;
  MetricSettings settings;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::string label_source = "ground_truth";
};

inline MetricsRow score_row(const EvalResult& r, const MetricSettings& s, std::string variant,
                            std::uint64_t seed) {
  s.validate();
  const PRCurve curve = pr_curve(r.scores);
  MetricsRow row;
  row.variant = std::move(variant);
  row.seed = seed;
  row.f1 = f1_score(r.scores, s.f1_threshold);
  const BestF1 best = best_f1(curve);
  row.f1_best = best.f1;
  row.f1_best_threshold = best.threshold;
  for (double p : s.precision_floors) row.recall_at_precision.push_back(recall_at_precision(curve, p));
  for (double q : s.recall_floors) row.precision_at_recall.push_back(precision_at_recall(curve, q));
  row.question_accuracy = r.question_accuracy;
  row.final_accuracy = r.final_accuracy;
  return row;
}

/// Fraction in [0, 1] as integer tenths of a percent (0.716 -> 716).
inline long long to_tenths(double fraction) { return std::llround(fraction * 1000.0); }

inline std::string format_tenths(long long tenths) {
  const bool neg = tenths < 0;
  const long long a = neg ? -tenths : tenths;
  return (neg ? "-" : "") + std::to_string(a / 10) + "." + std::to_string(a % 10);
}

/// Percentage with one decimal, as in "71.6".
inline std::string format_percent(double fraction) { return format_tenths(to_tenths(fraction)); }

inline std::string floor_label(const char* prefix, double floor) {
  return std::string(prefix) + std::to_string(std::llround(floor * 100.0));
}

inline std::vector<std::string> metric_columns(const MetricSettings& s) {
  std::vector<std::string> cols{"f1", "f1_best"};
  for (double p : s.precision_floors) cols.push_back(floor_label("r@p", p));
  for (double r : s.recall_floors) cols.push_back(floor_label("p@r", r));
  return cols;
}

inline std::vector<double> metric_values(const MetricsRow& row) {
  std::vector<double> v{row.f1, row.f1_best};
  v.insert(v.end(), row.recall_at_precision.begin(), row.recall_at_precision.end());
  v.insert(v.end(), row.precision_at_recall.begin(), row.precision_at_recall.end());
  return v;
}

inline void write_report_csv_header(std::ostream& out, const MetricSettings& s, std::size_t n_questions) {
  out << "variant,seed";
  for (const auto& c : metric_columns(s)) out << ',' << c;
  for (std::size_t q = 0; q < n_questions; ++q) out << ",acc_q" << q + 1;
  out << '\n';
}

inline void write_report_csv_row(std::ostream& out, const MetricsRow& row, std::size_t n_questions) {
  out << row.variant << ',' << row.seed;
  for (double v : metric_values(row)) out << ',' << format_percent(v);
  for (std::size_t q = 0; q < n_questions; ++q) {
    out << ',';
    if (q < row.question_accuracy.size() && row.question_accuracy[q]) {
      out << format_percent(*row.question_accuracy[q]);
    }
  }
  out << '\n';
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["variant"] = r.row.variant;
  j["seed"] = r.row.seed;
  const auto cols = metric_columns(r.settings);
  const auto vals = metric_values(r.row);
  nlohmann::ordered_json metrics;
  for (std::size_t i = 0; i < cols.size(); ++i) metrics[cols[i]] = format_percent(vals[i]);
  j["metrics"] = std::move(metrics);
  auto acc = nlohmann::ordered_json::array();
  for (const auto& a : r.row.question_accuracy) acc.push_back(a ? nlohmann::ordered_json(format_percent(*a)) : nlohmann::ordered_json(nullptr));
  j["question_accuracy"] = std::move(acc);
  j["final_accuracy"] = format_percent(r.row.final_accuracy);
  j["f1_threshold"] = r.settings.f1_threshold;
  j["f1_best_threshold"] = r.row.f1_best_threshold;
  j["train_size"] = r.train_size;
  j["test_size"] = r.test_size;
  j["label_source"] = r.label_source;
  return j;
}

// ---------------------------------------------------------------------------
// Ablation

struct SummaryRow {
  std::string variant;
  std::vector<double> mean;             // per metric column, fractions
  std::vector<long long> tenths;        // per metric column, rounded
  std::vector<std::optional<double>> question_accuracy;
  std::vector<std::string> best;        // metric columns this row leads
};

struct GapDecomposition {
  // Integer tenths of a percent, so the sum is exact.
  long long multitask_minus_vanilla = 0;
  long long agentps_minus_multitask = 0;
  long long agentps_minus_vanilla = 0;
};

struct AblationSummary {
  std::vector<std::string> columns;
  std::vector<SummaryRow> rows;
  std::optional<GapDecomposition> f1_gaps;  // present when all three variants ran

  const SummaryRow* find(std::string_view variant) const {
    for (const auto& r : rows) {
      if (r.variant == variant) return &r;
    }
    return nullptr;
  }
};

inline AblationSummary summarize(const std::vector<MetricsReport>& reports) {
  AblationSummary s;
  if (reports.empty()) return s;
  s.columns = metric_columns(reports.front().settings);
  std::vector<std::string> order;
  std::map<std::string, std::vector<const MetricsReport*>> by_variant;
  for (const auto& r : reports) {
    if (!by_variant.count(r.row.variant)) order.push_back(r.row.variant);
    by_variant[r.row.variant].push_back(&r);
  }
  for (const auto& v : order) {
    const auto& group = by_variant[v];
    SummaryRow row;
    row.variant = v;
    row.mean.assign(s.columns.size(), 0.0);
    const std::size_t nq = group.front()->row.question_accuracy.size();
    std::vector<double> acc(nq, 0.0);
    std::vector<std::size_t> acc_n(nq, 0);
    for (const auto* r : group) {
      const auto vals = metric_values(r->row);
      for (std::size_t i = 0; i < vals.size() && i < row.mean.size(); ++i) row.mean[i] += vals[i];
      for (std::size_t q = 0; q < nq && q < r->row.question_accuracy.size(); ++q) {
        if (r->row.question_accuracy[q]) {
          acc[q] += *r->row.question_accuracy[q];
          ++acc_n[q];
        }
      }
    }
    for (auto& m : row.mean) m /= static_cast<double>(group.size());
    for (double m : row.mean) row.tenths.push_back(to_tenths(m));
    for (std::size_t q = 0; q < nq; ++q) {
      row.question_accuracy.push_back(acc_n[q] ? std::optional<double>(acc[q] / static_cast<double>(acc_n[q]))
                                               : std::nullopt);
    }
    s.rows.push_back(std::move(row));
  }
  for (std::size_t c = 0; c < s.columns.size(); ++c) {
    long long top = s.rows.front().tenths[c];
    for (const auto& r : s.rows) top = std::max(top, r.tenths[c]);
    for (auto& r : s.rows) {
      if (r.tenths[c] == top) r.best.push_back(s.columns[c]);
    }
  }
  const auto* van = s.find("vanilla");
  const auto* mt = s.find("multitask");
  const auto* ap = s.find("agentps");
  if (van && mt && ap) {
    GapDecomposition g;
    g.multitask_minus_vanilla = mt->tenths[0] - van->tenths[0];
    g.agentps_minus_multitask = ap->tenths[0] - mt->tenths[0];
    g.agentps_minus_vanilla = ap->tenths[0] - van->tenths[0];
    s.f1_gaps = g;
  }
  return s;
}

inline void write_summary_csv(std::ostream& out, const AblationSummary& s, std::size_t n_questions) {
  out << "variant";
  for (const auto& c : s.columns) out << ',' << c;
  for (std::size_t q = 0; q < n_questions; ++q) out << ",acc_q" << q + 1;
  out << ",best\n";
  for (const auto& r : s.rows) {
    out << r.variant;
    for (auto t : r.tenths) out << ',' << format_tenths(t);
    for (std::size_t q = 0; q < n_questions; ++q) {
      out << ',';
      if (q < r.question_accuracy.size() && r.question_accuracy[q]) out << format_percent(*r.question_accuracy[q]);
    }
    out << ',';
    for (std::size_t i = 0; i < r.best.size(); ++i) out << (i ? ";" : "") << r.best[i];
    out << '\n';
  }
}

inline nlohmann::ordered_json to_json(const AblationSummary& s) {
  nlohmann::ordered_json j;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : s.rows) {
    nlohmann::ordered_json row;
    row["variant"] = r.variant;
    nlohmann::ordered_json metrics;
    for (std::size_t c = 0; c < s.columns.size(); ++c) metrics[s.columns[c]] = format_tenths(r.tenths[c]);
    row["metrics"] = std::move(metrics);
    auto acc = nlohmann::ordered_json::array();
    for (const auto& a : r.question_accuracy) acc.push_back(a ? nlohmann::ordered_json(format_percent(*a)) : nlohmann::ordered_json(nullptr));
    row["question_accuracy"] = std::move(acc);
    row["best"] = r.best;
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  if (s.f1_gaps) {
    j["f1_gaps"] = {{"multitask_minus_vanilla", format_tenths(s.f1_gaps->multitask_minus_vanilla)},
                    {"agentps_minus_multitask", format_tenths(s.f1_gaps->agentps_minus_multitask)},
                    {"agentps_minus_vanilla", format_tenths(s.f1_gaps->agentps_minus_vanilla)}};
  }
  return j;
}

inline void check_disjoint(const std::vector<Sample>& train, const std::vector<Sample>& test) {
  std::set<std::string> ids;
  for (const auto& s : train) ids.insert(s.id);
  for (const auto& s : test) {
    if (ids.count(s.id)) throw ConfigError("sample id '" + s.id + "' appears in both train and test splits");
  }
}

struct AblationConfig {
  ModelConfig model;  // variant is overridden per arm
  TrainConfig train;  // seed and variant are overridden per arm
  std::vector<std::uint64_t> seeds{1};
  std::vector<Variant> variants{std::begin(kAllVariants), std::end(kAllVariants)};
  MetricSettings metrics;
  std::size_t threads = 1;
  // Training labels (N+1 per sample); ground truth when empty.
  std::function<std::vector<Label>(const Sample&)> train_labels;
  // Progress messages; may be called from worker threads, serialized.
  std::function<void(const std::string&)> log;
};

struct AblationResult {
  std::vector<MetricsReport> reports;  // seed-major, variants in config order
  AblationSummary summary;
};

/// Trains and evaluates every (seed, variant) arm on identical data. Arms of
/// the same seed share the master seed, so shared parameters start equal.
inline AblationResult run_ablation(const std::vector<Sample>& train, const std::vector<Sample>& test,
                                   const SpecialVocab& vocab, const AblationConfig& cfg) {
  check_disjoint(train, test);
  if (train.empty() || test.empty()) throw ConfigError("ablation needs nonempty train and test splits");
  if (cfg.seeds.empty()) throw ConfigError("ablation needs at least one seed");
  cfg.metrics.validate();
  struct Arm {
    std::uint64_t seed;
    Variant variant;
  };
  std::vector<Arm> arms;
  for (auto seed : cfg.seeds) {
    for (auto v : cfg.variants) arms.push_back({seed, v});
  }
  std::vector<std::optional<MetricsReport>> results(arms.size());
  std::mutex log_mutex;
  auto log = [&](const std::string& msg) {
    if (!cfg.log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    cfg.log(msg);
  };

  auto run_arm = [&](std::size_t i) {
    const Arm& arm = arms[i];
    ModelConfig mc = cfg.model;
    mc.variant = arm.variant;
    TrainConfig tc = cfg.train;
    tc.variant = arm.variant;
    tc.seed = arm.seed;
    const auto label_fn = cfg.train_labels ? cfg.train_labels : ground_truth_labels;
    const auto train_ex = make_examples<float>(train, vocab, mc, label_fn);
    const auto test_ex = make_examples<float>(test, vocab, mc);
    auto state = initial_state<float>(mc, tc);
    Trainer<float> trainer(state, tc);
    trainer.train(train_ex, [&](const TrainState<float>&, const EpochStats& e) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "[%s seed=%llu] epoch %zu loss %.4f",
                    std::string(to_string(arm.variant)).c_str(),
                    static_cast<unsigned long long>(arm.seed), e.epoch, e.total_loss);
      log(buf);
    });
    MetricsReport rep;
    rep.row = score_row(evaluate(state.model, test_ex), cfg.metrics,
                        std::string(to_string(arm.variant)), arm.seed);
    rep.settings = cfg.metrics;
    rep.train_size = train.size();
    rep.test_size = test.size();
    rep.label_source = std::string(to_string(tc.label_source));
    log("[" + rep.row.variant + " seed=" + std::to_string(arm.seed) + "] f1 " + format_percent(rep.row.f1));
    results[i] = std::move(rep);
  };

  const std::size_t workers = std::clamp<std::size_t>(cfg.threads, 1, arms.size());
  if (workers == 1) {
    for (std::size_t i = 0; i < arms.size(); ++i) run_arm(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < arms.size(); i = next++) {
          try {
            run_arm(i);
          } catch (...) {
            std::lock_guard<std::mutex> lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  AblationResult out;
  for (auto& r : results) out.reports.push_back(std::move(*r));
  out.summary = summarize(out.reports);
  return out;
}

}  // namespace agentps

// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "agentps/errors.hpp"

namespace agentps {

struct ScoredPrediction {
  std::string id;
  double score = 0.0;  // P(class 1) from the final head
  int label = 0;
};

struct OperatingPoint {
  double threshold = 0.0;
  std::optional<double> precision;  // undefined when nothing is predicted positive
  double recall = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
};

/// Operating points in increasing threshold order: 0, every distinct score,
/// and 1 + eps. A sample is predicted positive iff score >= threshold, so tied
/// scores always flip together.
struct PRCurve {
  std::vector<OperatingPoint> points;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

inline constexpr double kTopThreshold = 1.0 + 1e-9;

inline PRCurve pr_curve(const std::vector<ScoredPrediction>& preds) {
  PRCurve curve;
  for (const auto& p : preds) {
    if (!std::isfinite(p.score) || p.score < 0.0 || p.score > 1.0) {
      throw ContractError("score of " + p.id + " outside [0, 1]");
    }
    (p.label == 1 ? curve.positives : curve.negatives)++;
  }
  if (curve.positives == 0 || curve.negatives == 0) {
    throw DegenerateInputError("PR curve needs at least one positive and one negative example");
  }
  std::vector<std::pair<double, int>> sorted;
  sorted.reserve(preds.size());
  for (const auto& p : preds) sorted.emplace_back(p.score, p.label);
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });

  auto make = [&](double thr, std::size_t tp, std::size_t fp) {
    OperatingPoint op;
    op.threshold = thr;
    op.tp = tp;
    op.fp = fp;
    op.fn = curve.positives - tp;
    op.recall = static_cast<double>(tp) / static_cast<double>(curve.positives);
    if (tp + fp > 0) op.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    return op;
  };

  // Sweep from the highest threshold down, then reverse.
  std::vector<OperatingPoint> desc;
  desc.push_back(make(kTopThreshold, 0, 0));
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < sorted.size()) {
    const double s = sorted[i].first;
    while (i < sorted.size() && sorted[i].first == s) {
      (sorted[i].second == 1 ? tp : fp)++;
      ++i;
    }
    desc.push_back(make(s, tp, fp));
  }
  if (desc.back().threshold != 0.0) desc.push_back(make(0.0, tp, fp));
  curve.points.assign(desc.rbegin(), desc.rend());
  return curve;
}

/// Largest recall among points with precision >= p_min; 0 if none.
inline double recall_at_precision(const PRCurve& curve, double p_min) {
  if (!(p_min > 0.0 && p_min <= 1.0)) {
    throw ConfigError("precision floor must lie in (0, 1], got " + std::to_string(p_min));
  }
  double best = 0.0;
  for (const auto& op : curve.points) {
    if (op.precision && *op.precision >= p_min) best = std::max(best, op.recall);
  }
  return best;
}

/// Largest precision among points with recall >= r_min; 0 if none.
inline double precision_at_recall(const PRCurve& curve, double r_min) {
  if (!(r_min >= 0.0 && r_min <= 1.0)) {
    throw ConfigError("recall floor must lie in [0, 1], got " + std::to_string(r_min));
  }
  double best = 0.0;
  for (const auto& op : curve.points) {
    if (op.precision && op.recall >= r_min) best = std::max(best, *op.precision);
  }
  return best;
}

inline double f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  const double denom = 2.0 * static_cast<double>(tp) + static_cast<double>(fp + fn);
  return denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
}

/// F1 with "positive iff score >= threshold"; 0 when precision + recall = 0.
inline double f1_score(const std::vector<ScoredPrediction>& preds, double threshold) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& p : preds) {
    const bool pos = p.score >= threshold;
    if (pos && p.label == 1) ++tp;
    else if (pos) ++fp;
    else if (p.label == 1) ++fn;
  }
  return f1_from_counts(tp, fp, fn);
}

struct BestF1 {
  double f1 = 0.0;
  double threshold = 0.5;
};

/// Highest F1 over all operating points of the curve.
inline BestF1 best_f1(const PRCurve& curve) {
  BestF1 best;
  bool first = true;
  for (const auto& op : curve.points) {
    const double f = f1_from_counts(op.tp, op.fp, op.fn);
    if (first || f > best.f1) {
      best = {f, op.threshold};
      first = false;
    }
  }
  return best;
}

}  // namespace agentps

// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "agentps/data.hpp"
#include "agentps/errors.hpp"
#include "agentps/rng.hpp"
#include "agentps/training.hpp"

namespace agentps {

/// Annotator quality per question. Defaults are measured per-question
/// accuracies of an off-the-shelf annotator, including how often it gave no
/// final answer at all.
///
/// `final_accuracy` is the marginal accuracy over all samples, counting a
/// missing answer as wrong. A non-missing final answer is therefore correct
/// with probability final_accuracy / (1 - missing_rate_final)
/// (0.5760 / 0.8777 = 0.6563 for the defaults).
struct NoiseProfile {
  std::vector<double> accuracy{0.7910, 0.6695, 0.7429, 0.7768};
  double final_accuracy = 0.5760;
  double missing_rate_final = 0.1223;
  std::uint64_t seed = 7;

  double final_conditional_accuracy() const {
    return final_accuracy / (1.0 - missing_rate_final);
  }

  void validate() const {
    for (std::size_t i = 0; i < accuracy.size(); ++i) {
      if (!(accuracy[i] > 0.0 && accuracy[i] <= 1.0)) {
        throw ConfigError("annotator accuracy for question " + std::to_string(i + 1) +
                          " must lie in (0, 1], got " + std::to_string(accuracy[i]));
      }
    }
    if (!(final_accuracy > 0.0 && final_accuracy <= 1.0)) {
      throw ConfigError("final-question accuracy must lie in (0, 1]");
    }
    if (!(missing_rate_final >= 0.0 && missing_rate_final < 1.0)) {
      throw ConfigError("missing_rate_final must lie in [0, 1)");
    }
    if (final_accuracy > 1.0 - missing_rate_final + 1e-12) {
      throw ConfigError("final accuracy cannot exceed the non-missing fraction");
    }
  }
};

enum class AnnotationSource { kSimulated, kRemote };

inline std::string_view to_string(AnnotationSource s) {
  return s == AnnotationSource::kSimulated ? "simulated" : "remote";
}

struct AnnotationResult {
  std::string id;
  std::vector<Label> process;  // N entries, nullopt = MISSING
  Label final;
  AnnotationSource source = AnnotationSource::kSimulated;
  std::string raw_response;  // remote only
  std::string error;         // remote failures
  std::size_t retries = 0;

  friend bool operator==(const AnnotationResult&, const AnnotationResult&) = default;
};

namespace detail {

inline int flip_binary(int label) { return label == 0 ? 1 : 0; }

}  // namespace detail

/// Symmetric flip noise on each process question; the final answer is MISSING
/// with probability missing_rate_final and otherwise correct with the
/// renormalized conditional accuracy. Each sample uses its own stream keyed by
/// its id, so results do not depend on sample order.
inline std::vector<AnnotationResult> simulate_annotations(const std::vector<Sample>& samples,
                                                          const NoiseProfile& profile) {
  profile.validate();
  const double final_acc = profile.final_conditional_accuracy();
  const Rng base = Rng(profile.seed).split("annotator");
  std::vector<AnnotationResult> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.process_labels.size() != profile.accuracy.size()) {
      throw ConfigError("noise profile covers " + std::to_string(profile.accuracy.size()) +
                        " questions but sample " + s.id + " has " +
                        std::to_string(s.process_labels.size()));
    }
    Rng rng = base.split(s.id);
    AnnotationResult r;
    r.id = s.id;
    r.source = AnnotationSource::kSimulated;
    for (std::size_t q = 0; q < s.process_labels.size(); ++q) {
      const int truth = s.process_labels[q];
      r.process.emplace_back(rng.bernoulli(profile.accuracy[q]) ? truth : detail::flip_binary(truth));
    }
    const bool missing = rng.bernoulli(profile.missing_rate_final);
    const bool correct = rng.bernoulli(final_acc);
    if (!missing) r.final = correct ? s.final_label : detail::flip_binary(s.final_label);
    out.push_back(std::move(r));
  }
  return out;
}

enum class QuestionKind { kBinary, kCount };

inline QuestionKind parse_question_kind(std::string_view s) {
  if (s == "binary") return QuestionKind::kBinary;
  if (s == "count") return QuestionKind::kCount;
  throw ConfigError("unknown question kind '" + std::string(s) + "' (binary|count)");
}

namespace detail {

inline std::vector<std::string> lower_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '\'') {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace detail

/// Binary: first affirmative/negative verdict word. Count: first integer
/// (digits or a small number word), 1 iff >= count_threshold. MISSING when no
/// verdict is found.
inline Label parse_response(std::string_view text, QuestionKind kind, int count_threshold = 1) {
  static const std::unordered_map<std::string, int> verdicts{
      {"yes", 1}, {"true", 1}, {"affirmative", 1}, {"yeah", 1},
      {"no", 0},  {"false", 0}, {"negative", 0},   {"none", 0}};
  static const std::unordered_map<std::string, int> numbers{
      {"zero", 0}, {"none", 0}, {"no", 0},   {"one", 1},   {"two", 2},  {"three", 3},
      {"four", 4}, {"five", 5}, {"six", 6},  {"seven", 7}, {"eight", 8}, {"nine", 9},
      {"ten", 10}};
  for (const auto& w : detail::lower_words(text)) {
    if (kind == QuestionKind::kBinary) {
      if (auto it = verdicts.find(w); it != verdicts.end()) return it->second;
      continue;
    }
    if (!w.empty() && std::isdigit(static_cast<unsigned char>(w[0]))) {
      std::size_t i = 0;
      long long v = 0;
      while (i < w.size() && std::isdigit(static_cast<unsigned char>(w[i])) && v < 1'000'000) {
        v = v * 10 + (w[i] - '0');
        ++i;
      }
      return v >= count_threshold ? 1 : 0;
    }
    if (auto it = numbers.find(w); it != numbers.end()) return it->second >= count_threshold ? 1 : 0;
  }
  return std::nullopt;
}

/// Training labels from an annotation: process answers from the annotator,
/// final label from the sample's ground truth unless `final_from_annotation`.
inline std::vector<Label> labels_from_annotation(const Sample& s, const AnnotationResult& a,
                                                 bool final_from_annotation = false) {
  std::vector<Label> out(a.process.begin(), a.process.end());
  out.push_back(final_from_annotation ? a.final : Label(s.final_label));
  return out;
}

// ---------------------------------------------------------------------------
// Annotation JSONL: one object per sample, keyed by id.

inline nlohmann::ordered_json annotation_to_json(const AnnotationResult& a) {
  nlohmann::ordered_json j;
  j["id"] = a.id;
  j["source"] = std::string(to_string(a.source));
  auto labels = nlohmann::ordered_json::array();
  for (const auto& l : a.process) labels.push_back(l ? nlohmann::ordered_json(*l) : nlohmann::ordered_json(nullptr));
  j["process_labels"] = std::move(labels);
  j["final_label"] = a.final ? nlohmann::ordered_json(*a.final) : nlohmann::ordered_json(nullptr);
  if (a.source == AnnotationSource::kRemote) {
    j["raw_response"] = a.raw_response;
    j["retries"] = a.retries;
    if (!a.error.empty()) j["error"] = a.error;
  }
  return j;
}

inline void write_annotations(const std::vector<AnnotationResult>& results,
                              const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot open '" + path.string() + "' for writing");
  for (const auto& r : results) out << annotation_to_json(r).dump() << '\n';
  if (!out) throw FileError("write failed for '" + path.string() + "'");
}

inline std::vector<AnnotationResult> read_annotations(const std::filesystem::path& path) {
  std::vector<AnnotationResult> out;
  for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t line) {
    auto field = [&](const char* name) -> const nlohmann::json& {
      return detail::require_field(j, name, line);
    };
    AnnotationResult a;
    try {
      a.id = field("id").get<std::string>();
      const auto src = field("source").get<std::string>();
      if (src == "simulated") a.source = AnnotationSource::kSimulated;
      else if (src == "remote") a.source = AnnotationSource::kRemote;
      else throw SchemaError("line " + std::to_string(line) + ": unknown source '" + src + "'");
      for (const auto& l : field("process_labels")) {
        a.process.push_back(l.is_null() ? Label{} : Label(l.get<int>()));
      }
      const auto& f = field("final_label");
      if (!f.is_null()) a.final = f.get<int>();
      if (j.contains("raw_response")) a.raw_response = j["raw_response"].get<std::string>();
      if (j.contains("retries")) a.retries = j["retries"].get<std::size_t>();
      if (j.contains("error")) a.error = j["error"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("line " + std::to_string(line) + ": wrong field type: " + e.what());
    }
    out.push_back(std::move(a));
  });
  return out;
}

}  // namespace agentps

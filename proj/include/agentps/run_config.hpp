// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "agentps/annotator.hpp"
#include "agentps/assembly.hpp"
#include "agentps/config.hpp"
#include "agentps/config_io.hpp"
#include "agentps/data.hpp"
#include "agentps/errors.hpp"
#include "agentps/eval.hpp"
#include "agentps/remote_annotator.hpp"
#include "agentps/rng.hpp"
#include "agentps/training.hpp"

namespace agentps {

/// Prompt wording placed in the token sequence (not the annotator battery).
struct QuestionPrompts {
  std::vector<std::string> ancillary{"watermark present", "blob present", "text original",
                                     "frames coherent"};
  std::string final = "unoriginal content";
};

struct AblationSettings {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t threads = 1;
};

/// Everything a run needs. Every field has a default; `defaults()` is the
/// small configuration used by the acceptance suite.
struct RunConfig {
  std::string output_dir = "runs/default";
  DatasetSpec dataset;
  std::size_t test_samples = 1000;
  ModelConfig model;  // vocab_size 0 = size of the built vocabulary
  TrainConfig train;
  NoiseProfile noise;
  QuestionPrompts questions;
  std::string templates_file;  // annotator battery; built-in templates when empty
  RemoteConfig remote;
  MetricSettings metrics;
  AblationSettings ablation;

  static RunConfig defaults() {
    RunConfig c;
    c.dataset.n_samples = 5000;
    c.dataset.image_size = 12;
    c.dataset.blob_radius = 2.0;
    c.dataset.stripe_intensity = 0.15;
    c.dataset.blob_intensity = 0.25;
    c.dataset.incoherent_gap = 0.0;
    c.dataset.texture_amplitude = 0.15;
    c.dataset.id_prefix = "train";
    c.model.image_size = 12;
    c.model.patch_size = 4;
    c.model.d_enc = 32;
    c.model.d_model = 32;
    c.model.n_layers = 2;
    c.model.n_heads = 2;
    c.model.mlp_ratio = 2;
    c.model.vocab_size = 0;
    c.model.max_seq_len = 82;
    c.train.learning_rate = 1e-3;
    c.train.epochs = 8;
    c.train.batch_size = 16;
    c.train.lr_schedule = "cosine";
    return c;
  }

  DatasetSpec train_spec() const {
    DatasetSpec s = dataset;
    return s;
  }

  /// Test split: same generator settings, its own id prefix and a seed
  /// derived from the training seed.
  DatasetSpec test_spec() const {
    DatasetSpec s = dataset;
    s.n_samples = test_samples;
    s.id_prefix = dataset.id_prefix + "-test";
    s.seed = splitmix64(dataset.seed ^ fnv1a("test"));
    return s;
  }

  SpecialVocab vocabulary() const {
    return SpecialVocab::build(TextPools::all(), questions.ancillary, questions.final);
  }

  ModelConfig resolved_model(Variant v) const {
    ModelConfig m = model;
    m.variant = v;
    if (m.vocab_size == 0) m.vocab_size = vocabulary().words.size();
    m.validate();
    return m;
  }

  TemplateSet templates() const {
    return templates_file.empty() ? TemplateSet::defaults() : TemplateSet::load(templates_file);
  }

  void validate() const {
    dataset.validate();
    if (test_samples == 0) throw ConfigError("dataset.test_samples must be >= 1");
    if (model.image_size != dataset.image_size || model.frames != dataset.frames) {
      throw ConfigError("model image geometry (" + std::to_string(model.frames) + "x" +
                        std::to_string(model.image_size) + ") does not match the dataset (" +
                        std::to_string(dataset.frames) + "x" + std::to_string(dataset.image_size) + ")");
    }
    if (model.n_questions != dataset.n_questions || questions.ancillary.size() != model.n_questions) {
      throw ConfigError("model.n_questions, dataset.n_questions and questions.ancillary must agree");
    }
    const auto vocab = vocabulary();
    if (model.vocab_size != 0) vocab.validate(model.vocab_size);
    resolved_model(model.variant);
    train.validate(model.n_questions);
    noise.validate();
    if (noise.accuracy.size() != model.n_questions) {
      throw ConfigError("noise.accuracy needs one entry per ancillary question");
    }
    remote.validate();
    metrics.validate();
    if (ablation.seeds.empty()) throw ConfigError("ablation.seeds must not be empty");
  }
};

inline Json to_json(const RunConfig& c) {
  Json j;
  j["output_dir"] = c.output_dir;
  Json ds = to_json(c.dataset);
  ds["test_samples"] = c.test_samples;
  j["dataset"] = std::move(ds);
  j["model"] = to_json(c.model);
  j["train"] = to_json(c.train);
  j["noise"] = to_json(c.noise);
  j["questions"] = {{"ancillary", c.questions.ancillary}, {"final", c.questions.final}};
  j["annotator"] = {{"templates_file", c.templates_file},
                    {"provider", c.remote.provider},
                    {"model", c.remote.model},
                    {"url_env", c.remote.url_env},
                    {"key_env", c.remote.key_env},
                    {"max_in_flight", c.remote.max_in_flight},
                    {"max_retries", c.remote.max_retries},
                    {"timeout_ms", c.remote.timeout_ms},
                    {"backoff_ms", c.remote.backoff_ms}};
  j["metrics"] = {{"f1_threshold", c.metrics.f1_threshold},
                  {"precision_floors", c.metrics.precision_floors},
                  {"recall_floors", c.metrics.recall_floors}};
  j["ablation"] = {{"seeds", c.ablation.seeds}, {"threads", c.ablation.threads}};
  return j;
}

/// Strict reader: missing keys keep their defaults, unknown keys are errors.
inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c = RunConfig::defaults();
  StrictObject o(j, "");
  o.get("output_dir", c.output_dir)
      .object("dataset",
              [&](StrictObject& d) {
                read_into(d, c.dataset);
                d.get("test_samples", c.test_samples);
              })
      .object("model", [&](StrictObject& m) { read_into(m, c.model); })
      .object("train", [&](StrictObject& t) { read_into(t, c.train); })
      .object("noise", [&](StrictObject& n) { read_into(n, c.noise); })
      .object("questions",
              [&](StrictObject& q) { q.get("ancillary", c.questions.ancillary).get("final", c.questions.final); })
      .object("annotator",
              [&](StrictObject& a) {
                a.get("templates_file", c.templates_file)
                    .get("provider", c.remote.provider)
                    .get("model", c.remote.model)
                    .get("url_env", c.remote.url_env)
                    .get("key_env", c.remote.key_env)
                    .get("max_in_flight", c.remote.max_in_flight)
                    .get("max_retries", c.remote.max_retries)
                    .get("timeout_ms", c.remote.timeout_ms)
                    .get("backoff_ms", c.remote.backoff_ms);
              })
      .object("metrics",
              [&](StrictObject& m) {
                m.get("f1_threshold", c.metrics.f1_threshold)
                    .get("precision_floors", c.metrics.precision_floors)
                    .get("recall_floors", c.metrics.recall_floors);
              })
      .object("ablation",
              [&](StrictObject& a) { a.get("seeds", c.ablation.seeds).get("threads", c.ablation.threads); });
  o.finish();
  c.train.variant = c.model.variant;
  c.validate();
  return c;
}

inline Json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(origin + " is not valid JSON: " + e.what());
  }
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON and
/// taken as a plain string if that fails, so `train.lr_schedule=cosine` works.
inline void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' must look like key.path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override path '" + path + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override path '" + path + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

/// Loads a config file (or the defaults when `path` is empty) and applies
/// overrides. Returns the config and the source text for archiving.
inline std::pair<RunConfig, std::string> load_run_config(const std::string& path,
                                                         const std::vector<std::string>& overrides = {}) {
  std::string text = path.empty() ? std::string("{}") : read_text_file(path);
  Json doc = parse_json_text(text, path.empty() ? "default config" : "'" + path + "'");
  for (const auto& o : overrides) apply_override(doc, o);
  return {run_config_from_json(doc), text};
}

// ---------------------------------------------------------------------------
// Run directory layout

struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path config_copy() const { return root / "config.json"; }
  std::filesystem::path resolved_config() const { return root / "config.resolved.json"; }
  std::filesystem::path data_dir() const { return root / "data"; }
  std::filesystem::path train_data() const { return data_dir() / "train.jsonl"; }
  std::filesystem::path test_data() const { return data_dir() / "test.jsonl"; }
  std::filesystem::path annotations(std::string_view mode) const {
    return root / "annotations" / (std::string(mode) + ".jsonl");
  }
  std::filesystem::path checkpoints_dir() const { return root / "checkpoints"; }
  std::filesystem::path logs_dir() const { return root / "logs"; }
  std::filesystem::path reports_dir() const { return root / "reports"; }

  static std::string arm_name(Variant v, std::uint64_t seed, std::string_view labels = "ground_truth") {
    std::string name = std::string(to_string(v)) + "_seed" + std::to_string(seed);
    if (labels != "ground_truth") name += "_" + std::string(labels);
    return name;
  }
  std::filesystem::path checkpoint(const std::string& arm) const { return checkpoints_dir() / (arm + ".ckpt"); }
  std::filesystem::path epoch_log(const std::string& arm) const { return logs_dir() / (arm + ".csv"); }
  std::filesystem::path report(const std::string& arm, std::string_view ext) const {
    return reports_dir() / (arm + "." + std::string(ext));
  }

  void create() const {
    for (const auto& d : {root, data_dir(), root / "annotations", checkpoints_dir(), logs_dir(), reports_dir()}) {
      std::error_code ec;
      std::filesystem::create_directories(d, ec);
      if (ec) throw FileError("cannot create '" + d.string() + "': " + ec.message());
    }
  }
};

inline std::string hex_digest(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = digits[h & 0xF];
  return s;
}

/// Manifest content: generator settings per split plus content hashes. It
/// holds no timestamps, so equal configs give byte-identical manifests.
inline Json make_manifest(const DatasetSpec& train, const DatasetSpec& test,
                          std::uint64_t train_hash, std::uint64_t test_hash) {
  Json m;
  m["format_version"] = 1;
  m["seed"] = train.seed;
  auto split = [](const DatasetSpec& s, std::uint64_t h, const char* file) {
    Json j;
    j["file"] = file;
    j["spec"] = to_json(s);
    j["spec_hash"] = hex_digest(fnv1a(to_json(s).dump()));
    j["n_samples"] = s.n_samples;
    j["content_hash"] = hex_digest(h);
    return j;
  };
  m["train"] = split(train, train_hash, "data/train.jsonl");
  m["test"] = split(test, test_hash, "data/test.jsonl");
  return m;
}

}  // namespace agentps

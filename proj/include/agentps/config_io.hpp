// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "agentps/annotator.hpp"
#include "agentps/config.hpp"
#include "agentps/data.hpp"
#include "agentps/errors.hpp"
#include "agentps/training.hpp"

namespace agentps {

using Json = nlohmann::ordered_json;

/// Reads known keys of a JSON object and rejects everything else.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("'" + path_ + "' must be an object");
  }

  template <class V>
  StrictObject& get(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return *this;
    try {
      out = it->template get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("'" + qualified(key) + "' has the wrong type: " + it->dump());
    }
    return *this;
  }

  /// Nested object handled by `fn(StrictObject&)` when present.
  template <class Fn>
  StrictObject& object(const char* key, Fn&& fn) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return *this;
    StrictObject sub(*it, qualified(key));
    fn(sub);
    sub.finish();
    return *this;
  }

  bool has(const char* key) const { return j_.contains(key); }
  const Json& raw(const char* key) const { return j_.at(key); }
  void mark(const char* key) { seen_.insert(key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + qualified(it.key()) + "'");
    }
  }

  std::string qualified(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------
// ModelConfig

inline Json to_json(const ModelConfig& c) {
  Json j;
  j["image_size"] = c.image_size;
  j["patch_size"] = c.patch_size;
  j["frames"] = c.frames;
  j["d_enc"] = c.d_enc;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["mlp_ratio"] = c.mlp_ratio;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["n_questions"] = c.n_questions;
  j["classes_per_question"] = c.classes_per_question;
  j["variant"] = std::string(to_string(c.variant));
  return j;
}

inline void read_into(StrictObject& o, ModelConfig& c) {
  std::string variant(to_string(c.variant));
  o.get("image_size", c.image_size)
      .get("patch_size", c.patch_size)
      .get("frames", c.frames)
      .get("d_enc", c.d_enc)
      .get("d_model", c.d_model)
      .get("n_layers", c.n_layers)
      .get("n_heads", c.n_heads)
      .get("mlp_ratio", c.mlp_ratio)
      .get("vocab_size", c.vocab_size)
      .get("max_seq_len", c.max_seq_len)
      .get("n_questions", c.n_questions)
      .get("classes_per_question", c.classes_per_question)
      .get("variant", variant);
  c.variant = parse_variant(variant);
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  StrictObject o(j, "model");
  read_into(o, c);
  o.finish();
  return c;
}

// ---------------------------------------------------------------------------
// DatasetSpec

inline Json to_json(const DatasetSpec& s) {
  Json j;
  j["n_samples"] = s.n_samples;
  j["n_questions"] = s.n_questions;
  j["image_size"] = s.image_size;
  j["frames"] = s.frames;
  j["stripe_intensity"] = s.stripe_intensity;
  j["blob_radius"] = s.blob_radius;
  j["blob_intensity"] = s.blob_intensity;
  j["background_min"] = s.background_min;
  j["background_max"] = s.background_max;
  j["incoherent_gap"] = s.incoherent_gap;
  j["texture_amplitude"] = s.texture_amplitude;
  j["noise_sigma"] = s.noise_sigma;
  j["label_rule"] = s.label_rule;
  j["class_balance"] = s.class_balance;
  j["text_words"] = s.text_words;
  j["id_prefix"] = s.id_prefix;
  j["seed"] = s.seed;
  return j;
}

inline void read_into(StrictObject& o, DatasetSpec& s) {
  o.get("n_samples", s.n_samples)
      .get("n_questions", s.n_questions)
      .get("image_size", s.image_size)
      .get("frames", s.frames)
      .get("stripe_intensity", s.stripe_intensity)
      .get("blob_radius", s.blob_radius)
      .get("blob_intensity", s.blob_intensity)
      .get("background_min", s.background_min)
      .get("background_max", s.background_max)
      .get("incoherent_gap", s.incoherent_gap)
      .get("texture_amplitude", s.texture_amplitude)
      .get("noise_sigma", s.noise_sigma)
      .get("label_rule", s.label_rule)
      .get("class_balance", s.class_balance)
      .get("text_words", s.text_words)
      .get("id_prefix", s.id_prefix)
      .get("seed", s.seed);
}

inline DatasetSpec dataset_spec_from_json(const Json& j) {
  DatasetSpec s;
  StrictObject o(j, "dataset");
  read_into(o, s);
  o.finish();
  return s;
}

// ---------------------------------------------------------------------------
// TrainConfig

inline Json to_json(const TrainConfig& c) {
  Json j;
  j["weights"] = c.weights;
  j["learning_rate"] = c.learning_rate;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["epsilon"] = c.epsilon;
  j["weight_decay"] = c.weight_decay;
  j["lr_schedule"] = c.lr_schedule;
  j["seed"] = c.seed;
  j["variant"] = std::string(to_string(c.variant));
  j["label_source"] = std::string(to_string(c.label_source));
  return j;
}

inline void read_into(StrictObject& o, TrainConfig& c) {
  std::string variant(to_string(c.variant));
  std::string labels(to_string(c.label_source));
  o.get("weights", c.weights)
      .get("learning_rate", c.learning_rate)
      .get("epochs", c.epochs)
      .get("batch_size", c.batch_size)
      .get("beta1", c.beta1)
      .get("beta2", c.beta2)
      .get("epsilon", c.epsilon)
      .get("weight_decay", c.weight_decay)
      .get("lr_schedule", c.lr_schedule)
      .get("seed", c.seed)
      .get("variant", variant)
      .get("label_source", labels);
  c.variant = parse_variant(variant);
  c.label_source = parse_label_source(labels);
}

// ---------------------------------------------------------------------------
// NoiseProfile

inline Json to_json(const NoiseProfile& p) {
  Json j;
  j["accuracy"] = p.accuracy;
  j["final_accuracy"] = p.final_accuracy;
  j["missing_rate_final"] = p.missing_rate_final;
  j["seed"] = p.seed;
  return j;
}

inline void read_into(StrictObject& o, NoiseProfile& p) {
  o.get("accuracy", p.accuracy)
      .get("final_accuracy", p.final_accuracy)
      .get("missing_rate_final", p.missing_rate_final)
      .get("seed", p.seed);
}

}  // namespace agentps

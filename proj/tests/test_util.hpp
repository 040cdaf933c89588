// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "agentps/assembly.hpp"
#include "agentps/config.hpp"
#include "agentps/data.hpp"
#include "agentps/rng.hpp"
#include "agentps/tensor.hpp"

namespace agentps::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("agentps-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<T>::uniform(std::move(shape), lo, hi, rng);
}

/// Small model over small images for fast tests.
inline ModelConfig tiny_model(Variant v, std::size_t n_questions = 4, std::size_t vocab = 80) {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.frames = 2;
  c.d_enc = 8;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.mlp_ratio = 2;
  c.vocab_size = vocab;
  c.max_seq_len = 64;
  c.n_questions = n_questions;
  c.classes_per_question.assign(n_questions + 1, 2);
  c.variant = v;
  return c;
}

inline DatasetSpec tiny_dataset(std::size_t n, std::uint64_t seed = 3) {
  DatasetSpec s;
  s.n_samples = n;
  s.image_size = 8;
  s.blob_radius = 1.5;
  s.seed = seed;
  return s;
}

inline std::vector<std::string> default_questions() {
  return {"watermark present", "blob present", "text original", "frames coherent"};
}

inline SpecialVocab default_vocab(std::size_t n_questions = 4) {
  std::vector<std::string> qs;
  for (std::size_t i = 0; i < n_questions; ++i) qs.push_back("question " + std::to_string(i + 1) + " asked");
  if (n_questions == 4) qs = default_questions();
  return SpecialVocab::build(TextPools::all(), qs, "unoriginal content");
}

}  // namespace agentps::testing

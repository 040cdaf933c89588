// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "agentps/errors.hpp"

namespace agentps {

/// Where classification heads read the hidden states.
///   vanilla   - one head on the last token, no ancillary questions in the prompt
///   multitask - N+1 heads, all on the last token
///   agentps   - head i on the i-th <ans> token, final head on the last token
enum class Variant { kVanilla, kMultitask, kAgentPS };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kVanilla: return "vanilla";
    case Variant::kMultitask: return "multitask";
    case Variant::kAgentPS: return "agentps";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "vanilla") return Variant::kVanilla;
  if (s == "multitask") return Variant::kMultitask;
  if (s == "agentps") return Variant::kAgentPS;
  throw ConfigError("unknown variant '" + std::string(s) + "' (vanilla|multitask|agentps)");
}

inline constexpr Variant kAllVariants[] = {Variant::kVanilla, Variant::kMultitask,
                                           Variant::kAgentPS};

struct ModelConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t frames = 2;
  std::size_t d_enc = 32;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t mlp_ratio = 4;
  std::size_t vocab_size = 64;
  // Full multimodal length L: visual tokens + text-side tokens. The default
  // leaves 256 text-side positions after the 32 visual tokens.
  std::size_t max_seq_len = 288;
  std::size_t n_questions = 4;
  // |Y^i| for i = 1..N+1; the last entry is the final question.
  std::vector<std::size_t> classes_per_question{2, 2, 2, 2, 2};
  Variant variant = Variant::kAgentPS;

  std::size_t patches_per_frame() const {
    const std::size_t side = image_size / patch_size;
    return side * side;
  }
  std::size_t visual_tokens() const { return frames * patches_per_frame(); }
  std::size_t patch_dim() const { return patch_size * patch_size; }
  std::size_t head_count() const {
    return variant == Variant::kVanilla ? 1 : n_questions + 1;
  }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
      throw ConfigError("patch_size " + std::to_string(patch_size) + " must divide image_size " +
                        std::to_string(image_size));
    }
    if (frames == 0) throw ConfigError("frames must be >= 1");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " must be divisible by n_heads " +
                        std::to_string(n_heads));
    }
    if (d_enc == 0 || mlp_ratio == 0) throw ConfigError("d_enc and mlp_ratio must be positive");
    if (classes_per_question.size() != n_questions + 1) {
      throw ConfigError("classes_per_question needs N+1 = " + std::to_string(n_questions + 1) +
                        " entries, got " + std::to_string(classes_per_question.size()));
    }
    for (auto c : classes_per_question) {
      if (c < 2) throw ConfigError("every question needs at least 2 classes");
    }
    if (max_seq_len <= visual_tokens()) {
      throw ConfigError("max_seq_len " + std::to_string(max_seq_len) +
                        " leaves no room after " + std::to_string(visual_tokens()) +
                        " visual tokens");
    }
    if (vocab_size < 6) throw ConfigError("vocab_size too small for the reserved tokens");
  }
};

}  // namespace agentps

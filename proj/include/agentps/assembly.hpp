// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "agentps/config.hpp"
#include "agentps/data.hpp"
#include "agentps/errors.hpp"

namespace agentps {

using TokenId = std::size_t;

/// Fixed word-level vocabulary. Ids 0..4 are reserved special tokens.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kSep = 2;
  static constexpr TokenId kAns = 3;
  static constexpr TokenId kImg = 4;
  static constexpr std::size_t kReserved = 5;

  Vocabulary() {
    for (const char* s : {"<pad>", "<unk>", "<sep>", "<ans>", "<img>"}) insert(s);
  }

  /// Lower-cased words are added once each; duplicates are ignored.
  explicit Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
    for (const auto& w : words) add(w);
  }

  TokenId add(std::string_view word) {
    const std::string key = lower(word);
    if (auto it = ids_.find(key); it != ids_.end()) return it->second;
    return insert(key);
  }

  TokenId id(std::string_view word) const {
    auto it = ids_.find(lower(word));
    return it == ids_.end() ? kUnk : it->second;
  }
  const std::string& word(TokenId id) const { return words_.at(id); }
  std::size_t size() const noexcept { return words_.size(); }
  const std::vector<std::string>& words() const noexcept { return words_; }

  static std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  }

 private:
  TokenId insert(std::string word) {
    const TokenId id = words_.size();
    ids_.emplace(word, id);
    words_.push_back(std::move(word));
    return id;
  }

  std::unordered_map<std::string, TokenId> ids_;
  std::vector<std::string> words_;
};

/// Whitespace split, case folding, unknown words -> <unk>.
inline std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(vocab.id(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

inline std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.word(ids[i]);
  }
  return out;
}

/// The first `budget` tokens; shorter inputs come back unchanged.
inline std::vector<TokenId> clip_text(std::span<const TokenId> tokens, std::size_t budget) {
  const std::size_t n = std::min(tokens.size(), budget);
  return {tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n)};
}

/// Reserved ids plus the tokenized question battery.
struct SpecialVocab {
  Vocabulary words;
  TokenId pad = Vocabulary::kPad;
  TokenId unk = Vocabulary::kUnk;
  TokenId sep = Vocabulary::kSep;
  TokenId ans = Vocabulary::kAns;
  TokenId img = Vocabulary::kImg;
  // Each ancillary template ends with exactly one <ans>.
  std::vector<std::vector<TokenId>> ancillary;
  std::vector<TokenId> final_question;

  /// Builds the vocabulary from `corpus_words` plus every word of the
  /// templates, then tokenizes the templates.
  static SpecialVocab build(const std::vector<std::string>& corpus_words,
                            const std::vector<std::string>& ancillary_questions,
                            const std::string& final_question) {
    SpecialVocab sv;
    sv.words = Vocabulary(corpus_words);
    for (const auto& q : ancillary_questions) {
      for (const auto& w : split_words(q)) sv.words.add(w);
    }
    for (const auto& w : split_words(final_question)) sv.words.add(w);
    for (const auto& q : ancillary_questions) {
      auto ids = tokenize(q, sv.words);
      ids.push_back(sv.ans);
      sv.ancillary.push_back(std::move(ids));
    }
    sv.final_question = tokenize(final_question, sv.words);
    sv.validate(sv.words.size());
    return sv;
  }

  void validate(std::size_t vocab_size) const {
    const std::set<TokenId> reserved{pad, unk, sep, ans, img};
    if (reserved.size() != 5) throw ConfigError("reserved token ids must be distinct");
    if (*reserved.rbegin() >= vocab_size) throw ConfigError("reserved token id >= vocab_size");
    for (std::size_t i = 0; i < ancillary.size(); ++i) {
      const auto& t = ancillary[i];
      const auto n_ans = std::count(t.begin(), t.end(), ans);
      if (t.size() < 2 || t.back() != ans || n_ans != 1) {
        throw ConfigError("ancillary question " + std::to_string(i + 1) +
                          " must be non-empty and end with exactly one <ans>");
      }
    }
    if (final_question.empty()) throw ConfigError("final question template is empty");
    if (std::find(final_question.begin(), final_question.end(), ans) != final_question.end()) {
      throw ConfigError("final question template must not contain <ans>");
    }
    for (const auto& t : ancillary) {
      for (auto id : t) {
        if (id >= vocab_size) throw ConfigError("template token id >= vocab_size");
      }
    }
    for (auto id : final_question) {
      if (id >= vocab_size) throw ConfigError("template token id >= vocab_size");
    }
  }

  static std::vector<std::string> split_words(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
      while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
      std::size_t j = i;
      while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
      if (j > i) out.emplace_back(s.substr(i, j - i));
      i = j;
    }
    return out;
  }
};

struct PromptLayout {
  std::vector<TokenId> token_ids;  // text side only
  std::vector<std::size_t> ans_positions;  // absolute, offset by visual_tokens
  std::size_t final_position = 0;          // absolute
  std::size_t visual_tokens = 0;
  std::size_t m = 0;            // tokens taken by the question blocks
  std::size_t text_budget = 0;  // sample-text tokens allowed
  std::size_t text_tokens = 0;  // sample-text tokens kept
  std::size_t n_questions = 0;
  Variant variant = Variant::kAgentPS;

  std::size_t length() const noexcept { return visual_tokens + token_ids.size(); }

  friend bool operator==(const PromptLayout&, const PromptLayout&) = default;
};

/// Lays out [clipped text] (<sep> q_i ... <ans>)_{i=1..N} <sep> final-question.
/// Vanilla layouts drop the ancillary blocks. Positions count the visual
/// tokens, which occupy 0..V-1.
inline PromptLayout build_sequence_tokens(std::span<const TokenId> text, const SpecialVocab& vocab,
                                          const ModelConfig& config) {
  PromptLayout layout;
  layout.visual_tokens = config.visual_tokens();
  layout.n_questions = config.n_questions;
  layout.variant = config.variant;
  const bool with_blocks = config.variant != Variant::kVanilla;
  if (with_blocks && vocab.ancillary.size() != config.n_questions) {
    throw ContractError("vocabulary has " + std::to_string(vocab.ancillary.size()) +
                        " ancillary templates but the model expects N=" +
                        std::to_string(config.n_questions));
  }
  std::size_t m = 1 + vocab.final_question.size();
  if (with_blocks) {
    for (const auto& t : vocab.ancillary) m += 1 + t.size();
  }
  layout.m = m;
  if (layout.visual_tokens + m > config.max_seq_len) {
    throw BudgetError("question blocks need " + std::to_string(layout.visual_tokens + m) +
                      " positions but max_seq_len is " + std::to_string(config.max_seq_len));
  }
  layout.text_budget = config.max_seq_len - layout.visual_tokens - m;
  layout.token_ids = clip_text(text, layout.text_budget);
  layout.text_tokens = layout.token_ids.size();
  if (with_blocks) {
    for (const auto& t : vocab.ancillary) {
      layout.token_ids.push_back(vocab.sep);
      layout.token_ids.insert(layout.token_ids.end(), t.begin(), t.end());
      layout.ans_positions.push_back(layout.visual_tokens + layout.token_ids.size() - 1);
    }
  }
  layout.token_ids.push_back(vocab.sep);
  layout.token_ids.insert(layout.token_ids.end(), vocab.final_question.begin(),
                          vocab.final_question.end());
  layout.final_position = layout.length() - 1;
  if (layout.length() > config.max_seq_len) {
    throw BudgetError("sequence length " + std::to_string(layout.length()) +
                      " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  return layout;
}

inline PromptLayout build_sequence(const Sample& sample, const SpecialVocab& vocab,
                                   const ModelConfig& config) {
  const auto text = tokenize(sample.text, vocab.words);
  return build_sequence_tokens(text, vocab, config);
}

}  // namespace agentps

// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "agentps/assembly.hpp"
#include "agentps/autodiff.hpp"
#include "agentps/config.hpp"
#include "agentps/errors.hpp"
#include "agentps/rng.hpp"
#include "agentps/tensor.hpp"

namespace agentps {

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
};

template <class T>
struct Block {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> wq, wk, wv, wo, bo;
  Tensor<T> ln2_gain, ln2_bias;
  Linear<T> fc1, fc2;
};

/// Classification MLP f_cl for one question: d -> d (GELU) -> |Y|.
template <class T>
struct Head {
  std::size_t question = 0;  // 0-based; the final question is index N
  Linear<T> hidden, out;
};

/// Parameters of the encoder, projector, language model and heads.
///
/// Parameters are initialized from `rng.split(<parameter name>)`, so any two
/// bundles built from the same seed agree on every parameter they share,
/// regardless of variant or head count.
template <class T>
class ModelBundle {
 public:
  ModelConfig config;
  Linear<T> encoder;             // patch pixels -> d_enc
  Linear<T> proj1, proj2;        // d_enc -> d_model -> d_model
  Tensor<T> token_embedding;     // [vocab, d_model]
  Tensor<T> position_embedding;  // [max_seq_len, d_model]
  std::vector<Block<T>> blocks;
  Tensor<T> final_gain, final_bias;
  std::vector<Head<T>> heads;  // ascending question index

  ModelBundle() = default;

  static ModelBundle init(const ModelConfig& cfg, const Rng& rng) {
    cfg.validate();
    ModelBundle m;
    m.config = cfg;
    const std::size_t d = cfg.d_model;
    m.encoder = make_linear(cfg.patch_dim(), cfg.d_enc);
    m.proj1 = make_linear(cfg.d_enc, d);
    m.proj2 = make_linear(d, d);
    m.token_embedding = Tensor<T>({cfg.vocab_size, d});
    m.position_embedding = Tensor<T>({cfg.max_seq_len, d});
    m.blocks.resize(cfg.n_layers);
    for (auto& b : m.blocks) {
      b.ln1_gain = Tensor<T>({d}, T(1));
      b.ln1_bias = Tensor<T>({d});
      b.wq = Tensor<T>({d, d});
      b.wk = Tensor<T>({d, d});
      b.wv = Tensor<T>({d, d});
      b.wo = Tensor<T>({d, d});
      b.bo = Tensor<T>({d});
      b.ln2_gain = Tensor<T>({d}, T(1));
      b.ln2_bias = Tensor<T>({d});
      b.fc1 = make_linear(d, d * cfg.mlp_ratio);
      b.fc2 = make_linear(d * cfg.mlp_ratio, d);
    }
    m.final_gain = Tensor<T>({d}, T(1));
    m.final_bias = Tensor<T>({d});
    if (cfg.variant == Variant::kVanilla) {
      m.heads.push_back(make_head(cfg, cfg.n_questions));
    } else {
      for (std::size_t q = 0; q <= cfg.n_questions; ++q) m.heads.push_back(make_head(cfg, q));
    }
    m.for_each_parameter([&](const std::string& name, Tensor<T>& t) {
      if (is_weight_matrix(name)) {
        Rng r = rng.split(name);
        t = Tensor<T>::xavier(t.dim(0), t.dim(1), r);
      }
    });
    return m;
  }

  static std::string question_name(std::size_t q, std::size_t n_questions) {
    return q == n_questions ? "final" : "q" + std::to_string(q + 1);
  }

  /// Visits every parameter in a fixed canonical order.
  template <class Fn>
  void for_each_parameter(Fn&& fn) {
    visit(*this, fn);
  }
  template <class Fn>
  void for_each_parameter(Fn&& fn) const {
    visit(*this, fn);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_parameter([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  void zero_grad() {
    for_each_parameter([](const std::string&, Tensor<T>& t) { t.ensure_grad(), t.zero_grad(); });
  }

  /// Index into `heads` of question q, or -1.
  std::ptrdiff_t head_index(std::size_t q) const {
    for (std::size_t i = 0; i < heads.size(); ++i) {
      if (heads[i].question == q) return static_cast<std::ptrdiff_t>(i);
    }
    return -1;
  }

  template <class U>
  ModelBundle<U> cast() const {
    ModelBundle<U> out;
    out.config = config;
    auto conv = [](const Tensor<T>& t) { return t.template cast<U>(); };
    auto conv_lin = [&](const Linear<T>& l) { return Linear<U>{conv(l.weight), conv(l.bias)}; };
    out.encoder = conv_lin(encoder);
    out.proj1 = conv_lin(proj1);
    out.proj2 = conv_lin(proj2);
    out.token_embedding = conv(token_embedding);
    out.position_embedding = conv(position_embedding);
    for (const auto& b : blocks) {
      out.blocks.push_back(Block<U>{conv(b.ln1_gain), conv(b.ln1_bias), conv(b.wq), conv(b.wk),
                                    conv(b.wv), conv(b.wo), conv(b.bo), conv(b.ln2_gain),
                                    conv(b.ln2_bias), conv_lin(b.fc1), conv_lin(b.fc2)});
    }
    out.final_gain = conv(final_gain);
    out.final_bias = conv(final_bias);
    for (const auto& h : heads) out.heads.push_back(Head<U>{h.question, conv_lin(h.hidden), conv_lin(h.out)});
    return out;
  }

 private:
  static Linear<T> make_linear(std::size_t in, std::size_t out) {
    return {Tensor<T>({in, out}), Tensor<T>({out})};
  }
  static Head<T> make_head(const ModelConfig& cfg, std::size_t q) {
    return {q, make_linear(cfg.d_model, cfg.d_model),
            make_linear(cfg.d_model, cfg.classes_per_question.at(q))};
  }
  static bool is_weight_matrix(const std::string& name) {
    auto ends_with = [&](std::string_view suffix) {
      return name.size() >= suffix.size() &&
             name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    return ends_with(".weight") || ends_with(".wq") || ends_with(".wk") || ends_with(".wv") ||
           ends_with(".wo") || ends_with("_embedding");
  }

  template <class Self, class Fn>
  static void visit(Self& self, Fn& fn) {
    auto lin = [&](const std::string& prefix, auto& l) {
      fn(prefix + ".weight", l.weight);
      fn(prefix + ".bias", l.bias);
    };
    lin("encoder", self.encoder);
    lin("projector.fc1", self.proj1);
    lin("projector.fc2", self.proj2);
    fn("lm.token_embedding", self.token_embedding);
    fn("lm.position_embedding", self.position_embedding);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const std::string p = "lm.blocks." + std::to_string(i);
      fn(p + ".ln1.gain", b.ln1_gain);
      fn(p + ".ln1.bias", b.ln1_bias);
      fn(p + ".attn.wq", b.wq);
      fn(p + ".attn.wk", b.wk);
      fn(p + ".attn.wv", b.wv);
      fn(p + ".attn.wo", b.wo);
      fn(p + ".attn.bo", b.bo);
      fn(p + ".ln2.gain", b.ln2_gain);
      fn(p + ".ln2.bias", b.ln2_bias);
      lin(p + ".mlp.fc1", b.fc1);
      lin(p + ".mlp.fc2", b.fc2);
    }
    fn("lm.final_norm.gain", self.final_gain);
    fn("lm.final_norm.bias", self.final_bias);
    for (auto& h : self.heads) {
      const std::string p = "head." + question_name(h.question, self.config.n_questions);
      lin(p + ".hidden", h.hidden);
      lin(p + ".out", h.out);
    }
  }
};

// Binding a mutable bundle records trainable leaves; a const bundle is read
// through views and never accumulates gradients.
template <class T>
Var<T> bind(Tape<T>& tape, Tensor<T>& t) {
  return tape.parameter(t);
}
template <class T>
Var<T> bind(Tape<T>& tape, const Tensor<T>& t) {
  return tape.view(t);
}

template <class T, class L>
Var<T> apply_linear(Tape<T>& tape, Var<T> x, L& lin) {
  return ad::add_bias(ad::matmul(x, bind(tape, lin.weight)), bind(tape, lin.bias));
}

/// [F, S, S] images -> [F * (S/p)^2, p^2] patches, patch grid row-major,
/// pixels within a patch row-major.
template <class T>
Tensor<T> patchify(const Tensor<T>& images, const ModelConfig& cfg) {
  const auto& s = images.shape();
  if (s.size() != 3 || s[1] != cfg.image_size || s[2] != cfg.image_size) {
    throw DimensionError("expected images of shape [F, " + std::to_string(cfg.image_size) + ", " +
                         std::to_string(cfg.image_size) + "], got " + shape_string(s));
  }
  const std::size_t frames = s[0], n = cfg.image_size, p = cfg.patch_size, side = n / p;
  Tensor<T> out({frames * side * side, p * p});
  std::size_t row = 0;
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t pr = 0; pr < side; ++pr) {
      for (std::size_t pc = 0; pc < side; ++pc, ++row) {
        for (std::size_t r = 0; r < p; ++r) {
          for (std::size_t c = 0; c < p; ++c) {
            out.at(row, r * p + c) = images[(f * n + pr * p + r) * n + pc * p + c];
          }
        }
      }
    }
  }
  return out;
}

/// Z_f: learned linear patch embedding of every frame.
template <class T, class Bundle>
Var<T> encode_frames(Tape<T>& tape, Bundle& model, const Tensor<T>& images) {
  Var<T> patches = tape.constant(patchify(images, model.config));
  return apply_linear(tape, patches, model.encoder);
}

/// H_f = W2 gelu(W1 z + b1) + b2, row-wise.
template <class T, class Bundle>
Var<T> project(Tape<T>& tape, Bundle& model, Var<T> z) {
  if (z.value().rank() != 2 || z.value().cols() != model.config.d_enc) {
    throw DimensionError("projector expects [V, " + std::to_string(model.config.d_enc) +
                         "], got " + shape_string(z.shape()));
  }
  return apply_linear(tape, ad::gelu(apply_linear(tape, z, model.proj1)), model.proj2);
}

template <class T, class B>
Var<T> transformer_block(Tape<T>& tape, B& b, Var<T> x, std::size_t n_heads) {
  Var<T> a = ad::layer_norm(x, bind(tape, b.ln1_gain), bind(tape, b.ln1_bias));
  Var<T> q = ad::matmul(a, bind(tape, b.wq));
  Var<T> k = ad::matmul(a, bind(tape, b.wk));
  Var<T> v = ad::matmul(a, bind(tape, b.wv));
  Var<T> att = ad::causal_attention(q, k, v, n_heads);
  x = ad::add(x, ad::add_bias(ad::matmul(att, bind(tape, b.wo)), bind(tape, b.bo)));
  Var<T> h = ad::layer_norm(x, bind(tape, b.ln2_gain), bind(tape, b.ln2_bias));
  h = apply_linear(tape, ad::gelu(apply_linear(tape, h, b.fc1)), b.fc2);
  return ad::add(x, h);
}

/// H = LM([H_f, X_t]): one output row per input position.
template <class T, class Bundle>
Var<T> lm_forward(Tape<T>& tape, Bundle& model, Var<T> visual, std::span<const TokenId> text) {
  const auto& cfg = model.config;
  const std::size_t len = visual.value().rows() + text.size();
  if (len > cfg.max_seq_len) {
    throw BudgetError("sequence length L=" + std::to_string(len) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  if (visual.value().cols() != cfg.d_model) {
    throw DimensionError("visual tokens must have width d_model");
  }
  Var<T> x = visual;
  if (!text.empty()) {
    Var<T> emb = ad::gather_rows(bind(tape, model.token_embedding),
                                 std::vector<std::size_t>(text.begin(), text.end()));
    x = ad::concat_rows<T>({visual, emb});
  }
  x = ad::add(x, ad::slice_rows(bind(tape, model.position_embedding), 0, len));
  for (auto& b : model.blocks) x = transformer_block(tape, b, x, cfg.n_heads);
  return ad::layer_norm(x, bind(tape, model.final_gain), bind(tape, model.final_bias));
}

/// ŷ^q = f_cl^q(H[position]).
template <class T, class Bundle>
Var<T> classify_at(Tape<T>& tape, Bundle& model, Var<T> hidden, std::size_t position,
                   std::size_t question) {
  if (position >= hidden.value().rows()) {
    throw IndexError("position " + std::to_string(position) + " outside sequence of length " +
                     std::to_string(hidden.value().rows()));
  }
  const auto idx = model.head_index(question);
  if (idx < 0) {
    throw VariantError(std::string(to_string(model.config.variant)) + " model has no head for " +
                       ModelBundle<T>::question_name(question, model.config.n_questions));
  }
  auto& head = model.heads[static_cast<std::size_t>(idx)];
  Var<T> z = ad::select_row(hidden, position);
  return apply_linear(tape, ad::gelu(apply_linear(tape, z, head.hidden)), head.out);
}

template <class T>
struct HeadOutput {
  std::size_t question;  // 0-based; N is the final question
  std::size_t position;
  Var<T> logits;
};

enum class HeadSelection { kAll, kFinalOnly };

/// Places heads according to the variant:
///   agentps   - head i at layout.ans_positions[i], final head at the last token
///   multitask - every head at the last token
///   vanilla   - the single final head at the last token
template <class T, class Bundle>
std::vector<HeadOutput<T>> forward_variant(Tape<T>& tape, Bundle& model, const PromptLayout& layout,
                                           const Tensor<T>& images,
                                           HeadSelection which = HeadSelection::kAll) {
  const auto& cfg = model.config;
  if (layout.variant != cfg.variant || layout.n_questions != cfg.n_questions) {
    throw ContractError("layout built for " + std::string(to_string(layout.variant)) +
                        " N=" + std::to_string(layout.n_questions) + " but model is " +
                        std::string(to_string(cfg.variant)) + " N=" +
                        std::to_string(cfg.n_questions));
  }
  if (images.rank() != 3 || images.dim(0) != cfg.frames) {
    throw DimensionError("expected " + std::to_string(cfg.frames) + " frames, got " +
                         shape_string(images.shape()));
  }
  Var<T> visual = project(tape, model, encode_frames(tape, model, images));
  if (visual.value().rows() != layout.visual_tokens) {
    throw ContractError("layout reserves " + std::to_string(layout.visual_tokens) +
                        " visual positions, encoder produced " +
                        std::to_string(visual.value().rows()));
  }
  Var<T> hidden = lm_forward(tape, model, visual, std::span<const TokenId>(layout.token_ids));
  std::vector<HeadOutput<T>> out;
  const std::size_t n = cfg.n_questions;
  if (cfg.variant != Variant::kVanilla && which == HeadSelection::kAll) {
    for (std::size_t q = 0; q < n; ++q) {
      const std::size_t pos =
          cfg.variant == Variant::kAgentPS ? layout.ans_positions.at(q) : layout.final_position;
      out.push_back({q, pos, classify_at(tape, model, hidden, pos, q)});
    }
  }
  out.push_back({n, layout.final_position, classify_at(tape, model, hidden, layout.final_position, n)});
  return out;
}

/// Logits per head without gradient tracking.
template <class T>
struct Prediction {
  std::size_t question;
  std::vector<T> logits;
};

template <class T>
std::vector<Prediction<T>> predict(const ModelBundle<T>& model, const PromptLayout& layout,
                                   const Tensor<T>& images,
                                   HeadSelection which = HeadSelection::kAll) {
  Tape<T> tape;
  std::vector<Prediction<T>> out;
  for (const auto& h : forward_variant(tape, model, layout, images, which)) {
    out.push_back({h.question, h.logits.value().values()});
  }
  return out;
}

}  // namespace agentps

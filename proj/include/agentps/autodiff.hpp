// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "agentps/errors.hpp"
#include "agentps/tensor.hpp"

namespace agentps {

template <class T>
class Tape;

/// Handle to a node recorded on a Tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape<T>& tape() const noexcept { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode recording of tensor operations.
///
/// Nodes are appended in evaluation order, which is a topological order of the
/// computation graph, so backward() walks the node array once from the end.
/// Parameter leaves alias the caller's tensors and accumulate into their
/// `grad()` when backward reaches them.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), nullptr, nullptr, {}, {}, false});
    return {this, nodes_.size() - 1};
  }

  /// Read-only leaf aliasing `t`; never receives gradients. `t` must outlive
  /// the tape.
  Var<T> view(const Tensor<T>& t) {
    nodes_.push_back(Node{{}, &t, nullptr, {}, {}, false});
    return {this, nodes_.size() - 1};
  }

  /// Leaf bound to a live parameter. The tensor must outlive the tape.
  Var<T> parameter(Tensor<T>& param) {
    nodes_.push_back(Node{{}, &param, &param, {}, {}, true});
    return {this, nodes_.size() - 1};
  }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    nodes_.push_back(
        Node{std::move(value), nullptr, nullptr, needs ? std::move(fn) : BackwardFn{}, {}, needs});
    return {this, nodes_.size() - 1};
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    nodes_.push_back(
        Node{std::move(value), nullptr, nullptr, needs ? std::move(fn) : BackwardFn{}, {}, needs});
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.alias ? *n.alias : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Adjoint buffer of a node, allocated (zeroed) on first access.
  std::vector<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    const std::size_t len = value(id).size();
    if (n.grad.size() != len) n.grad.assign(len, T{0});
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
  void backward(Var<T> loss) {
    if (loss.value().size() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " +
                          shape_string(loss.shape()));
    }
    grad(loss.id())[0] = T{1};
    visited_ = 0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.requires_grad) continue;
      ++visited_;
      if (n.param) {
        auto& g = n.param->ensure_grad();
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
      } else if (n.backward) {
        n.backward(*this, i);
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Nodes processed by the last backward() call.
  std::size_t visited() const noexcept { return visited_; }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* alias;
    Tensor<T>* param;
    BackwardFn backward;
    std::vector<T> grad;
    bool requires_grad;
  };

  std::vector<Node> nodes_;
  std::size_t visited_ = 0;
};

namespace kernels {

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc{0};
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline constexpr double kInvSqrt2 = 0.70710678118654752440;

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(kInvSqrt2)));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(kInvSqrt2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

}  // namespace kernels

/// Numerically stable softmax of a vector (max subtraction).
template <class T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> out(logits.size());
  if (logits.empty()) return out;
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum{0};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

namespace ad {

namespace detail {

inline void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(s));
  }
}

template <class T>
void accumulate(std::vector<T>& dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_rank2(av.shape(), "matmul");
  detail::require_rank2(bv.shape(), "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_string(av.shape()) +
                         " x " + shape_string(bv.shape()));
  }
  Tensor<T> out({m, n});
  kernels::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& tape, std::size_t self) {
    const T* g = tape.grad(self).data();
    if (tape.requires_grad(a.id())) {
      kernels::gemm_nt(g, b.value().data().data(), tape.grad(a.id()).data(), m, n, k);
    }
    if (tape.requires_grad(b.id())) {
      kernels::gemm_tn(a.value().data().data(), g, tape.grad(b.id()).data(), m, k, n);
    }
  });
}

/// Elementwise a + b (identical shapes).
template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    if (tape.requires_grad(a.id())) detail::accumulate<T>(tape.grad(a.id()), g);
    if (tape.requires_grad(b.id())) detail::accumulate<T>(tape.grad(b.id()), g);
  });
}

/// x[m,n] + bias[n] broadcast over rows.
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  const auto& xv = x.value();
  const std::size_t n = xv.cols(), m = xv.size() / n;
  if (bias.value().size() != n) {
    throw DimensionError("bias of shape " + shape_string(bias.shape()) +
                         " does not broadcast over " + shape_string(xv.shape()));
  }
  Tensor<T> out = xv;
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  }
  return x.tape().record(std::move(out), {x, bias}, [x, bias, m, n](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    if (tape.requires_grad(x.id())) detail::accumulate<T>(tape.grad(x.id()), g);
    if (tape.requires_grad(bias.id())) {
      auto& gb = tape.grad(bias.id());
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (tape.requires_grad(a.id())) {
      auto& ga = tape.grad(a.id());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tape.requires_grad(b.id())) {
      auto& gb = tape.grad(b.id());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return a.tape().record(std::move(out), {a}, [a, s](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    auto& ga = tape.grad(a.id());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  T acc{0};
  for (T v : a.value().values()) acc += v;
  return a.tape().record(Tensor<T>::scalar(acc), {a}, [a](Tape<T>& tape, std::size_t self) {
    const T g = tape.grad(self)[0];
    for (auto& v : tape.grad(a.id())) v += g;
  });
}

/// Σ weights[i] * terms[i] over scalar terms.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  if (terms.empty()) throw ContractError("weighted_sum of zero terms");
  if (terms.size() != weights.size()) throw ContractError("weighted_sum: weight count mismatch");
  T acc{0};
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().size() != 1) throw ContractError("weighted_sum terms must be scalars");
    acc += weights[i] * terms[i].value()[0];
  }
  return terms.front().tape().record(
      Tensor<T>::scalar(acc), terms, [terms, weights](Tape<T>& tape, std::size_t self) {
        const T g = tape.grad(self)[0];
        for (std::size_t i = 0; i < terms.size(); ++i) {
          if (tape.requires_grad(terms[i].id())) tape.grad(terms[i].id())[0] += weights[i] * g;
        }
      });
}

template <class T>
Var<T> gelu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = kernels::gelu(v);
  return a.tape().record(std::move(out), {a}, [a](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    const auto& x = a.value();
    auto& ga = tape.grad(a.id());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * kernels::gelu_grad(x[i]);
  });
}

/// Row-wise layer normalization with learned gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const std::size_t n = xv.cols(), m = xv.size() / n;
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm parameters do not match width " + std::to_string(n));
  }
  Tensor<T> out(xv.shape());
  std::vector<T> xhat(xv.size());
  std::vector<T> inv_std(m);
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xv.data().data() + i * n;
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= T(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        const auto& gv = gain.value();
        if (tape.requires_grad(gain.id())) {
          auto& gg = tape.grad(gain.id());
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
        }
        if (tape.requires_grad(bias.id())) {
          auto& gb = tape.grad(bias.id());
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
        if (tape.requires_grad(x.id())) {
          auto& gx = tape.grad(x.id());
          for (std::size_t i = 0; i < m; ++i) {
            T mean_dy{0}, mean_dy_xhat{0};
            for (std::size_t j = 0; j < n; ++j) {
              const T dy = g[i * n + j] * gv[j];
              mean_dy += dy;
              mean_dy_xhat += dy * xhat[i * n + j];
            }
            mean_dy /= T(n);
            mean_dy_xhat /= T(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T dy = g[i * n + j] * gv[j];
              gx[i * n + j] += inv_std[i] * (dy - mean_dy - xhat[i * n + j] * mean_dy_xhat);
            }
          }
        }
      });
}

/// Multi-head causal self-attention core: softmax(Q_h K_h^T / sqrt(d_h)) V_h per
/// head, heads concatenated along columns. Row t only reads rows <= t; masked
/// entries are skipped rather than set to -inf.
template <class T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t n_heads) {
  const auto& qv = q.value();
  detail::require_rank2(qv.shape(), "causal_attention");
  if (k.shape() != qv.shape() || v.shape() != qv.shape()) {
    throw DimensionError("causal_attention expects equal q/k/v shapes");
  }
  const std::size_t len = qv.dim(0), width = qv.dim(1);
  if (n_heads == 0 || width % n_heads != 0) {
    throw DimensionError("width " + std::to_string(width) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  const std::size_t dh = width / n_heads;
  const T scale = T(1) / std::sqrt(T(dh));
  const auto& kv = k.value();
  const auto& vv = v.value();
  Tensor<T> out({len, width});
  // probs[h][i*len + j], j <= i
  std::vector<T> probs(n_heads * len * len, T{0});
  std::vector<T> scores(len);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < len; ++i) {
      const T* qi = qv.data().data() + i * width + off;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        const T* kj = kv.data().data() + j * width + off;
        T s{0};
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        scores[j] = s * scale;
        mx = std::max(mx, scores[j]);
      }
      T z{0};
      T* p = probs.data() + (h * len + i) * len;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(scores[j] - mx);
        z += p[j];
      }
      T* oi = out.data().data() + i * width + off;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] /= z;
        const T* vj = vv.data().data() + j * width + off;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
      }
    }
  }
  return q.tape().record(
      std::move(out), {q, k, v},
      [q, k, v, n_heads, len, width, dh, scale, probs = std::move(probs)](Tape<T>& tape,
                                                                          std::size_t self) {
        const auto& g = tape.grad(self);
        const auto& qv = q.value();
        const auto& kv = k.value();
        const auto& vv = v.value();
        std::vector<T> scratch_q, scratch_k, scratch_v;
        auto& gq = tape.requires_grad(q.id()) ? tape.grad(q.id()) : scratch_q;
        auto& gk = tape.requires_grad(k.id()) ? tape.grad(k.id()) : scratch_k;
        auto& gv = tape.requires_grad(v.id()) ? tape.grad(v.id()) : scratch_v;
        if (gq.empty()) gq.assign(len * width, T{0});
        if (gk.empty()) gk.assign(len * width, T{0});
        if (gv.empty()) gv.assign(len * width, T{0});
        std::vector<T> dp(len);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < len; ++i) {
            const T* p = probs.data() + (h * len + i) * len;
            const T* gi = g.data() + i * width + off;
            T dot{0};
            for (std::size_t j = 0; j <= i; ++j) {
              const T* vj = vv.data().data() + j * width + off;
              T* gvj = gv.data() + j * width + off;
              T s{0};
              for (std::size_t c = 0; c < dh; ++c) {
                s += gi[c] * vj[c];
                gvj[c] += p[j] * gi[c];
              }
              dp[j] = s;
              dot += p[j] * s;
            }
            const T* qi = qv.data().data() + i * width + off;
            T* gqi = gq.data() + i * width + off;
            for (std::size_t j = 0; j <= i; ++j) {
              const T ds = p[j] * (dp[j] - dot) * scale;
              if (ds == T{0}) continue;
              const T* kj = kv.data().data() + j * width + off;
              T* gkj = gk.data() + j * width + off;
              for (std::size_t c = 0; c < dh; ++c) {
                gqi[c] += ds * kj[c];
                gkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

/// Rows `ids` of an embedding table [vocab, d].
template <class T>
Var<T> gather_rows(Var<T> table, std::vector<std::size_t> ids) {
  const auto& tv = table.value();
  detail::require_rank2(tv.shape(), "gather_rows");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  if (ids.empty()) throw DimensionError("gather_rows with no ids");
  Tensor<T> out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= vocab) {
      throw IndexError("row id " + std::to_string(ids[r]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data().data() + ids[r] * d, d, out.data().data() + r * d);
  }
  return table.tape().record(std::move(out), {table},
                             [table, ids = std::move(ids), d](Tape<T>& tape, std::size_t self) {
                               const auto& g = tape.grad(self);
                               auto& gt = tape.grad(table.id());
                               for (std::size_t r = 0; r < ids.size(); ++r) {
                                 for (std::size_t c = 0; c < d; ++c) gt[ids[r] * d + c] += g[r * d + c];
                               }
                             });
}

/// Rows [begin, begin + count) of a matrix.
template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count) {
  const auto& xv = x.value();
  detail::require_rank2(xv.shape(), "slice_rows");
  const std::size_t d = xv.dim(1);
  if (count == 0 || begin + count > xv.dim(0)) {
    throw IndexError("row slice [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + shape_string(xv.shape()));
  }
  Tensor<T> out({count, d});
  std::copy_n(xv.data().data() + begin * d, count * d, out.data().data());
  return x.tape().record(std::move(out), {x}, [x, begin, count, d](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    auto& gx = tape.grad(x.id());
    for (std::size_t i = 0; i < count * d; ++i) gx[begin * d + i] += g[i];
  });
}

template <class T>
Var<T> select_row(Var<T> x, std::size_t row) {
  return slice_rows(x, row, 1);
}

/// Vertical concatenation of matrices with equal column counts.
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t d = parts.front().value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p.shape(), "concat_rows");
    if (p.value().cols() != d) {
      throw DimensionError("concat_rows width mismatch: " + shape_string(p.shape()));
    }
    total += p.value().rows();
  }
  Tensor<T> out({total, d});
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.data().begin() + at);
    at += p.value().size();
  }
  return parts.front().tape().record(std::move(out), parts, [parts](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    std::size_t at = 0;
    for (const auto& p : parts) {
      const std::size_t len = p.value().size();
      if (tape.requires_grad(p.id())) {
        auto& gp = tape.grad(p.id());
        for (std::size_t i = 0; i < len; ++i) gp[i] += g[at + i];
      }
      at += len;
    }
  });
}

/// -log softmax(logits)[target], stabilized by max subtraction.
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, std::size_t target) {
  const auto& lv = logits.value();
  const std::size_t c = lv.size();
  if (c < 2) throw DimensionError("cross-entropy needs at least 2 classes, got " + std::to_string(c));
  if (target >= c) {
    throw IndexError("target class " + std::to_string(target) + " outside [0, " +
                     std::to_string(c) + ")");
  }
  const T mx = *std::max_element(lv.values().begin(), lv.values().end());
  T z{0};
  for (T v : lv.values()) z += std::exp(v - mx);
  const T loss = std::log(z) - (lv[target] - mx);
  return logits.tape().record(
      Tensor<T>::scalar(loss), {logits}, [logits, target](Tape<T>& tape, std::size_t self) {
        const T g = tape.grad(self)[0];
        const auto p = softmax<T>(logits.value().data());
        auto& gl = tape.grad(logits.id());
        for (std::size_t i = 0; i < p.size(); ++i) {
          gl[i] += g * (p[i] - (i == target ? T(1) : T(0)));
        }
      });
}

}  // namespace ad
}  // namespace agentps

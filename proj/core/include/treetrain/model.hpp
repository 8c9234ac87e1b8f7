#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "treetrain/matrix.hpp"
#include "treetrain/model_config.hpp"
#include "treetrain/token_sequence.hpp"

namespace treetrain {

inline constexpr double kRmsNormEps = 1e-6;

// Pre-norm decoder block: RMSNorm -> attention -> residual, RMSNorm -> SiLU MLP
// -> residual. No biases, no dropout, no weight tying.
template <typename T>
struct LayerParams {
  Matrix<T> w_q, w_k, w_v, w_o;   // [d_model x d_model]
  std::vector<T> attn_norm_gain;  // [d_model]
  std::vector<T> mlp_norm_gain;   // [d_model]
  Matrix<T> w_mlp_in;             // [d_model x d_ff]
  Matrix<T> w_mlp_out;            // [d_ff x d_model]
};

template <typename T>
struct Parameters {
  ModelConfig config;
  Matrix<T> embedding;  // [vocab x d_model]
  std::vector<LayerParams<T>> layers;
  std::vector<T> final_norm_gain;  // [d_model]
  Matrix<T> output_head;           // [d_model x vocab]
};

// Visits every named tensor in a fixed order (also the serialization order).
template <typename T, typename Fn>
void for_each_tensor(Parameters<T>& p, Fn&& fn) {
  const auto& c = p.config;
  fn("embedding", p.embedding.data, std::vector<std::size_t>{c.vocab_size, c.d_model});
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const std::string base = "layers." + std::to_string(i) + ".";
    auto& l = p.layers[i];
    fn(base + "attn_norm_gain", l.attn_norm_gain, std::vector<std::size_t>{c.d_model});
    fn(base + "w_q", l.w_q.data, std::vector<std::size_t>{c.d_model, c.d_model});
    fn(base + "w_k", l.w_k.data, std::vector<std::size_t>{c.d_model, c.d_model});
    fn(base + "w_v", l.w_v.data, std::vector<std::size_t>{c.d_model, c.d_model});
    fn(base + "w_o", l.w_o.data, std::vector<std::size_t>{c.d_model, c.d_model});
    fn(base + "mlp_norm_gain", l.mlp_norm_gain, std::vector<std::size_t>{c.d_model});
    fn(base + "w_mlp_in", l.w_mlp_in.data, std::vector<std::size_t>{c.d_model, c.d_ff});
    fn(base + "w_mlp_out", l.w_mlp_out.data, std::vector<std::size_t>{c.d_ff, c.d_model});
  }
  fn("final_norm_gain", p.final_norm_gain, std::vector<std::size_t>{c.d_model});
  fn("output_head", p.output_head.data, std::vector<std::size_t>{c.d_model, c.vocab_size});
}

template <typename T, typename Fn>
void for_each_tensor(const Parameters<T>& p, Fn&& fn) {
  for_each_tensor(const_cast<Parameters<T>&>(p),
                  [&](const std::string& name, const std::vector<T>& data,
                      const std::vector<std::size_t>& shape) { fn(name, data, shape); });
}

template <typename T>
std::size_t total_param_count(const Parameters<T>& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const std::string&, const std::vector<T>& d,
                         const std::vector<std::size_t>&) { n += d.size(); });
  return n;
}

// Gradient accumulator, shape-congruent with Parameters.
template <typename T>
struct GradientStore {
  Parameters<T> tensors;
  std::size_t accum_count = 0;
};

template <typename T>
Parameters<T> zero_parameters(const ModelConfig& config) {
  config.validate();
  Parameters<T> p;
  p.config = config;
  p.embedding = Matrix<T>(config.vocab_size, config.d_model);
  p.layers.resize(config.n_layers);
  for (auto& l : p.layers) {
    l.w_q = Matrix<T>(config.d_model, config.d_model);
    l.w_k = Matrix<T>(config.d_model, config.d_model);
    l.w_v = Matrix<T>(config.d_model, config.d_model);
    l.w_o = Matrix<T>(config.d_model, config.d_model);
    l.attn_norm_gain.assign(config.d_model, T(0));
    l.mlp_norm_gain.assign(config.d_model, T(0));
    l.w_mlp_in = Matrix<T>(config.d_model, config.d_ff);
    l.w_mlp_out = Matrix<T>(config.d_ff, config.d_model);
  }
  p.final_norm_gain.assign(config.d_model, T(0));
  p.output_head = Matrix<T>(config.d_model, config.vocab_size);
  return p;
}

template <typename T>
GradientStore<T> make_gradient_store(const ModelConfig& config) {
  return GradientStore<T>{zero_parameters<T>(config), 0};
}

template <typename T>
void zero_gradients(GradientStore<T>& g) {
  for_each_tensor(g.tensors, [](const std::string&, std::vector<T>& d,
                                const std::vector<std::size_t>&) {
    std::fill(d.begin(), d.end(), T(0));
  });
  g.accum_count = 0;
}

// Deterministic init: every weight matrix iid normal(0, 0.02), norm gains 1.
template <typename T>
Parameters<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  Parameters<T> p = zero_parameters<T>(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.02);
  auto fill = [&](std::vector<T>& d) {
    for (auto& v : d) v = T(dist(rng));
  };
  fill(p.embedding.data);
  for (auto& l : p.layers) {
    fill(l.w_q.data);
    fill(l.w_k.data);
    fill(l.w_v.data);
    fill(l.w_o.data);
    l.attn_norm_gain.assign(config.d_model, T(1));
    l.mlp_norm_gain.assign(config.d_model, T(1));
    fill(l.w_mlp_in.data);
    fill(l.w_mlp_out.data);
  }
  p.final_norm_gain.assign(config.d_model, T(1));
  fill(p.output_head.data);
  return p;
}

// Per-layer key/value tensors for a contiguous token span, heads packed into
// the d_model columns (head h occupies columns [h*head_dim, (h+1)*head_dim)).
template <typename T>
struct KVSegment {
  std::size_t start_position = 0;
  std::size_t length = 0;
  std::vector<Matrix<T>> keys;    // per layer [length x d_model]
  std::vector<Matrix<T>> values;  // per layer [length x d_model]
};

// A contiguous run of KV context assembled from stacked segments; `length`
// may truncate a segment so a prefix of a node's own KV can serve as context.
template <typename T>
struct KVSlice {
  const KVSegment<T>* segment = nullptr;
  std::size_t length = 0;
};

template <typename T>
struct KVView {
  std::vector<KVSlice<T>> slices;

  std::size_t total_length() const {
    std::size_t n = 0;
    for (const auto& s : slices) n += s.length;
    return n;
  }
  void push(const KVSegment<T>& seg, std::size_t len) {
    if (len > 0) slices.push_back({&seg, len});
  }
  void push(const KVSegment<T>& seg) { push(seg, seg.length); }
};

// Gradient tensors congruent with a KVSegment (or with a prefix of stacked
// segments when produced by backward_segment).
template <typename T>
struct KVGrad {
  std::size_t length = 0;
  std::vector<Matrix<T>> keys;
  std::vector<Matrix<T>> values;

  static KVGrad zeros(std::size_t len, const ModelConfig& cfg) {
    KVGrad g;
    g.length = len;
    g.keys.assign(cfg.n_layers, Matrix<T>(len, cfg.d_model));
    g.values.assign(cfg.n_layers, Matrix<T>(len, cfg.d_model));
    return g;
  }

  // this[dst_begin + i] += src[src_begin + i] for i in [0, src_end - src_begin)
  void add_rows(const KVGrad& src, std::size_t src_begin, std::size_t src_end,
                std::size_t dst_begin) {
    for (std::size_t l = 0; l < keys.size(); ++l) {
      const std::size_t d = keys[l].cols;
      for (std::size_t r = src_begin; r < src_end; ++r) {
        const std::size_t dr = dst_begin + (r - src_begin);
        for (std::size_t c = 0; c < d; ++c) {
          keys[l](dr, c) += src.keys[l](r, c);
          values[l](dr, c) += src.values[l](r, c);
        }
      }
    }
  }
};

// Everything backward_segment needs to reproduce the exact reverse pass of one
// segment without re-running forward.
template <typename T>
struct LayerActivations {
  Matrix<T> x_in;    // residual stream entering the layer
  std::vector<T> inv_rms_attn;
  Matrix<T> q, k, v;
  Matrix<T> attn_out;  // pre-w_o, heads packed
  Matrix<T> x_mid;     // after attention residual
  std::vector<T> inv_rms_mlp;
  Matrix<T> mlp_pre;   // pre-SiLU hidden [len x d_ff]
};

template <typename T>
struct SegmentActivations {
  std::size_t start_position = 0;
  std::size_t length = 0;
  std::vector<TokenId> tokens;
  std::vector<LayerActivations<T>> layers;
  Matrix<T> x_final;
  std::vector<T> inv_rms_final;
};

template <typename T>
struct ForwardResult {
  Matrix<T> logits;  // [length x vocab]
  std::optional<KVSegment<T>> kv;
  std::optional<SegmentActivations<T>> activations;
};

// Sinusoidal absolute positional encoding, added onto `row`.
template <typename T>
void add_positional_encoding(std::span<T> row, std::size_t pos, std::size_t d_model) {
  for (std::size_t i = 0; 2 * i < d_model; ++i) {
    const double freq = std::pow(10000.0, -double(2 * i) / double(d_model));
    const double angle = double(pos) * freq;
    row[2 * i] += T(std::sin(angle));
    if (2 * i + 1 < d_model) row[2 * i + 1] += T(std::cos(angle));
  }
}

template <typename T>
T rms_inv(std::span<const T> x) {
  T ms = T(0);
  for (std::size_t c = 0; c < x.size(); ++c) ms += x[c] * x[c];
  ms /= T(x.size());
  return T(1) / std::sqrt(ms + T(kRmsNormEps));
}

// y = x * inv * gain; accumulates grad wrt gain and x given grad wrt y.
template <typename T>
void rmsnorm_backward(std::span<const T> grad_y, std::span<const T> x, T inv,
                      std::span<const T> gain, std::span<T> grad_gain_accum,
                      std::span<T> grad_x_accum) {
  const std::size_t d = x.size();
  T dot = T(0);
  for (std::size_t c = 0; c < d; ++c) dot += grad_y[c] * gain[c] * x[c];
  const T scale = dot * inv * inv * inv / T(d);
  for (std::size_t c = 0; c < d; ++c) {
    grad_gain_accum[c] += grad_y[c] * x[c] * inv;
    grad_x_accum[c] += grad_y[c] * gain[c] * inv - x[c] * scale;
  }
}

template <typename T>
T silu(T u) {
  const T s = T(1) / (T(1) + std::exp(-u));
  return u * s;
}

template <typename T>
T silu_derivative(T u) {
  const T s = T(1) / (T(1) + std::exp(-u));
  return s * (T(1) + u * (T(1) - s));
}

namespace detail {

template <typename T>
inline T dot_span(const T* a, const T* b, std::size_t n) {
  T acc = T(0);
  for (std::size_t c = 0; c < n; ++c) acc += a[c] * b[c];
  return acc;
}

// Fills probs[0..ctx) with the causal attention distribution of one query.
// Keys are iterated in absolute position order: prefix slices first, then the
// segment's own rows up to the query. The op order here is the contract that
// makes chained segment forwards bitwise-equal to a monolithic forward.
template <typename T>
void attention_probs(const T* q_h, const KVView<T>& prefix, std::size_t layer,
                     const Matrix<T>& own_k, std::size_t own_rows, std::size_t head_off,
                     std::size_t head_dim, T inv_sqrt_dh, std::vector<T>& probs) {
  std::size_t j = 0;
  for (const auto& slice : prefix.slices) {
    const Matrix<T>& K = slice.segment->keys[layer];
    for (std::size_t r = 0; r < slice.length; ++r)
      probs[j++] = dot_span(q_h, &K(r, head_off), head_dim) * inv_sqrt_dh;
  }
  for (std::size_t r = 0; r < own_rows; ++r)
    probs[j++] = dot_span(q_h, &own_k(r, head_off), head_dim) * inv_sqrt_dh;

  const std::size_t ctx = j;
  T m = probs[0];
  for (std::size_t i = 1; i < ctx; ++i) m = std::max(m, probs[i]);
  T z = T(0);
  for (std::size_t i = 0; i < ctx; ++i) {
    probs[i] = std::exp(probs[i] - m);
    z += probs[i];
  }
  const T invz = T(1) / z;
  for (std::size_t i = 0; i < ctx; ++i) probs[i] *= invz;
}

}  // namespace detail

// Forward over one token segment, continuing from the prefix KV context.
// Logits at each position match a monolithic forward over prefix+segment
// bitwise (same precision). start_position must equal the prefix length.
template <typename T>
ForwardResult<T> forward_segment(const Parameters<T>& params, const KVView<T>& prefix_kv,
                                 std::span<const TokenId> tokens, std::size_t start_position,
                                 bool want_kv, bool want_activations) {
  const ModelConfig& cfg = params.config;
  const std::size_t len = tokens.size();
  if (len == 0) throw std::invalid_argument("forward_segment: empty token list");
  if (prefix_kv.total_length() != start_position)
    throw std::invalid_argument("forward_segment: start_position does not match prefix length");
  if (start_position + len > cfg.max_position)
    throw std::invalid_argument("forward_segment: position overflow beyond max_position");
  const std::size_t d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
  const std::size_t V = cfg.vocab_size, F = cfg.d_ff, NL = cfg.n_layers;
  for (std::size_t t = 0; t < len; ++t)
    if (tokens[t] < 0 || std::size_t(tokens[t]) >= V)
      throw std::invalid_argument("forward_segment: token id out of vocab range");

  const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));

  ForwardResult<T> out;
  if (want_kv) {
    out.kv.emplace();
    out.kv->start_position = start_position;
    out.kv->length = len;
    out.kv->keys.reserve(NL);
    out.kv->values.reserve(NL);
  }
  if (want_activations) {
    out.activations.emplace();
    out.activations->start_position = start_position;
    out.activations->length = len;
    out.activations->tokens.assign(tokens.begin(), tokens.end());
    out.activations->layers.resize(NL);
  }

  Matrix<T> x(len, d);
  for (std::size_t t = 0; t < len; ++t) {
    auto dst = x.row(t);
    auto src = params.embedding.row(std::size_t(tokens[t]));
    for (std::size_t c = 0; c < d; ++c) dst[c] = src[c];
    add_positional_encoding(dst, start_position + t, d);
  }

  Matrix<T> normed(len, d);
  std::vector<T> probs(start_position + len);

  for (std::size_t l = 0; l < NL; ++l) {
    const LayerParams<T>& lp = params.layers[l];
    std::vector<T> inv1(len);
    for (std::size_t t = 0; t < len; ++t) {
      inv1[t] = rms_inv<T>(x.row(t));
      for (std::size_t c = 0; c < d; ++c) normed(t, c) = x(t, c) * inv1[t] * lp.attn_norm_gain[c];
    }
    Matrix<T> q(len, d), k(len, d), v(len, d);
    matmul(normed, lp.w_q, q);
    matmul(normed, lp.w_k, k);
    matmul(normed, lp.w_v, v);

    Matrix<T> attn(len, d);
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t ctx = start_position + t + 1;
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = h * dh;
        detail::attention_probs(&q(t, off), prefix_kv, l, k, t + 1, off, dh, inv_sqrt_dh, probs);
        T* out_h = &attn(t, off);
        std::size_t j = 0;
        for (const auto& slice : prefix_kv.slices) {
          const Matrix<T>& Vm = slice.segment->values[l];
          for (std::size_t r = 0; r < slice.length; ++r, ++j) {
            const T w = probs[j];
            const T* vr = &Vm(r, off);
            for (std::size_t c = 0; c < dh; ++c) out_h[c] += w * vr[c];
          }
        }
        for (std::size_t r = 0; r + start_position < ctx; ++r, ++j) {
          const T w = probs[j];
          const T* vr = &v(r, off);
          for (std::size_t c = 0; c < dh; ++c) out_h[c] += w * vr[c];
        }
      }
    }

    Matrix<T> proj(len, d);
    matmul(attn, lp.w_o, proj);

    if (want_activations) {
      auto& la = out.activations->layers[l];
      la.x_in = x;
      la.inv_rms_attn = inv1;
      la.q = q;
      la.k = k;
      la.v = v;
      la.attn_out = attn;
    }
    if (want_kv) {
      out.kv->keys.push_back(std::move(k));
      out.kv->values.push_back(std::move(v));
    }

    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t c = 0; c < d; ++c) x(t, c) += proj(t, c);

    std::vector<T> inv2(len);
    for (std::size_t t = 0; t < len; ++t) {
      inv2[t] = rms_inv<T>(x.row(t));
      for (std::size_t c = 0; c < d; ++c) normed(t, c) = x(t, c) * inv2[t] * lp.mlp_norm_gain[c];
    }
    Matrix<T> hidden(len, F);
    matmul(normed, lp.w_mlp_in, hidden);
    if (want_activations) {
      auto& la = out.activations->layers[l];
      la.x_mid = x;
      la.inv_rms_mlp = inv2;
      la.mlp_pre = hidden;
    }
    Matrix<T> act(len, F);
    for (std::size_t i = 0; i < hidden.data.size(); ++i) act.data[i] = silu(hidden.data[i]);
    Matrix<T> mlp_out(len, d);
    matmul(act, lp.w_mlp_out, mlp_out);
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t c = 0; c < d; ++c) x(t, c) += mlp_out(t, c);
  }

  std::vector<T> invf(len);
  for (std::size_t t = 0; t < len; ++t) {
    invf[t] = rms_inv<T>(x.row(t));
    for (std::size_t c = 0; c < d; ++c) normed(t, c) = x(t, c) * invf[t] * params.final_norm_gain[c];
  }
  if (want_activations) {
    out.activations->x_final = x;
    out.activations->inv_rms_final = invf;
  }
  out.logits = Matrix<T>(len, V);
  matmul(normed, params.output_head, out.logits);
  return out;
}

template <typename T>
struct BackwardUpstream {
  const Matrix<T>* grad_logits = nullptr;  // [length x vocab], null means zero
  const KVGrad<T>* grad_new_kv = nullptr;  // congruent with the segment, null means zero
};

// Exact reverse-mode pass of one segment's forward computation. Parameter
// gradients accumulate additively into `grads`; the return value is the
// gradient wrt the prefix KV context (row-aligned with prefix_kv).
template <typename T>
KVGrad<T> backward_segment(const Parameters<T>& params, const SegmentActivations<T>& acts,
                           const KVView<T>& prefix_kv, const BackwardUpstream<T>& upstream,
                           GradientStore<T>& grads) {
  const ModelConfig& cfg = params.config;
  const std::size_t len = acts.length;
  const std::size_t S = acts.start_position;
  const std::size_t d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
  const std::size_t V = cfg.vocab_size, F = cfg.d_ff, NL = cfg.n_layers;
  if (prefix_kv.total_length() != S)
    throw std::invalid_argument("backward_segment: prefix length does not match activations");
  if (acts.layers.size() != NL)
    throw std::invalid_argument("backward_segment: activations layer count mismatch");
  if (upstream.grad_logits &&
      (upstream.grad_logits->rows != len || upstream.grad_logits->cols != V))
    throw std::invalid_argument("backward_segment: grad_logits shape mismatch");
  if (upstream.grad_new_kv &&
      (upstream.grad_new_kv->length != len || upstream.grad_new_kv->keys.size() != NL))
    throw std::invalid_argument("backward_segment: grad_new_kv shape mismatch");

  const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));
  KVGrad<T> grad_prefix = KVGrad<T>::zeros(S, cfg);

  // grad wrt the residual stream, flowing from the top of the stack downward
  Matrix<T> gx(len, d);

  if (upstream.grad_logits) {
    const Matrix<T>& gl = *upstream.grad_logits;
    Matrix<T> c_mat(len, d);
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t c = 0; c < d; ++c)
        c_mat(t, c) = acts.x_final(t, c) * acts.inv_rms_final[t] * params.final_norm_gain[c];
    accumulate_outer(grads.tensors.output_head, c_mat, gl);
    Matrix<T> grad_c(len, d);
    matmul_transposed(gl, params.output_head, grad_c);
    for (std::size_t t = 0; t < len; ++t)
      rmsnorm_backward<T>(grad_c.row(t), acts.x_final.row(t), acts.inv_rms_final[t],
                          params.final_norm_gain, grads.tensors.final_norm_gain, gx.row(t));
  }

  std::vector<T> probs(S + len), gp(S + len);

  for (std::size_t li = NL; li-- > 0;) {
    const LayerParams<T>& lp = params.layers[li];
    const LayerActivations<T>& la = acts.layers[li];
    LayerParams<T>& gl = grads.tensors.layers[li];

    // MLP: x_out = x_mid + silu(norm(x_mid) W_in) W_out, grad_x_out == gx
    Matrix<T> act(len, F), grad_act(len, F);
    for (std::size_t i = 0; i < act.data.size(); ++i) act.data[i] = silu(la.mlp_pre.data[i]);
    accumulate_outer(gl.w_mlp_out, act, gx);
    matmul_transposed(gx, lp.w_mlp_out, grad_act);
    Matrix<T> grad_hidden(len, F);
    for (std::size_t i = 0; i < grad_hidden.data.size(); ++i)
      grad_hidden.data[i] = grad_act.data[i] * silu_derivative(la.mlp_pre.data[i]);
    Matrix<T> normed2(len, d);
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t c = 0; c < d; ++c)
        normed2(t, c) = la.x_mid(t, c) * la.inv_rms_mlp[t] * lp.mlp_norm_gain[c];
    accumulate_outer(gl.w_mlp_in, normed2, grad_hidden);
    Matrix<T> grad_normed2(len, d);
    matmul_transposed(grad_hidden, lp.w_mlp_in, grad_normed2);
    Matrix<T> gx_mid = gx;  // residual path
    for (std::size_t t = 0; t < len; ++t)
      rmsnorm_backward<T>(grad_normed2.row(t), la.x_mid.row(t), la.inv_rms_mlp[t],
                          lp.mlp_norm_gain, gl.mlp_norm_gain, gx_mid.row(t));

    // attention: x_mid = x_in + attn_out W_o
    accumulate_outer(gl.w_o, la.attn_out, gx_mid);
    Matrix<T> grad_attn(len, d);
    matmul_transposed(gx_mid, lp.w_o, grad_attn);

    Matrix<T> grad_q(len, d);
    Matrix<T> grad_k_own(len, d), grad_v_own(len, d);
    if (upstream.grad_new_kv) {
      grad_k_own = upstream.grad_new_kv->keys[li];
      grad_v_own = upstream.grad_new_kv->values[li];
    }

    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t ctx = S + t + 1;
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = h * dh;
        detail::attention_probs(&la.q(t, off), prefix_kv, li, la.k, t + 1, off, dh,
                                inv_sqrt_dh, probs);
        const T* gattn = &grad_attn(t, off);
        // gp_j = <grad_attn, v_j>; dot = sum_j probs_j gp_j
        std::size_t j = 0;
        T dotsum = T(0);
        for (const auto& slice : prefix_kv.slices) {
          const Matrix<T>& Vm = slice.segment->values[li];
          for (std::size_t r = 0; r < slice.length; ++r, ++j) {
            gp[j] = detail::dot_span(gattn, &Vm(r, off), dh);
            dotsum += probs[j] * gp[j];
          }
        }
        for (std::size_t r = 0; r + S < ctx; ++r, ++j) {
          gp[j] = detail::dot_span(gattn, &la.v(r, off), dh);
          dotsum += probs[j] * gp[j];
        }
        // softmax backward, then scatter into q/k/v grads
        T* gq = &grad_q(t, off);
        const T* qv = &la.q(t, off);
        j = 0;
        for (const auto& slice : prefix_kv.slices) {
          const Matrix<T>& Km = slice.segment->keys[li];
          for (std::size_t r = 0; r < slice.length; ++r, ++j) {
            const T gs = probs[j] * (gp[j] - dotsum) * inv_sqrt_dh;
            const T* kr = &Km(r, off);
            T* gk = &grad_prefix.keys[li](j, off);
            T* gv = &grad_prefix.values[li](j, off);
            for (std::size_t c = 0; c < dh; ++c) {
              gq[c] += gs * kr[c];
              gk[c] += gs * qv[c];
              gv[c] += probs[j] * gattn[c];
            }
          }
        }
        for (std::size_t r = 0; r + S < ctx; ++r, ++j) {
          const T gs = probs[j] * (gp[j] - dotsum) * inv_sqrt_dh;
          const T* kr = &la.k(r, off);
          T* gk = &grad_k_own(r, off);
          T* gv = &grad_v_own(r, off);
          for (std::size_t c = 0; c < dh; ++c) {
            gq[c] += gs * kr[c];
            gk[c] += gs * qv[c];
            gv[c] += probs[j] * gattn[c];
          }
        }
      }
    }

    Matrix<T> normed1(len, d);
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t c = 0; c < d; ++c)
        normed1(t, c) = la.x_in(t, c) * la.inv_rms_attn[t] * lp.attn_norm_gain[c];
    accumulate_outer(gl.w_q, normed1, grad_q);
    accumulate_outer(gl.w_k, normed1, grad_k_own);
    accumulate_outer(gl.w_v, normed1, grad_v_own);
    Matrix<T> grad_normed1(len, d), tmp(len, d);
    matmul_transposed(grad_q, lp.w_q, grad_normed1);
    matmul_transposed(grad_k_own, lp.w_k, tmp);
    grad_normed1.add(tmp);
    matmul_transposed(grad_v_own, lp.w_v, tmp);
    grad_normed1.add(tmp);

    Matrix<T> gx_in = gx_mid;  // residual path
    for (std::size_t t = 0; t < len; ++t)
      rmsnorm_backward<T>(grad_normed1.row(t), la.x_in.row(t), la.inv_rms_attn[t],
                          lp.attn_norm_gain, gl.attn_norm_gain, gx_in.row(t));
    gx = std::move(gx_in);
  }

  for (std::size_t t = 0; t < len; ++t) {
    auto grow = grads.tensors.embedding.row(std::size_t(acts.tokens[t]));
    for (std::size_t c = 0; c < d; ++c) grow[c] += gx(t, c);
  }
  grads.accum_count += 1;
  return grad_prefix;
}

template <typename T>
struct LossResult {
  double loss = 0.0;
  Matrix<T> grad_logits;
};

// loss = sum_p weight_p * (-log softmax(logits_p)[target_p]); grad is exact.
// Positions with weight exactly 0 contribute nothing (gradient rows stay 0).
template <typename T>
LossResult<T> weighted_nll(const Matrix<T>& logits, std::span<const TokenId> targets,
                           std::span<const double> weights) {
  const std::size_t n = logits.rows, V = logits.cols;
  if (targets.size() != n || weights.size() != n)
    throw std::invalid_argument("weighted_nll: one target and weight per loss position");
  LossResult<T> res;
  res.grad_logits = Matrix<T>(n, V);
  for (std::size_t p = 0; p < n; ++p) {
    if (targets[p] < 0 || std::size_t(targets[p]) >= V)
      throw std::invalid_argument("weighted_nll: target id out of vocab range");
    if (!std::isfinite(weights[p]))
      throw std::invalid_argument("weighted_nll: non-finite weight");
    const double w = weights[p];
    if (w == 0.0) continue;
    auto lr = logits.row(p);
    T m = lr[0];
    for (std::size_t v = 1; v < V; ++v) m = std::max(m, lr[v]);
    T z = T(0);
    auto gr = res.grad_logits.row(p);
    for (std::size_t v = 0; v < V; ++v) {
      gr[v] = std::exp(lr[v] - m);
      z += gr[v];
    }
    const T invz = T(1) / z;
    const std::size_t tgt = std::size_t(targets[p]);
    for (std::size_t v = 0; v < V; ++v) {
      T soft = gr[v] * invz;
      gr[v] = T(w) * (soft - (v == tgt ? T(1) : T(0)));
    }
    const double lse = double(m) + std::log(double(z));
    res.loss += w * (lse - double(lr[tgt]));
  }
  return res;
}

}  // namespace treetrain

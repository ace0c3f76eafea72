#pragma once

// Time-series prefix block: z-score normalization, single-head self-attention
// over the window, a two-layer ReLU MLP per row, and a learned convex pooling
// of the T rows down to P prefix rows.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "efllm/error.hpp"
#include "efllm/rng.hpp"
#include "efllm/tensor.hpp"

namespace efllm {

// Raw multichannel window in physical units, row-major [T x C].
struct SeriesWindow {
  std::vector<double> values;
  std::vector<std::int64_t> timestamps;  // seconds since epoch
  std::vector<std::string> channels;

  std::size_t length() const { return timestamps.size(); }
  std::size_t width() const { return channels.size(); }
  double at(std::size_t t, std::size_t c) const { return values[t * width() + c]; }

  void validate() const {
    if (values.size() != length() * width()) {
      throw DimensionError("series window has " + std::to_string(values.size()) +
                           " values for " + std::to_string(length()) + "x" +
                           std::to_string(width()));
    }
    for (std::size_t t = 1; t < timestamps.size(); ++t) {
      if (timestamps[t] <= timestamps[t - 1]) throw ContractError("series timestamps must strictly increase");
    }
    for (const double v : values) {
      if (!std::isfinite(v)) throw ContractError("series window contains a missing value");
    }
  }
};

struct NormalizationParams {
  std::vector<double> mean;
  std::vector<double> stddev;
};

// Per-channel population mean/std over every row of the window.
inline NormalizationParams fit_normalization(const SeriesWindow& window) {
  window.validate();
  const std::size_t n = window.length(), c = window.width();
  if (n == 0) throw ContractError("cannot normalize an empty window");
  NormalizationParams p{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < c; ++j) p.mean[j] += window.at(t, j);
  for (auto& m : p.mean) m /= static_cast<double>(n);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = window.at(t, j) - p.mean[j];
      p.stddev[j] += d * d;
    }
  for (std::size_t j = 0; j < c; ++j) {
    p.stddev[j] = std::sqrt(p.stddev[j] / static_cast<double>(n));
    if (!(p.stddev[j] > 1e-12)) {
      throw ContractError("degenerate channel '" + window.channels[j] + "': zero variance");
    }
  }
  return p;
}

inline std::vector<double> apply_normalization(const SeriesWindow& window, const NormalizationParams& p) {
  if (p.mean.size() != window.width()) throw DimensionError("normalization params do not match channel count");
  std::vector<double> out(window.values.size());
  const std::size_t c = window.width();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (window.values[i] - p.mean[i % c]) / p.stddev[i % c];
  return out;
}

inline std::vector<double> denormalize(const std::vector<double>& z, const NormalizationParams& p) {
  const std::size_t c = p.mean.size();
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] * p.stddev[i % c] + p.mean[i % c];
  return out;
}

inline std::pair<std::vector<double>, NormalizationParams> normalize(const SeriesWindow& window) {
  auto params = fit_normalization(window);
  return {apply_normalization(window, params), std::move(params)};
}

struct PrefixConfig {
  std::size_t channels = 4;
  std::size_t window = 24;
  std::size_t key_dim = 32;
  std::size_t hidden = 64;
  std::size_t width = 32;  // model width d
  std::size_t prefix_len = 16;
  double attn_init = 1.0;    // std multiplier for the query/key projections
  double recency_init = 3.0;  // initial pooling logit on row i's own timestep
};

template <class T>
struct PrefixParams {
  BasicTensor<T> wq, wk, wv;  // [key_dim x channels]
  BasicTensor<T> w1, b1;      // [hidden x key_dim], [hidden]
  BasicTensor<T> w2, b2;      // [width x hidden], [width]
  BasicTensor<T> pool;        // [prefix_len x window] logits, softmax-normalized per row

  std::vector<std::pair<std::string, BasicTensor<T>>> named() const {
    return {{"wq", wq}, {"wk", wk}, {"wv", wv}, {"w1", w1},
            {"b1", b1}, {"w2", w2}, {"b2", b2}, {"pool", pool}};
  }
  std::vector<BasicTensor<T>> parameters() const {
    std::vector<BasicTensor<T>> out;
    for (auto& [n, t] : named()) out.push_back(t);
    return out;
  }

  static PrefixParams init(const PrefixConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    auto lin = [&](std::size_t out, std::size_t in) {
      return BasicTensor<T>::randn({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng, true);
    };
    PrefixParams p;
    p.wq = lin(cfg.key_dim, cfg.channels);
    p.wk = lin(cfg.key_dim, cfg.channels);
    for (auto* w : {&p.wq, &p.wk})
      for (auto& x : w->mutable_data()) x *= static_cast<T>(cfg.attn_init);
    p.wv = lin(cfg.key_dim, cfg.channels);
    p.w1 = lin(cfg.hidden, cfg.key_dim);
    p.b1 = BasicTensor<T>::full({cfg.hidden}, T(0.01), true);
    p.w2 = lin(cfg.width, cfg.hidden);
    p.b2 = BasicTensor<T>::full({cfg.width}, T(0.01), true);
    // pooling row i starts out focused on timestep T - P + i (or the last row
    // when P > T), so the most recent observations reach the decoder
    p.pool = BasicTensor<T>::randn({cfg.prefix_len, cfg.window}, 0.1, rng, true);
    auto pool = p.pool.mutable_data();
    for (std::size_t i = 0; i < cfg.prefix_len; ++i) {
      const std::size_t t = cfg.prefix_len <= cfg.window ? cfg.window - cfg.prefix_len + i : cfg.window - 1;
      pool[i * cfg.window + t] += static_cast<T>(cfg.recency_init);
    }
    return p;
  }

  PrefixParams clone(bool trainable) const {
    PrefixParams c;
    c.wq = wq.clone(trainable); c.wk = wk.clone(trainable); c.wv = wv.clone(trainable);
    c.w1 = w1.clone(trainable); c.b1 = b1.clone(trainable);
    c.w2 = w2.clone(trainable); c.b2 = b2.clone(trainable);
    c.pool = pool.clone(trainable);
    return c;
  }

  void set_trainable(bool on) {
    for (auto t : parameters()) t.set_requires_grad(on);
  }
};

template <class T>
struct PrefixTrace {
  BasicTensor<T> output;     // h^N [P x d]
  BasicTensor<T> attention;  // [T x T], rows sum to one
};

template <class T>
PrefixTrace<T> encode_series_traced(const BasicTensor<T>& normalized, const PrefixParams<T>& p) {
  if (normalized.dim() != 2 || normalized.cols() != p.wq.cols()) {
    throw DimensionError("window " + shape_str(normalized.shape()) + " does not match " +
                         std::to_string(p.wq.cols()) + " input channels");
  }
  if (normalized.rows() != p.pool.cols()) {
    throw DimensionError("window length " + std::to_string(normalized.rows()) +
                         " differs from configured " + std::to_string(p.pool.cols()));
  }
  const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(p.wq.rows()));
  auto q = matmul_nt(normalized, p.wq);
  auto k = matmul_nt(normalized, p.wk);
  auto v = matmul_nt(normalized, p.wv);
  auto attn = softmax(scale(matmul_nt(q, k), inv_sqrt_dk), 1);
  auto alpha = matmul(attn, v);
  auto h1 = relu(add(matmul_nt(alpha, p.w1), p.b1));
  auto h2 = relu(add(matmul_nt(h1, p.w2), p.b2));
  // convex row mixing keeps every prefix entry non-negative
  auto out = matmul(softmax(p.pool, 1), h2);
  return {out, attn};
}

// Maps a normalized [T x C] window to the numeric segment h^N [P x d].
template <class T>
BasicTensor<T> encode_series(const BasicTensor<T>& normalized, const PrefixParams<T>& p) {
  return encode_series_traced(normalized, p).output;
}

template <class T>
BasicTensor<T> window_tensor(const std::vector<double>& normalized, std::size_t rows, std::size_t cols) {
  std::vector<T> v(normalized.begin(), normalized.end());
  return BasicTensor<T>({rows, cols}, std::move(v));
}

}  // namespace efllm

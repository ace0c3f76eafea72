#pragma once

// Decoder-only transformer over a fused [numeric : placeholder : text] input,
// with a stack of low-rank adapters on the attention query and value
// projections of every layer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "efllm/error.hpp"
#include "efllm/prefix_encoder.hpp"
#include "efllm/rng.hpp"
#include "efllm/tensor.hpp"
#include "efllm/text_codec.hpp"

namespace efllm {

struct ModelConfig {
  std::size_t width = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t vocab = 0;
  std::size_t max_len = 128;
  std::size_t ff_hidden = 128;
  std::size_t rank = 4;
  double lora_init_std = 0.1;
  double embed_init_std = 0.5;
  std::size_t prefix_len = 16;
  std::size_t placeholder_len = 4;
  double placeholder_value = -1.0;
  // prefix block
  std::size_t channels = 4;
  std::size_t window = 24;
  std::size_t key_dim = 0;  // 0 means "same as width"
  std::size_t prefix_hidden = 64;
  double prefix_attn_init = 1.0;
  double prefix_recency_init = 3.0;

  PrefixConfig prefix() const {
    return {channels, window, key_dim == 0 ? width : key_dim, prefix_hidden, width, prefix_len, prefix_attn_init,
            prefix_recency_init};
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
    };
    positive(width, "width");
    positive(layers, "layers");
    positive(heads, "heads");
    positive(vocab, "vocab");
    positive(max_len, "max_len");
    positive(ff_hidden, "ff_hidden");
    positive(rank, "rank");
    positive(prefix_len, "prefix_len");
    positive(channels, "channels");
    positive(window, "window");
    positive(prefix_hidden, "prefix_hidden");
    if (width % heads != 0) throw ConfigError("model.width must be divisible by model.heads");
    if (rank > width) throw ConfigError("model.rank exceeds the adapted matrix dimensions");
    if (prefix_len + placeholder_len >= max_len) throw ConfigError("model.max_len leaves no room for text");
    if (!(placeholder_value < 0.0)) throw ConfigError("model.placeholder_value must be negative");
    if (!(lora_init_std > 0.0)) throw ConfigError("model.lora_init_std must be positive");
    if (!(embed_init_std > 0.0)) throw ConfigError("model.embed_init_std must be positive");
  }
};

struct Span {
  std::size_t begin = 0, end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const Span&) const = default;
};

template <class T>
struct FusedSequence {
  BasicTensor<T> rows;  // [(P + p + m) x d]
  Span numeric, placeholder, text;
  std::size_t length() const { return rows.rows(); }
};

// [h^N : h^P : h^T] with p constant placeholder rows. Either segment may be empty.
template <class T>
FusedSequence<T> fuse(const std::optional<BasicTensor<T>>& numeric, const BasicTensor<T>& text,
                      std::size_t placeholder_len, T placeholder_value) {
  const std::size_t d = text.cols();
  if (text.dim() != 2) throw DimensionError("text segment must be a matrix");
  if (numeric && (numeric->dim() != 2 || numeric->cols() != d)) {
    throw DimensionError("numeric segment width " + std::to_string(numeric->cols()) +
                         " differs from text width " + std::to_string(d));
  }
  std::vector<BasicTensor<T>> parts;
  const std::size_t n = numeric ? numeric->rows() : 0;
  if (n > 0) parts.push_back(*numeric);
  if (placeholder_len > 0) parts.push_back(BasicTensor<T>::full({placeholder_len, d}, placeholder_value));
  if (text.rows() > 0) parts.push_back(text);
  FusedSequence<T> seq;
  seq.rows = parts.empty() ? BasicTensor<T>::zeros({0, d}) : concat(parts, 0);
  seq.numeric = {0, n};
  seq.placeholder = {n, n + placeholder_len};
  seq.text = {n + placeholder_len, n + placeholder_len + text.rows()};
  return seq;
}

template <class T>
struct Adapter {
  std::vector<BasicTensor<T>> a;  // per slot, [out x r]
  std::vector<BasicTensor<T>> b;  // per slot, [in x r]
  std::size_t rank = 0;
  bool active = true;
  bool trainable = false;
};

// Frozen W0 for every adapted slot plus the ordered adapters applied on top.
// Slot index is layer * 2 + {0: query, 1: value}.
template <class T>
struct AdapterStack {
  std::vector<BasicTensor<T>> base;
  std::vector<Adapter<T>> adapters;

  static constexpr const char* slot_name(std::size_t slot) { return slot % 2 == 0 ? "q" : "v"; }

  std::size_t trainable_count() const {
    return static_cast<std::size_t>(std::count_if(adapters.begin(), adapters.end(),
                                                  [](const Adapter<T>& a) { return a.trainable; }));
  }

  // The effective weight of a slot with every active adapter folded in.
  BasicTensor<T> effective_weight(std::size_t slot) const {
    NoGradGuard guard;
    auto w = base[slot];
    for (const auto& ad : adapters)
      if (ad.active) w = add(w, matmul_nt(ad.a[slot], ad.b[slot]));
    return w.clone(false);
  }

  AdapterStack deep_copy() const {
    AdapterStack c;
    for (const auto& w : base) c.base.push_back(w.clone(w.requires_grad()));
    for (const auto& ad : adapters) {
      Adapter<T> n = ad;
      n.a.clear();
      n.b.clear();
      for (const auto& t : ad.a) n.a.push_back(t.clone(ad.trainable));
      for (const auto& t : ad.b) n.b.push_back(t.clone(ad.trainable));
      c.adapters.push_back(std::move(n));
    }
    return c;
  }
};

// Folds adapter `index` into W0 and removes it; the input stack is untouched.
template <class T>
AdapterStack<T> merge_adapter(const AdapterStack<T>& stack, std::size_t index) {
  if (index >= stack.adapters.size()) {
    throw IndexError("adapter index " + std::to_string(index) + " out of range (stack has " +
                     std::to_string(stack.adapters.size()) + ")");
  }
  AdapterStack<T> out = stack.deep_copy();
  const auto& ad = stack.adapters[index];
  for (std::size_t slot = 0; slot < out.base.size(); ++slot) {
    NoGradGuard guard;
    auto delta = matmul_nt(ad.a[slot], ad.b[slot]);
    auto w = out.base[slot].mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += delta.data()[i];
  }
  out.adapters.erase(out.adapters.begin() + static_cast<std::ptrdiff_t>(index));
  return out;
}

// Appends a trainable adapter with A ~ N(0, sigma^2) and B = 0, freezing the
// adapters already on the stack.
template <class T>
AdapterStack<T> push_adapter(const AdapterStack<T>& stack, std::size_t rank, std::uint64_t seed,
                             double init_std = 0.02) {
  if (stack.base.empty()) throw ContractError("adapter stack has no base weights");
  for (const auto& w : stack.base) {
    if (rank == 0 || rank > std::min(w.rows(), w.cols())) {
      throw RangeError("adapter rank " + std::to_string(rank) + " exceeds layer dimensions " +
                       shape_str(w.shape()));
    }
  }
  AdapterStack<T> out = stack.deep_copy();
  for (auto& ad : out.adapters) {
    ad.trainable = false;
    for (auto& t : ad.a) t.set_requires_grad(false);
    for (auto& t : ad.b) t.set_requires_grad(false);
  }
  Rng rng(seed);
  Adapter<T> fresh;
  fresh.rank = rank;
  fresh.active = true;
  fresh.trainable = true;
  for (const auto& w : out.base) {
    fresh.a.push_back(BasicTensor<T>::randn({w.rows(), rank}, init_std, rng, true));
    fresh.b.push_back(BasicTensor<T>::zeros({w.cols(), rank}, true));
  }
  out.adapters.push_back(std::move(fresh));
  return out;
}

template <class T>
struct LayerWeights {
  BasicTensor<T> ln1_g, ln1_b, wk, wo, ln2_g, ln2_b, ff1, ff1_b, ff2, ff2_b;
};

// Everything the adapters never touch.
template <class T>
struct BaseWeights {
  BasicTensor<T> tok_emb;  // [V x d]
  BasicTensor<T> pos_emb;  // [max_len x d]
  std::vector<LayerWeights<T>> layers;
  BasicTensor<T> lnf_g, lnf_b;
  BasicTensor<T> head;  // [V x d]

  std::vector<std::pair<std::string, BasicTensor<T>>> named() const {
    std::vector<std::pair<std::string, BasicTensor<T>>> out{{"tok_emb", tok_emb}, {"pos_emb", pos_emb}};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto p = "layer." + std::to_string(i) + ".";
      const auto& l = layers[i];
      out.insert(out.end(), {{p + "ln1.g", l.ln1_g}, {p + "ln1.b", l.ln1_b}, {p + "wk", l.wk},
                             {p + "wo", l.wo}, {p + "ln2.g", l.ln2_g}, {p + "ln2.b", l.ln2_b},
                             {p + "ff1", l.ff1}, {p + "ff1.b", l.ff1_b}, {p + "ff2", l.ff2},
                             {p + "ff2.b", l.ff2_b}});
    }
    out.insert(out.end(), {{"lnf.g", lnf_g}, {"lnf.b", lnf_b}, {"head", head}});
    return out;
  }
};

template <class T>
class BasicModel {
 public:
  BasicModel() = default;

  static BasicModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    BasicModel m;
    m.cfg_ = cfg;
    Rng rng(derive_seed(seed, 1));
    const std::size_t d = cfg.width;
    const double lin_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double out_std = lin_std / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    auto& b = m.base_;
    b.tok_emb = BasicTensor<T>::randn({cfg.vocab, d}, cfg.embed_init_std, rng, true);
    b.pos_emb = BasicTensor<T>::randn({cfg.max_len, d}, 0.1, rng, true);
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      LayerWeights<T> l;
      l.ln1_g = BasicTensor<T>::full({d}, T(1), true);
      l.ln1_b = BasicTensor<T>::zeros({d}, true);
      m.stack_.base.push_back(BasicTensor<T>::randn({d, d}, lin_std, rng, true));  // query
      l.wk = BasicTensor<T>::randn({d, d}, lin_std, rng, true);
      m.stack_.base.push_back(BasicTensor<T>::randn({d, d}, lin_std, rng, true));  // value
      l.wo = BasicTensor<T>::randn({d, d}, out_std, rng, true);
      l.ln2_g = BasicTensor<T>::full({d}, T(1), true);
      l.ln2_b = BasicTensor<T>::zeros({d}, true);
      l.ff1 = BasicTensor<T>::randn({cfg.ff_hidden, d}, lin_std, rng, true);
      l.ff1_b = BasicTensor<T>::zeros({cfg.ff_hidden}, true);
      l.ff2 = BasicTensor<T>::randn({d, cfg.ff_hidden},
                                    out_std * std::sqrt(static_cast<double>(d) / cfg.ff_hidden), rng, true);
      l.ff2_b = BasicTensor<T>::zeros({d}, true);
      b.layers.push_back(std::move(l));
    }
    b.lnf_g = BasicTensor<T>::full({d}, T(1), true);
    b.lnf_b = BasicTensor<T>::zeros({d}, true);
    b.head = BasicTensor<T>::randn({cfg.vocab, d}, lin_std, rng, true);
    m.prefixes_.push_back(PrefixParams<T>::init(cfg.prefix(), derive_seed(seed, 2)));
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const BaseWeights<T>& base() const { return base_; }
  BaseWeights<T>& base() { return base_; }
  const AdapterStack<T>& stack() const { return stack_; }
  AdapterStack<T>& stack() { return stack_; }
  void set_stack(AdapterStack<T> s) { stack_ = std::move(s); }

  const std::vector<PrefixParams<T>>& prefixes() const { return prefixes_; }
  std::vector<PrefixParams<T>>& prefixes() { return prefixes_; }
  const PrefixParams<T>& prefix() const { return prefixes_.back(); }
  PrefixParams<T>& prefix() { return prefixes_.back(); }

  void set_base_trainable(bool on) {
    for (auto& [name, t] : base_.named()) t.set_requires_grad(on);
    for (auto& w : stack_.base) w.set_requires_grad(on);
  }

  // Prefix blocks other than the newest one are frozen.
  void set_prefix_trainable(bool on) {
    for (std::size_t i = 0; i < prefixes_.size(); ++i) prefixes_[i].set_trainable(on && i + 1 == prefixes_.size());
  }

  // Copies the newest prefix block into a fresh trainable block.
  void clone_prefix() {
    prefixes_.back().set_trainable(false);
    prefixes_.push_back(prefixes_.back().clone(true));
  }

  // Parameters that receive gradient updates in the current mode.
  std::vector<BasicTensor<T>> trainable_parameters() const {
    std::vector<BasicTensor<T>> out;
    for (const auto& [n, t] : base_.named())
      if (t.requires_grad()) out.push_back(t);
    for (const auto& w : stack_.base)
      if (w.requires_grad()) out.push_back(w);
    for (const auto& p : prefixes_)
      for (const auto& t : p.parameters())
        if (t.requires_grad()) out.push_back(t);
    for (const auto& ad : stack_.adapters) {
      if (!ad.trainable) continue;
      for (const auto& t : ad.a) out.push_back(t);
      for (const auto& t : ad.b) out.push_back(t);
    }
    return out;
  }

  BasicModel deep_copy() const {
    BasicModel c;
    c.cfg_ = cfg_;
    c.base_ = copy_base(base_);
    c.stack_ = stack_.deep_copy();
    for (const auto& p : prefixes_) {
      auto q = p.clone(false);
      for (std::size_t i = 0; i < q.parameters().size(); ++i) {
        auto t = q.parameters()[i];
        t.set_requires_grad(p.parameters()[i].requires_grad());
      }
      c.prefixes_.push_back(q);
    }
    return c;
  }

 private:
  static BaseWeights<T> copy_base(const BaseWeights<T>& b) {
    auto cp = [](const BasicTensor<T>& t) { return t.clone(t.requires_grad()); };
    BaseWeights<T> o;
    o.tok_emb = cp(b.tok_emb);
    o.pos_emb = cp(b.pos_emb);
    for (const auto& l : b.layers) {
      o.layers.push_back({cp(l.ln1_g), cp(l.ln1_b), cp(l.wk), cp(l.wo), cp(l.ln2_g), cp(l.ln2_b),
                          cp(l.ff1), cp(l.ff1_b), cp(l.ff2), cp(l.ff2_b)});
    }
    o.lnf_g = cp(b.lnf_g);
    o.lnf_b = cp(b.lnf_b);
    o.head = cp(b.head);
    return o;
  }

  ModelConfig cfg_;
  BaseWeights<T> base_;
  AdapterStack<T> stack_;
  std::vector<PrefixParams<T>> prefixes_;
};

using Model = BasicModel<float>;
using ModelD = BasicModel<double>;

// x (W0 + sum_active A_j B_j^T)^T, computed without forming the sum.
template <class T>
BasicTensor<T> adapted_linear(const BasicTensor<T>& x, const AdapterStack<T>& stack, std::size_t slot) {
  auto y = matmul_nt(x, stack.base[slot]);
  for (const auto& ad : stack.adapters)
    if (ad.active) y = add(y, matmul_nt(matmul(x, ad.b[slot]), ad.a[slot]));
  return y;
}

// Causal transformer over fused rows. With `last_only` only the final
// position's logits are produced.
template <class T>
BasicTensor<T> forward(const ModelConfig& cfg, const BaseWeights<T>& base, const AdapterStack<T>& stack,
                       const FusedSequence<T>& seq, bool last_only = false) {
  const std::size_t n = seq.length();
  if (n == 0) throw ContractError("forward on an empty sequence");
  if (n > cfg.max_len) {
    throw LengthError("sequence length " + std::to_string(n) + " exceeds max_len " + std::to_string(cfg.max_len));
  }
  if (stack.base.size() != 2 * cfg.layers) throw DimensionError("adapter stack does not match layer count");
  const std::size_t d = cfg.width, dh = d / cfg.heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  auto x = add(seq.rows, slice(base.pos_emb, 0, 0, n));
  for (std::size_t li = 0; li < cfg.layers; ++li) {
    const auto& l = base.layers[li];
    auto h = layer_norm(x, l.ln1_g, l.ln1_b);
    auto q = adapted_linear(h, stack, 2 * li);
    auto k = matmul_nt(h, l.wk);
    auto v = adapted_linear(h, stack, 2 * li + 1);
    std::vector<BasicTensor<T>> heads;
    for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
      auto qh = cfg.heads == 1 ? q : slice(q, 1, hd * dh, (hd + 1) * dh);
      auto kh = cfg.heads == 1 ? k : slice(k, 1, hd * dh, (hd + 1) * dh);
      auto vh = cfg.heads == 1 ? v : slice(v, 1, hd * dh, (hd + 1) * dh);
      auto probs = causal_softmax(scale(matmul_nt(qh, kh), inv_sqrt));
      heads.push_back(matmul(probs, vh));
    }
    auto att = cfg.heads == 1 ? heads[0] : concat(heads, 1);
    x = add(x, matmul_nt(att, l.wo));
    auto h2 = layer_norm(x, l.ln2_g, l.ln2_b);
    auto f = add(matmul_nt(relu(add(matmul_nt(h2, l.ff1), l.ff1_b)), l.ff2), l.ff2_b);
    x = add(x, f);
  }
  if (last_only) x = slice(x, 0, n - 1, n);
  return matmul_nt(layer_norm(x, base.lnf_g, base.lnf_b), base.head);
}

template <class T>
BasicTensor<T> forward(const BasicModel<T>& model, const FusedSequence<T>& seq, bool last_only = false) {
  return forward(model.config(), model.base(), model.stack(), seq, last_only);
}

// Builds the fused input for an optional normalized window and text ids.
template <class T>
FusedSequence<T> build_input(const BasicModel<T>& model, const std::optional<BasicTensor<T>>& window,
                             std::span<const std::size_t> ids) {
  std::optional<BasicTensor<T>> numeric;
  if (window) numeric = encode_series(*window, model.prefix());
  return fuse(numeric, embedding(model.base().tok_emb, ids), model.config().placeholder_len,
              static_cast<T>(model.config().placeholder_value));
}

struct DecodeOptions {
  enum class Mode { greedy, sample };
  Mode mode = Mode::greedy;
  double temperature = 0.7;
  std::size_t max_new_tokens = 32;
  std::uint64_t seed = 0;

  static DecodeOptions greedy(std::size_t max_new = 32) { return {Mode::greedy, 0.0, max_new, 0}; }
  static DecodeOptions sample(double temperature, std::uint64_t seed, std::size_t max_new = 32) {
    return {Mode::sample, temperature, max_new, seed};
  }
};

// Picks a token id from one row of logits.
template <class T>
std::size_t pick_token(std::span<const T> logits, const DecodeOptions& opt, Rng& rng) {
  const auto best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  if (opt.mode == DecodeOptions::Mode::greedy || opt.temperature <= 0.0) return best;
  const double mx = static_cast<double>(logits[best]);
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp((static_cast<double>(logits[i]) - mx) / opt.temperature);
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < p.size(); ++i) {
    u -= p[i];
    if (u < 0.0) return i;
  }
  return best;
}

// Autoregressive decoding after `prompt_ids` until EOS, the token budget, or
// max_len. Returns the generated ids without the prompt and without EOS.
template <class T>
TokenSequence generate(const BasicModel<T>& model, const std::optional<BasicTensor<T>>& window,
                       std::vector<std::size_t> prompt_ids, const DecodeOptions& opt) {
  NoGradGuard guard;
  Rng rng(opt.seed);
  std::optional<BasicTensor<T>> numeric;
  if (window) numeric = encode_series(*window, model.prefix());
  const auto& cfg = model.config();
  const std::size_t fixed = (numeric ? numeric->rows() : 0) + cfg.placeholder_len;
  TokenSequence out;
  std::vector<std::size_t> ids = std::move(prompt_ids);
  while (out.ids.size() < opt.max_new_tokens && fixed + ids.size() < cfg.max_len) {
    auto seq = fuse(numeric, embedding(model.base().tok_emb, std::span<const std::size_t>(ids)),
                    cfg.placeholder_len, static_cast<T>(cfg.placeholder_value));
    auto logits = forward(model, seq, true);
    const auto next = pick_token<T>(logits.data(), opt, rng);
    if (next == Vocabulary::kEosId) break;
    out.ids.push_back(next);
    ids.push_back(next);
  }
  return out;
}

}  // namespace efllm

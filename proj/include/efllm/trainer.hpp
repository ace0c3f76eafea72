#pragma once

// Fine-tuning: the two-span sequence loss with a low-rank Frobenius penalty,
// mixed text-only / multimodal batch scheduling, Adam, and adapter stacking
// for continual updates.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "efllm/error.hpp"
#include "efllm/fusion_model.hpp"
#include "efllm/prefix_encoder.hpp"
#include "efllm/rng.hpp"
#include "efllm/tensor.hpp"
#include "efllm/text_codec.hpp"

namespace efllm {

enum class Mode { text, multimodal };

inline const char* mode_name(Mode m) { return m == Mode::text ? "mode1-text" : "mode2-multimodal"; }

// Token ranges (over the text token sequence) scored by the two task losses.
struct TaskSpan {
  Span task1, task2;
  double weight = 1.0;

  void validate() const {
    if (task1.size() == 0 && task2.size() == 0) throw ContractError("both task spans are empty");
    if (weight < 0.0 || weight > 1.0) throw ContractError("task weight must lie in [0, 1]");
    const bool overlap = task1.size() > 0 && task2.size() > 0 && task1.begin < task2.end && task2.begin < task1.end;
    if (overlap) throw ContractError("task spans overlap");
  }
};

inline constexpr std::string_view kTaskDelimiter = ";";

struct TrainingExample {
  Mode mode = Mode::multimodal;
  std::optional<SeriesWindow> window;  // absent for text-only examples
  std::vector<double> normalized;      // window after dataset-level normalization
  std::string prompt;
  std::string answer;
  std::string supplement;  // weather text at the forecast instant, used by two-step prompts
  double target = 0.0;
  std::size_t label_class = 0;
  std::int64_t timestamp = 0;
};

struct EncodedExample {
  std::vector<std::size_t> ids;  // BOS prompt answer EOS
  std::size_t answer_begin = 0;
  TaskSpan span;
  std::optional<std::vector<double>> window;
  std::size_t window_rows = 0, window_cols = 0;
  Mode mode = Mode::multimodal;

  template <class T>
  std::optional<BasicTensor<T>> window_tensor() const {
    if (!window) return std::nullopt;
    return efllm::window_tensor<T>(*window, window_rows, window_cols);
  }
};

inline std::vector<std::size_t> prompt_ids(std::string_view prompt, const Vocabulary& vocab) {
  std::vector<std::size_t> ids{Vocabulary::kBosId};
  const auto p = tokenize(prompt, vocab);
  ids.insert(ids.end(), p.ids.begin(), p.ids.end());
  return ids;
}

// Tokenizes an example. The answer splits at the first delimiter token: the
// part before it is task 1, the delimiter onward (through EOS) is task 2. An
// answer without the delimiter is scored entirely as task 1 with weight 1.
inline EncodedExample encode(const TrainingExample& ex, const Vocabulary& vocab, double task_weight) {
  if (ex.mode == Mode::text && ex.window) throw ContractError("text-only example carries a series window");
  if (ex.mode == Mode::multimodal && !ex.window) throw ContractError("multimodal example lacks a series window");
  EncodedExample e;
  e.mode = ex.mode;
  e.ids = prompt_ids(ex.prompt, vocab);
  e.answer_begin = e.ids.size();
  const auto a = tokenize(ex.answer, vocab);
  e.ids.insert(e.ids.end(), a.ids.begin(), a.ids.end());
  e.ids.push_back(Vocabulary::kEosId);
  const std::size_t end = e.ids.size();
  const auto delim = vocab.find(kTaskDelimiter);
  std::size_t split = end;
  for (std::size_t i = e.answer_begin; delim && i < end; ++i)
    if (e.ids[i] == *delim) {
      split = i;
      break;
    }
  if (split == end || split == e.answer_begin) {
    e.span = {{e.answer_begin, end}, {end, end}, 1.0};
  } else {
    e.span = {{e.answer_begin, split}, {split, end}, task_weight};
  }
  e.span.validate();
  if (ex.window) {
    e.window = ex.normalized;
    e.window_rows = ex.window->length();
    e.window_cols = ex.window->width();
    if (e.window->size() != e.window_rows * e.window_cols) throw DimensionError("normalized window size mismatch");
  }
  return e;
}

template <class T>
struct LossBreakdown {
  BasicTensor<T> total;
  double task1 = 0.0, task2 = 0.0, frobenius = 0.0;
};

// Summed NLL of text tokens in `span`, given logits for the fused sequence
// whose text segment starts at `text_offset`.
template <class T>
BasicTensor<T> span_nll(const BasicTensor<T>& logits, const std::vector<std::size_t>& ids, Span span,
                        std::size_t text_offset) {
  if (span.size() == 0) return BasicTensor<T>::scalar(T(0));
  if (span.begin == 0 || span.end > ids.size()) throw IndexError("task span outside the token sequence");
  auto rows = slice(logits, 0, text_offset + span.begin - 1, text_offset + span.end - 1);
  return cross_entropy(rows, std::span<const std::size_t>(ids.data() + span.begin, span.size()));
}

// L = w * L1 + (1 - w) * L2 + lambda * sum over trainable adapters of ||A B^T||_F^2
template <class T>
LossBreakdown<T> multitask_loss(const BasicTensor<T>& logits, const EncodedExample& ex, const AdapterStack<T>& stack,
                                double lambda, std::size_t text_offset) {
  ex.span.validate();
  auto l1 = span_nll(logits, ex.ids, ex.span.task1, text_offset);
  auto l2 = span_nll(logits, ex.ids, ex.span.task2, text_offset);
  const T w = static_cast<T>(ex.span.weight);
  auto total = add(scale(l1, w), scale(l2, T(1) - w));
  double frob = 0.0;
  if (lambda > 0.0) {
    for (const auto& ad : stack.adapters) {
      if (!ad.trainable) continue;
      for (std::size_t s = 0; s < ad.a.size(); ++s) {
        auto f = lowrank_frobenius_sq(ad.a[s], ad.b[s]);
        frob += static_cast<double>(f.item());
        total = add(total, scale(f, static_cast<T>(lambda)));
      }
    }
  }
  return {total, static_cast<double>(l1.item()), static_cast<double>(l2.item()), frob};
}

template <class T>
std::size_t text_offset_for(const BasicModel<T>& model, const EncodedExample& ex) {
  return (ex.window ? model.config().prefix_len : 0) + model.config().placeholder_len;
}

// Forward pass plus loss for one example.
template <class T>
LossBreakdown<T> example_loss(const BasicModel<T>& model, const EncodedExample& ex, double lambda) {
  const auto seq = build_input(model, ex.window_tensor<T>(), std::span<const std::size_t>(ex.ids));
  const auto logits = forward(model, seq);
  return multitask_loss(logits, ex, model.stack(), lambda, seq.text.begin);
}

// One epoch of mini-batches: a seeded shuffle of every example index, so text
// and multimodal examples are interleaved and each appears exactly once.
inline std::vector<std::vector<std::size_t>> align_batches(const std::vector<Mode>& modes, std::uint64_t seed,
                                                           std::size_t batch_size = 1) {
  if (modes.empty()) throw ContractError("cannot schedule an empty dataset");
  if (batch_size == 0) throw ContractError("batch size must be positive");
  std::vector<std::size_t> order(modes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(i + batch_size, order.size())));
  }
  return batches;
}

struct TrainConfig {
  double lr = 1e-3;
  double prefix_lr = 0.0;  // 0 means "same as lr"
  std::size_t epochs = 3;
  std::size_t batch_size = 1;
  double lambda = 0.0;
  double task_weight = 0.5;
  std::uint64_t seed = 42;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("train.lr must be non-negative");
    if (!(prefix_lr >= 0.0)) throw ConfigError("train.prefix_lr must be non-negative");
    if (lambda < 0.0) throw ConfigError("train.lambda must be non-negative");
    if (task_weight < 0.0 || task_weight > 1.0) throw ConfigError("train.task_weight must lie in [0, 1]");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  }
};

template <class T>
class Adam {
 public:
  // `rates` gives a per-parameter learning rate; empty means cfg.lr throughout.
  Adam(std::vector<BasicTensor<T>> params, const TrainConfig& cfg, std::vector<double> rates = {})
      : params_(std::move(params)), cfg_(cfg), rates_(std::move(rates)) {
    if (rates_.empty()) rates_.assign(params_.size(), cfg.lr);
    if (rates_.size() != params_.size()) throw ContractError("one learning rate per parameter expected");
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      const auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * gi;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * gi * gi;
        const double update = rates_[k] * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + cfg_.eps);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
      }
    }
  }

 private:
  std::vector<BasicTensor<T>> params_;
  TrainConfig cfg_;
  std::vector<double> rates_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct LossRecord {
  std::size_t epoch = 0, step = 0;
  double loss = 0.0, task1 = 0.0, task2 = 0.0, frobenius = 0.0;
};

struct TrainResult {
  std::vector<LossRecord> steps;
  std::vector<double> epoch_mean;
};

namespace detail {

template <class T, class LossFn>
TrainResult run_epochs(BasicModel<T>& model, const std::vector<Mode>& modes, const TrainConfig& cfg, LossFn&& loss_of) {
  cfg.validate();
  const auto params = model.trainable_parameters();
  std::vector<double> rates(params.size(), cfg.lr);
  if (cfg.prefix_lr > 0.0) {
    for (std::size_t i = 0; i < params.size(); ++i)
      for (const auto& t : model.prefix().parameters())
        if (t.node() == params[i].node()) rates[i] = cfg.prefix_lr;
  }
  Adam<T> opt(params, cfg, rates);
  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_sum = 0.0;
    std::size_t count = 0;
    for (const auto& batch : align_batches(modes, derive_seed(cfg.seed, epoch), cfg.batch_size)) {
      opt.zero_grad();
      LossRecord rec{epoch, step, 0.0, 0.0, 0.0, 0.0};
      try {
        for (const auto idx : batch) {
          auto lb = loss_of(idx);
          auto scaled = scale(lb.total, T(1) / static_cast<T>(batch.size()));
          backward(scaled);
          rec.loss += static_cast<double>(lb.total.item());
          rec.task1 += lb.task1;
          rec.task2 += lb.task2;
          rec.frobenius += lb.frobenius;
        }
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step) + ": " + e.what());
      }
      const double n = static_cast<double>(batch.size());
      rec.loss /= n;
      rec.task1 /= n;
      rec.task2 /= n;
      rec.frobenius /= n;
      if (!std::isfinite(rec.loss)) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      }
      opt.step();
      result.steps.push_back(rec);
      epoch_sum += rec.loss * n;
      count += batch.size();
      ++step;
    }
    result.epoch_mean.push_back(epoch_sum / static_cast<double>(count));
  }
  return result;
}

}  // namespace detail

// F-PEFT: Adam on the newest prefix block and the single trainable adapter.
// Base weights and the token embedding table stay frozen.
template <class T>
TrainResult train(BasicModel<T>& model, const std::vector<EncodedExample>& data, const TrainConfig& cfg) {
  if (data.empty()) throw ContractError("training set is empty");
  const auto trainable = model.stack().trainable_count();
  if (trainable != 1) {
    throw ContractError("fine-tuning needs exactly one trainable adapter, found " + std::to_string(trainable));
  }
  for (const auto& ad : model.stack().adapters)
    if (!ad.trainable)
      for (const auto& t : ad.a)
        if (t.requires_grad()) throw ContractError("frozen adapter has trainable tensors");
  model.set_base_trainable(false);
  model.set_prefix_trainable(true);
  std::vector<Mode> modes;
  for (const auto& e : data) modes.push_back(e.mode);
  return detail::run_epochs(model, modes, cfg, [&](std::size_t i) { return example_loss(model, data[i], cfg.lambda); });
}

// Stacks a fresh adapter on top of the (frozen) fine-tuned model and trains
// only that adapter, plus a cloned prefix block when requested.
template <class T>
TrainResult continual_update(BasicModel<T>& model, const std::vector<EncodedExample>& data, const TrainConfig& cfg,
                             bool clone_prefix = true) {
  if (model.stack().adapters.empty()) {
    throw ContractError("continual update needs a fine-tuned model with at least one adapter");
  }
  model.set_stack(push_adapter(model.stack(), model.config().rank, derive_seed(cfg.seed, 77),
                               model.config().lora_init_std));
  model.set_base_trainable(false);
  if (clone_prefix) {
    model.clone_prefix();
  } else {
    for (auto& p : model.prefixes()) p.set_trainable(false);
  }
  if (data.empty()) return {};
  const auto trainable = model.stack().trainable_count();
  if (trainable != 1) throw ContractError("continual update expects exactly one trainable adapter");
  std::vector<Mode> modes;
  for (const auto& e : data) modes.push_back(e.mode);
  return detail::run_epochs(model, modes, cfg, [&](std::size_t i) { return example_loss(model, data[i], cfg.lambda); });
}

// Base-model pretraining. Plain-text sentences train every base weight; each
// is placed after a seeded number of placeholder rows so that all positions
// the fine-tuned layout uses get trained. Optional series-grounded examples
// (scored over the whole answer) additionally train the prefix block, giving
// the base a pretrained reading of the numeric segment.
template <class T>
TrainResult pretrain(BasicModel<T>& model, const std::vector<std::vector<std::size_t>>& corpus,
                     const std::vector<EncodedExample>& grounded, const TrainConfig& cfg) {
  if (corpus.empty() && grounded.empty()) throw ContractError("pretraining corpus is empty");
  if (!model.stack().adapters.empty()) throw ContractError("pretraining expects a model without adapters");
  model.set_base_trainable(true);
  model.set_prefix_trainable(!grounded.empty());
  const auto& mc = model.config();
  const std::size_t max_offset = mc.prefix_len + mc.placeholder_len;
  std::vector<Mode> modes(corpus.size(), Mode::text);
  for (const auto& g : grounded) modes.push_back(g.mode);
  Rng offsets(derive_seed(cfg.seed, 99));
  auto result = detail::run_epochs(model, modes, cfg, [&](std::size_t i) {
    if (i >= corpus.size()) {
      EncodedExample ex = grounded[i - corpus.size()];
      ex.span = {{ex.answer_begin, ex.ids.size()}, {ex.ids.size(), ex.ids.size()}, 1.0};
      return example_loss(model, ex, 0.0);
    }
    const auto& ids = corpus[i];
    std::size_t offset = offsets.below(max_offset + 1);
    if (offset + ids.size() > mc.max_len) offset = mc.max_len > ids.size() ? mc.max_len - ids.size() : 0;
    auto text = embedding(model.base().tok_emb, std::span<const std::size_t>(ids));
    auto seq = fuse(std::optional<BasicTensor<T>>{}, text, offset, static_cast<T>(mc.placeholder_value));
    auto logits = forward(model, seq);
    EncodedExample ex;
    ex.ids = ids;
    ex.span = {{1, ids.size()}, {ids.size(), ids.size()}, 1.0};
    return multitask_loss(logits, ex, model.stack(), 0.0, seq.text.begin);
  });
  model.set_base_trainable(false);
  model.set_prefix_trainable(false);
  return result;
}

template <class T>
TrainResult pretrain(BasicModel<T>& model, const std::vector<std::vector<std::size_t>>& corpus, const TrainConfig& cfg) {
  return pretrain(model, corpus, {}, cfg);
}

inline void write_loss_csv(const TrainResult& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write loss curve " + path);
  out << "epoch,step,loss,loss_task1,loss_task2,frob_penalty\n";
  char buf[256];
  for (const auto& s : r.steps) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.6f,%.6f,%.6f,%.8f\n", s.epoch, s.step, s.loss, s.task1, s.task2,
                  s.frobenius);
    out << buf;
  }
  if (!out) throw IoError("failed writing loss curve " + path);
}

}  // namespace efllm

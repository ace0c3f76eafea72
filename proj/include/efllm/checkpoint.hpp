#pragma once

// Binary tensor container ("EFLM" v1) and model checkpoint directories.
//
// Layout, all integers little-endian:
//   "EFLM" | u32 version=1 | u32 count |
//   count x ( u16 name_len | name bytes | u8 rank | rank x u32 dim | f32 data... )
//
// A checkpoint directory holds model.eflm, vocab.txt and model.ini (model
// config, adapter flags, prefix block count).

#include <openssl/evp.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "efllm/config.hpp"
#include "efllm/error.hpp"
#include "efllm/fusion_model.hpp"
#include "efllm/tensor.hpp"
#include "efllm/text_codec.hpp"

namespace efllm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw IoError("truncated checkpoint");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return static_cast<U>(v);
}

}  // namespace detail

inline std::string encode_tensors(const std::vector<TensorRecord>& records) {
  std::string out = "EFLM";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (r.name.size() > 0xFFFF) throw IoError("tensor name too long: " + r.name);
    if (r.shape.size() > 0xFF) throw IoError("tensor rank too large: " + r.name);
    if (numel_of(r.shape) != r.data.size()) throw DimensionError("record " + r.name + " has inconsistent shape");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
    out += r.name;
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(r.shape.size()));
    for (const auto d : r.shape) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (const float f : r.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      detail::put_le<std::uint32_t>(out, bits);
    }
  }
  return out;
}

inline std::vector<TensorRecord> decode_tensors(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, "EFLM") != 0) throw IoError("not an EFLM checkpoint");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(bytes, pos);
  std::vector<TensorRecord> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    TensorRecord r;
    const auto len = detail::get_le<std::uint16_t>(bytes, pos);
    if (pos + len > bytes.size()) throw IoError("truncated checkpoint");
    r.name = bytes.substr(pos, len);
    pos += len;
    const auto rank = detail::get_le<std::uint8_t>(bytes, pos);
    for (std::uint8_t i = 0; i < rank; ++i) r.shape.push_back(detail::get_le<std::uint32_t>(bytes, pos));
    r.data.resize(numel_of(r.shape));
    for (auto& f : r.data) {
      const auto bits = detail::get_le<std::uint32_t>(bytes, pos);
      std::memcpy(&f, &bits, sizeof f);
    }
    out.push_back(std::move(r));
  }
  if (pos != bytes.size()) throw IoError("trailing bytes after checkpoint records");
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << bytes;
  if (!out) throw IoError("failed writing " + path);
}

inline std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

inline std::string tensor_sha256(const Tensor& t) {
  return sha256_hex(t.data().data(), t.numel() * sizeof(float));
}

// Every model tensor under its checkpoint name, in a fixed order.
inline std::vector<std::pair<std::string, Tensor>> named_tensors(const Model& model) {
  auto out = model.base().named();
  const auto& stack = model.stack();
  for (std::size_t slot = 0; slot < stack.base.size(); ++slot) {
    out.emplace_back("layer." + std::to_string(slot / 2) + "." + AdapterStack<float>::slot_name(slot) + ".W0",
                     stack.base[slot]);
  }
  for (std::size_t k = 0; k < stack.adapters.size(); ++k) {
    const auto& ad = stack.adapters[k];
    for (std::size_t slot = 0; slot < ad.a.size(); ++slot) {
      const auto p = "lora." + std::to_string(slot / 2) + "." + AdapterStack<float>::slot_name(slot) + ".";
      out.emplace_back(p + "A." + std::to_string(k), ad.a[slot]);
      out.emplace_back(p + "B." + std::to_string(k), ad.b[slot]);
    }
  }
  for (std::size_t k = 0; k < model.prefixes().size(); ++k)
    for (const auto& [n, t] : model.prefixes()[k].named()) out.emplace_back("prefix." + std::to_string(k) + "." + n, t);
  return out;
}

// SHA-256 of every tensor's raw bytes, keyed by checkpoint name.
inline std::map<std::string, std::string> tensor_digests(const Model& model) {
  std::map<std::string, std::string> out;
  for (const auto& [n, t] : named_tensors(model)) out[n] = tensor_sha256(t);
  return out;
}

inline IniFile model_config_ini(const ModelConfig& c) {
  IniFile ini;
  auto sz = [&](const char* k, std::size_t v) { ini.set(std::string("model.") + k, std::to_string(v)); };
  sz("width", c.width);
  sz("layers", c.layers);
  sz("heads", c.heads);
  sz("vocab", c.vocab);
  sz("max_len", c.max_len);
  sz("ff_hidden", c.ff_hidden);
  sz("rank", c.rank);
  ini.set("model.lora_init_std", format_double(c.lora_init_std));
  ini.set("model.embed_init_std", format_double(c.embed_init_std));
  sz("prefix_len", c.prefix_len);
  sz("placeholder_len", c.placeholder_len);
  ini.set("model.placeholder_value", format_double(c.placeholder_value));
  ini.set("model.prefix_attn_init", format_double(c.prefix_attn_init));
  ini.set("model.prefix_recency_init", format_double(c.prefix_recency_init));
  sz("channels", c.channels);
  sz("window", c.window);
  sz("key_dim", c.key_dim);
  sz("prefix_hidden", c.prefix_hidden);
  return ini;
}

inline ModelConfig model_config_from(const IniFile& ini, ModelConfig c = {}) {
  c.width = ini.get_size("model.width", c.width);
  c.layers = ini.get_size("model.layers", c.layers);
  c.heads = ini.get_size("model.heads", c.heads);
  c.vocab = ini.get_size("model.vocab", c.vocab);
  c.max_len = ini.get_size("model.max_len", c.max_len);
  c.ff_hidden = ini.get_size("model.ff_hidden", c.ff_hidden);
  c.rank = ini.get_size("model.rank", c.rank);
  c.lora_init_std = ini.get_double("model.lora_init_std", c.lora_init_std);
  c.embed_init_std = ini.get_double("model.embed_init_std", c.embed_init_std);
  c.prefix_len = ini.get_size("model.prefix_len", c.prefix_len);
  c.placeholder_len = ini.get_size("model.placeholder_len", c.placeholder_len);
  c.placeholder_value = ini.get_double("model.placeholder_value", c.placeholder_value);
  c.prefix_attn_init = ini.get_double("model.prefix_attn_init", c.prefix_attn_init);
  c.prefix_recency_init = ini.get_double("model.prefix_recency_init", c.prefix_recency_init);
  c.channels = ini.get_size("model.channels", c.channels);
  c.window = ini.get_size("model.window", c.window);
  c.key_dim = ini.get_size("model.key_dim", c.key_dim);
  c.prefix_hidden = ini.get_size("model.prefix_hidden", c.prefix_hidden);
  return c;
}

struct Checkpoint {
  Model model;
  Vocabulary vocab;
};

inline void save_checkpoint(const Model& model, const Vocabulary& vocab, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::vector<TensorRecord> records;
  for (const auto& [n, t] : named_tensors(model)) records.push_back({n, t.shape(), {t.data().begin(), t.data().end()}});
  write_file(dir + "/model.eflm", encode_tensors(records));
  save_vocab(vocab, dir + "/vocab.txt");
  auto ini = model_config_ini(model.config());
  ini.set("checkpoint.version", std::to_string(kCheckpointVersion));
  ini.set("checkpoint.adapters", std::to_string(model.stack().adapters.size()));
  ini.set("checkpoint.prefix_blocks", std::to_string(model.prefixes().size()));
  for (std::size_t k = 0; k < model.stack().adapters.size(); ++k) {
    const auto& ad = model.stack().adapters[k];
    const auto p = "adapter_" + std::to_string(k) + ".";
    ini.set(p + "rank", std::to_string(ad.rank));
    ini.set(p + "active", ad.active ? "1" : "0");
    ini.set(p + "trainable", ad.trainable ? "1" : "0");
  }
  ini.save(dir + "/model.ini");
}

inline Checkpoint load_checkpoint(const std::string& dir) {
  const auto ini = IniFile::load(dir + "/model.ini");
  if (ini.get_size("checkpoint.version", 0) != kCheckpointVersion) throw IoError("checkpoint version mismatch in " + dir);
  const auto cfg = model_config_from(ini);
  auto vocab = load_vocab(dir + "/vocab.txt");
  if (vocab.size() != cfg.vocab) throw IoError("vocabulary size does not match model config in " + dir);
  Model model = Model::init(cfg, 0);
  const std::size_t n_adapters = ini.get_size("checkpoint.adapters", 0);
  for (std::size_t k = 0; k < n_adapters; ++k) {
    const auto p = "adapter_" + std::to_string(k) + ".";
    model.set_stack(push_adapter(model.stack(), ini.get_size(p + "rank", cfg.rank), 0));
  }
  auto& stack = model.stack();
  for (std::size_t k = 0; k < n_adapters; ++k) {
    const auto p = "adapter_" + std::to_string(k) + ".";
    stack.adapters[k].active = ini.get_bool(p + "active", true);
    stack.adapters[k].trainable = ini.get_bool(p + "trainable", false);
  }
  for (std::size_t k = 1; k < ini.get_size("checkpoint.prefix_blocks", 1); ++k) model.clone_prefix();
  std::map<std::string, TensorRecord> by_name;
  for (auto& r : decode_tensors(read_file(dir + "/model.eflm"))) by_name[r.name] = std::move(r);
  auto targets = named_tensors(model);
  if (targets.size() != by_name.size()) throw IoError("checkpoint tensor count does not match its config");
  for (auto& [n, t] : targets) {
    auto it = by_name.find(n);
    if (it == by_name.end()) throw IoError("checkpoint lacks tensor " + n);
    if (it->second.shape != t.shape()) throw IoError("tensor " + n + " has shape " + shape_str(it->second.shape));
    auto dst = t.mutable_data();
    std::copy(it->second.data.begin(), it->second.data.end(), dst.begin());
  }
  for (auto& ad : stack.adapters) {
    for (auto& t : ad.a) t.set_requires_grad(ad.trainable);
    for (auto& t : ad.b) t.set_requires_grad(ad.trainable);
  }
  model.set_base_trainable(false);
  model.set_prefix_trainable(false);
  return {std::move(model), std::move(vocab)};
}

}  // namespace efllm

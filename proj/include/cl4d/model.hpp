#pragma once

// Decoder-only transformer dual encoder. One parameter store serves both the
// query and the code side. Pre-norm blocks, learned positions, causal
// attention; pooling and padding behavior follow the configured policy:
//
//   Masked  pads are key-masked, positions count real tokens only, pooling
//           sees real positions. Embeddings are pad-amount invariant.
//   Naive   pads are ordinary tokens at physical positions; pooling sees the
//           physical sequence. Pad side changes the representation.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cl4d/common.hpp"
#include "cl4d/tensor.hpp"
#include "cl4d/tokenizer.hpp"

namespace cl4d::model {

enum class Pooling { Last, Mean };
enum class PadPolicy { Masked, Naive };

inline std::string pooling_name(Pooling p) {
  return p == Pooling::Last ? "last" : "mean";
}
inline Pooling pooling_from_name(std::string_view s) {
  if (s == "last") return Pooling::Last;
  if (s == "mean") return Pooling::Mean;
  throw ConfigError("unknown pooling '" + std::string(s) + "'");
}
inline std::string pad_policy_name(PadPolicy p) {
  return p == PadPolicy::Masked ? "masked" : "naive";
}
inline PadPolicy pad_policy_from_name(std::string_view s) {
  if (s == "masked") return PadPolicy::Masked;
  if (s == "naive") return PadPolicy::Naive;
  throw ConfigError("unknown pad policy '" + std::string(s) + "'");
}

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 64;
  int d_ff = 256;
  int vocab_size = 4096;
  int max_len = 64;
  Pooling pooling = Pooling::Mean;
  bpe::PadSide pad_side = bpe::PadSide::Right;
  PadPolicy pad_policy = PadPolicy::Masked;
  std::uint64_t seed = 0;

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
      throw ConfigError("d_model must be a positive multiple of n_heads");
    if (max_len < 3) throw ConfigError("max_len must be >= 3");
    if (n_layers <= 0 || d_ff <= 0 || vocab_size <= bpe::kNumSpecials)
      throw ConfigError("bad model dimensions");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["n_layers"] = n_layers;
    j["n_heads"] = n_heads;
    j["d_model"] = d_model;
    j["d_ff"] = d_ff;
    j["vocab_size"] = vocab_size;
    j["max_len"] = max_len;
    j["pooling"] = pooling_name(pooling);
    j["pad_side"] = bpe::pad_side_name(pad_side);
    j["pad_policy"] = pad_policy_name(pad_policy);
    j["seed"] = seed;
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.pooling = pooling_from_name(j.at("pooling").get<std::string>());
    c.pad_side = bpe::pad_side_from_name(j.at("pad_side").get<std::string>());
    c.pad_policy = pad_policy_from_name(j.at("pad_policy").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Parameters: flat named tensor store in a documented fixed order. The order
// defines the checkpoint blob layout.
// ---------------------------------------------------------------------------

template <typename Real>
struct Parameters {
  struct LayerIndex {
    std::size_t ln1_gain, ln1_bias;
    std::size_t wq, wk, wv, wo;
    std::size_t ln2_gain, ln2_bias;
    std::size_t w1, b1, w2, b2;
  };

  std::vector<std::string> names;
  std::vector<tensor::Shape> shapes;
  std::vector<std::vector<Real>> values;

  std::size_t tok_embedding = 0, pos_embedding = 0;
  std::vector<LayerIndex> layers;
  std::size_t final_gain = 0, final_bias = 0;

  std::size_t tensor_count() const { return values.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values) n += v.size();
    return n;
  }

  static Parameters layout(const ModelConfig& cfg) {
    cfg.validate();
    Parameters p;
    auto add = [&](const std::string& name, tensor::Shape shape) {
      p.names.push_back(name);
      p.shapes.push_back(shape);
      p.values.emplace_back(tensor::numel(shape), Real(0));
      return p.values.size() - 1;
    };
    std::size_t v = static_cast<std::size_t>(cfg.vocab_size);
    std::size_t d = static_cast<std::size_t>(cfg.d_model);
    std::size_t ff = static_cast<std::size_t>(cfg.d_ff);
    std::size_t t = static_cast<std::size_t>(cfg.max_len);
    p.tok_embedding = add("tok_embedding", {v, d});
    p.pos_embedding = add("pos_embedding", {t, d});
    for (int l = 0; l < cfg.n_layers; ++l) {
      std::string pre = "layer" + std::to_string(l) + ".";
      LayerIndex li;
      li.ln1_gain = add(pre + "ln1.gain", {d});
      li.ln1_bias = add(pre + "ln1.bias", {d});
      li.wq = add(pre + "attn.wq", {d, d});
      li.wk = add(pre + "attn.wk", {d, d});
      li.wv = add(pre + "attn.wv", {d, d});
      li.wo = add(pre + "attn.wo", {d, d});
      li.ln2_gain = add(pre + "ln2.gain", {d});
      li.ln2_bias = add(pre + "ln2.bias", {d});
      li.w1 = add(pre + "mlp.w1", {d, ff});
      li.b1 = add(pre + "mlp.b1", {ff});
      li.w2 = add(pre + "mlp.w2", {ff, d});
      li.b2 = add(pre + "mlp.b2", {d});
      p.layers.push_back(li);
    }
    p.final_gain = add("final.ln.gain", {d});
    p.final_bias = add("final.ln.bias", {d});
    return p;
  }
};

// weights ~ Normal(0, 0.02), biases 0, layer-norm gains 1; deterministic in
// the config seed
template <typename Real>
Parameters<Real> init_parameters(const ModelConfig& cfg) {
  Parameters<Real> p = Parameters<Real>::layout(cfg);
  Rng rng(derive_seed(cfg.seed, "init-parameters"));
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const std::string& name = p.names[i];
    bool is_gain = name.ends_with(".gain");
    bool is_bias = name.ends_with(".bias") || name.ends_with(".b1") ||
                   name.ends_with(".b2");
    if (is_gain) {
      std::fill(p.values[i].begin(), p.values[i].end(), Real(1));
    } else if (is_bias) {
      std::fill(p.values[i].begin(), p.values[i].end(), Real(0));
    } else {
      for (auto& x : p.values[i])
        x = static_cast<Real>(rng.next_normal() * 0.02);
    }
  }
  return p;
}

// closed-form scalar count, used by tests against the realized layout
inline std::size_t expected_parameter_count(const ModelConfig& cfg) {
  std::size_t v = static_cast<std::size_t>(cfg.vocab_size);
  std::size_t d = static_cast<std::size_t>(cfg.d_model);
  std::size_t ff = static_cast<std::size_t>(cfg.d_ff);
  std::size_t t = static_cast<std::size_t>(cfg.max_len);
  std::size_t l = static_cast<std::size_t>(cfg.n_layers);
  return v * d + t * d + l * (2 * d + 4 * d * d + 2 * d + d * ff + ff + ff * d + d) +
         2 * d;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// Tape leaf ids for every parameter tensor, indexed like Parameters.
template <typename Real>
std::vector<typename tensor::Tape<Real>::Id> make_param_leaves(
    tensor::Tape<Real>& tape, const Parameters<Real>& params) {
  std::vector<typename tensor::Tape<Real>::Id> leaves;
  leaves.reserve(params.values.size());
  for (std::size_t i = 0; i < params.values.size(); ++i)
    leaves.push_back(tape.leaf(params.shapes[i], params.values[i]));
  return leaves;
}

// Hidden states [T_phys, d_model] for one padded sequence.
template <typename Real>
typename tensor::Tape<Real>::Id forward_sequence(
    tensor::Tape<Real>& tape,
    const std::vector<typename tensor::Tape<Real>::Id>& leaves,
    const Parameters<Real>& params, const bpe::Encoded& enc,
    const ModelConfig& cfg) {
  using Id = typename tensor::Tape<Real>::Id;
  std::size_t t_phys = enc.ids.size();
  if (t_phys == 0 || t_phys > static_cast<std::size_t>(cfg.max_len))
    throw ShapeError("forward: sequence length " + std::to_string(t_phys) +
                     " exceeds max_len " + std::to_string(cfg.max_len));
  if (enc.n_real == 0 || enc.n_real > t_phys)
    throw ShapeError("forward: invalid n_real");
  for (int id : enc.ids)
    if (id < 0 || id >= cfg.vocab_size)
      throw ShapeError("forward: token id out of vocab range");

  std::size_t real_begin = enc.real_begin();
  std::vector<bool> is_real(t_phys, false);
  for (std::size_t i = 0; i < enc.n_real; ++i) is_real[real_begin + i] = true;

  std::vector<int> pos_ids(t_phys, 0);
  if (cfg.pad_policy == PadPolicy::Masked) {
    int r = 0;
    for (std::size_t i = 0; i < t_phys; ++i)
      if (is_real[i]) pos_ids[i] = r++;
  } else {
    for (std::size_t i = 0; i < t_phys; ++i) pos_ids[i] = static_cast<int>(i);
  }

  std::vector<bool> key_mask;
  if (cfg.pad_policy == PadPolicy::Masked) key_mask = is_real;

  Id x = tape.add(tape.embedding_rows(leaves[params.tok_embedding], enc.ids),
                  tape.embedding_rows(leaves[params.pos_embedding], pos_ids));

  std::size_t d = static_cast<std::size_t>(cfg.d_model);
  std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
  std::size_t dh = d / heads;
  Real scale = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));

  for (const auto& li : params.layers) {
    Id xn = tape.layer_norm(x, leaves[li.ln1_gain], leaves[li.ln1_bias]);
    Id q = tape.matmul(xn, leaves[li.wq]);
    Id k = tape.matmul(xn, leaves[li.wk]);
    Id v = tape.matmul(xn, leaves[li.wv]);
    std::vector<Id> head_outs;
    head_outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Id qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
      Id kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
      Id vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
      head_outs.push_back(tape.causal_attention(qh, kh, vh, key_mask, scale));
    }
    Id attn = tape.matmul(tape.concat_cols(head_outs), leaves[li.wo]);
    x = tape.add(x, attn);

    Id xm = tape.layer_norm(x, leaves[li.ln2_gain], leaves[li.ln2_bias]);
    Id h1 = tape.gelu(tape.add_row_vector(tape.matmul(xm, leaves[li.w1]),
                                          leaves[li.b1]));
    Id h2 = tape.add_row_vector(tape.matmul(h1, leaves[li.w2]), leaves[li.b2]);
    x = tape.add(x, h2);
  }
  return tape.layer_norm(x, leaves[params.final_gain],
                         leaves[params.final_bias]);
}

// Pooled, unit-norm embedding node for one sequence's hidden states.
template <typename Real>
typename tensor::Tape<Real>::Id pool_sequence(
    tensor::Tape<Real>& tape, typename tensor::Tape<Real>::Id states,
    const bpe::Encoded& enc, Pooling pooling, PadPolicy pad_policy) {
  std::size_t t_phys = tape.shape(states).at(0);
  std::size_t real_begin = enc.real_begin();
  typename tensor::Tape<Real>::Id pooled;
  if (pooling == Pooling::Last) {
    std::size_t row = pad_policy == PadPolicy::Masked
                          ? real_begin + enc.n_real - 1
                          : t_phys - 1;
    pooled = tape.pick_row(states, row);
  } else {
    std::vector<std::size_t> rows;
    if (pad_policy == PadPolicy::Masked) {
      for (std::size_t i = 0; i < enc.n_real; ++i) rows.push_back(real_begin + i);
    } else {
      for (std::size_t i = 0; i < t_phys; ++i) rows.push_back(i);
    }
    pooled = tape.mean_rows(states, rows);
  }
  return tape.l2_normalize(pooled);
}

// ---------------------------------------------------------------------------
// Inference embedding (no-grad). The same parameter store encodes queries
// and codes; callers pass whichever texts they need embedded.
// ---------------------------------------------------------------------------

template <typename Real>
using Embedding = std::vector<Real>;

template <typename Real>
Embedding<Real> embed_one(const Parameters<Real>& params,
                          const bpe::Encoded& enc, const ModelConfig& cfg) {
  tensor::Tape<Real> tape;
  tape.grad_enabled = false;
  auto leaves = make_param_leaves(tape, params);
  auto states = forward_sequence(tape, leaves, params, enc, cfg);
  auto emb = pool_sequence(tape, states, enc, cfg.pooling, cfg.pad_policy);
  return tape.value(emb);
}

template <typename Real>
std::vector<Embedding<Real>> embed(const Parameters<Real>& params,
                                   const std::vector<std::string>& texts,
                                   const bpe::Vocab& vocab,
                                   const ModelConfig& cfg) {
  std::vector<Embedding<Real>> out(texts.size());
  parallel_for(texts.size(), [&](std::size_t i) {
    bpe::Encoded enc = bpe::encode(texts[i], vocab,
                                   static_cast<std::size_t>(cfg.max_len),
                                   cfg.pad_side);
    out[i] = embed_one(params, enc, cfg);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint format (all integers little-endian):
//   magic "CL4D" | u32 version | u64 config_len | config JSON
//   | u64 manifest_len | manifest JSON | f32 blobs in manifest order
// The manifest lists {name, shape, offset}; offsets are relative to the
// first blob byte.
// ---------------------------------------------------------------------------

constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}
inline std::uint32_t get_u32(std::string_view s, std::size_t& pos) {
  if (pos + 4 > s.size()) throw DataError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= std::uint32_t(static_cast<unsigned char>(s[pos + static_cast<std::size_t>(i)])) << (8 * i);
  pos += 4;
  return v;
}
inline std::uint64_t get_u64(std::string_view s, std::size_t& pos) {
  if (pos + 8 > s.size()) throw DataError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= std::uint64_t(static_cast<unsigned char>(s[pos + static_cast<std::size_t>(i)])) << (8 * i);
  pos += 8;
  return v;
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}
inline float get_f32(std::string_view s, std::size_t& pos) {
  std::uint32_t bits = get_u32(s, pos);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path,
                            const Parameters<float>& params,
                            const ModelConfig& cfg) {
  std::string out = "CL4D";
  detail::put_u32(out, kCheckpointVersion);
  std::string config_json = cfg.to_json().dump();
  detail::put_u64(out, config_json.size());
  out += config_json;

  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    nlohmann::ordered_json entry;
    entry["name"] = params.names[i];
    entry["shape"] = params.shapes[i];
    entry["offset"] = offset;
    manifest.push_back(entry);
    offset += params.values[i].size() * 4;
  }
  std::string manifest_json = manifest.dump();
  detail::put_u64(out, manifest_json.size());
  out += manifest_json;

  for (const auto& tensor_values : params.values)
    for (float v : tensor_values) detail::put_f32(out, v);
  write_file(path, out);
}

struct Checkpoint {
  ModelConfig config;
  Parameters<float> params;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string data = read_file(path);
  std::size_t pos = 0;
  if (data.size() < 4 || data.substr(0, 4) != "CL4D")
    throw DataError("not a CL4D checkpoint: " + path.string());
  pos = 4;
  std::uint32_t version = detail::get_u32(data, pos);
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  ModelConfig cfg;
  nlohmann::json manifest;
  try {
    std::uint64_t config_len = detail::get_u64(data, pos);
    if (pos + config_len > data.size()) throw DataError("checkpoint truncated");
    cfg = ModelConfig::from_json(nlohmann::json::parse(data.substr(pos, config_len)));
    pos += config_len;
    std::uint64_t manifest_len = detail::get_u64(data, pos);
    if (pos + manifest_len > data.size()) throw DataError("checkpoint truncated");
    manifest = nlohmann::json::parse(data.substr(pos, manifest_len));
    pos += manifest_len;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint header in " + path.string() + ": " +
                    e.what());
  }

  Checkpoint ckpt{cfg, Parameters<float>::layout(cfg)};
  if (manifest.size() != ckpt.params.values.size())
    throw DataError("checkpoint manifest does not match config layout");
  std::size_t blob_start = pos;
  for (std::size_t i = 0; i < ckpt.params.values.size(); ++i) {
    const auto& entry = manifest.at(i);
    if (entry.at("name").get<std::string>() != ckpt.params.names[i])
      throw DataError("checkpoint tensor order mismatch at " +
                      ckpt.params.names[i]);
    tensor::Shape shape = entry.at("shape").get<tensor::Shape>();
    if (shape != ckpt.params.shapes[i])
      throw DataError("checkpoint tensor shape mismatch at " +
                      ckpt.params.names[i]);
    std::size_t at = blob_start + entry.at("offset").get<std::size_t>();
    for (auto& v : ckpt.params.values[i]) v = detail::get_f32(data, at);
  }
  return ckpt;
}

}  // namespace cl4d::model

#pragma once

// Byte-level BPE vocabulary and fixed-length encoding. Token ids:
//   0 PAD, 1 BOS, 2 EOS, 3..258 raw bytes, 259.. learned merges.
// Byte fallback makes every UTF-8 string encodable without UNK and the
// real-token round trip lossless.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cl4d/common.hpp"

namespace cl4d::bpe {

constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kNumSpecials = 3;
constexpr int kFirstByteId = kNumSpecials;          // byte 0x00
constexpr int kFirstMergeId = kNumSpecials + 256;   // 259

enum class PadSide { Left, Right };

inline std::string pad_side_name(PadSide p) {
  return p == PadSide::Left ? "left" : "right";
}

inline PadSide pad_side_from_name(std::string_view s) {
  if (s == "left") return PadSide::Left;
  if (s == "right") return PadSide::Right;
  throw ConfigError("unknown pad side '" + std::string(s) + "'");
}

class Vocab {
 public:
  // merges: ordered (left id, right id) pairs; merge i produces token
  // kFirstMergeId + i. token_bytes_ holds the byte string per id (empty for
  // specials).
  Vocab() { init_base(); }

  static Vocab from_merges(const std::vector<std::pair<int, int>>& merges) {
    Vocab v;
    for (auto [l, r] : merges) v.add_merge(l, r);
    return v;
  }

  int size() const { return static_cast<int>(token_bytes_.size()); }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }
  const std::string& token_bytes(int id) const {
    return token_bytes_[static_cast<std::size_t>(id)];
  }

  void add_merge(int left, int right) {
    if (left < kNumSpecials || right < kNumSpecials || left >= size() ||
        right >= size())
      throw DataError("merge references invalid token id");
    int id = size();
    merges_.push_back({left, right});
    merge_rank_[{left, right}] = static_cast<int>(merges_.size()) - 1;
    token_bytes_.push_back(token_bytes_[static_cast<std::size_t>(left)] +
                           token_bytes_[static_cast<std::size_t>(right)]);
    (void)id;
  }

  // greedy lowest-rank merge application, GPT-2 style
  std::vector<int> tokenize(std::string_view text) const {
    std::vector<int> toks;
    toks.reserve(text.size());
    for (unsigned char c : text) toks.push_back(kFirstByteId + c);
    while (toks.size() >= 2) {
      int best_rank = -1;
      std::size_t best_pos = 0;
      for (std::size_t i = 0; i + 1 < toks.size(); ++i) {
        auto it = merge_rank_.find({toks[i], toks[i + 1]});
        if (it != merge_rank_.end() &&
            (best_rank < 0 || it->second < best_rank)) {
          best_rank = it->second;
          best_pos = i;
        }
      }
      if (best_rank < 0) break;
      // merge every occurrence of the winning pair, left to right
      int l = toks[best_pos], r = toks[best_pos + 1];
      int merged = kFirstMergeId + best_rank;
      std::vector<int> next;
      next.reserve(toks.size());
      for (std::size_t i = 0; i < toks.size();) {
        if (i + 1 < toks.size() && toks[i] == l && toks[i + 1] == r) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(toks[i]);
          i += 1;
        }
      }
      toks = std::move(next);
    }
    return toks;
  }

  std::string detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id < kNumSpecials) continue;  // specials carry no bytes
      out += token_bytes_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["size"] = size();
    j["specials"] = {{"pad", kPadId}, {"bos", kBosId}, {"eos", kEosId}};
    nlohmann::ordered_json merges = nlohmann::ordered_json::array();
    for (auto [l, r] : merges_)
      merges.push_back({bytes_to_json_string(token_bytes(l)),
                        bytes_to_json_string(token_bytes(r))});
    j["merges"] = merges;
    return j;
  }

  static Vocab from_json(const nlohmann::json& j) {
    Vocab v;
    std::map<std::string, int> by_bytes;
    for (int id = kFirstByteId; id < kFirstMergeId; ++id)
      by_bytes[v.token_bytes(id)] = id;
    for (const auto& m : j.at("merges")) {
      std::string lb = json_string_to_bytes(m.at(0).get<std::string>());
      std::string rb = json_string_to_bytes(m.at(1).get<std::string>());
      auto li = by_bytes.find(lb);
      auto ri = by_bytes.find(rb);
      if (li == by_bytes.end() || ri == by_bytes.end())
        throw DataError("vocab merge references unknown token bytes");
      v.add_merge(li->second, ri->second);
      by_bytes[lb + rb] = v.size() - 1;
    }
    int declared = j.at("size").get<int>();
    if (declared != v.size())
      throw DataError("vocab size field " + std::to_string(declared) +
                      " does not match reconstructed size " +
                      std::to_string(v.size()));
    return v;
  }

  void save(const std::filesystem::path& path) const {
    write_file(path, to_json().dump(2) + "\n");
  }

  static Vocab load(const std::filesystem::path& path) {
    try {
      return from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("corrupt vocab file " + path.string() + ": " + e.what());
    }
  }

  // Token byte strings can be arbitrary bytes; JSON strings must be UTF-8.
  // Map each byte to the codepoint of equal value (latin-1 embedding).
  static std::string bytes_to_json_string(std::string_view bytes) {
    std::string out;
    for (unsigned char c : bytes) {
      if (c < 0x80) {
        out.push_back(static_cast<char>(c));
      } else {
        out.push_back(static_cast<char>(0xC0 | (c >> 6)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
      }
    }
    return out;
  }

  static std::string json_string_to_bytes(std::string_view s) {
    std::string out;
    for (std::size_t i = 0; i < s.size();) {
      unsigned char c = static_cast<unsigned char>(s[i]);
      if (c < 0x80) {
        out.push_back(static_cast<char>(c));
        i += 1;
      } else if ((c & 0xE0) == 0xC0 && i + 1 < s.size()) {
        unsigned char c2 = static_cast<unsigned char>(s[i + 1]);
        out.push_back(static_cast<char>(((c & 0x1F) << 6) | (c2 & 0x3F)));
        i += 2;
      } else {
        throw DataError("vocab token string is not latin-1 encodable");
      }
    }
    return out;
  }

 private:
  void init_base() {
    token_bytes_.assign(kNumSpecials, std::string());
    for (int b = 0; b < 256; ++b)
      token_bytes_.push_back(std::string(1, static_cast<char>(b)));
  }

  std::vector<std::pair<int, int>> merges_;
  std::map<std::pair<int, int>, int> merge_rank_;
  std::vector<std::string> token_bytes_;
};

// Deterministic byte-level BPE training: repeatedly merge the most frequent
// adjacent pair, ties broken by the lexicographically smaller (left, right)
// byte strings. Stops at target_size or when no pair repeats.
inline Vocab build_vocab(const std::vector<std::string>& corpus,
                         int target_size, std::uint64_t /*seed*/ = 0) {
  if (target_size < kFirstMergeId)
    throw ConfigError("target_size must be at least " +
                      std::to_string(kFirstMergeId) + " (bytes + specials)");
  bool any = false;
  for (const auto& doc : corpus)
    if (!doc.empty()) any = true;
  if (!any) throw EmptyCorpus("build_vocab: corpus has no text");

  Vocab vocab;
  std::vector<std::vector<int>> docs;
  docs.reserve(corpus.size());
  for (const auto& doc : corpus) {
    std::vector<int> toks;
    toks.reserve(doc.size());
    for (unsigned char c : doc) toks.push_back(kFirstByteId + c);
    docs.push_back(std::move(toks));
  }

  while (vocab.size() < target_size) {
    std::map<std::pair<int, int>, std::int64_t> counts;
    for (const auto& toks : docs)
      for (std::size_t i = 0; i + 1 < toks.size(); ++i)
        ++counts[{toks[i], toks[i + 1]}];
    std::pair<int, int> best{-1, -1};
    std::int64_t best_count = 0;
    for (const auto& [pair, count] : counts) {
      if (count < 2) continue;
      if (count > best_count) {
        best = pair;
        best_count = count;
      } else if (count == best_count && best.first >= 0) {
        const std::string& bl = vocab.token_bytes(best.first);
        const std::string& br = vocab.token_bytes(best.second);
        const std::string& cl = vocab.token_bytes(pair.first);
        const std::string& cr = vocab.token_bytes(pair.second);
        if (std::tie(cl, cr) < std::tie(bl, br)) best = pair;
      }
    }
    if (best_count < 2) break;
    vocab.add_merge(best.first, best.second);
    int merged = vocab.size() - 1;
    for (auto& toks : docs) {
      std::vector<int> next;
      next.reserve(toks.size());
      for (std::size_t i = 0; i < toks.size();) {
        if (i + 1 < toks.size() && toks[i] == best.first &&
            toks[i + 1] == best.second) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(toks[i]);
          i += 1;
        }
      }
      toks = std::move(next);
    }
  }
  return vocab;
}

// A fixed-length id sequence. Real tokens are BOS .. EOS; pads fill the
// declared side up to the sequence length.
struct Encoded {
  std::vector<int> ids;
  std::size_t n_real = 0;
  PadSide pad_side = PadSide::Right;

  std::size_t length() const { return ids.size(); }
  std::size_t real_begin() const {
    return pad_side == PadSide::Left ? ids.size() - n_real : 0;
  }
  std::vector<int> real_ids() const {
    std::size_t b = real_begin();
    return std::vector<int>(ids.begin() + static_cast<std::ptrdiff_t>(b),
                            ids.begin() + static_cast<std::ptrdiff_t>(b + n_real));
  }
};

// BOS + tokens + EOS, right-truncated to max_len with EOS kept as the final
// real token, padded on pad_side.
inline Encoded encode(std::string_view text, const Vocab& vocab,
                      std::size_t max_len, PadSide pad_side) {
  if (max_len < 3) throw ConfigError("encode: max_len must be >= 3");
  std::vector<int> toks = vocab.tokenize(text);
  std::vector<int> real;
  real.reserve(toks.size() + 2);
  real.push_back(kBosId);
  real.insert(real.end(), toks.begin(), toks.end());
  real.push_back(kEosId);
  if (real.size() > max_len) {
    real.resize(max_len);
    real.back() = kEosId;
  }
  Encoded enc;
  enc.n_real = real.size();
  enc.pad_side = pad_side;
  std::size_t pads = max_len - real.size();
  if (pad_side == PadSide::Left) {
    enc.ids.assign(pads, kPadId);
    enc.ids.insert(enc.ids.end(), real.begin(), real.end());
  } else {
    enc.ids = std::move(real);
    enc.ids.insert(enc.ids.end(), pads, kPadId);
  }
  return enc;
}

// inverse of tokenization over real ids; specials are dropped
inline std::string decode(const std::vector<int>& ids, const Vocab& vocab) {
  return vocab.detokenize(ids);
}

}  // namespace cl4d::bpe

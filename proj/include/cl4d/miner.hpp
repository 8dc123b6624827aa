#pragma once

// Hard-negative mining: exact nearest-neighbor search over unit-norm code
// embeddings, excluding each query's gold code and its text-normalized
// duplicates. The miner model is pluggable; a TF-IDF cosine baseline covers
// the cold start before any trained checkpoint exists.

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "cl4d/common.hpp"
#include "cl4d/corpus.hpp"
#include "cl4d/model.hpp"
#include "cl4d/tokenizer.hpp"

namespace cl4d::miner {

struct EmbeddingIndex {
  std::vector<std::string> ids;
  std::vector<std::vector<float>> rows;        // unit-norm, one per id
  std::vector<std::string> text_hashes;        // normalized-code hash per id
  std::map<std::string, std::size_t> by_id;

  std::size_t size() const { return ids.size(); }
};

inline EmbeddingIndex build_index(const std::vector<std::string>& ids,
                                  const std::vector<std::vector<float>>& rows,
                                  std::vector<std::string> text_hashes = {}) {
  if (ids.size() != rows.size())
    throw ShapeError("build_index: ids/rows length mismatch");
  if (!text_hashes.empty() && text_hashes.size() != ids.size())
    throw ShapeError("build_index: text_hashes length mismatch");
  EmbeddingIndex index;
  index.ids = ids;
  index.rows = rows;
  index.text_hashes = std::move(text_hashes);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!index.by_id.emplace(ids[i], i).second)
      throw DuplicateIdError("duplicate id in index: " + ids[i]);
    double norm2 = 0;
    for (float v : rows[i]) norm2 += double(v) * v;
    if (std::abs(std::sqrt(norm2) - 1.0) > 1e-5)
      throw NormError("index row for " + ids[i] + " is not unit-norm");
  }
  return index;
}

struct Mined {
  std::string id;
  double score = 0;
};

// Exact argmax cosine over the index, skipping (a) excluded ids, (b) rows
// whose normalized text equals the gold's, (c) rows above the near-duplicate
// similarity threshold (disabled when <= 0). Ties break toward the
// lexicographically smallest id.
inline Mined mine(const std::vector<float>& query_embedding,
                  const EmbeddingIndex& index,
                  const std::set<std::string>& exclusions,
                  const std::optional<std::string>& gold_text_hash = {},
                  double near_dup_threshold = 0.98) {
  if (index.size() == 0) throw Exhausted("mine: index is empty");
  bool found = false;
  Mined best;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (exclusions.count(index.ids[i])) continue;
    if (gold_text_hash && !index.text_hashes.empty() &&
        index.text_hashes[i] == *gold_text_hash)
      continue;
    double score = 0;
    const auto& row = index.rows[i];
    for (std::size_t k = 0; k < row.size(); ++k)
      score += double(query_embedding[k]) * double(row[k]);
    if (near_dup_threshold > 0 && score > near_dup_threshold) continue;
    if (!found || score > best.score ||
        (score == best.score && index.ids[i] < best.id)) {
      best = {index.ids[i], score};
      found = true;
    }
  }
  if (!found) throw Exhausted("mine: every candidate excluded");
  return best;
}

// ---------------------------------------------------------------------------
// Miner models
// ---------------------------------------------------------------------------

class MinerModel {
 public:
  virtual ~MinerModel() = default;
  virtual std::vector<std::vector<float>> embed_queries(
      const std::vector<std::string>& texts) const = 0;
  virtual std::vector<std::vector<float>> embed_codes(
      const std::vector<std::string>& texts) const = 0;
  virtual std::string name() const = 0;
};

namespace detail {

inline std::vector<std::string> identifier_tokens(std::string_view text) {
  std::vector<std::string> toks;
  std::string cur;
  for (char c : text) {
    char lc = (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
    bool word = (lc >= 'a' && lc <= 'z') || (lc >= '0' && lc <= '9') || lc == '_';
    if (word) {
      cur.push_back(lc);
    } else if (!cur.empty()) {
      toks.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) toks.push_back(std::move(cur));
  return toks;
}

}  // namespace detail

// Deterministic, model-free baseline: tf-idf over case-folded identifier
// tokens of the code corpus; queries project into the same vocabulary.
// Texts mapping to the zero vector embed as all-zero rows (callers skip them).
class TfidfMiner : public MinerModel {
 public:
  explicit TfidfMiner(const std::vector<std::string>& codes) {
    std::map<std::string, std::size_t> doc_freq;
    std::vector<std::vector<std::string>> docs;
    docs.reserve(codes.size());
    for (const auto& code : codes) {
      auto toks = detail::identifier_tokens(code);
      std::set<std::string> uniq(toks.begin(), toks.end());
      for (const auto& t : uniq) ++doc_freq[t];
      docs.push_back(std::move(toks));
    }
    for (const auto& [tok, df] : doc_freq) {
      vocab_[tok] = idf_.size();
      double n = static_cast<double>(codes.size());
      idf_.push_back(std::log((1.0 + n) / (1.0 + static_cast<double>(df))) + 1.0);
    }
  }

  std::vector<std::vector<float>> embed_queries(
      const std::vector<std::string>& texts) const override {
    return embed_texts(texts);
  }
  std::vector<std::vector<float>> embed_codes(
      const std::vector<std::string>& texts) const override {
    return embed_texts(texts);
  }
  std::string name() const override { return "tfidf"; }

  std::size_t vocab_size() const { return idf_.size(); }

 private:
  std::vector<std::vector<float>> embed_texts(
      const std::vector<std::string>& texts) const {
    std::vector<std::vector<float>> out(texts.size());
    parallel_for(texts.size(), [&](std::size_t i) {
      std::vector<double> v(idf_.size(), 0.0);
      for (const auto& tok : detail::identifier_tokens(texts[i])) {
        auto it = vocab_.find(tok);
        if (it != vocab_.end()) v[it->second] += idf_[it->second];
      }
      double norm2 = 0;
      for (double x : v) norm2 += x * x;
      out[i].resize(v.size());
      if (norm2 > 0) {
        double inv = 1.0 / std::sqrt(norm2);
        for (std::size_t k = 0; k < v.size(); ++k)
          out[i][k] = static_cast<float>(v[k] * inv);
      }
    });
    return out;
  }

  std::map<std::string, std::size_t> vocab_;
  std::vector<double> idf_;
};

// Trained-checkpoint miner: this repo's own encoder as the embedding model.
class CheckpointMiner : public MinerModel {
 public:
  CheckpointMiner(model::Parameters<float> params, model::ModelConfig cfg,
                  bpe::Vocab vocab, std::string label = "checkpoint")
      : params_(std::move(params)),
        cfg_(std::move(cfg)),
        vocab_(std::move(vocab)),
        label_(std::move(label)) {}

  std::vector<std::vector<float>> embed_queries(
      const std::vector<std::string>& texts) const override {
    return model::embed(params_, texts, vocab_, cfg_);
  }
  std::vector<std::vector<float>> embed_codes(
      const std::vector<std::string>& texts) const override {
    return model::embed(params_, texts, vocab_, cfg_);
  }
  std::string name() const override { return label_; }

 private:
  model::Parameters<float> params_;
  model::ModelConfig cfg_;
  bpe::Vocab vocab_;
  std::string label_;
};

// ---------------------------------------------------------------------------
// mine_all
// ---------------------------------------------------------------------------

struct MinedEntry {
  std::string pair_id;
  std::string negative_code_id;
  double score = 0;
  std::string miner;
};

struct MineResult {
  std::vector<MinedEntry> entries;
  std::vector<std::string> skipped;  // pair ids that could not be mined
};

inline MineResult mine_all(const std::vector<corpus::BimodalPair>& dataset,
                           const MinerModel& miner_model,
                           double near_dup_threshold = 0.98) {
  std::vector<std::string> codes, queries, ids, hashes;
  for (const auto& p : dataset) {
    ids.push_back(p.id);
    codes.push_back(p.code);
    queries.push_back(p.query);
    hashes.push_back(sha256_hex(corpus::normalize_code(p.code)));
  }
  auto code_embs = miner_model.embed_codes(codes);

  // zero rows cannot live in the unit-norm index; track and skip them
  std::vector<std::string> idx_ids, idx_hashes;
  std::vector<std::vector<float>> idx_rows;
  for (std::size_t i = 0; i < code_embs.size(); ++i) {
    double norm2 = 0;
    for (float v : code_embs[i]) norm2 += double(v) * v;
    if (norm2 < 1e-12) continue;
    idx_ids.push_back(ids[i]);
    idx_rows.push_back(code_embs[i]);
    idx_hashes.push_back(hashes[i]);
  }
  EmbeddingIndex index = build_index(idx_ids, idx_rows, idx_hashes);

  auto query_embs = miner_model.embed_queries(queries);
  MineResult result;
  std::vector<std::optional<MinedEntry>> slots(dataset.size());
  std::vector<bool> skipped(dataset.size(), false);
  parallel_for(dataset.size(), [&](std::size_t i) {
    double qnorm2 = 0;
    for (float v : query_embs[i]) qnorm2 += double(v) * v;
    if (qnorm2 < 1e-12) {
      skipped[i] = true;
      return;
    }
    try {
      Mined m = mine(query_embs[i], index, {ids[i]}, hashes[i],
                     near_dup_threshold);
      slots[i] = MinedEntry{ids[i], m.id, m.score, miner_model.name()};
    } catch (const Exhausted&) {
      skipped[i] = true;
    }
  });
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (slots[i])
      result.entries.push_back(*slots[i]);
    else if (skipped[i])
      result.skipped.push_back(ids[i]);
  }
  return result;
}

// ---------------------------------------------------------------------------
// JSONL round trip: {pair_id, negative_code_id, score, miner}
// ---------------------------------------------------------------------------

inline std::string mined_to_jsonl(const std::vector<MinedEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["pair_id"] = e.pair_id;
    j["negative_code_id"] = e.negative_code_id;
    j["score"] = e.score;
    j["miner"] = e.miner;
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<MinedEntry> mined_from_jsonl(std::string_view text) {
  std::vector<MinedEntry> entries;
  for (const auto& line : split_lines(text)) {
    if (trim_view(line).empty()) continue;
    auto j = nlohmann::json::parse(line);
    MinedEntry e;
    e.pair_id = j.at("pair_id").get<std::string>();
    e.negative_code_id = j.at("negative_code_id").get<std::string>();
    e.score = j.at("score").get<double>();
    e.miner = j.at("miner").get<std::string>();
    entries.push_back(std::move(e));
  }
  return entries;
}

inline std::map<std::string, std::string> to_hard_negative_map(
    const std::vector<MinedEntry>& entries) {
  std::map<std::string, std::string> map;
  for (const auto& e : entries) {
    if (e.pair_id == e.negative_code_id)
      throw DataError("mined entry maps pair to its own gold code: " +
                      e.pair_id);
    map[e.pair_id] = e.negative_code_id;
  }
  return map;
}

}  // namespace cl4d::miner

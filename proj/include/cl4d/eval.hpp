#pragma once

// Retrieval evaluation: MRR over a code search pool, MAP for clone
// detection, the pooling x padding ablation grid, and a 2-D PCA projection
// for cluster plots. Ranking is a total order: descending cosine with ties
// broken by ascending id, over the full candidate pool.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cl4d/common.hpp"
#include "cl4d/corpus.hpp"
#include "cl4d/model.hpp"
#include "cl4d/tokenizer.hpp"

namespace cl4d::eval {

struct SearchEvalSet {
  struct Query {
    std::string text;
    std::string gold_id;
    std::string language;  // may be empty
  };
  std::vector<Query> queries;
  std::vector<std::pair<std::string, std::string>> pool;  // (id, code)

  void validate() const {
    std::map<std::string, bool> ids;
    for (const auto& [id, code] : pool)
      if (!ids.emplace(id, true).second)
        throw DuplicateIdError("pool id repeated: " + id);
    for (const auto& q : queries)
      if (!ids.count(q.gold_id))
        throw DataError("gold id not in pool: " + q.gold_id);
  }

  static SearchEvalSet from_pairs(const std::vector<corpus::BimodalPair>& pairs) {
    SearchEvalSet set;
    for (const auto& p : pairs) {
      set.queries.push_back({p.query, p.id, corpus::language_name(p.language)});
      set.pool.push_back({p.id, p.code});
    }
    set.validate();
    return set;
  }
};

struct CloneEvalSet {
  struct Item {
    std::string id;
    std::string code;
    std::string label;
  };
  std::vector<Item> items;
};

struct Metrics {
  std::string metric;  // "mrr" or "map"
  double value = 0;
  std::size_t n = 0;        // queries evaluated
  std::size_t skipped = 0;  // clone queries without a second class member
  std::map<std::string, double> per_language;
  std::map<std::string, std::size_t> per_language_n;
  nlohmann::ordered_json settings;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["metric"] = metric;
    j["value"] = value;
    j["n"] = n;
    if (skipped > 0) j["skipped"] = skipped;
    if (!per_language.empty()) {
      nlohmann::ordered_json pl;
      for (const auto& [lang, v] : per_language) {
        pl[lang] = {{"value", v}, {"n", per_language_n.at(lang)}};
      }
      j["per_language"] = pl;
    }
    j["settings"] = settings;
    return j;
  }

  std::string to_table() const {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-12s %8s %6s\n", metric.c_str(), "value",
                  "n");
    std::string out = buf;
    std::snprintf(buf, sizeof(buf), "%-12s %8.4f %6zu\n", "overall", value, n);
    out += buf;
    for (const auto& [lang, v] : per_language) {
      std::snprintf(buf, sizeof(buf), "%-12s %8.4f %6zu\n", lang.c_str(), v,
                    per_language_n.at(lang));
      out += buf;
    }
    if (skipped > 0) {
      std::snprintf(buf, sizeof(buf), "%-12s %8zu\n", "skipped", skipped);
      out += buf;
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

// Full ordering of pool ids by descending cosine, ascending id on ties.
// Embeddings must be unit-norm so the dot product is the cosine.
inline std::vector<std::string> rank(
    const std::vector<float>& query_embedding,
    const std::vector<std::string>& pool_ids,
    const std::vector<std::vector<float>>& pool_embeddings) {
  if (pool_ids.size() != pool_embeddings.size())
    throw ShapeError("rank: pool ids/embeddings mismatch");
  if (pool_ids.empty()) throw DataError("rank: empty pool");
  std::vector<std::pair<double, std::size_t>> scored(pool_ids.size());
  for (std::size_t i = 0; i < pool_ids.size(); ++i) {
    double s = 0;
    for (std::size_t k = 0; k < query_embedding.size(); ++k)
      s += double(query_embedding[k]) * double(pool_embeddings[i][k]);
    scored[i] = {s, i};
  }
  std::sort(scored.begin(), scored.end(),
            [&](const auto& a, const auto& b) {
              if (a.first != b.first) return a.first > b.first;
              return pool_ids[a.second] < pool_ids[b.second];
            });
  std::vector<std::string> out;
  out.reserve(scored.size());
  for (const auto& [s, i] : scored) out.push_back(pool_ids[i]);
  return out;
}

// ---------------------------------------------------------------------------
// MRR / MAP over precomputed embeddings (the metric cores)
// ---------------------------------------------------------------------------

struct EmbeddedQuery {
  std::vector<float> embedding;
  std::string gold_id;
  std::string language;  // may be empty
};

inline Metrics mrr_from_embeddings(
    const std::vector<EmbeddedQuery>& queries,
    const std::vector<std::string>& pool_ids,
    const std::vector<std::vector<float>>& pool_embeddings) {
  Metrics m;
  m.metric = "mrr";
  double total = 0;
  std::map<std::string, double> lang_total;
  for (const auto& q : queries) {
    auto order = rank(q.embedding, pool_ids, pool_embeddings);
    std::size_t position = 0;
    for (std::size_t r = 0; r < order.size(); ++r)
      if (order[r] == q.gold_id) {
        position = r + 1;
        break;
      }
    if (position == 0) throw DataError("gold id missing from pool: " + q.gold_id);
    double rr = 1.0 / static_cast<double>(position);
    total += rr;
    if (!q.language.empty()) {
      lang_total[q.language] += rr;
      m.per_language_n[q.language] += 1;
    }
  }
  m.n = queries.size();
  m.value = m.n == 0 ? 0.0 : total / static_cast<double>(m.n);
  for (const auto& [lang, t] : lang_total)
    m.per_language[lang] = t / static_cast<double>(m.per_language_n[lang]);
  return m;
}

// AP = (1/R) * sum over hit ranks k of precision@k, hits given in rank order.
inline double average_precision(const std::vector<bool>& hit_at_rank,
                                std::size_t relevant_count) {
  if (relevant_count == 0) throw DataError("average_precision: no relevant items");
  double ap = 0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < hit_at_rank.size(); ++r) {
    if (hit_at_rank[r]) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return ap / static_cast<double>(relevant_count);
}

// Every item queries the others; relevant = same label, self excluded.
inline Metrics map_from_embeddings(const std::vector<std::string>& ids,
                                   const std::vector<std::vector<float>>& embs,
                                   const std::vector<std::string>& labels) {
  if (ids.size() != embs.size() || ids.size() != labels.size())
    throw ShapeError("map: ids/embeddings/labels mismatch");
  Metrics m;
  m.metric = "map";
  double total = 0;
  std::size_t evaluated = 0;
  for (std::size_t qi = 0; qi < ids.size(); ++qi) {
    std::vector<std::string> rest_ids;
    std::vector<std::vector<float>> rest_embs;
    std::map<std::string, std::string> label_of;
    std::size_t relevant = 0;
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (j == qi) continue;
      rest_ids.push_back(ids[j]);
      rest_embs.push_back(embs[j]);
      label_of[ids[j]] = labels[j];
      if (labels[j] == labels[qi]) ++relevant;
    }
    if (relevant == 0) {
      ++m.skipped;
      continue;
    }
    auto order = rank(embs[qi], rest_ids, rest_embs);
    std::vector<bool> hit_at_rank(order.size());
    for (std::size_t r = 0; r < order.size(); ++r)
      hit_at_rank[r] = label_of[order[r]] == labels[qi];
    total += average_precision(hit_at_rank, relevant);
    ++evaluated;
  }
  m.n = evaluated;
  m.value = evaluated == 0 ? 0.0 : total / static_cast<double>(evaluated);
  return m;
}

// ---------------------------------------------------------------------------
// Model-backed evaluation
// ---------------------------------------------------------------------------

// pool_size 0 ranks against the full pool (the strictest protocol); a
// positive value ranks each query against its gold plus a seeded sample of
// pool_size-1 distractors.
inline Metrics mrr(const SearchEvalSet& set, const model::Parameters<float>& params,
                   const bpe::Vocab& vocab, const model::ModelConfig& cfg,
                   std::size_t pool_size = 0, std::uint64_t seed = 0) {
  set.validate();
  std::vector<std::string> pool_ids, pool_texts, query_texts;
  for (const auto& [id, code] : set.pool) {
    pool_ids.push_back(id);
    pool_texts.push_back(code);
  }
  for (const auto& q : set.queries) query_texts.push_back(q.text);
  auto pool_embs = model::embed(params, pool_texts, vocab, cfg);
  auto query_embs = model::embed(params, query_texts, vocab, cfg);

  Metrics m;
  if (pool_size == 0 || pool_size >= pool_ids.size()) {
    std::vector<EmbeddedQuery> queries;
    for (std::size_t i = 0; i < set.queries.size(); ++i)
      queries.push_back(
          {query_embs[i], set.queries[i].gold_id, set.queries[i].language});
    m = mrr_from_embeddings(queries, pool_ids, pool_embs);
  } else {
    if (pool_size < 1) throw ConfigError("pool_size must be positive");
    std::map<std::string, std::size_t> index_of;
    for (std::size_t i = 0; i < pool_ids.size(); ++i) index_of[pool_ids[i]] = i;
    double total = 0;
    std::map<std::string, double> lang_total;
    for (std::size_t qi = 0; qi < set.queries.size(); ++qi) {
      const auto& q = set.queries[qi];
      std::size_t gold = index_of.at(q.gold_id);
      std::vector<std::size_t> others;
      for (std::size_t i = 0; i < pool_ids.size(); ++i)
        if (i != gold) others.push_back(i);
      Rng rng(derive_seed(seed, "eval-pool-" + std::to_string(qi)));
      shuffle(others, rng);
      others.resize(pool_size - 1);
      std::vector<std::string> ids = {pool_ids[gold]};
      std::vector<std::vector<float>> embs = {pool_embs[gold]};
      for (std::size_t i : others) {
        ids.push_back(pool_ids[i]);
        embs.push_back(pool_embs[i]);
      }
      std::vector<EmbeddedQuery> one = {{query_embs[qi], q.gold_id, q.language}};
      double rr = mrr_from_embeddings(one, ids, embs).value;
      total += rr;
      if (!q.language.empty()) {
        lang_total[q.language] += rr;
        m.per_language_n[q.language] += 1;
      }
    }
    m.metric = "mrr";
    m.n = set.queries.size();
    m.value = m.n == 0 ? 0.0 : total / static_cast<double>(m.n);
    for (const auto& [lang, t] : lang_total)
      m.per_language[lang] = t / static_cast<double>(m.per_language_n[lang]);
  }
  m.settings = cfg.to_json();
  if (pool_size > 0) m.settings["pool_size"] = pool_size;
  return m;
}

inline Metrics map_clone(const CloneEvalSet& set,
                         const model::Parameters<float>& params,
                         const bpe::Vocab& vocab, const model::ModelConfig& cfg) {
  std::vector<std::string> ids, texts, labels;
  for (const auto& item : set.items) {
    ids.push_back(item.id);
    texts.push_back(item.code);
    labels.push_back(item.label);
  }
  auto embs = model::embed(params, texts, vocab, cfg);
  Metrics m = map_from_embeddings(ids, embs, labels);
  m.settings = cfg.to_json();
  return m;
}

// ---------------------------------------------------------------------------
// Ablation grid: the four {pad side} x {pooling} cells under one policy
// ---------------------------------------------------------------------------

struct GridCell {
  bpe::PadSide pad_side;
  model::Pooling pooling;
  Metrics metrics;
};

inline std::vector<GridCell> ablation_grid(const model::Parameters<float>& params,
                                           const model::ModelConfig& base_cfg,
                                           const SearchEvalSet& set,
                                           const bpe::Vocab& vocab,
                                           model::PadPolicy policy) {
  std::vector<GridCell> grid;
  for (bpe::PadSide side : {bpe::PadSide::Left, bpe::PadSide::Right}) {
    for (model::Pooling pooling : {model::Pooling::Last, model::Pooling::Mean}) {
      model::ModelConfig cfg = base_cfg;
      cfg.pad_side = side;
      cfg.pooling = pooling;
      cfg.pad_policy = policy;
      grid.push_back({side, pooling, mrr(set, params, vocab, cfg)});
    }
  }
  return grid;
}

inline nlohmann::ordered_json grid_to_json(const std::vector<GridCell>& grid) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& cell : grid) {
    nlohmann::ordered_json row;
    row["pad_side"] = bpe::pad_side_name(cell.pad_side);
    row["pooling"] = model::pooling_name(cell.pooling);
    row["mrr"] = cell.metrics.value;
    row["n"] = cell.metrics.n;
    rows.push_back(row);
  }
  return rows;
}

inline std::string grid_to_table(const std::vector<GridCell>& grid) {
  std::string out = "pad_side  pooling  mrr\n";
  char buf[96];
  for (const auto& cell : grid) {
    std::snprintf(buf, sizeof(buf), "%-9s %-8s %.4f\n",
                  bpe::pad_side_name(cell.pad_side).c_str(),
                  model::pooling_name(cell.pooling).c_str(),
                  cell.metrics.value);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// 2-D projection: PCA via power iteration with deterministic starts
// ---------------------------------------------------------------------------

struct ProjectedPoint {
  double x = 0, y = 0;
  std::string label;
};

// Optional external projector. When set, project_2d delegates to it instead
// of the built-in PCA.
using ProjectorFn = std::function<std::vector<ProjectedPoint>(
    const std::vector<std::vector<float>>&, const std::vector<std::string>&)>;

inline ProjectorFn& projector_hook() {
  static ProjectorFn hook;
  return hook;
}

inline void set_projector(ProjectorFn fn) { projector_hook() = std::move(fn); }

namespace detail {

inline std::vector<double> power_iterate(const std::vector<double>& cov,
                                         std::size_t d, std::uint64_t start_seed) {
  Rng rng(start_seed);
  std::vector<double> v(d);
  double norm2 = 0;
  for (auto& x : v) {
    x = rng.next_normal();
    norm2 += x * x;
  }
  double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : v) x *= inv;
  for (int iter = 0; iter < 500; ++iter) {
    std::vector<double> next(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) next[i] += cov[i * d + j] * v[j];
    double n2 = 0;
    for (double x : next) n2 += x * x;
    if (n2 < 1e-24) return v;  // zero covariance: keep the start direction
    double ninv = 1.0 / std::sqrt(n2);
    double delta = 0;
    for (std::size_t i = 0; i < d; ++i) {
      next[i] *= ninv;
      delta = std::max(delta, std::abs(std::abs(next[i]) - std::abs(v[i])));
    }
    v = next;
    if (delta < 1e-13) break;
  }
  return v;
}

}  // namespace detail

inline std::vector<ProjectedPoint> project_2d(
    const std::vector<std::vector<float>>& embeddings,
    const std::vector<std::string>& labels) {
  if (embeddings.size() != labels.size())
    throw ShapeError("project_2d: embeddings/labels mismatch");
  if (projector_hook()) return projector_hook()(embeddings, labels);
  if (embeddings.empty()) return {};
  std::size_t n = embeddings.size();
  std::size_t d = embeddings[0].size();
  std::vector<double> mean(d, 0.0);
  for (const auto& e : embeddings)
    for (std::size_t k = 0; k < d; ++k) mean[k] += e[k];
  for (auto& v : mean) v /= static_cast<double>(n);

  std::vector<double> cov(d * d, 0.0);
  for (const auto& e : embeddings)
    for (std::size_t i = 0; i < d; ++i) {
      double ci = e[i] - mean[i];
      for (std::size_t j = 0; j < d; ++j) cov[i * d + j] += ci * (e[j] - mean[j]);
    }
  double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  for (auto& v : cov) v /= denom;

  auto v1 = detail::power_iterate(cov, d, derive_seed(0x1CA0, "pca-first"));
  // deflate and find the second direction, then re-orthogonalize
  double lambda1 = 0;
  {
    std::vector<double> cv(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cv[i] += cov[i * d + j] * v1[j];
    for (std::size_t i = 0; i < d; ++i) lambda1 += v1[i] * cv[i];
  }
  std::vector<double> deflated = cov;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) deflated[i * d + j] -= lambda1 * v1[i] * v1[j];
  auto v2 = detail::power_iterate(deflated, d, derive_seed(0x1CA0, "pca-second"));
  double dot12 = 0;
  for (std::size_t i = 0; i < d; ++i) dot12 += v1[i] * v2[i];
  double n2 = 0;
  for (std::size_t i = 0; i < d; ++i) {
    v2[i] -= dot12 * v1[i];
    n2 += v2[i] * v2[i];
  }
  if (n2 > 1e-24) {
    double inv = 1.0 / std::sqrt(n2);
    for (auto& x : v2) x *= inv;
  } else if (d >= 2) {
    // degenerate: pick any direction orthogonal to v1
    std::vector<double> e(d, 0.0);
    std::size_t axis = 0;
    for (std::size_t i = 1; i < d; ++i)
      if (std::abs(v1[i]) < std::abs(v1[axis])) axis = i;
    e[axis] = 1.0;
    double dd = 0;
    for (std::size_t i = 0; i < d; ++i) dd += v1[i] * e[i];
    double nn = 0;
    for (std::size_t i = 0; i < d; ++i) {
      e[i] -= dd * v1[i];
      nn += e[i] * e[i];
    }
    double inv = nn > 0 ? 1.0 / std::sqrt(nn) : 0.0;
    for (std::size_t i = 0; i < d; ++i) v2[i] = e[i] * inv;
  }

  std::vector<ProjectedPoint> points(n);
  for (std::size_t r = 0; r < n; ++r) {
    double x = 0, y = 0;
    for (std::size_t k = 0; k < d; ++k) {
      double c = embeddings[r][k] - mean[k];
      x += c * v1[k];
      y += c * v2[k];
    }
    points[r] = {x, y, labels[r]};
  }
  return points;
}

inline std::string projection_to_tsv(const std::vector<ProjectedPoint>& points) {
  std::string out = "x\ty\tlabel\n";
  char buf[192];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%.9g\t%.9g\t%s\n", p.x, p.y,
                  p.label.c_str());
    out += buf;
  }
  return out;
}

// minimal scatter plot; one fill color per label
inline std::string projection_to_svg(const std::vector<ProjectedPoint>& points,
                                     int size_px = 480) {
  double lo_x = 0, hi_x = 1, lo_y = 0, hi_y = 1;
  if (!points.empty()) {
    lo_x = hi_x = points[0].x;
    lo_y = hi_y = points[0].y;
    for (const auto& p : points) {
      lo_x = std::min(lo_x, p.x);
      hi_x = std::max(hi_x, p.x);
      lo_y = std::min(lo_y, p.y);
      hi_y = std::max(hi_y, p.y);
    }
  }
  double spanx = hi_x - lo_x < 1e-12 ? 1.0 : hi_x - lo_x;
  double spany = hi_y - lo_y < 1e-12 ? 1.0 : hi_y - lo_y;
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                    std::to_string(size_px) + "\" height=\"" +
                    std::to_string(size_px) + "\">\n";
  char buf[256];
  for (const auto& p : points) {
    double px = 20 + (p.x - lo_x) / spanx * (size_px - 40);
    double py = 20 + (p.y - lo_y) / spany * (size_px - 40);
    unsigned hue = 0;
    for (unsigned char c : p.label) hue = hue * 131 + c;
    std::snprintf(buf, sizeof(buf),
                  "  <circle cx=\"%.1f\" cy=\"%.1f\" r=\"4\" "
                  "fill=\"hsl(%u,70%%,45%%)\"><title>%s</title></circle>\n",
                  px, py, hue % 360, p.label.c_str());
    svg += buf;
  }
  svg += "</svg>\n";
  return svg;
}

// ---------------------------------------------------------------------------
// Eval-set JSONL loaders
//   search queries: {"query": ..., "gold_id": ..., "language"?: ...}
//   pool:           {"id": ..., "code": ...}
//   clone items:    {"id": ..., "code": ..., "label": ...}
// ---------------------------------------------------------------------------

inline SearchEvalSet load_search_set(const std::filesystem::path& queries_path,
                                     const std::filesystem::path& pool_path) {
  SearchEvalSet set;
  for (const auto& line : split_lines(read_file(queries_path))) {
    if (trim_view(line).empty()) continue;
    auto j = nlohmann::json::parse(line);
    set.queries.push_back({j.at("query").get<std::string>(),
                           j.at("gold_id").get<std::string>(),
                           j.value("language", std::string())});
  }
  for (const auto& line : split_lines(read_file(pool_path))) {
    if (trim_view(line).empty()) continue;
    auto j = nlohmann::json::parse(line);
    set.pool.push_back(
        {j.at("id").get<std::string>(), j.at("code").get<std::string>()});
  }
  set.validate();
  return set;
}

inline CloneEvalSet load_clone_set(const std::filesystem::path& path) {
  CloneEvalSet set;
  for (const auto& line : split_lines(read_file(path))) {
    if (trim_view(line).empty()) continue;
    auto j = nlohmann::json::parse(line);
    set.items.push_back({j.at("id").get<std::string>(),
                         j.at("code").get<std::string>(),
                         j.at("label").get<std::string>()});
  }
  return set;
}

}  // namespace cl4d::eval

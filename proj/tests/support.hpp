#pragma once

// Shared test helpers: the synthetic separable retrieval corpus and a naive
// reference implementation of the contrastive loss.
//
// Corpus design: each pair carries a 3-word key. Queries spell the key in
// lowercase, codes in uppercase, so the two sides share no lexical surface
// at all; retrieval only works once the model has aligned the two casings.
// Held-out pairs reuse seen words in unseen combinations.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "cl4d/common.hpp"
#include "cl4d/corpus.hpp"

namespace cl4d_test {

inline const std::vector<std::string>& key_words() {
  static const std::vector<std::string> words = {
      "alpha", "bravo", "china", "delta", "echo",  "fox",   "golf",  "hotel",
      "india", "julie", "kilo",  "lima",  "mike",  "nova",  "oscar", "papa",
      "quebec", "romeo", "sierra", "tango", "uncle", "victor", "whisk", "xray"};
  return words;
}

inline std::string upper(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
  return out;
}

// n distinct 3-word key combos drawn from a seeded shuffle of all C(24,3)
inline std::vector<std::array<std::size_t, 3>> key_combos(std::size_t n,
                                                          std::uint64_t seed) {
  const std::size_t w = key_words().size();
  std::vector<std::array<std::size_t, 3>> all;
  for (std::size_t a = 0; a < w; ++a)
    for (std::size_t b = a + 1; b < w; ++b)
      for (std::size_t c = b + 1; c < w; ++c) all.push_back({a, b, c});
  cl4d::Rng rng(cl4d::derive_seed(seed, "separable-combos"));
  cl4d::shuffle(all, rng);
  if (n > all.size()) throw cl4d::DataError("not enough key combinations");
  all.resize(n);
  return all;
}

inline std::vector<cl4d::corpus::BimodalPair> make_separable_corpus(
    std::size_t n_pairs, std::uint64_t seed) {
  using namespace cl4d::corpus;
  static const std::vector<Language> langs = {
      Language::Python, Language::Java,       Language::Go,
      Language::Php,    Language::Javascript, Language::Ruby};
  auto combos = key_combos(n_pairs, seed);
  std::vector<BimodalPair> pairs;
  pairs.reserve(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    const auto& [a, b, c] = combos[i];
    const std::string& w1 = key_words()[a];
    const std::string& w2 = key_words()[b];
    const std::string& w3 = key_words()[c];
    BimodalPair p;
    p.language = langs[i % langs.size()];
    p.query = "find " + w1 + " " + w2 + " " + w3 + " record";
    p.code = "def load(x):\n    k = [\"" + upper(w1) + "\", \"" + upper(w2) +
             "\", \"" + upper(w3) + "\"]\n    return fetch(x, k)";
    p.meta = {{"repo", "synthetic"},
              {"path", "gen/pair" + std::to_string(i) + ".py"},
              {"name", "load"}};
    p.id = pair_id(p.language, p.query, p.code);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

// Direct, unstabilized evaluation of the contrastive objective at f64. The
// oracle for the stabilized implementation.
inline double naive_contrastive_loss(
    const std::vector<std::vector<double>>& queries,
    const std::vector<std::vector<double>>& codes,
    const std::vector<std::vector<double>>* hard, double tau,
    bool use_in_batch, std::vector<double>* per_example = nullptr) {
  std::size_t n = queries.size();
  double total = 0;
  if (per_example) per_example->clear();
  for (std::size_t i = 0; i < n; ++i) {
    auto dot = [&](const std::vector<double>& u, const std::vector<double>& v) {
      double acc = 0;
      for (std::size_t k = 0; k < u.size(); ++k) acc += u[k] * v[k];
      return acc;
    };
    double numer = std::exp(dot(queries[i], codes[i]) / tau);
    double denom = 0;
    if (use_in_batch) {
      for (std::size_t j = 0; j < n; ++j)
        denom += std::exp(dot(queries[i], codes[j]) / tau);
    } else {
      denom += numer;
    }
    if (hard) denom += std::exp(dot(queries[i], (*hard)[i]) / tau);
    double loss = -std::log(numer / denom);
    if (per_example) per_example->push_back(loss);
    total += loss;
  }
  return total / static_cast<double>(n);
}

inline std::vector<double> random_unit_vector(std::size_t d, cl4d::Rng& rng) {
  std::vector<double> v(d);
  double norm2 = 0;
  do {
    norm2 = 0;
    for (auto& x : v) {
      x = rng.next_normal();
      norm2 += x * x;
    }
  } while (norm2 < 1e-12);
  double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : v) x *= inv;
  return v;
}

}  // namespace cl4d_test

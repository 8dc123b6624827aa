#include "doctest.h"

#include <cmath>
#include <set>
#include <vector>

#include "cl4d/miner.hpp"
#include "support.hpp"

using namespace cl4d;
using namespace cl4d::miner;

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<float> unit2(double angle_deg) {
  double a = angle_deg * kPi / 180.0;
  return {static_cast<float>(std::cos(a)), static_cast<float>(std::sin(a))};
}

}  // namespace

TEST_SUITE_BEGIN("miner");

TEST_CASE("build_index: duplicates, norms, bitwise storage") {
  auto r0 = unit2(0), r1 = unit2(90);
  auto index = build_index({"a", "b"}, {r0, r1});
  CHECK(index.size() == 2);
  CHECK(index.rows[0] == r0);  // bitwise
  CHECK(index.rows[1] == r1);

  CHECK_THROWS_AS(build_index({"a", "a"}, {r0, r1}), cl4d::DuplicateIdError);
  CHECK_THROWS_AS(build_index({"a"}, {{0.5f, 0.5f}}), cl4d::NormError);

  auto empty = build_index({}, {});
  CHECK_THROWS_AS(mine(r0, empty, {}), cl4d::Exhausted);
}

TEST_CASE("mine: argmax after exclusion, tie rule, exhaustion") {
  auto q = unit2(0);
  auto index = build_index({"gold", "near", "far"},
                           {unit2(25), unit2(37), unit2(78)});
  auto got = mine(q, index, {"gold"}, std::nullopt, 0.0);
  CHECK(got.id == "near");
  CHECK(got.score == doctest::Approx(std::cos(37 * kPi / 180)).epsilon(1e-6));

  // equal scores: the lexicographically smaller id wins
  auto tied = build_index({"zeta", "beta"}, {unit2(30), unit2(-30)});
  auto tie = mine(unit2(0), tied, {});
  CHECK(tie.id == "beta");

  CHECK_THROWS_AS(mine(q, index, {"gold", "near", "far"}), cl4d::Exhausted);
}

TEST_CASE("mine: near-duplicate threshold and text-hash guard") {
  auto q = unit2(0);
  auto index = build_index({"dup", "ok"}, {unit2(1), unit2(40)},
                           {"hash-gold", "hash-other"});
  // similarity > 0.98 excluded by default threshold
  auto got = mine(q, index, {}, std::nullopt, 0.98);
  CHECK(got.id == "ok");
  // threshold off: the nearest row wins
  auto raw = mine(q, index, {}, std::nullopt, 0.0);
  CHECK(raw.id == "dup");
  // text-normalized duplicate of the gold is skipped regardless of score
  auto guarded = mine(q, index, {}, std::string("hash-gold"), 0.0);
  CHECK(guarded.id == "ok");
}

TEST_CASE("property: mine equals a brute-force argmax loop") {
  Rng rng(7);
  for (int rep = 0; rep < 50; ++rep) {
    std::size_t n = 3 + rng.next_below(10);
    std::vector<std::string> ids;
    std::vector<std::vector<float>> rows;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < n; ++i) {
      std::string id;
      do {
        id = "c" + std::to_string(rng.next_below(1000));
      } while (!seen.insert(id).second);
      ids.push_back(id);
      auto v = cl4d_test::random_unit_vector(6, rng);
      std::vector<float> r(v.begin(), v.end());
      double n2 = 0;
      for (float x : r) n2 += double(x) * x;
      float inv = static_cast<float>(1.0 / std::sqrt(n2));
      for (float& x : r) x *= inv;
      rows.push_back(std::move(r));
    }

    auto qv = cl4d_test::random_unit_vector(6, rng);
    std::vector<float> q(qv.begin(), qv.end());
    std::set<std::string> excl = {ids[0]};
    auto index = build_index(ids, rows);
    auto got = mine(q, index, excl, std::nullopt, 0.0);

    // independent loop
    bool found = false;
    double best_score = 0;
    std::string best_id;
    for (std::size_t i = 0; i < n; ++i) {
      if (excl.count(ids[i])) continue;
      double s = 0;
      for (std::size_t k = 0; k < 6; ++k) s += double(q[k]) * rows[i][k];
      if (!found || s > best_score || (s == best_score && ids[i] < best_id)) {
        best_score = s;
        best_id = ids[i];
        found = true;
      }
    }
    CHECK(got.id == best_id);
    CHECK(got.score == doctest::Approx(best_score).epsilon(1e-12));
  }
}

TEST_CASE("mine is invariant to codebase input order") {
  Rng rng(17);
  std::vector<std::string> ids = {"m", "a", "x", "b", "k"};
  std::vector<std::vector<float>> rows;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto v = cl4d_test::random_unit_vector(4, rng);
    std::vector<float> r(v.begin(), v.end());
    double n2 = 0;
    for (float x : r) n2 += double(x) * x;
    float inv = static_cast<float>(1.0 / std::sqrt(n2));
    for (float& x : r) x *= inv;
    rows.push_back(r);
  }
  auto qv = cl4d_test::random_unit_vector(4, rng);
  std::vector<float> q(qv.begin(), qv.end());

  auto fwd = mine(q, build_index(ids, rows), {"m"}, std::nullopt, 0.0);
  std::vector<std::string> rids(ids.rbegin(), ids.rend());
  std::vector<std::vector<float>> rrows(rows.rbegin(), rows.rend());
  auto rev = mine(q, build_index(rids, rrows), {"m"}, std::nullopt, 0.0);
  CHECK(fwd.id == rev.id);
  CHECK(fwd.score == rev.score);
}

TEST_CASE("tfidf miner: shared tokens rank near, casing folds") {
  std::vector<std::string> codes = {
      "def alpha_one(): return ALPHA + ONE",
      "def alpha_two(): return ALPHA + TWO",
      "def gamma_three(): return GAMMA + THREE"};
  TfidfMiner miner_model(codes);
  auto embs = miner_model.embed_codes(codes);
  auto q = miner_model.embed_queries({"alpha one"});
  double s0 = 0, s2 = 0;
  for (std::size_t k = 0; k < q[0].size(); ++k) {
    s0 += double(q[0][k]) * embs[0][k];
    s2 += double(q[0][k]) * embs[2][k];
  }
  CHECK(s0 > s2);

  // no-overlap query embeds to the zero vector
  auto zero = miner_model.embed_queries({"zzz qqq"});
  double n2 = 0;
  for (float v : zero[0]) n2 += double(v) * v;
  CHECK(n2 == 0.0);
}

TEST_CASE("mine_all: entries cover the dataset, map round-trips") {
  auto pairs = cl4d_test::make_separable_corpus(12, 3);
  TfidfMiner miner_model([&] {
    std::vector<std::string> codes;
    for (const auto& p : pairs) codes.push_back(p.code);
    return codes;
  }());
  auto result = mine_all(pairs, miner_model, 0.98);
  CHECK(result.entries.size() + result.skipped.size() == pairs.size());
  for (const auto& e : result.entries) {
    CHECK(e.pair_id != e.negative_code_id);
    CHECK(e.miner == "tfidf");
  }

  std::string jsonl = mined_to_jsonl(result.entries);
  auto back = mined_from_jsonl(jsonl);
  REQUIRE(back.size() == result.entries.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].pair_id == result.entries[i].pair_id);
    CHECK(back[i].negative_code_id == result.entries[i].negative_code_id);
    CHECK(back[i].score == doctest::Approx(result.entries[i].score).epsilon(1e-12));
  }
  auto map = to_hard_negative_map(back);
  CHECK(map.size() <= back.size());
}

TEST_CASE("mine_all: single-pair dataset is skipped with a warning") {
  auto pairs = cl4d_test::make_separable_corpus(1, 9);
  TfidfMiner miner_model({pairs[0].code});
  auto result = mine_all(pairs, miner_model, 0.98);
  CHECK(result.entries.empty());
  REQUIRE(result.skipped.size() == 1);
  CHECK(result.skipped[0] == pairs[0].id);
}

TEST_CASE("mine_all: hand-built perfect model mines the runner-up") {
  auto pairs = cl4d_test::make_separable_corpus(3, 11);
  struct HandMiner : MinerModel {
    std::vector<std::vector<float>> embed_queries(
        const std::vector<std::string>&) const override {
      return {unit2(0), unit2(90), unit2(180)};
    }
    std::vector<std::vector<float>> embed_codes(
        const std::vector<std::string>&) const override {
      return {unit2(5), unit2(80), unit2(170)};  // gold nearest per query
    }
    std::string name() const override { return "hand"; }
  } hand;
  auto result = mine_all(pairs, hand, 0.0);
  REQUIRE(result.entries.size() == 3);
  // q0 at 0deg: gold code0 (5deg) excluded; runner-up code1 (80deg)
  CHECK(result.entries[0].negative_code_id == pairs[1].id);
  // q1 at 90deg: gold code1; code2 (170deg, 80 away) beats code0 (85 away)
  CHECK(result.entries[1].negative_code_id == pairs[2].id);
  // q2 at 180deg: gold code2; code1 (100 away) beats code0 (175 away)
  CHECK(result.entries[2].negative_code_id == pairs[1].id);
}

TEST_SUITE_END();

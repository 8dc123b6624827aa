#pragma once

// End-to-end gradient verification against central finite differences at
// f64. Covers each differentiable op and the full encoder + contrastive
// loss pipeline. The CLI `gradcheck` subcommand prints these results; the
// acceptance suite asserts them.

#include <string>
#include <vector>

#include "json.hpp"

#include "cl4d/contrastive.hpp"
#include "cl4d/model.hpp"
#include "cl4d/tensor.hpp"
#include "cl4d/tokenizer.hpp"

namespace cl4d::gradcheck {

struct CheckResult {
  std::string name;
  double max_rel_err = 0;
  double tolerance = 0;
  bool pass() const { return max_rel_err < tolerance; }
};

namespace detail {

inline std::vector<double> random_values(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = 2.0 * rng.next_unit() - 1.0;
  return v;
}

// single-leaf gradcheck harness
template <typename Build>
double check_single(const tensor::Shape& shape, std::vector<double> init,
                    Build&& build) {
  tensor::Tape<double> tape;
  auto x = tape.leaf(shape, init);
  auto loss = build(tape, x);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic = {tape.grad(x)};
  auto eval = [&](const std::vector<std::vector<double>>& params) {
    tensor::Tape<double> t;
    t.grad_enabled = false;
    auto xx = t.leaf(shape, params[0]);
    return t.value(build(t, xx))[0];
  };
  return tensor::finite_diff_check<double>(eval, {init}, analytic).max_rel_err;
}

}  // namespace detail

inline std::vector<CheckResult> run_op_checks(std::uint64_t seed = 12345) {
  Rng rng(seed);
  std::vector<CheckResult> results;
  auto add = [&](const std::string& name, double err) {
    results.push_back({name, err, 1e-6});
  };

  {
    auto b = detail::random_values(12, rng);
    add("matmul", detail::check_single({3, 4}, detail::random_values(12, rng),
                                       [&](auto& t, auto x) {
                                         auto bb = t.leaf({4, 3}, b);
                                         return t.mean_all(t.matmul(x, bb));
                                       }));
  }
  {
    auto w = detail::random_values(12, rng);
    add("softmax_rows",
        detail::check_single({3, 4}, detail::random_values(12, rng),
                             [&](auto& t, auto x) {
                               auto y = t.softmax_rows(x);
                               auto ww = t.leaf({3, 4}, w);
                               return t.mean_all(t.rowwise_dot(y, ww));
                             }));
  }
  {
    auto g = detail::random_values(4, rng);
    auto b = detail::random_values(4, rng);
    auto w = detail::random_values(12, rng);
    add("layer_norm",
        detail::check_single({3, 4}, detail::random_values(12, rng),
                             [&](auto& t, auto x) {
                               auto gg = t.leaf({4}, g);
                               auto bb = t.leaf({4}, b);
                               auto ww = t.leaf({3, 4}, w);
                               return t.mean_all(
                                   t.rowwise_dot(t.layer_norm(x, gg, bb), ww));
                             }));
  }
  add("gelu", detail::check_single({2, 3}, detail::random_values(6, rng),
                                   [](auto& t, auto x) {
                                     return t.mean_all(t.gelu(x));
                                   }));
  {
    auto k = detail::random_values(8, rng);
    auto v = detail::random_values(8, rng);
    auto w = detail::random_values(8, rng);
    std::vector<bool> mask = {true, true, false, true};
    add("causal_attention",
        detail::check_single({4, 2}, detail::random_values(8, rng),
                             [&](auto& t, auto q) {
                               auto kk = t.leaf({4, 2}, k);
                               auto vv = t.leaf({4, 2}, v);
                               auto o = t.causal_attention(q, kk, vv, mask,
                                                           0.7071067811865476);
                               auto ww = t.leaf({4, 2}, w);
                               return t.mean_all(t.rowwise_dot(o, ww));
                             }));
  }
  {
    auto w = detail::random_values(6, rng);
    add("l2_normalize",
        detail::check_single({6}, detail::random_values(6, rng),
                             [&](auto& t, auto x) {
                               auto y = t.l2_normalize(x);
                               auto ww = t.leaf({6}, w);
                               return t.mean_all(
                                   t.rowwise_dot(t.stack_rows({y}),
                                                 t.stack_rows({ww})));
                             }));
  }
  {
    auto tab = detail::random_values(10, rng);
    add("embedding_lookup",
        detail::check_single({5, 2}, tab, [](auto& t, auto table) {
          return t.mean_all(t.embedding_rows(table, {4, 0, 4, 2}));
        }));
  }
  return results;
}

// Full pipeline at the pinned configuration: the encoder forward, pooling,
// normalization and the contrastive loss with hard negatives, differentiated
// with respect to every parameter tensor.
inline CheckResult run_full_model_check(double eps = 1e-5,
                                        std::uint64_t seed = 777) {
  model::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.vocab_size = 64;
  cfg.max_len = 8;
  cfg.seed = seed;

  const std::size_t batch = 4;
  const double tau = 0.05;

  // fixed batch with mixed pad amounts and sides to exercise masking
  Rng rng(derive_seed(seed, "gradcheck-batch"));
  auto make_enc = [&](std::size_t n_real, bpe::PadSide side) {
    bpe::Encoded enc;
    enc.n_real = n_real;
    enc.pad_side = side;
    std::vector<int> real;
    real.push_back(bpe::kBosId);
    for (std::size_t i = 0; i + 2 < n_real; ++i)
      real.push_back(3 + static_cast<int>(rng.next_below(61)));
    real.push_back(bpe::kEosId);
    std::size_t pads = 8 - real.size();
    if (side == bpe::PadSide::Left) {
      enc.ids.assign(pads, bpe::kPadId);
      enc.ids.insert(enc.ids.end(), real.begin(), real.end());
    } else {
      enc.ids = real;
      enc.ids.insert(enc.ids.end(), pads, bpe::kPadId);
    }
    return enc;
  };
  std::vector<bpe::Encoded> queries, codes, hards;
  for (std::size_t i = 0; i < batch; ++i) {
    queries.push_back(make_enc(4 + i, bpe::PadSide::Right));
    codes.push_back(make_enc(8 - i % 3, bpe::PadSide::Right));
    hards.push_back(make_enc(5 + i % 3,
                             i % 2 ? bpe::PadSide::Left : bpe::PadSide::Right));
  }

  auto params = model::init_parameters<double>(cfg);

  auto build_loss = [&](tensor::Tape<double>& tape,
                        const model::Parameters<double>& p) {
    auto leaves = model::make_param_leaves(tape, p);
    std::vector<tensor::Tape<double>::Id> q_rows, c_rows, h_rows;
    for (std::size_t i = 0; i < batch; ++i) {
      auto qs = model::forward_sequence(tape, leaves, p, queries[i], cfg);
      q_rows.push_back(
          model::pool_sequence(tape, qs, queries[i], cfg.pooling, cfg.pad_policy));
      auto cs = model::forward_sequence(tape, leaves, p, codes[i], cfg);
      c_rows.push_back(
          model::pool_sequence(tape, cs, codes[i], cfg.pooling, cfg.pad_policy));
      auto hs = model::forward_sequence(tape, leaves, p, hards[i], cfg);
      h_rows.push_back(
          model::pool_sequence(tape, hs, hards[i], cfg.pooling, cfg.pad_policy));
    }
    auto q = tape.stack_rows(q_rows);
    auto c = tape.stack_rows(c_rows);
    auto hsim = tape.rowwise_dot(q, tape.stack_rows(h_rows));
    auto nce = train::info_nce_loss(tape, q, c, hsim, tau);
    return std::make_pair(nce.loss, leaves);
  };

  tensor::Tape<double> tape;
  auto [loss, leaves] = build_loss(tape, params);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto leaf : leaves) analytic.push_back(tape.grad(leaf));

  auto eval = [&](const std::vector<std::vector<double>>& values) {
    model::Parameters<double> p = params;
    p.values = values;
    tensor::Tape<double> t;
    t.grad_enabled = false;
    auto [l, lv] = build_loss(t, p);
    (void)lv;
    return t.value(l)[0];
  };
  auto report = tensor::finite_diff_check<double>(eval, params.values, analytic,
                                                  eps);
  return {"full_model_info_nce", report.max_rel_err, 1e-4};
}

inline nlohmann::ordered_json results_to_json(
    const std::vector<CheckResult>& results) {
  nlohmann::ordered_json j;
  bool all_pass = true;
  nlohmann::ordered_json checks = nlohmann::ordered_json::array();
  for (const auto& r : results) {
    nlohmann::ordered_json c;
    c["name"] = r.name;
    c["max_rel_err"] = r.max_rel_err;
    c["tolerance"] = r.tolerance;
    c["pass"] = r.pass();
    checks.push_back(c);
    all_pass = all_pass && r.pass();
  }
  j["checks"] = checks;
  j["pass"] = all_pass;
  return j;
}

}  // namespace cl4d::gradcheck

#pragma once

// Contrastive training: the InfoNCE objective over in-batch codes with one
// optional hard negative per example, AdamW with decoupled weight decay and
// global-norm gradient clipping, and the seeded training loop.
//
// Per example i over a batch of n (query, code) pairs:
//   loss_i = -log( exp(s(q_i,c_i)/tau)
//                / ( sum_j exp(s(q_i,c_j)/tau) + exp(s(q_i,h_i)/tau) ) )
// The denominator's hard-negative term uses only example i's own mined code.
// With in-batch negatives disabled the sum degenerates to the positive term
// (ablation mode). Everything is computed with log-sum-exp stabilization.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cl4d/common.hpp"
#include "cl4d/corpus.hpp"
#include "cl4d/model.hpp"
#include "cl4d/tensor.hpp"
#include "cl4d/tokenizer.hpp"

namespace cl4d::train {

struct TrainConfig {
  double temperature = 0.05;
  double lr = 3e-4;           // desk-scale default; 2e-5 works at large scale
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 32;
  int epochs = 2;
  bool use_in_batch = true;
  bool use_hard_negatives = true;
  std::uint64_t seed = 0;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping

  void validate() const {
    if (temperature <= 0)
      throw TemperatureError("temperature must be positive, got " +
                             std::to_string(temperature));
    if (use_in_batch && batch_size < 2)
      throw ConfigError("batch_size must be >= 2 with in-batch negatives");
    if (batch_size < 1 || epochs < 1) throw ConfigError("bad train config");
  }
};

// ---------------------------------------------------------------------------
// Similarity and loss
// ---------------------------------------------------------------------------

// S[i,j] = dot(Q_i, C_j); for unit-norm rows this is the cosine.
template <typename Real>
typename tensor::Tape<Real>::Id similarity_matrix(
    tensor::Tape<Real>& tape, typename tensor::Tape<Real>::Id queries,
    typename tensor::Tape<Real>::Id codes) {
  return tape.matmul_nt(queries, codes);
}

struct LossBreakdown {
  double total = 0;                  // mean over the batch
  std::vector<double> per_example;
  double pos_sim_mean = 0;
  double neg_sim_mean = 0;
};

template <typename Real>
struct InfoNceNodes {
  typename tensor::Tape<Real>::Id per_example;  // [n]
  typename tensor::Tape<Real>::Id loss;         // scalar mean
  LossBreakdown breakdown;
};

namespace detail {

template <typename Real>
void check_unit_rows(const tensor::Tape<Real>& tape,
                     typename tensor::Tape<Real>::Id m, const char* which) {
  const auto& shape = tape.shape(m);
  if (shape.size() != 2) throw ShapeError("info_nce: embeddings must be 2-D");
  std::size_t rows = shape[0], d = shape[1];
  const auto& v = tape.value(m);
  for (std::size_t i = 0; i < rows; ++i) {
    double norm2 = 0;
    for (std::size_t j = 0; j < d; ++j)
      norm2 += double(v[i * d + j]) * double(v[i * d + j]);
    if (std::abs(std::sqrt(norm2) - 1.0) > 1e-4)
      throw NormError(std::string("info_nce: ") + which + " row " +
                      std::to_string(i) + " is not unit-norm");
  }
}

}  // namespace detail

// Differentiable InfoNCE. hard_sims, when present, is the [n] vector of
// s(q_i, h_i); hard_present masks examples that actually carry a hard
// negative (mining can skip entries).
template <typename Real>
InfoNceNodes<Real> info_nce_loss(
    tensor::Tape<Real>& tape, typename tensor::Tape<Real>::Id queries,
    typename tensor::Tape<Real>::Id codes,
    std::optional<typename tensor::Tape<Real>::Id> hard_sims, Real tau,
    bool use_in_batch = true, std::vector<bool> hard_present = {}) {
  using Id = typename tensor::Tape<Real>::Id;
  if (tau <= Real(0))
    throw TemperatureError("temperature must be positive");
  detail::check_unit_rows(tape, queries, "query");
  detail::check_unit_rows(tape, codes, "code");
  const auto& qshape = tape.shape(queries);
  std::size_t n = qshape[0];
  if (tape.shape(codes) != qshape)
    throw ShapeError("info_nce: query/code shape mismatch");

  Id sims = similarity_matrix(tape, queries, codes);
  std::optional<Id> hs = hard_sims;
  if (hs && tape.shape(*hs) != tensor::Shape{n})
    throw ShapeError("info_nce: hard similarity vector must be [n]");
  if (hard_present.empty()) hard_present.assign(n, hs.has_value());
  if (hard_present.size() != n)
    throw ShapeError("info_nce: hard_present mask must be [n]");
  if (!hs)
    std::fill(hard_present.begin(), hard_present.end(), false);

  // copies: later op pushes may reallocate the tape's node storage
  const std::vector<Real> s_vals = tape.value(sims);
  const std::vector<Real> h_copy = hs ? tape.value(*hs) : std::vector<Real>();
  const Real* h_vals = hs ? h_copy.data() : nullptr;

  // forward per example: softmax over (in-batch logits + own hard logit)
  std::vector<Real> losses(n);
  std::vector<Real> probs(n * n, Real(0));  // p_ij including the h term mass
  std::vector<Real> hprobs(n, Real(0));
  for (std::size_t i = 0; i < n; ++i) {
    Real pos = s_vals[i * n + i] / tau;
    Real mx = pos;
    if (use_in_batch)
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, s_vals[i * n + j] / tau);
    if (hard_present[i]) mx = std::max(mx, h_vals[i] / tau);
    Real denom = 0;
    if (use_in_batch) {
      for (std::size_t j = 0; j < n; ++j)
        denom += std::exp(s_vals[i * n + j] / tau - mx);
    } else {
      denom += std::exp(pos - mx);
    }
    if (hard_present[i]) denom += std::exp(h_vals[i] / tau - mx);
    losses[i] = std::log(denom) + mx - pos;
    if (use_in_batch)
      for (std::size_t j = 0; j < n; ++j)
        probs[i * n + j] = std::exp(s_vals[i * n + j] / tau - mx) / denom;
    else
      probs[i * n + i] = std::exp(pos - mx) / denom;
    if (hard_present[i]) hprobs[i] = std::exp(h_vals[i] / tau - mx) / denom;
  }

  Id per_example = tape.custom_op(
      {n}, losses,
      [sims, hs, n, tau, probs, hprobs, hard_present](tensor::Tape<Real>& t) {
        Id self = t.current_op();
        const auto& g = t.grad(self);
        auto& gs = t.mutable_grad(sims);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            Real delta = i == j ? Real(1) : Real(0);
            gs[i * n + j] += g[i] * (probs[i * n + j] - delta) / tau;
          }
        }
        if (hs) {
          auto& gh = t.mutable_grad(*hs);
          for (std::size_t i = 0; i < n; ++i)
            if (hard_present[i]) gh[i] += g[i] * hprobs[i] / tau;
        }
      });

  InfoNceNodes<Real> out;
  out.per_example = per_example;
  out.loss = tape.mean_all(per_example);
  out.breakdown.total = static_cast<double>(tape.value(out.loss)[0]);
  out.breakdown.per_example.assign(losses.begin(), losses.end());
  double pos_acc = 0, neg_acc = 0;
  std::size_t neg_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    pos_acc += static_cast<double>(s_vals[i * n + i]);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && use_in_batch) {
        neg_acc += static_cast<double>(s_vals[i * n + j]);
        ++neg_count;
      }
    if (hard_present[i]) {
      neg_acc += static_cast<double>(h_vals[i]);
      ++neg_count;
    }
  }
  out.breakdown.pos_sim_mean = pos_acc / static_cast<double>(n);
  out.breakdown.neg_sim_mean =
      neg_count == 0 ? 0.0 : neg_acc / static_cast<double>(neg_count);
  return out;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

template <typename Real>
struct AdamWState {
  std::vector<std::vector<Real>> m, v;
  std::int64_t step = 0;

  static AdamWState init(const model::Parameters<Real>& params) {
    AdamWState s;
    s.m.reserve(params.values.size());
    s.v.reserve(params.values.size());
    for (const auto& t : params.values) {
      s.m.emplace_back(t.size(), Real(0));
      s.v.emplace_back(t.size(), Real(0));
    }
    return s;
  }
};

// Global-norm clip across every gradient tensor; returns the pre-clip norm.
template <typename Real>
double clip_gradients(std::vector<std::vector<Real>>& grads, double clip_norm) {
  double norm2 = 0;
  for (const auto& g : grads)
    for (Real v : g) norm2 += double(v) * double(v);
  double norm = std::sqrt(norm2);
  if (clip_norm > 0 && norm > clip_norm) {
    Real scale = static_cast<Real>(clip_norm / norm);
    for (auto& g : grads)
      for (Real& v : g) v *= scale;
  }
  return norm;
}

// One decoupled-weight-decay step:
//   theta <- theta - lr * ( mhat / (sqrt(vhat) + eps) + weight_decay * theta )
template <typename Real>
void adamw_step(model::Parameters<Real>& params,
                std::vector<std::vector<Real>>& grads, AdamWState<Real>& state,
                const TrainConfig& cfg) {
  if (grads.size() != params.values.size())
    throw ShapeError("adamw_step: gradient tensor count mismatch");
  clip_gradients(grads, cfg.grad_clip_norm);
  state.step += 1;
  double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.values.size(); ++t) {
    auto& theta = params.values[t];
    auto& g = grads[t];
    auto& m = state.m[t];
    auto& v = state.v[t];
    if (g.size() != theta.size())
      throw ShapeError("adamw_step: gradient shape mismatch at tensor " +
                       std::to_string(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double gi = static_cast<double>(g[i]);
      double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
      double vi =
          cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      double mhat = mi / bias1;
      double vhat = vi / bias2;
      double update = mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                      cfg.weight_decay * static_cast<double>(theta[i]);
      theta[i] = static_cast<Real>(static_cast<double>(theta[i]) - cfg.lr * update);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LossCurvePoint {
  std::int64_t step = 0;
  double total = 0;
  double pos_sim = 0;
  double neg_sim = 0;
};

inline std::string loss_curve_csv(const std::vector<LossCurvePoint>& curve) {
  std::string out = "step,total,pos_sim,neg_sim\n";
  char buf[160];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g\n",
                  static_cast<long long>(p.step), p.total, p.pos_sim, p.neg_sim);
    out += buf;
  }
  return out;
}

struct TrainResult {
  model::Parameters<float> params;
  std::vector<LossCurvePoint> curve;
  std::vector<std::filesystem::path> checkpoints;
};

// One optimizer step over a prepared batch of encoded sequences. Exposed for
// tests; train() drives it.
template <typename Real>
LossBreakdown train_step(model::Parameters<Real>& params,
                         AdamWState<Real>& opt_state,
                         const std::vector<bpe::Encoded>& query_encs,
                         const std::vector<bpe::Encoded>& code_encs,
                         const std::vector<std::optional<bpe::Encoded>>& hard_encs,
                         const model::ModelConfig& mcfg, const TrainConfig& tcfg) {
  using Id = typename tensor::Tape<Real>::Id;
  std::size_t n = query_encs.size();
  if (n == 0 || code_encs.size() != n || hard_encs.size() != n)
    throw ShapeError("train_step: batch size mismatch");

  tensor::Tape<Real> tape;
  auto leaves = model::make_param_leaves(tape, params);
  std::vector<Id> q_rows, c_rows, h_rows;
  std::vector<bool> hard_present(n, false);
  bool any_hard = false;
  for (std::size_t i = 0; i < n; ++i) {
    auto qs = model::forward_sequence(tape, leaves, params, query_encs[i], mcfg);
    q_rows.push_back(model::pool_sequence(tape, qs, query_encs[i], mcfg.pooling,
                                          mcfg.pad_policy));
    auto cs = model::forward_sequence(tape, leaves, params, code_encs[i], mcfg);
    c_rows.push_back(model::pool_sequence(tape, cs, code_encs[i], mcfg.pooling,
                                          mcfg.pad_policy));
    if (hard_encs[i]) {
      hard_present[i] = true;
      any_hard = true;
    }
  }
  // hard-negative rows: encode a placeholder (the positive) for gaps; the
  // mask keeps placeholders out of the loss and their gradient at zero
  if (any_hard) {
    for (std::size_t i = 0; i < n; ++i) {
      const bpe::Encoded& enc = hard_encs[i] ? *hard_encs[i] : code_encs[i];
      auto hsBlock = model::forward_sequence(tape, leaves, params, enc, mcfg);
      h_rows.push_back(model::pool_sequence(tape, hsBlock, enc, mcfg.pooling,
                                            mcfg.pad_policy));
    }
  }

  Id queries = tape.stack_rows(q_rows);
  Id codes = tape.stack_rows(c_rows);
  std::optional<Id> hard_sims;
  if (any_hard)
    hard_sims = tape.rowwise_dot(queries, tape.stack_rows(h_rows));

  auto nce = info_nce_loss(tape, queries, codes, hard_sims,
                           static_cast<Real>(tcfg.temperature),
                           tcfg.use_in_batch, hard_present);
  tape.backward(nce.loss);

  std::vector<std::vector<Real>> grads;
  grads.reserve(leaves.size());
  for (auto leaf : leaves) grads.push_back(tape.grad(leaf));
  adamw_step(params, grads, opt_state, tcfg);
  return nce.breakdown;
}

using HardNegativeMap = std::map<std::string, std::string>;  // pair id -> code id

// Full contrastive run: epochs x ceil(N/n) steps over seeded shuffles of the
// mixed-language corpus. Writes a checkpoint per epoch plus the final one
// when checkpoint_dir is given.
inline TrainResult train(const std::vector<corpus::BimodalPair>& dataset,
                         const bpe::Vocab& vocab, const model::ModelConfig& mcfg,
                         const TrainConfig& tcfg,
                         const std::optional<HardNegativeMap>& hard_map = {},
                         const std::optional<std::filesystem::path>&
                             checkpoint_dir = {}) {
  tcfg.validate();
  mcfg.validate();
  if (dataset.empty()) throw DataError("train: dataset is empty");

  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < dataset.size(); ++i) by_id[dataset[i].id] = i;
  if (hard_map && tcfg.use_hard_negatives)
    for (const auto& [pid, cid] : *hard_map) {
      if (!by_id.count(cid))
        throw DataError("hard negative references unknown code id " + cid);
      if (!by_id.count(pid))
        throw DataError("hard negative references unknown pair id " + pid);
    }

  TrainResult result{model::init_parameters<float>(mcfg), {}, {}};
  AdamWState<float> opt_state = AdamWState<float>::init(result.params);

  auto encode_text = [&](const std::string& text) {
    return bpe::encode(text, vocab, static_cast<std::size_t>(mcfg.max_len),
                       mcfg.pad_side);
  };

  std::size_t n = static_cast<std::size_t>(tcfg.batch_size);
  std::int64_t step = 0;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(tcfg.seed, "train-shuffle-epoch-" +
                                       std::to_string(epoch)));
    shuffle(order, rng);

    for (std::size_t start = 0; start < order.size(); start += n) {
      std::size_t end = std::min(order.size(), start + n);
      std::vector<bpe::Encoded> q_encs, c_encs;
      std::vector<std::optional<bpe::Encoded>> h_encs;
      for (std::size_t k = start; k < end; ++k) {
        const auto& pair = dataset[order[k]];
        q_encs.push_back(encode_text(pair.query));
        c_encs.push_back(encode_text(pair.code));
        std::optional<bpe::Encoded> h;
        if (tcfg.use_hard_negatives && hard_map) {
          auto it = hard_map->find(pair.id);
          if (it != hard_map->end())
            h = encode_text(dataset[by_id.at(it->second)].code);
        }
        h_encs.push_back(std::move(h));
      }
      LossBreakdown breakdown = train_step(result.params, opt_state, q_encs,
                                           c_encs, h_encs, mcfg, tcfg);
      ++step;
      result.curve.push_back(
          {step, breakdown.total, breakdown.pos_sim_mean, breakdown.neg_sim_mean});
    }

    if (checkpoint_dir) {
      auto path = *checkpoint_dir /
                  ("ckpt_epoch" + std::to_string(epoch + 1) + ".bin");
      model::save_checkpoint(path, result.params, mcfg);
      result.checkpoints.push_back(path);
    }
  }
  if (checkpoint_dir) {
    auto path = *checkpoint_dir / "ckpt_final.bin";
    model::save_checkpoint(path, result.params, mcfg);
    result.checkpoints.push_back(path);
  }
  return result;
}

}  // namespace cl4d::train

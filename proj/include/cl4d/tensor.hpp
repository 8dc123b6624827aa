#pragma once

// Dense row-major tensor tape with reverse-mode differentiation. The op set
// covers exactly what the encoder and the contrastive loss need; gradients
// accumulate additively in reverse execution order.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cl4d/common.hpp"

namespace cl4d::tensor {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Large negative stand-in for -inf in attention logits; kept finite so that
// fully masked rows soften to a uniform distribution instead of NaN.
template <typename Real>
constexpr Real mask_negative() {
  if constexpr (sizeof(Real) == 4)
    return Real(-1e9);
  else
    return Real(-1e18);
}

template <typename Real>
class Tape {
 public:
  using Id = std::size_t;

  struct Node {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;            // allocated only in grad mode
    std::function<void(Tape&)> back;   // empty for leaves
  };

  // When false, ops skip grad allocation and backward closures. Used for
  // inference and for the finite-difference evaluation loop.
  bool grad_enabled = true;

  std::size_t size() const { return nodes_.size(); }

  const Shape& shape(Id id) const { return nodes_[id].shape; }
  const std::vector<Real>& value(Id id) const { return nodes_[id].value; }
  std::vector<Real>& mutable_value(Id id) { return nodes_[id].value; }
  const std::vector<Real>& grad(Id id) const { return nodes_[id].grad; }
  std::vector<Real>& mutable_grad(Id id) { return nodes_[id].grad; }

  Id leaf(Shape shape, std::vector<Real> data) {
    if (numel(shape) != data.size())
      throw ShapeError("leaf: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    return push(std::move(shape), std::move(data), nullptr);
  }

  Id scalar(Real v) { return leaf({1}, {v}); }

  // ---- arithmetic -------------------------------------------------------

  Id add(Id a, Id b) {
    check_same_shape("add", a, b);
    const auto& av = nodes_[a].value;
    const auto& bv = nodes_[b].value;
    std::vector<Real> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    return push(nodes_[a].shape, std::move(out), [a, b](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      auto& ga = t.nodes_[a].grad;
      auto& gb = t.nodes_[b].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
    });
  }

  Id scale(Id a, Real c) {
    const auto& av = nodes_[a].value;
    std::vector<Real> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
    return push(nodes_[a].shape, std::move(out), [a, c](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      auto& ga = t.nodes_[a].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }

  // out[i] = a[i] + addend[i], addend is a plain constant (no gradient)
  Id add_const(Id a, const std::vector<Real>& addend) {
    const auto& av = nodes_[a].value;
    if (addend.size() != av.size())
      throw ShapeError("add_const: addend size mismatch");
    std::vector<Real> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + addend[i];
    return push(nodes_[a].shape, std::move(out), [a](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      auto& ga = t.nodes_[a].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }

  // x[m,n] + b[n] broadcast over rows
  Id add_row_vector(Id x, Id b) {
    const Shape& xs = nodes_[x].shape;
    const Shape& bs = nodes_[b].shape;
    if (xs.size() != 2 || bs.size() != 1 || bs[0] != xs[1])
      throw ShapeError("add_row_vector: want [m,n] and [n], got " +
                       shape_str(xs) + " and " + shape_str(bs));
    std::size_t m = xs[0], n = xs[1];
    const auto& xv = nodes_[x].value;
    const auto& bv = nodes_[b].value;
    std::vector<Real> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + bv[j];
    return push(xs, std::move(out), [x, b, m, n](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      auto& gx = t.nodes_[x].grad;
      auto& gb = t.nodes_[b].grad;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          gx[i * n + j] += g[i * n + j];
          gb[j] += g[i * n + j];
        }
    });
  }

  // ---- matmul -----------------------------------------------------------

  // C[m,n] = A[m,k] * B[k,n]; rows of C may be computed in parallel, the
  // k-order accumulation per element is fixed so results do not depend on
  // the thread count.
  Id matmul(Id a, Id b) {
    const Shape& as = nodes_[a].shape;
    const Shape& bs = nodes_[b].shape;
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
      throw ShapeError("matmul: incompatible " + shape_str(as) + " x " +
                       shape_str(bs));
    std::size_t m = as[0], k = as[1], n = bs[1];
    std::vector<Real> out(m * n, Real(0));
    {
      const auto& av = nodes_[a].value;
      const auto& bv = nodes_[b].value;
      auto row_fn = [&](std::size_t i) {
        for (std::size_t p = 0; p < k; ++p) {
          Real aip = av[i * k + p];
          if (aip == Real(0)) continue;
          const Real* brow = bv.data() + p * n;
          Real* crow = out.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
      };
      // threads only pay off on large products; per-row order is fixed
      // either way so results are identical
      if (m * k * n >= 1u << 20) {
        parallel_for(m, row_fn);
      } else {
        for (std::size_t i = 0; i < m; ++i) row_fn(i);
      }
    }
    return push({m, n}, std::move(out), [a, b, m, k, n](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      const auto& av = t.nodes_[a].value;
      const auto& bv = t.nodes_[b].value;
      auto& ga = t.nodes_[a].grad;
      auto& gb = t.nodes_[b].grad;
      // dA = g * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          Real acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
      // dB = A^T * g
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) {
          Real acc = 0;
          for (std::size_t i = 0; i < m; ++i) acc += av[i * k + p] * g[i * n + j];
          gb[p * n + j] += acc;
        }
    });
  }

  // C[m,n] = A[m,k] * B[n,k]^T
  Id matmul_nt(Id a, Id b) {
    const Shape& as = nodes_[a].shape;
    const Shape& bs = nodes_[b].shape;
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[1])
      throw ShapeError("matmul_nt: incompatible " + shape_str(as) + " x " +
                       shape_str(bs) + "^T");
    std::size_t m = as[0], k = as[1], n = bs[0];
    std::vector<Real> out(m * n, Real(0));
    {
      const auto& av = nodes_[a].value;
      const auto& bv = nodes_[b].value;
      auto row_fn = [&](std::size_t i) {
        for (std::size_t j = 0; j < n; ++j) {
          Real acc = 0;
          const Real* arow = av.data() + i * k;
          const Real* brow = bv.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
          out[i * n + j] = acc;
        }
      };
      if (m * k * n >= 1u << 20) {
        parallel_for(m, row_fn);
      } else {
        for (std::size_t i = 0; i < m; ++i) row_fn(i);
      }
    }
    return push({m, n}, std::move(out), [a, b, m, k, n](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      const auto& av = t.nodes_[a].value;
      const auto& bv = t.nodes_[b].value;
      auto& ga = t.nodes_[a].grad;
      auto& gb = t.nodes_[b].grad;
      // dA = g * B
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          Real acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[j * k + p];
          ga[i * k + p] += acc;
        }
      // dB = g^T * A
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) {
          Real acc = 0;
          for (std::size_t i = 0; i < m; ++i) acc += g[i * n + j] * av[i * k + p];
          gb[j * k + p] += acc;
        }
    });
  }

  // ---- nonlinearities ---------------------------------------------------

  // numerically stable row softmax (subtract row max)
  Id softmax_rows(Id x) {
    const Shape& xs = nodes_[x].shape;
    if (xs.size() != 2) throw ShapeError("softmax_rows: want 2-D");
    std::size_t m = xs[0], n = xs[1];
    const auto& xv = nodes_[x].value;
    std::vector<Real> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
      Real mx = xv[i * n];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[i * n + j]);
      Real sum = 0;
      for (std::size_t j = 0; j < n; ++j) {
        Real e = std::exp(xv[i * n + j] - mx);
        out[i * n + j] = e;
        sum += e;
      }
      Real inv = Real(1) / sum;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= inv;
    }
    return push(xs, std::move(out), [x, m, n](Tape& t) {
      Id self = t.current_;
      const auto& y = t.nodes_[self].value;
      const auto& g = t.nodes_[self].grad;
      auto& gx = t.nodes_[x].grad;
      for (std::size_t i = 0; i < m; ++i) {
        Real dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
      }
    });
  }

  // per-last-dim layer norm with learned gain/bias
  Id layer_norm(Id x, Id gain, Id bias, Real eps = Real(1e-5)) {
    const Shape& xs = nodes_[x].shape;
    if (xs.size() != 2) throw ShapeError("layer_norm: want 2-D");
    std::size_t m = xs[0], n = xs[1];
    if (nodes_[gain].shape != Shape{n} || nodes_[bias].shape != Shape{n})
      throw ShapeError("layer_norm: gain/bias must be [n]");
    const auto& xv = nodes_[x].value;
    const auto& gv = nodes_[gain].value;
    const auto& bv = nodes_[bias].value;
    std::vector<Real> out(m * n);
    std::vector<Real> inv_std(m), mean(m);
    for (std::size_t i = 0; i < m; ++i) {
      Real mu = 0;
      for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
      mu /= Real(n);
      Real var = 0;
      for (std::size_t j = 0; j < n; ++j) {
        Real d = xv[i * n + j] - mu;
        var += d * d;
      }
      var /= Real(n);
      Real is = Real(1) / std::sqrt(var + eps);
      mean[i] = mu;
      inv_std[i] = is;
      for (std::size_t j = 0; j < n; ++j)
        out[i * n + j] = (xv[i * n + j] - mu) * is * gv[j] + bv[j];
    }
    return push(xs, std::move(out),
                [x, gain, bias, m, n, mean, inv_std](Tape& t) {
                  Id self = t.current_;
                  const auto& g = t.nodes_[self].grad;
                  const auto& xv = t.nodes_[x].value;
                  const auto& gv = t.nodes_[gain].value;
                  auto& gx = t.nodes_[x].grad;
                  auto& gg = t.nodes_[gain].grad;
                  auto& gb = t.nodes_[bias].grad;
                  for (std::size_t i = 0; i < m; ++i) {
                    Real is = inv_std[i];
                    Real mu = mean[i];
                    // xhat_j = (x_j - mu) * is;  y_j = xhat_j * gain_j + bias_j
                    Real sum_gy = 0, sum_gy_xhat = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                      Real xhat = (xv[i * n + j] - mu) * is;
                      Real gy = g[i * n + j] * gv[j];
                      sum_gy += gy;
                      sum_gy_xhat += gy * xhat;
                      gg[j] += g[i * n + j] * xhat;
                      gb[j] += g[i * n + j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                      Real xhat = (xv[i * n + j] - mu) * is;
                      Real gy = g[i * n + j] * gv[j];
                      gx[i * n + j] +=
                          is * (gy - sum_gy / Real(n) -
                                xhat * sum_gy_xhat / Real(n));
                    }
                  }
                });
  }

  // tanh-approximation gelu
  Id gelu(Id x) {
    const auto& xv = nodes_[x].value;
    std::vector<Real> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = gelu_scalar(xv[i]);
    return push(nodes_[x].shape, std::move(out), [x](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      const auto& xv = t.nodes_[x].value;
      auto& gx = t.nodes_[x].grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        gx[i] += g[i] * gelu_grad_scalar(xv[i]);
    });
  }

  static Real gelu_scalar(Real v) {
    const Real c = Real(0.7978845608028654);  // sqrt(2/pi)
    Real inner = c * (v + Real(0.044715) * v * v * v);
    return Real(0.5) * v * (Real(1) + std::tanh(inner));
  }

  static Real gelu_grad_scalar(Real v) {
    const Real c = Real(0.7978845608028654);
    Real u = c * (v + Real(0.044715) * v * v * v);
    Real th = std::tanh(u);
    Real du = c * (Real(1) + Real(3) * Real(0.044715) * v * v);
    return Real(0.5) * (Real(1) + th) + Real(0.5) * v * (Real(1) - th * th) * du;
  }

  // ---- gather / scatter shapes ------------------------------------------

  // rows of table[V,d] selected by ids -> [T,d]; gradient scatters into rows
  Id embedding_rows(Id table, const std::vector<int>& ids) {
    const Shape& ts = nodes_[table].shape;
    if (ts.size() != 2) throw ShapeError("embedding_rows: table must be 2-D");
    std::size_t v = ts[0], d = ts[1];
    for (int id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= v)
        throw ShapeError("embedding_rows: id " + std::to_string(id) +
                         " out of range [0," + std::to_string(v) + ")");
    std::size_t rows = ids.size();
    const auto& tv = nodes_[table].value;
    std::vector<Real> out(rows * d);
    for (std::size_t i = 0; i < rows; ++i)
      std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d,
                  out.data() + i * d);
    return push({rows, d}, std::move(out), [table, ids, d](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      auto& gt = t.nodes_[table].grad;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        Real* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
        const Real* src = g.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }

  // single row of x[m,n] -> [n]
  Id pick_row(Id x, std::size_t row) {
    const Shape& xs = nodes_[x].shape;
    if (xs.size() != 2 || row >= xs[0])
      throw ShapeError("pick_row: row " + std::to_string(row) + " of " +
                       shape_str(xs));
    std::size_t n = xs[1];
    const auto& xv = nodes_[x].value;
    std::vector<Real> out(xv.begin() + static_cast<std::ptrdiff_t>(row * n),
                          xv.begin() + static_cast<std::ptrdiff_t>((row + 1) * n));
    return push({n}, std::move(out), [x, row, n](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      auto& gx = t.nodes_[x].grad;
      for (std::size_t j = 0; j < n; ++j) gx[row * n + j] += g[j];
    });
  }

  // mean over the given rows of x[m,n] -> [n]
  Id mean_rows(Id x, const std::vector<std::size_t>& rows) {
    const Shape& xs = nodes_[x].shape;
    if (xs.size() != 2) throw ShapeError("mean_rows: want 2-D");
    if (rows.empty()) throw ShapeError("mean_rows: no rows selected");
    std::size_t n = xs[1];
    for (std::size_t r : rows)
      if (r >= xs[0]) throw ShapeError("mean_rows: row out of range");
    const auto& xv = nodes_[x].value;
    std::vector<Real> out(n, Real(0));
    for (std::size_t r : rows)
      for (std::size_t j = 0; j < n; ++j) out[j] += xv[r * n + j];
    Real inv = Real(1) / Real(rows.size());
    for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
    return push({n}, std::move(out), [x, rows, n, inv](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      auto& gx = t.nodes_[x].grad;
      for (std::size_t r : rows)
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[j] * inv;
    });
  }

  // stack k vectors [n] -> [k,n]
  Id stack_rows(const std::vector<Id>& rows) {
    if (rows.empty()) throw ShapeError("stack_rows: empty");
    std::size_t n = nodes_[rows[0]].shape.at(0);
    for (Id r : rows)
      if (nodes_[r].shape != Shape{n})
        throw ShapeError("stack_rows: inconsistent row shapes");
    std::vector<Real> out;
    out.reserve(rows.size() * n);
    for (Id r : rows)
      out.insert(out.end(), nodes_[r].value.begin(), nodes_[r].value.end());
    return push({rows.size(), n}, std::move(out), [rows, n](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        auto& gr = t.nodes_[rows[i]].grad;
        for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
      }
    });
  }

  // column slice x[m, c0:c1] -> [m, c1-c0]
  Id slice_cols(Id x, std::size_t c0, std::size_t c1) {
    const Shape& xs = nodes_[x].shape;
    if (xs.size() != 2 || c0 >= c1 || c1 > xs[1])
      throw ShapeError("slice_cols: bad range on " + shape_str(xs));
    std::size_t m = xs[0], n = xs[1], w = c1 - c0;
    const auto& xv = nodes_[x].value;
    std::vector<Real> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(xv.data() + i * n + c0, w, out.data() + i * w);
    return push({m, w}, std::move(out), [x, c0, m, n, w](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      auto& gx = t.nodes_[x].grad;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) gx[i * n + c0 + j] += g[i * w + j];
    });
  }

  // concat along columns: [m,w1],[m,w2],... -> [m, sum w]
  Id concat_cols(const std::vector<Id>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty");
    std::size_t m = nodes_[parts[0]].shape.at(0);
    std::size_t total = 0;
    for (Id p : parts) {
      const Shape& s = nodes_[p].shape;
      if (s.size() != 2 || s[0] != m)
        throw ShapeError("concat_cols: inconsistent shapes");
      total += s[1];
    }
    std::vector<Real> out(m * total);
    std::size_t off = 0;
    std::vector<std::size_t> offsets;
    for (Id p : parts) {
      std::size_t w = nodes_[p].shape[1];
      offsets.push_back(off);
      const auto& pv = nodes_[p].value;
      for (std::size_t i = 0; i < m; ++i)
        std::copy_n(pv.data() + i * w, w, out.data() + i * total + off);
      off += w;
    }
    return push({m, total}, std::move(out), [parts, offsets, m, total](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        std::size_t w = t.nodes_[parts[pi]].shape[1];
        auto& gp = t.nodes_[parts[pi]].grad;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j)
            gp[i * w + j] += g[i * total + offsets[pi] + j];
      }
    });
  }

  // ---- reductions and vector ops ----------------------------------------

  Id mean_all(Id x) {
    const auto& xv = nodes_[x].value;
    if (xv.empty()) throw ShapeError("mean_all: empty");
    Real acc = 0;
    for (Real v : xv) acc += v;
    Real inv = Real(1) / Real(xv.size());
    return push({1}, {acc * inv}, [x, inv](Tape& t) {
      Id self = t.current_;
      Real g = t.nodes_[self].grad[0];
      auto& gx = t.nodes_[x].grad;
      for (Real& v : gx) v += g * inv;
    });
  }

  // y = x / ||x||; raises ZeroVector below the guard threshold
  Id l2_normalize(Id x) {
    const Shape& xs = nodes_[x].shape;
    if (xs.size() != 1) throw ShapeError("l2_normalize: want 1-D");
    const auto& xv = nodes_[x].value;
    Real norm2 = 0;
    for (Real v : xv) norm2 += v * v;
    Real norm = std::sqrt(norm2);
    if (norm < Real(1e-12))
      throw ZeroVector("l2_normalize: norm " + std::to_string((double)norm));
    Real inv = Real(1) / norm;
    std::vector<Real> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * inv;
    return push(xs, std::move(out), [x, inv](Tape& t) {
      Id self = t.current_;
      const auto& y = t.nodes_[self].value;
      const auto& g = t.nodes_[self].grad;
      auto& gx = t.nodes_[x].grad;
      Real dot = 0;
      for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
      for (std::size_t i = 0; i < g.size(); ++i)
        gx[i] += (g[i] - y[i] * dot) * inv;
    });
  }

  // out[i] = dot(a[i,:], b[i,:]) for a,b of identical shape [m,n]
  Id rowwise_dot(Id a, Id b) {
    check_same_shape("rowwise_dot", a, b);
    const Shape& s = nodes_[a].shape;
    if (s.size() != 2) throw ShapeError("rowwise_dot: want 2-D");
    std::size_t m = s[0], n = s[1];
    const auto& av = nodes_[a].value;
    const auto& bv = nodes_[b].value;
    std::vector<Real> out(m, Real(0));
    for (std::size_t i = 0; i < m; ++i) {
      Real acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += av[i * n + j] * bv[i * n + j];
      out[i] = acc;
    }
    return push({m}, std::move(out), [a, b, m, n](Tape& t) {
      Id self = t.current_;
      const auto& g = t.nodes_[self].grad;
      const auto& av = t.nodes_[a].value;
      const auto& bv = t.nodes_[b].value;
      auto& ga = t.nodes_[a].grad;
      auto& gb = t.nodes_[b].grad;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          ga[i * n + j] += g[i] * bv[i * n + j];
          gb[i * n + j] += g[i] * av[i * n + j];
        }
    });
  }

  // ---- attention ---------------------------------------------------------

  // Single-head scaled dot-product attention with a causal mask and an
  // optional key mask. q,k,v are [T,dh]; key_mask[j]==false drops key j for
  // every query. Composed from tape primitives so gradients follow from the
  // chain rule.
  Id causal_attention(Id q, Id k, Id v, const std::vector<bool>& key_mask,
                      Real scale) {
    const Shape& qs = nodes_[q].shape;
    const Shape& ks = nodes_[k].shape;
    const Shape& vs = nodes_[v].shape;
    if (qs.size() != 2 || ks != qs || vs.size() != 2 || vs[0] != qs[0])
      throw ShapeError("causal_attention: want q,k [T,dh] and v [T,dv]");
    std::size_t t_len = qs[0];
    if (!key_mask.empty() && key_mask.size() != t_len)
      throw ShapeError("causal_attention: key_mask length mismatch");
    Id logits = this->scale(matmul_nt(q, k), scale);
    std::vector<Real> mask(t_len * t_len, Real(0));
    for (std::size_t i = 0; i < t_len; ++i)
      for (std::size_t j = 0; j < t_len; ++j) {
        bool blocked = j > i || (!key_mask.empty() && !key_mask[j]);
        if (blocked) mask[i * t_len + j] = mask_negative<Real>();
      }
    Id weights = softmax_rows(add_const(logits, mask));
    return matmul(weights, v);
  }

  // ---- extension point ----------------------------------------------------

  // Record an externally computed op. The back closure runs during backward
  // with current_op() set to the node being differentiated.
  Id custom_op(Shape shape, std::vector<Real> value,
               std::function<void(Tape&)> back) {
    return push(std::move(shape), std::move(value), std::move(back));
  }

  Id current_op() const { return current_; }

  // ---- backward ----------------------------------------------------------

  // Seeds d(loss)/d(loss)=1 and walks the tape in reverse execution order.
  void backward(Id loss) {
    if (!grad_enabled)
      throw ShapeError("backward called on a no-grad tape");
    if (numel(nodes_[loss].shape) != 1)
      throw ShapeError("backward: loss must be scalar");
    nodes_[loss].grad[0] += Real(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].back) {
        current_ = i;
        nodes_[i].back(*this);
      }
    }
  }

  void zero_grads() {
    for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), Real(0));
  }

 private:
  void check_same_shape(const char* op, Id a, Id b) const {
    if (nodes_[a].shape != nodes_[b].shape)
      throw ShapeError(std::string(op) + ": shape mismatch " +
                       shape_str(nodes_[a].shape) + " vs " +
                       shape_str(nodes_[b].shape));
  }

  Id push(Shape shape, std::vector<Real> value,
          std::function<void(Tape&)> back) {
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    if (grad_enabled) {
      n.grad.assign(n.value.size(), Real(0));
      n.back = std::move(back);
    }
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
  Id current_ = 0;  // node whose back fn is running
};

// ---------------------------------------------------------------------------
// Plain (non-tape) helpers
// ---------------------------------------------------------------------------

template <typename Real>
Real dot(const std::vector<Real>& u, const std::vector<Real>& v) {
  Real acc = 0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
  return acc;
}

template <typename Real>
Real norm(const std::vector<Real>& u) {
  return std::sqrt(dot(u, u));
}

template <typename Real>
Real cosine(const std::vector<Real>& u, const std::vector<Real>& v) {
  if (u.size() != v.size()) throw ShapeError("cosine: length mismatch");
  Real nu = norm(u), nv = norm(v);
  if (nu < Real(1e-12) || nv < Real(1e-12))
    throw ZeroVector("cosine: vector norm below 1e-12");
  return dot(u, v) / (nu * nv);
}

// ---------------------------------------------------------------------------
// Finite differences: the gradient oracle. Central differences at the given
// eps; returns the max relative error against the provided analytic grads,
// with a small guard denominator.
// ---------------------------------------------------------------------------

template <typename Real>
struct GradCheckReport {
  Real max_rel_err = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
};

// eval: callable taking const std::vector<std::vector<Real>>& (parameter
// values) and returning the scalar loss. analytic[p][i] must hold
// d loss / d params[p][i].
template <typename Real, typename Eval>
GradCheckReport<Real> finite_diff_check(
    Eval&& eval, std::vector<std::vector<Real>> params,
    const std::vector<std::vector<Real>>& analytic, Real eps = Real(1e-5)) {
  GradCheckReport<Real> report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      Real saved = params[p][i];
      params[p][i] = saved + eps;
      Real up = eval(params);
      params[p][i] = saved - eps;
      Real down = eval(params);
      params[p][i] = saved;
      Real fd = (up - down) / (2 * eps);
      Real an = analytic[p][i];
      Real denom = std::max(Real(1e-8), std::max(std::abs(fd), std::abs(an)));
      Real rel = std::abs(fd - an) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace cl4d::tensor

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lcp/common.hpp"
#include "lcp/rng.hpp"
#include "lcp/tensor.hpp"

namespace lcp {

// Multi-accumulator dot product.  The independent lanes vectorize under
// plain -O3 (no reassociation license needed) and the combine order is
// fixed, so results are reproducible run to run.
template <typename T>
inline T dot_span(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  T tail{};
  for (; i < n; ++i) tail += a[i] * b[i];
  return (((acc[0] + acc[4]) + (acc[1] + acc[5])) +
          ((acc[2] + acc[6]) + (acc[3] + acc[7]))) +
         tail;
}

template <typename T>
inline T sum_span(const T* a, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k];
  T tail{};
  for (; i < n; ++i) tail += a[i];
  return (((acc[0] + acc[4]) + (acc[1] + acc[5])) +
          ((acc[2] + acc[6]) + (acc[3] + acc[7]))) +
         tail;
}

// y += s * x over a contiguous span.
template <typename T>
inline void axpy_span(T* y, T s, const T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += s * x[i];
}

// Reverse-mode tape over dense tensors.  Define-by-run: every op computes
// its value eagerly and records what backward needs.  Parameters and inputs
// enter as non-owning leaf references so no weight copies are made per
// sample; gradients accumulate in per-node buffers read out after
// backward().  A leaf created with needs_grad=false prunes the whole
// gradient subtree below it (the input stack never needs dL/dpixels, which
// skips the most expensive convolution backward).
template <typename T>
class Tape {
 public:
  using Id = int;

  enum class Op : std::uint8_t {
    Leaf,
    Const,
    Conv2d,
    MaxPool,
    Relu,
    Linear,
    Softmax,
    Dropout,
    GatherPad,
    Concat,
    IndexScale,
    StackRows,
    Flatten,
    CrossEntropy,
    Mse,
    WeightedSum,
  };

  void reset() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  const Tensor<T>& value(Id id) const { return node(id).val_ref(); }

  // Gradient of the last backward() root with respect to node `id`;
  // zero-shaped tensor when the node never received gradient.
  const Tensor<T>& grad(Id id) const { return node(id).grad; }

  // --- graph construction -------------------------------------------

  Id leaf(const Tensor<T>* ref, bool needs_grad) {
    Node n;
    n.op = Op::Leaf;
    n.ref = ref;
    n.needs = needs_grad;
    return push(std::move(n));
  }

  Id constant(Tensor<T> v) {
    Node n;
    n.op = Op::Const;
    n.val = std::move(v);
    n.needs = false;
    return push(std::move(n));
  }

  // 3x3 cross-correlation, stride 1, zero padding 1:
  // [Cin,H,W] * [Cout,Cin,3,3] + [Cout] -> [Cout,H,W].
  Id conv2d(Id x, Id w, Id b) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& wv = value(w);
    const Tensor<T>& bv = value(b);
    require(xv.rank() == 3 && wv.rank() == 4 && bv.rank() == 1,
            ErrorKind::State, "conv2d: bad ranks");
    const std::size_t cin = xv.shape[0], h = xv.shape[1], wd = xv.shape[2];
    const std::size_t cout = wv.shape[0];
    require(wv.shape[1] == cin && wv.shape[2] == 3 && wv.shape[3] == 3,
            ErrorKind::State,
            "conv2d: kernel shape mismatch, got " + shape_string(wv.shape) +
                " for input " + shape_string(xv.shape));
    require(bv.shape[0] == cout, ErrorKind::State, "conv2d: bias mismatch");

    Node n;
    n.op = Op::Conv2d;
    n.a = x;
    n.b = w;
    n.c = b;
    n.val = Tensor<T>({cout, h, wd});
    conv_forward(xv, wv, bv, n.val);
    return push(std::move(n));
  }

  // Non-overlapping 2x2 max pool; ties take the first element in row-major
  // window order.  Argmax indices are retained for backward.
  Id maxpool2d(Id x) {
    const Tensor<T>& xv = value(x);
    require(xv.rank() == 3, ErrorKind::State, "maxpool2d: rank must be 3");
    const std::size_t c = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
    require(h % 2 == 0 && w % 2 == 0, ErrorKind::State,
            "maxpool2d: extents must be even, got " + shape_string(xv.shape));
    Node n;
    n.op = Op::MaxPool;
    n.a = x;
    n.val = Tensor<T>({c, h / 2, w / 2});
    n.aux_idx.resize(n.val.numel());
    const T* in = xv.ptr();
    T* out = n.val.ptr();
    std::size_t o = 0;
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t y = 0; y < h; y += 2)
        for (std::size_t x2 = 0; x2 < w; x2 += 2) {
          const std::size_t base = (ci * h + y) * w + x2;
          const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
          std::size_t best = cand[0];
          for (int k = 1; k < 4; ++k)
            if (in[cand[k]] > in[best]) best = cand[k];
          n.aux_idx[o] = static_cast<std::int64_t>(best);
          out[o++] = in[best];
        }
    return push(std::move(n));
  }

  Id relu(Id x) {
    const Tensor<T>& xv = value(x);
    Node n;
    n.op = Op::Relu;
    n.a = x;
    n.val = Tensor<T>(xv.shape);
    for (std::size_t i = 0; i < xv.numel(); ++i)
      n.val.data[i] = xv.data[i] > T{} ? xv.data[i] : T{};
    return push(std::move(n));
  }

  // [N] x [M,N] + [M] -> [M]
  Id linear(Id x, Id w, Id b) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& wv = value(w);
    const Tensor<T>& bv = value(b);
    require(xv.rank() == 1 && wv.rank() == 2 && bv.rank() == 1,
            ErrorKind::State, "linear: bad ranks");
    const std::size_t nn = xv.shape[0], m = wv.shape[0];
    require(wv.shape[1] == nn && bv.shape[0] == m, ErrorKind::State,
            "linear: shape mismatch, weight " + shape_string(wv.shape) +
                " input " + shape_string(xv.shape));
    Node n;
    n.op = Op::Linear;
    n.a = x;
    n.b = w;
    n.c = b;
    n.val = Tensor<T>({m});
    for (std::size_t i = 0; i < m; ++i)
      n.val.data[i] = bv.data[i] + dot_span(wv.ptr() + i * nn, xv.ptr(), nn);
    return push(std::move(n));
  }

  // Numerically stable softmax over a rank-1 tensor.
  Id softmax(Id x) {
    const Tensor<T>& xv = value(x);
    require(xv.rank() == 1, ErrorKind::State, "softmax: rank must be 1");
    Node n;
    n.op = Op::Softmax;
    n.a = x;
    n.val = Tensor<T>(xv.shape);
    T mx = xv.data[0];
    for (T v : xv.data) mx = std::max(mx, v);
    T sum{};
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      n.val.data[i] = std::exp(xv.data[i] - mx);
      sum += n.val.data[i];
    }
    for (T& v : n.val.data) v /= sum;
    return push(std::move(n));
  }

  // Inverted dropout: keep with probability 1-p, scale kept entries by
  // 1/(1-p).  Identity (no node) in inference mode.
  Id dropout(Id x, double p, Rng& rng, bool train) {
    if (!train) return x;
    require(p >= 0.0 && p < 1.0, ErrorKind::Config,
            "dropout: p must be in [0,1)");
    const Tensor<T>& xv = value(x);
    Node n;
    n.op = Op::Dropout;
    n.a = x;
    n.val = Tensor<T>(xv.shape);
    n.aux_t.resize(xv.numel());
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      n.aux_t[i] = rng.next_double() < p ? T{} : scale;
      n.val.data[i] = xv.data[i] * n.aux_t[i];
    }
    return push(std::move(n));
  }

  // out[i] = x[index[i]] for index[i] >= 0, else 0 (zero padding).
  // `index` must outlive the tape.
  Id gather_pad(Id x, const std::vector<std::int64_t>* index) {
    const Tensor<T>& xv = value(x);
    Node n;
    n.op = Op::GatherPad;
    n.a = x;
    n.index = index;
    n.val = Tensor<T>({index->size()});
    for (std::size_t i = 0; i < index->size(); ++i) {
      const std::int64_t j = (*index)[i];
      n.val.data[i] = j >= 0 ? xv.data[static_cast<std::size_t>(j)] : T{};
    }
    return push(std::move(n));
  }

  // Concatenate rank-1 tensors.
  Id concat(const std::vector<Id>& parts) {
    require(!parts.empty(), ErrorKind::State, "concat: empty input");
    std::size_t total = 0;
    for (Id p : parts) total += value(p).numel();
    Node n;
    n.op = Op::Concat;
    n.parents = parts;
    n.val = Tensor<T>({total});
    std::size_t off = 0;
    for (Id p : parts) {
      const Tensor<T>& pv = value(p);
      std::copy(pv.data.begin(), pv.data.end(), n.val.data.begin() +
                                                    static_cast<std::ptrdiff_t>(
                                                        off));
      off += pv.numel();
    }
    return push(std::move(n));
  }

  // out[i] = x[i] * scale[map[i]] — per-element scaling by an indexed
  // coefficient vector (the attention mask-weighting).  `map` must outlive
  // the tape.
  Id index_scale(Id x, Id scale, const std::vector<std::int64_t>* map) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& sv = value(scale);
    require(map->size() == xv.numel(), ErrorKind::State,
            "index_scale: map size mismatch");
    Node n;
    n.op = Op::IndexScale;
    n.a = x;
    n.b = scale;
    n.index = map;
    n.val = Tensor<T>(xv.shape);
    for (std::size_t i = 0; i < xv.numel(); ++i)
      n.val.data[i] =
          xv.data[i] * sv.data[static_cast<std::size_t>((*map)[i])];
    return push(std::move(n));
  }

  // Stack rank-1 tensors of equal length into [B, K] (test utility for
  // batch-form losses).
  Id stack_rows(const std::vector<Id>& rows) {
    require(!rows.empty(), ErrorKind::State, "stack_rows: empty input");
    const std::size_t k = value(rows[0]).numel();
    Node n;
    n.op = Op::StackRows;
    n.parents = rows;
    n.val = Tensor<T>({rows.size(), k});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const Tensor<T>& rv = value(rows[r]);
      require(rv.numel() == k, ErrorKind::State, "stack_rows: ragged rows");
      std::copy(rv.data.begin(), rv.data.end(),
                n.val.data.begin() + static_cast<std::ptrdiff_t>(r * k));
    }
    return push(std::move(n));
  }

  Id flatten(Id x) {
    const Tensor<T>& xv = value(x);
    Node n;
    n.op = Op::Flatten;
    n.a = x;
    n.val = Tensor<T>({xv.numel()});
    n.val.data = xv.data;
    return push(std::move(n));
  }

  // Mean negative log-likelihood over rows; probabilities clamped at 1e-12
  // so a zero at the true class stays finite.  probs: [K] or [B,K];
  // one_hot: same shape, constant.
  Id cross_entropy(Id probs, Tensor<T> one_hot) {
    const Tensor<T>& pv = value(probs);
    require(pv.shape == one_hot.shape, ErrorKind::State,
            "cross_entropy: shape mismatch");
    const std::size_t rows = pv.rank() == 2 ? pv.shape[0] : 1;
    Node n;
    n.op = Op::CrossEntropy;
    n.a = probs;
    n.target = std::move(one_hot);
    n.val = Tensor<T>({1});
    T total{};
    for (std::size_t i = 0; i < pv.numel(); ++i)
      if (n.target.data[i] != T{})
        total -= n.target.data[i] *
                 std::log(std::max(pv.data[i], static_cast<T>(kLogClamp)));
    n.val.data[0] = total / static_cast<T>(rows);
    return push(std::move(n));
  }

  // Mean squared error over mask-selected entries; 0 when the mask is
  // empty.  pred: [B]; target, mask: constants of the same shape.
  Id mse(Id pred, Tensor<T> target, Tensor<T> mask) {
    const Tensor<T>& pv = value(pred);
    require(pv.shape == target.shape && pv.shape == mask.shape,
            ErrorKind::State, "mse: shape mismatch");
    Node n;
    n.op = Op::Mse;
    n.a = pred;
    n.target = std::move(target);
    n.aux_t.assign(mask.data.begin(), mask.data.end());
    std::size_t count = 0;
    T total{};
    for (std::size_t i = 0; i < pv.numel(); ++i) {
      if (n.aux_t[i] == T{}) continue;
      ++count;
      const T d = pv.data[i] - n.target.data[i];
      total += d * d;
    }
    n.mse_count = count;
    n.val = Tensor<T>({1});
    n.val.data[0] = count ? total / static_cast<T>(count) : T{};
    return push(std::move(n));
  }

  // Weighted sum of scalars: Σ w_i · s_i.
  Id weighted_sum(const std::vector<Id>& scalars, std::vector<T> weights) {
    require(scalars.size() == weights.size(), ErrorKind::State,
            "weighted_sum: size mismatch");
    Node n;
    n.op = Op::WeightedSum;
    n.parents = scalars;
    n.aux_t = std::move(weights);
    n.val = Tensor<T>({1});
    T total{};
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      const Tensor<T>& sv = value(scalars[i]);
      require(sv.numel() == 1, ErrorKind::State,
              "weighted_sum: inputs must be scalars");
      total += n.aux_t[i] * sv.data[0];
    }
    n.val.data[0] = total;
    return push(std::move(n));
  }

  // --- backward -------------------------------------------------------

  // Reverse accumulation from a scalar root.  Gradient buffers are
  // (re)zeroed here; read them via grad() afterwards.
  void backward(Id root, T seed = T{1}) {
    require(root >= 0 && root < static_cast<Id>(nodes_.size()),
            ErrorKind::State, "backward: bad root");
    require(value(root).numel() == 1, ErrorKind::State,
            "backward: root must be scalar");
    for (Node& n : nodes_) n.grad = Tensor<T>();
    Node& rn = node(root);
    rn.grad = Tensor<T>(rn.val_ref().shape);
    rn.grad.data[0] = seed;

    for (Id i = root; i >= 0; --i) {
      Node& n = node(i);
      if (!n.needs || n.grad.numel() == 0) continue;
      switch (n.op) {
        case Op::Leaf:
        case Op::Const:
          break;
        case Op::Conv2d:
          backward_conv(n);
          break;
        case Op::MaxPool: {
          Tensor<T>& gx = grad_buf(n.a);
          for (std::size_t o = 0; o < n.grad.numel(); ++o)
            gx.data[static_cast<std::size_t>(n.aux_idx[o])] += n.grad.data[o];
          break;
        }
        case Op::Relu: {
          Tensor<T>& gx = grad_buf(n.a);
          for (std::size_t j = 0; j < n.grad.numel(); ++j)
            if (n.val.data[j] > T{}) gx.data[j] += n.grad.data[j];
          break;
        }
        case Op::Linear:
          backward_linear(n);
          break;
        case Op::Softmax: {
          Tensor<T>& gx = grad_buf(n.a);
          const T dot = dot_span(n.grad.ptr(), n.val.ptr(), n.val.numel());
          for (std::size_t j = 0; j < n.val.numel(); ++j)
            gx.data[j] += n.val.data[j] * (n.grad.data[j] - dot);
          break;
        }
        case Op::Dropout: {
          Tensor<T>& gx = grad_buf(n.a);
          for (std::size_t j = 0; j < n.grad.numel(); ++j)
            gx.data[j] += n.grad.data[j] * n.aux_t[j];
          break;
        }
        case Op::GatherPad: {
          Tensor<T>& gx = grad_buf(n.a);
          for (std::size_t j = 0; j < n.index->size(); ++j) {
            const std::int64_t src = (*n.index)[j];
            if (src >= 0)
              gx.data[static_cast<std::size_t>(src)] += n.grad.data[j];
          }
          break;
        }
        case Op::Concat: {
          std::size_t off = 0;
          for (Id p : n.parents) {
            const std::size_t len = value(p).numel();
            if (node(p).needs) {
              Tensor<T>& gp = grad_buf(p);
              axpy_span(gp.ptr(), T{1}, n.grad.ptr() + off, len);
            }
            off += len;
          }
          break;
        }
        case Op::IndexScale: {
          const Tensor<T>& xv = value(n.a);
          const Tensor<T>& sv = value(n.b);
          if (node(n.a).needs) {
            Tensor<T>& gx = grad_buf(n.a);
            for (std::size_t j = 0; j < xv.numel(); ++j)
              gx.data[j] += n.grad.data[j] *
                            sv.data[static_cast<std::size_t>((*n.index)[j])];
          }
          if (node(n.b).needs) {
            Tensor<T>& gs = grad_buf(n.b);
            for (std::size_t j = 0; j < xv.numel(); ++j)
              gs.data[static_cast<std::size_t>((*n.index)[j])] +=
                  n.grad.data[j] * xv.data[j];
          }
          break;
        }
        case Op::StackRows: {
          const std::size_t k = n.val.shape[1];
          for (std::size_t r = 0; r < n.parents.size(); ++r) {
            const Id p = n.parents[r];
            if (!node(p).needs) continue;
            Tensor<T>& gp = grad_buf(p);
            axpy_span(gp.ptr(), T{1}, n.grad.ptr() + r * k, k);
          }
          break;
        }
        case Op::Flatten: {
          Tensor<T>& gx = grad_buf(n.a);
          axpy_span(gx.ptr(), T{1}, n.grad.ptr(), n.grad.numel());
          break;
        }
        case Op::CrossEntropy: {
          const Tensor<T>& pv = value(n.a);
          const std::size_t rows = pv.rank() == 2 ? pv.shape[0] : 1;
          Tensor<T>& gx = grad_buf(n.a);
          const T g = n.grad.data[0] / static_cast<T>(rows);
          for (std::size_t j = 0; j < pv.numel(); ++j) {
            if (n.target.data[j] == T{}) continue;
            if (pv.data[j] >= static_cast<T>(kLogClamp))
              gx.data[j] -= g * n.target.data[j] / pv.data[j];
            // below the clamp the loss is locally constant in p
          }
          break;
        }
        case Op::Mse: {
          if (n.mse_count == 0) break;
          const Tensor<T>& pv = value(n.a);
          Tensor<T>& gx = grad_buf(n.a);
          const T g =
              n.grad.data[0] * T{2} / static_cast<T>(n.mse_count);
          for (std::size_t j = 0; j < pv.numel(); ++j)
            if (n.aux_t[j] != T{})
              gx.data[j] += g * (pv.data[j] - n.target.data[j]);
          break;
        }
        case Op::WeightedSum: {
          for (std::size_t j = 0; j < n.parents.size(); ++j) {
            const Id p = n.parents[j];
            if (!node(p).needs) continue;
            grad_buf(p).data[0] += n.grad.data[0] * n.aux_t[j];
          }
          break;
        }
      }
    }
  }

 private:
  static constexpr double kLogClamp = 1e-12;

  struct Node {
    Op op = Op::Leaf;
    Id a = -1, b = -1, c = -1;       // parent ids for fixed-arity ops
    std::vector<Id> parents;          // variadic ops
    const Tensor<T>* ref = nullptr;   // leaf storage
    Tensor<T> val;                    // owned value (non-leaf)
    Tensor<T> grad;
    Tensor<T> target;                 // CE one-hot / MSE target
    std::vector<T> aux_t;             // dropout mask / MSE mask / weights
    std::vector<std::int64_t> aux_idx;  // maxpool argmax
    const std::vector<std::int64_t>* index = nullptr;  // gather/scale maps
    std::size_t mse_count = 0;
    bool needs = false;

    const Tensor<T>& val_ref() const { return ref ? *ref : val; }
  };

  Node& node(Id id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(Id id) const { return nodes_[static_cast<std::size_t>(id)]; }

  Id push(Node n) {
    if (n.op != Op::Leaf && n.op != Op::Const) {
      bool needs = false;
      for (Id p : {n.a, n.b, n.c})
        if (p >= 0) needs = needs || node(p).needs;
      for (Id p : n.parents) needs = needs || node(p).needs;
      n.needs = needs;
    }
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
  }

  Tensor<T>& grad_buf(Id id) {
    Node& n = node(id);
    if (n.grad.numel() == 0) n.grad = Tensor<T>(n.val_ref().shape);
    return n.grad;
  }

  // Adds the full 3x3 stencil of `k` over one output row.  r0/r1/r2 are the
  // input rows above/at/below it; callers pass a zeroed row for neighbours
  // outside the image, and the first/last column clip the horizontal taps
  // that would read out of bounds.  One fused pass does all nine taps, so
  // each input element is loaded from cache-hot rows instead of nine
  // separate plane sweeps.
  static void stencil_row_add(T* __restrict orow, const T* k,
                              const T* __restrict r0, const T* __restrict r1,
                              const T* __restrict r2, std::size_t wd) {
    if (wd == 1) {
      orow[0] += k[1] * r0[0] + k[4] * r1[0] + k[7] * r2[0];
      return;
    }
    orow[0] += k[1] * r0[0] + k[2] * r0[1] + k[4] * r1[0] + k[5] * r1[1] +
               k[7] * r2[0] + k[8] * r2[1];
    for (std::size_t x = 1; x + 1 < wd; ++x)
      orow[x] += k[0] * r0[x - 1] + k[1] * r0[x] + k[2] * r0[x + 1] +
                 k[3] * r1[x - 1] + k[4] * r1[x] + k[5] * r1[x + 1] +
                 k[6] * r2[x - 1] + k[7] * r2[x] + k[8] * r2[x + 1];
    const std::size_t e = wd - 1;
    orow[e] += k[0] * r0[e - 1] + k[1] * r0[e] + k[3] * r1[e - 1] +
               k[4] * r1[e] + k[6] * r2[e - 1] + k[7] * r2[e];
  }

  // Accumulates the three horizontally shifted dot products of row `a`
  // against row `b` (one per kernel column), each over the x range where
  // the tap stays in bounds: s[0] += sum_x a[x]*b[x-1], s[1] += a.b,
  // s[2] += sum_x a[x]*b[x+1].  Multi-accumulator lanes as in dot_span.
  static void shift3_dots(const T* __restrict a, const T* __restrict b,
                          std::size_t wd, T* s) {
    if (wd == 1) {
      s[1] += a[0] * b[0];
      return;
    }
    T l0[8] = {}, l1[8] = {}, l2[8] = {};
    std::size_t x = 1;
    for (; x + 8 < wd; x += 8)
      for (std::size_t j = 0; j < 8; ++j) {
        l0[j] += a[x + j] * b[x + j - 1];
        l1[j] += a[x + j] * b[x + j];
        l2[j] += a[x + j] * b[x + j + 1];
      }
    T t0{}, t1{}, t2{};
    for (; x + 1 < wd; ++x) {
      t0 += a[x] * b[x - 1];
      t1 += a[x] * b[x];
      t2 += a[x] * b[x + 1];
    }
    const auto lanes = [](const T* l, T t) {
      return (((l[0] + l[4]) + (l[1] + l[5])) +
              ((l[2] + l[6]) + (l[3] + l[7]))) +
             t;
    };
    const std::size_t e = wd - 1;
    s[0] += lanes(l0, t0) + a[e] * b[e - 1];
    s[1] += lanes(l1, t1) + a[0] * b[0] + a[e] * b[e];
    s[2] += lanes(l2, t2) + a[0] * b[1];
  }

  static void conv_forward(const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& b, Tensor<T>& out) {
    const std::size_t cin = x.shape[0], h = x.shape[1], wd = x.shape[2];
    const std::size_t cout = w.shape[0];
    const std::vector<T> zero_row(wd);
    const T* zr = zero_row.data();
    for (std::size_t co = 0; co < cout; ++co) {
      T* oplane = out.ptr() + co * h * wd;
      std::fill(oplane, oplane + h * wd, b.data[co]);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T* iplane = x.ptr() + ci * h * wd;
        const T* k = w.ptr() + (co * cin + ci) * 9;
        for (std::size_t y = 0; y < h; ++y) {
          const T* r0 = y == 0 ? zr : iplane + (y - 1) * wd;
          const T* r2 = y + 1 == h ? zr : iplane + (y + 1) * wd;
          stencil_row_add(oplane + y * wd, k, r0, iplane + y * wd, r2, wd);
        }
      }
    }
  }

  void backward_conv(Node& n) {
    const Tensor<T>& x = value(n.a);
    const Tensor<T>& w = value(n.b);
    const std::size_t cin = x.shape[0], h = x.shape[1], wd = x.shape[2];
    const std::size_t cout = w.shape[0];
    const Tensor<T>& g = n.grad;
    const bool need_w = node(n.b).needs;
    const bool need_x = node(n.a).needs;

    if (node(n.c).needs) {
      Tensor<T>& gb = grad_buf(n.c);
      for (std::size_t co = 0; co < cout; ++co)
        gb.data[co] += sum_span(g.ptr() + co * h * wd, h * wd);
    }
    if (!need_w && !need_x) return;

    // A gradient plane that has passed back through max pooling and ReLU is
    // mostly zeros (pooling alone leaves at most one live cell in four), so
    // collect its nonzero entries once per output channel and take scalar
    // scatter/gather loops over just those when the plane is sparse enough
    // for that to beat the dense row kernels.
    Tensor<T>* gw = need_w ? &grad_buf(n.b) : nullptr;
    Tensor<T>* gx = need_x ? &grad_buf(n.a) : nullptr;
    const std::vector<T> zero_row(wd);
    const T* zr = zero_row.data();
    std::vector<std::uint32_t> nz_idx;
    nz_idx.reserve(h * wd / 4);
    for (std::size_t co = 0; co < cout; ++co) {
      const T* gplane = g.ptr() + co * h * wd;
      nz_idx.clear();
      for (std::size_t i = 0; i < h * wd; ++i)
        if (gplane[i] != T{}) nz_idx.push_back(static_cast<std::uint32_t>(i));
      const bool sparse = nz_idx.size() * 4 < h * wd;

      if (need_w) {
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const T* iplane = x.ptr() + ci * h * wd;
          // dL/dw[ky][kx] = sum over the output plane of g[y][x] *
          // x[y+ky-1][x+kx-1].
          T acc[9] = {};
          if (sparse) {
            for (const std::uint32_t i : nz_idx) {
              const std::size_t y = i / wd, xx = i % wd;
              const T gv = gplane[i];
              for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::size_t iy = y + ky;
                if (iy < 1 || iy > h) continue;  // input row y+ky-1
                const T* irow = iplane + (iy - 1) * wd;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  const std::size_t ix = xx + kx;
                  if (ix < 1 || ix > wd) continue;
                  acc[ky * 3 + kx] += gv * irow[ix - 1];
                }
              }
            }
          } else {
            // One pass per output row covers all nine taps while the row
            // is cache hot.
            for (std::size_t y = 0; y < h; ++y) {
              const T* grow = gplane + y * wd;
              if (y > 0) shift3_dots(grow, iplane + (y - 1) * wd, wd, acc);
              shift3_dots(grow, iplane + y * wd, wd, acc + 3);
              if (y + 1 < h)
                shift3_dots(grow, iplane + (y + 1) * wd, wd, acc + 6);
            }
          }
          T* gwbase = gw->ptr() + (co * cin + ci) * 9;
          for (int i = 0; i < 9; ++i) gwbase[i] += acc[i];
        }
      }

      if (need_x) {
        for (std::size_t ci = 0; ci < cin; ++ci) {
          T* giplane = gx->ptr() + ci * h * wd;
          const T* wbase = w.ptr() + (co * cin + ci) * 9;
          if (sparse) {
            // Each live g[y][x] scatters w[ky][kx]*g into
            // gx[y+ky-1][x+kx-1], the transpose of the forward stencil.
            for (const std::uint32_t i : nz_idx) {
              const std::size_t y = i / wd, xx = i % wd;
              const T gv = gplane[i];
              for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::size_t iy = y + ky;
                if (iy < 1 || iy > h) continue;
                T* grow = giplane + (iy - 1) * wd;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  const std::size_t ix = xx + kx;
                  if (ix < 1 || ix > wd) continue;
                  grow[ix - 1] += wbase[ky * 3 + kx] * gv;
                }
              }
            }
          } else {
            // Dense: dL/dx is the cross-correlation of g with the
            // 180-degree rotated kernel, same zero padding.
            T krot[9];
            for (int i = 0; i < 9; ++i) krot[i] = wbase[8 - i];
            for (std::size_t y = 0; y < h; ++y) {
              const T* r0 = y == 0 ? zr : gplane + (y - 1) * wd;
              const T* r2 = y + 1 == h ? zr : gplane + (y + 1) * wd;
              stencil_row_add(giplane + y * wd, krot, r0, gplane + y * wd, r2,
                              wd);
            }
          }
        }
      }
    }
  }

  void backward_linear(Node& n) {
    const Tensor<T>& x = value(n.a);
    const Tensor<T>& w = value(n.b);
    const std::size_t nn = x.shape[0], m = w.shape[0];
    const Tensor<T>& g = n.grad;
    if (node(n.c).needs) {
      Tensor<T>& gb = grad_buf(n.c);
      axpy_span(gb.ptr(), T{1}, g.ptr(), m);
    }
    if (node(n.b).needs) {
      Tensor<T>& gw = grad_buf(n.b);
      for (std::size_t i = 0; i < m; ++i)
        if (g.data[i] != T{})
          axpy_span(gw.ptr() + i * nn, g.data[i], x.ptr(), nn);
    }
    if (node(n.a).needs) {
      Tensor<T>& gx = grad_buf(n.a);
      for (std::size_t i = 0; i < m; ++i)
        if (g.data[i] != T{})
          axpy_span(gx.ptr(), g.data[i], w.ptr() + i * nn, nn);
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace lcp

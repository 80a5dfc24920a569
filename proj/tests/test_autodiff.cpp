#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "lcp/autodiff.hpp"
#include "lcp/rng.hpp"
#include "lcp/tensor.hpp"

using Td = lcp::Tensor<double>;
using TapeD = lcp::Tape<double>;
using IdD = TapeD::Id;

namespace {

Td randt(lcp::Rng& rng, std::vector<std::size_t> shape, double lo = -1.0,
         double hi = 1.0) {
  Td t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from the kink so finite differences stay valid.
Td randt_nonzero(lcp::Rng& rng, std::vector<std::size_t> shape) {
  Td t(std::move(shape));
  for (double& v : t.data) {
    const double mag = rng.uniform(0.1, 1.0);
    v = rng.next_double() < 0.5 ? -mag : mag;
  }
  return t;
}

// All-distinct values (gaps >= 0.01) so pooling argmaxes cannot flip under
// a 1e-6 probe.
Td randt_distinct(lcp::Rng& rng, std::vector<std::size_t> shape) {
  Td t(std::move(shape));
  std::vector<std::size_t> order(t.numel());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  lcp::shuffle(order, rng);
  for (std::size_t i = 0; i < order.size(); ++i)
    t.data[i] = 0.01 * static_cast<double>(order[i]) + rng.uniform(0.0, 0.004);
  return t;
}

// ---------------------------------------------------------------------------
// Brute-force references.

Td conv_ref(const Td& x, const Td& w, const Td& b) {
  const std::size_t cin = x.shape[0], h = x.shape[1], wd = x.shape[2];
  const std::size_t cout = w.shape[0];
  Td y({cout, h, wd});
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t yy = 0; yy < h; ++yy)
      for (std::size_t xx = 0; xx < wd; ++xx) {
        double acc = b.data[co];
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const long long iy = static_cast<long long>(yy) + ky - 1;
              const long long ix = static_cast<long long>(xx) + kx - 1;
              if (iy < 0 || iy >= static_cast<long long>(h) || ix < 0 ||
                  ix >= static_cast<long long>(wd))
                continue;
              acc += x.data[(ci * h + static_cast<std::size_t>(iy)) * wd +
                            static_cast<std::size_t>(ix)] *
                     w.data[((co * cin + ci) * 3 +
                             static_cast<std::size_t>(ky)) *
                                3 +
                            static_cast<std::size_t>(kx)];
            }
        y.data[(co * h + yy) * wd + xx] = acc;
      }
  return y;
}

Td maxpool_ref(const Td& x) {
  const std::size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
  Td y({c, h / 2, w / 2});
  std::size_t o = 0;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t yy = 0; yy < h; yy += 2)
      for (std::size_t xx = 0; xx < w; xx += 2) {
        double m = x.data[(ci * h + yy) * w + xx];
        m = std::max(m, x.data[(ci * h + yy) * w + xx + 1]);
        m = std::max(m, x.data[(ci * h + yy + 1) * w + xx]);
        m = std::max(m, x.data[(ci * h + yy + 1) * w + xx + 1]);
        y.data[o++] = m;
      }
  return y;
}

Td linear_ref(const Td& x, const Td& w, const Td& b) {
  const std::size_t n = x.shape[0], m = w.shape[0];
  Td y({m});
  for (std::size_t i = 0; i < m; ++i) {
    double acc = b.data[i];
    for (std::size_t j = 0; j < n; ++j) acc += w.data[i * n + j] * x.data[j];
    y.data[i] = acc;
  }
  return y;
}

double max_abs_diff(const Td& a, const Td& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Generic finite-difference harness.  `build` constructs a scalar-rooted
// graph over leaves made from `inputs`; gradients of every input coordinate
// are compared against central differences.

struct GraphSpec {
  std::vector<Td> inputs;
  std::function<IdD(TapeD&, const std::vector<IdD>&)> build;
};

double eval_spec(const GraphSpec& spec, const std::vector<Td>& inputs) {
  TapeD tape;
  std::vector<IdD> leaves;
  leaves.reserve(inputs.size());
  for (const Td& t : inputs) leaves.push_back(tape.leaf(&t, true));
  const IdD root = spec.build(tape, leaves);
  return tape.value(root).data[0];
}

void fd_check(const GraphSpec& spec, double h = 1e-6, double tol = 2e-6) {
  TapeD tape;
  std::vector<IdD> leaves;
  for (const Td& t : spec.inputs) leaves.push_back(tape.leaf(&t, true));
  const IdD root = spec.build(tape, leaves);
  tape.backward(root);

  std::vector<Td> analytic;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    Td g = tape.grad(leaves[i]);
    if (g.numel() == 0) g = Td(spec.inputs[i].shape);  // never reached: zeros
    analytic.push_back(std::move(g));
  }

  std::vector<Td> probe = spec.inputs;
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (std::size_t j = 0; j < probe[i].numel(); ++j) {
      const double orig = probe[i].data[j];
      probe[i].data[j] = orig + h;
      const double fp = eval_spec(spec, probe);
      probe[i].data[j] = orig - h;
      const double fm = eval_spec(spec, probe);
      probe[i].data[j] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i].data[j];
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-3});
      if (rel > worst) worst = rel;
      if (rel > tol) {
        CAPTURE(i, j, a, numeric, rel);
        FAIL("gradient mismatch against finite differences");
      }
    }
  }
  CAPTURE(worst);
  SUCCEED();
}

IdD mean_square(TapeD& tape, IdD vec) {
  const std::size_t n = tape.value(vec).numel();
  return tape.mse(vec, Td({n}), Td({n}, 1.0));
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward oracles: 100+ random instances per operation.

TEST_CASE("convolution matches the brute-force reference", "[autodiff]") {
  lcp::Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t cin = 1 + rng.next_below(3);
    const std::size_t cout = 1 + rng.next_below(3);
    const std::size_t h = 1 + rng.next_below(6);
    const std::size_t wd = 1 + rng.next_below(10);
    const Td x = randt(rng, {cin, h, wd});
    const Td w = randt(rng, {cout, cin, 3, 3});
    const Td b = randt(rng, {cout});
    TapeD tape;
    const IdD y = tape.conv2d(tape.leaf(&x, false), tape.leaf(&w, false),
                              tape.leaf(&b, false));
    worst = std::max(worst, max_abs_diff(tape.value(y), conv_ref(x, w, b)));
  }
  CAPTURE(worst);
  REQUIRE(worst <= 1e-6);
}

TEST_CASE("pooling matches the brute-force reference", "[autodiff]") {
  lcp::Rng rng(102);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 1 + rng.next_below(3);
    const std::size_t h = 2 * (1 + rng.next_below(4));
    const std::size_t w = 2 * (1 + rng.next_below(4));
    const Td x = randt(rng, {c, h, w});
    TapeD tape;
    const IdD y = tape.maxpool2d(tape.leaf(&x, false));
    worst = std::max(worst, max_abs_diff(tape.value(y), maxpool_ref(x)));
  }
  REQUIRE(worst == 0.0);  // pure selection, no arithmetic
}

TEST_CASE("linear layers match the brute-force reference", "[autodiff]") {
  lcp::Rng rng(103);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.next_below(40);
    const std::size_t m = 1 + rng.next_below(12);
    const Td x = randt(rng, {n});
    const Td w = randt(rng, {m, n});
    const Td b = randt(rng, {m});
    TapeD tape;
    const IdD y = tape.linear(tape.leaf(&x, false), tape.leaf(&w, false),
                              tape.leaf(&b, false));
    worst = std::max(worst, max_abs_diff(tape.value(y), linear_ref(x, w, b)));
  }
  CAPTURE(worst);
  REQUIRE(worst <= 1e-6);
}

TEST_CASE("softmax is a stable normalized exponential", "[autodiff]") {
  lcp::Rng rng(104);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.next_below(8);
    Td x = randt(rng, {n}, -4.0, 4.0);
    TapeD tape;
    const Td& y = tape.value(tape.softmax(tape.leaf(&x, false)));
    double mx = x.data[0];
    for (double v : x.data) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : x.data) sum += std::exp(v - mx);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      REQUIRE(y.data[i] == Catch::Approx(std::exp(x.data[i] - mx) / sum)
                               .margin(1e-12));
      total += y.data[i];
    }
    REQUIRE(total == Catch::Approx(1.0).margin(1e-12));

    // shifting every logit by a constant changes nothing beyond the
    // rounding of the shifted inputs themselves
    Td shifted = x;
    for (double& v : shifted.data) v += 700.0;
    TapeD tape2;
    const Td& y2 = tape2.value(tape2.softmax(tape2.leaf(&shifted, false)));
    for (std::size_t i = 0; i < n; ++i)
      REQUIRE(y2.data[i] == Catch::Approx(y.data[i]).margin(1e-12));
  }
}

TEST_CASE("cross entropy averages clamped log-likelihoods", "[autodiff]") {
  lcp::Rng rng(105);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 1 + rng.next_below(5);
    const std::size_t k = 2 + rng.next_below(4);
    Td probs({b, k});
    Td one_hot({b, k});
    double want = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
      double sum = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        probs.data[r * k + j] = rng.uniform(0.0, 1.0);
        sum += probs.data[r * k + j];
      }
      for (std::size_t j = 0; j < k; ++j) probs.data[r * k + j] /= sum;
      const std::size_t t = rng.next_below(k);
      one_hot.data[r * k + t] = 1.0;
      want -= std::log(std::max(probs.data[r * k + t], 1e-12));
    }
    want /= static_cast<double>(b);
    TapeD tape;
    const IdD loss =
        tape.cross_entropy(tape.leaf(&probs, false), one_hot);
    REQUIRE(tape.value(loss).data[0] == Catch::Approx(want).margin(1e-12));
  }

  SECTION("a zero at the true class is clamped, not infinite") {
    Td probs({3});
    probs.data = {0.0, 0.7, 0.3};
    Td one_hot({3});
    one_hot.data = {1.0, 0.0, 0.0};
    TapeD tape;
    const IdD loss = tape.cross_entropy(tape.leaf(&probs, false), one_hot);
    REQUIRE(tape.value(loss).data[0] ==
            Catch::Approx(-std::log(1e-12)).margin(1e-9));
  }
}

TEST_CASE("masked squared error averages selected entries", "[autodiff]") {
  lcp::Rng rng(106);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.next_below(12);
    const Td pred = randt(rng, {n});
    const Td target = randt(rng, {n});
    Td mask({n});
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      mask.data[i] = rng.next_double() < 0.5 ? 1.0 : 0.0;
      count += mask.data[i] != 0.0;
    }
    double want = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask.data[i] != 0.0) {
        const double d = pred.data[i] - target.data[i];
        want += d * d;
      }
    want = count ? want / static_cast<double>(count) : 0.0;
    TapeD tape;
    const IdD loss = tape.mse(tape.leaf(&pred, false), target, mask);
    REQUIRE(tape.value(loss).data[0] == Catch::Approx(want).margin(1e-12));
  }

  SECTION("an empty mask is a hard zero with zero gradients") {
    Td pred({4});
    pred.data = {1.0, -2.0, 3.0, 4.0};
    TapeD tape;
    const IdD in = tape.leaf(&pred, true);
    const IdD loss = tape.mse(in, Td({4}), Td({4}));
    REQUIRE(tape.value(loss).data[0] == 0.0);
    tape.backward(loss);
    const Td& g = tape.grad(in);
    for (double v : g.data) REQUIRE(v == 0.0);
  }
}

// ---------------------------------------------------------------------------
// Gradients against central finite differences, operation by operation.

TEST_CASE("convolution gradients match finite differences", "[autodiff]") {
  lcp::Rng rng(201);
  for (int trial = 0; trial < 6; ++trial) {
    GraphSpec spec;
    spec.inputs = {randt(rng, {2, 4, 6}), randt(rng, {3, 2, 3, 3}),
                   randt(rng, {3})};
    spec.build = [](TapeD& t, const std::vector<IdD>& L) {
      return mean_square(t, t.flatten(t.conv2d(L[0], L[1], L[2])));
    };
    fd_check(spec);
  }
}

TEST_CASE("convolution gradients survive degenerate extents", "[autodiff]") {
  lcp::Rng rng(202);
  const std::size_t shapes[][3] = {{1, 1, 1}, {1, 1, 2}, {2, 3, 1},
                                   {1, 1, 7}, {2, 2, 8}, {1, 5, 9},
                                   {1, 4, 2}, {1, 2, 16}};
  for (const auto& s : shapes) {
    GraphSpec spec;
    const std::size_t cout = 1 + (s[0] + s[1]) % 2;
    spec.inputs = {randt(rng, {s[0], s[1], s[2]}),
                   randt(rng, {cout, s[0], 3, 3}), randt(rng, {cout})};
    spec.build = [](TapeD& t, const std::vector<IdD>& L) {
      return mean_square(t, t.flatten(t.conv2d(L[0], L[1], L[2])));
    };
    fd_check(spec);
  }
}

TEST_CASE("sparse upstream gradients reach convolution inputs", "[autodiff]") {
  // Only two of 90 output cells feed the loss, putting the backward pass on
  // its sparse gather/scatter path.
  lcp::Rng rng(203);
  static const std::vector<std::int64_t> picks = {7, 61};
  for (int trial = 0; trial < 4; ++trial) {
    GraphSpec spec;
    spec.inputs = {randt(rng, {2, 5, 6}), randt(rng, {3, 2, 3, 3}),
                   randt(rng, {3})};
    spec.build = [](TapeD& t, const std::vector<IdD>& L) {
      const IdD flat = t.flatten(t.conv2d(L[0], L[1], L[2]));
      return mean_square(t, t.gather_pad(flat, &picks));
    };
    fd_check(spec);
  }
}

TEST_CASE("pooling gradients match finite differences", "[autodiff]") {
  lcp::Rng rng(204);
  for (int trial = 0; trial < 6; ++trial) {
    GraphSpec spec;
    spec.inputs = {randt_distinct(rng, {2, 4, 6})};
    spec.build = [](TapeD& t, const std::vector<IdD>& L) {
      return mean_square(t, t.flatten(t.maxpool2d(L[0])));
    };
    fd_check(spec);
  }
}

TEST_CASE("pooling ties route gradient to the first window element",
          "[autodiff]") {
  Td x({1, 2, 2}, 5.0);
  TapeD tape;
  const IdD in = tape.leaf(&x, true);
  const IdD loss = mean_square(tape, tape.flatten(tape.maxpool2d(in)));
  REQUIRE(tape.value(loss).data[0] == 25.0);
  tape.backward(loss);
  const Td& g = tape.grad(in);
  REQUIRE(g.data[0] == 10.0);  // d(y^2)/dy = 2*5, all routed to element 0
  REQUIRE(g.data[1] == 0.0);
  REQUIRE(g.data[2] == 0.0);
  REQUIRE(g.data[3] == 0.0);
}

TEST_CASE("rectifier gradients match finite differences", "[autodiff]") {
  lcp::Rng rng(205);
  for (int trial = 0; trial < 6; ++trial) {
    GraphSpec spec;
    spec.inputs = {randt_nonzero(rng, {24})};
    spec.build = [](TapeD& t, const std::vector<IdD>& L) {
      return mean_square(t, t.relu(L[0]));
    };
    fd_check(spec);
  }

  SECTION("exactly zero input contributes nothing") {
    Td x({3});
    x.data = {-1.0, 0.0, 2.0};
    TapeD tape;
    const IdD in = tape.leaf(&x, true);
    const IdD loss = mean_square(tape, tape.relu(in));
    tape.backward(loss);
    const Td& g = tape.grad(in);
    REQUIRE(g.data[0] == 0.0);
    REQUIRE(g.data[1] == 0.0);
    REQUIRE(g.data[2] == Catch::Approx(4.0 / 3.0));
  }
}

TEST_CASE("linear gradients match finite differences", "[autodiff]") {
  lcp::Rng rng(206);
  for (int trial = 0; trial < 6; ++trial) {
    GraphSpec spec;
    spec.inputs = {randt(rng, {7}), randt(rng, {4, 7}), randt(rng, {4})};
    spec.build = [](TapeD& t, const std::vector<IdD>& L) {
      return mean_square(t, t.linear(L[0], L[1], L[2]));
    };
    fd_check(spec);
  }
}

TEST_CASE("softmax and cross-entropy gradients match finite differences",
          "[autodiff]") {
  lcp::Rng rng(207);
  for (int trial = 0; trial < 6; ++trial) {
    Td one_hot({5});
    one_hot.data[rng.next_below(5)] = 1.0;
    GraphSpec spec;
    spec.inputs = {randt(rng, {5}, -2.0, 2.0)};
    spec.build = [one_hot](TapeD& t, const std::vector<IdD>& L) {
      return t.cross_entropy(t.softmax(L[0]), one_hot);
    };
    fd_check(spec);
  }
}

TEST_CASE("masked error gradients match finite differences", "[autodiff]") {
  lcp::Rng rng(208);
  for (int trial = 0; trial < 6; ++trial) {
    Td target = randt(rng, {9});
    Td mask({9});
    for (std::size_t i = 0; i < 9; ++i)
      mask.data[i] = rng.next_double() < 0.6 ? 1.0 : 0.0;
    mask.data[0] = 1.0;  // never fully empty
    GraphSpec spec;
    spec.inputs = {randt(rng, {9})};
    spec.build = [target, mask](TapeD& t, const std::vector<IdD>& L) {
      return t.mse(L[0], target, mask);
    };
    fd_check(spec);

    // unmasked coordinates must receive exactly zero gradient
    TapeD tape;
    const IdD in = tape.leaf(&spec.inputs[0], true);
    tape.backward(tape.mse(in, target, mask));
    const Td& g = tape.grad(in);
    for (std::size_t i = 0; i < 9; ++i)
      if (mask.data[i] == 0.0) REQUIRE(g.data[i] == 0.0);
  }
}

TEST_CASE("gather with padding gradients match finite differences",
          "[autodiff]") {
  lcp::Rng rng(209);
  static const std::vector<std::int64_t> index = {3, -1, 7, 0, -1, 11, 5, 3};
  GraphSpec spec;
  spec.inputs = {randt(rng, {12})};
  spec.build = [](TapeD& t, const std::vector<IdD>& L) {
    return mean_square(t, t.gather_pad(L[0], &index));
  };
  fd_check(spec);

  SECTION("padded slots read exactly zero") {
    TapeD tape;
    const IdD in = tape.leaf(&spec.inputs[0], true);
    const Td& y = tape.value(tape.gather_pad(in, &index));
    REQUIRE(y.data[1] == 0.0);
    REQUIRE(y.data[4] == 0.0);
    REQUIRE(y.data[0] == spec.inputs[0].data[3]);
    REQUIRE(y.data[7] == spec.inputs[0].data[3]);
  }
}

TEST_CASE("concatenation gradients match finite differences", "[autodiff]") {
  lcp::Rng rng(210);
  GraphSpec spec;
  spec.inputs = {randt(rng, {3}), randt(rng, {5}), randt(rng, {2})};
  spec.build = [](TapeD& t, const std::vector<IdD>& L) {
    return mean_square(t, t.concat({L[0], L[1], L[2]}));
  };
  fd_check(spec);
}

TEST_CASE("indexed scaling gradients match finite differences", "[autodiff]") {
  lcp::Rng rng(211);
  static const std::vector<std::int64_t> map = {0, 1, 2, 3, 0, 1,
                                                2, 3, 0, 1, 2, 3};
  GraphSpec spec;
  spec.inputs = {randt(rng, {12}), randt(rng, {4})};
  spec.build = [](TapeD& t, const std::vector<IdD>& L) {
    return mean_square(t, t.index_scale(L[0], L[1], &map));
  };
  fd_check(spec);
}

TEST_CASE("row stacking gradients match finite differences", "[autodiff]") {
  lcp::Rng rng(212);
  Td one_hot({4, 3});
  for (std::size_t r = 0; r < 4; ++r)
    one_hot.data[r * 3 + rng.next_below(3)] = 1.0;
  GraphSpec spec;
  spec.inputs = {randt(rng, {3}), randt(rng, {3}), randt(rng, {3}),
                 randt(rng, {3})};
  spec.build = [one_hot](TapeD& t, const std::vector<IdD>& L) {
    return t.cross_entropy(
        t.stack_rows({t.softmax(L[0]), t.softmax(L[1]), t.softmax(L[2]),
                      t.softmax(L[3])}),
        one_hot);
  };
  fd_check(spec);
}

TEST_CASE("weighted sums combine scalar losses linearly", "[autodiff]") {
  lcp::Rng rng(213);
  GraphSpec spec;
  spec.inputs = {randt(rng, {4}), randt(rng, {6}), randt(rng, {3})};
  spec.build = [](TapeD& t, const std::vector<IdD>& L) {
    return t.weighted_sum({mean_square(t, L[0]), mean_square(t, L[1]),
                           mean_square(t, L[2])},
                          {0.3, 0.7, -0.2});
  };
  fd_check(spec);
}

TEST_CASE("dropout gradients match finite differences under a pinned mask",
          "[autodiff]") {
  lcp::Rng rng(214);
  GraphSpec spec;
  spec.inputs = {randt(rng, {24})};
  spec.build = [](TapeD& t, const std::vector<IdD>& L) {
    lcp::Rng mask_rng(77);
    return mean_square(t, t.dropout(L[0], 0.4, mask_rng, true));
  };
  fd_check(spec);
}

TEST_CASE("dropout semantics", "[autodiff]") {
  lcp::Rng rng(215);
  const Td x = randt(rng, {50}, 0.5, 1.5);

  SECTION("inference mode is a true identity") {
    TapeD tape;
    const IdD in = tape.leaf(&x, false);
    lcp::Rng mask_rng(1);
    const std::size_t before = tape.size();
    const IdD out = tape.dropout(in, 0.5, mask_rng, false);
    REQUIRE(out == in);
    REQUIRE(tape.size() == before);
  }
  SECTION("kept entries are scaled by 1/(1-p)") {
    TapeD tape;
    const IdD in = tape.leaf(&x, false);
    lcp::Rng mask_rng(2);
    const Td& y = tape.value(tape.dropout(in, 0.25, mask_rng, true));
    for (std::size_t i = 0; i < y.numel(); ++i) {
      const bool dropped = y.data[i] == 0.0;
      if (!dropped)
        REQUIRE(y.data[i] == Catch::Approx(x.data[i] / 0.75).margin(1e-12));
    }
  }
  SECTION("masks average to an unbiased identity") {
    // inverted dropout: over many masks the expected output equals the
    // input.  10^4 draws put the standard error around 1%.
    lcp::Rng mask_rng(3);
    std::vector<double> sum(x.numel(), 0.0);
    const int draws = 10000;
    for (int d = 0; d < draws; ++d) {
      TapeD tape;
      const IdD in = tape.leaf(&x, false);
      const Td& y = tape.value(tape.dropout(in, 0.5, mask_rng, true));
      for (std::size_t i = 0; i < y.numel(); ++i) sum[i] += y.data[i];
    }
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double mean = sum[i] / draws;
      REQUIRE(mean == Catch::Approx(x.data[i]).epsilon(0.05));
    }
  }
}

// ---------------------------------------------------------------------------
// Tape mechanics.

TEST_CASE("per-sample weighting equals batched loss", "[autodiff]") {
  // The trainer accumulates per-sample losses with 1/B weights; that must
  // equal the batch-matrix form both in value and in gradients.
  lcp::Rng rng(301);
  const std::size_t b = 4, k = 5;
  std::vector<Td> xs;
  Td one_hot({b, k});
  for (std::size_t r = 0; r < b; ++r) {
    xs.push_back(randt(rng, {k}, -2.0, 2.0));
    one_hot.data[r * k + rng.next_below(k)] = 1.0;
  }

  // batched
  TapeD tb;
  std::vector<IdD> leaves_b;
  for (const Td& x : xs) leaves_b.push_back(tb.leaf(&x, true));
  std::vector<IdD> rows;
  for (IdD l : leaves_b) rows.push_back(tb.softmax(l));
  const IdD loss_b = tb.cross_entropy(tb.stack_rows(rows), one_hot);
  tb.backward(loss_b);

  // per-sample
  TapeD tp;
  std::vector<IdD> leaves_p;
  for (const Td& x : xs) leaves_p.push_back(tp.leaf(&x, true));
  std::vector<IdD> parts;
  for (std::size_t r = 0; r < b; ++r) {
    Td row({k});
    std::copy(one_hot.data.begin() + static_cast<std::ptrdiff_t>(r * k),
              one_hot.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * k),
              row.data.begin());
    parts.push_back(tp.cross_entropy(tp.softmax(leaves_p[r]), row));
  }
  const IdD loss_p =
      tp.weighted_sum(parts, std::vector<double>(b, 1.0 / b));
  tp.backward(loss_p);

  REQUIRE(tp.value(loss_p).data[0] ==
          Catch::Approx(tb.value(loss_b).data[0]).margin(1e-14));
  for (std::size_t r = 0; r < b; ++r) {
    const Td& ga = tb.grad(leaves_b[r]);
    const Td& gb = tp.grad(leaves_p[r]);
    for (std::size_t i = 0; i < k; ++i)
      REQUIRE(ga.data[i] == Catch::Approx(gb.data[i]).margin(1e-14));
  }
}

TEST_CASE("shared nodes accumulate gradient from every use", "[autodiff]") {
  Td x({3});
  x.data = {0.5, -1.0, 2.0};
  TapeD tape;
  const IdD in = tape.leaf(&x, true);
  const IdD loss = mean_square(tape, tape.concat({in, in}));
  tape.backward(loss);
  const Td& g = tape.grad(in);
  for (std::size_t i = 0; i < 3; ++i)
    REQUIRE(g.data[i] == Catch::Approx(2.0 * x.data[i] / 3.0).margin(1e-12));
}

TEST_CASE("backward is linear in its seed and restartable", "[autodiff]") {
  lcp::Rng rng(302);
  const Td x = randt(rng, {6});
  TapeD tape;
  const IdD in = tape.leaf(&x, true);
  const IdD loss = mean_square(tape, tape.relu(in));
  tape.backward(loss);
  const Td g1 = tape.grad(in);
  tape.backward(loss);  // buffers must be re-zeroed, not accumulated
  const Td g2 = tape.grad(in);
  REQUIRE(g1.data == g2.data);
  tape.backward(loss, 2.0);
  const Td& g3 = tape.grad(in);
  for (std::size_t i = 0; i < 6; ++i)
    REQUIRE(g3.data[i] == Catch::Approx(2.0 * g1.data[i]).margin(1e-15));
}

TEST_CASE("constant leaves receive no gradient buffers", "[autodiff]") {
  lcp::Rng rng(303);
  const Td x = randt(rng, {2, 4, 6});
  const Td w = randt(rng, {2, 2, 3, 3});
  const Td b = randt(rng, {2});
  TapeD tape;
  const IdD xi = tape.leaf(&x, false);  // frozen input
  const IdD wi = tape.leaf(&w, true);
  const IdD bi = tape.leaf(&b, true);
  const IdD loss = mean_square(tape, tape.flatten(tape.conv2d(xi, wi, bi)));
  tape.backward(loss);
  REQUIRE(tape.grad(xi).numel() == 0);
  REQUIRE(tape.grad(wi).numel() == w.numel());
  REQUIRE(tape.grad(bi).numel() == b.numel());
}

TEST_CASE("graph construction rejects malformed operands", "[autodiff]") {
  lcp::Rng rng(305);
  const Td vec = randt(rng, {6});
  const Td cube = randt(rng, {2, 4, 6});
  const Td kern = randt(rng, {2, 2, 3, 3});
  const Td bias = randt(rng, {2});

  const auto kind_of = [](const std::function<void()>& f) {
    try {
      f();
    } catch (const lcp::Error& e) {
      return e.kind();
    }
    FAIL("expected an error");
    return lcp::ErrorKind::State;
  };

  TapeD tape;
  const IdD v = tape.leaf(&vec, false);
  const IdD c = tape.leaf(&cube, false);
  const IdD w = tape.leaf(&kern, false);
  const IdD b = tape.leaf(&bias, false);

  REQUIRE(kind_of([&] { tape.conv2d(v, w, b); }) == lcp::ErrorKind::State);
  REQUIRE(kind_of([&] { tape.conv2d(c, w, v); }) == lcp::ErrorKind::State);
  REQUIRE(kind_of([&] { tape.maxpool2d(v); }) == lcp::ErrorKind::State);
  {
    const Td odd = randt(rng, {1, 3, 4});
    TapeD t2;
    REQUIRE(kind_of([&] { t2.maxpool2d(t2.leaf(&odd, false)); }) ==
            lcp::ErrorKind::State);
  }
  REQUIRE(kind_of([&] { tape.linear(c, w, b); }) == lcp::ErrorKind::State);
  REQUIRE(kind_of([&] { tape.softmax(c); }) == lcp::ErrorKind::State);
  {
    lcp::Rng mask_rng(1);
    REQUIRE(kind_of([&] { tape.dropout(v, 1.0, mask_rng, true); }) ==
            lcp::ErrorKind::Config);
    REQUIRE(kind_of([&] { tape.dropout(v, -0.1, mask_rng, true); }) ==
            lcp::ErrorKind::Config);
  }
  {
    const Td a = randt(rng, {3});
    const Td bb = randt(rng, {4});
    TapeD t3;
    const IdD ra = t3.leaf(&a, false);
    const IdD rb = t3.leaf(&bb, false);
    REQUIRE(kind_of([&] { t3.stack_rows({ra, rb}); }) ==
            lcp::ErrorKind::State);
    REQUIRE(kind_of([&] { t3.concat({}); }) == lcp::ErrorKind::State);
  }
  REQUIRE(kind_of([&] { tape.cross_entropy(v, Td({3})); }) ==
          lcp::ErrorKind::State);
  REQUIRE(kind_of([&] { tape.mse(v, Td({6}), Td({5})); }) ==
          lcp::ErrorKind::State);
  REQUIRE(kind_of([&] {
            tape.weighted_sum({v}, {0.5, 0.5});
          }) == lcp::ErrorKind::State);
  REQUIRE(kind_of([&] { tape.weighted_sum({v}, {1.0}); }) ==
          lcp::ErrorKind::State);  // non-scalar term
  REQUIRE(kind_of([&] { tape.backward(v); }) == lcp::ErrorKind::State);
}

TEST_CASE("single precision stays close to the double reference",
          "[autodiff]") {
  lcp::Rng rng(304);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Td x = randt(rng, {2, 4, 6});
    const Td w = randt(rng, {2, 2, 3, 3});
    const Td b = randt(rng, {2});
    const Td ref = conv_ref(x, w, b);
    const auto xf = lcp::tensor_cast<float>(x);
    const auto wf = lcp::tensor_cast<float>(w);
    const auto bf = lcp::tensor_cast<float>(b);
    lcp::Tape<float> tape;
    const auto y = tape.conv2d(tape.leaf(&xf, false), tape.leaf(&wf, false),
                               tape.leaf(&bf, false));
    const auto& yv = tape.value(y);
    for (std::size_t i = 0; i < ref.numel(); ++i)
      worst = std::max(worst,
                       std::abs(static_cast<double>(yv.data[i]) - ref.data[i]));
  }
  CAPTURE(worst);
  REQUIRE(worst <= 1e-4);
}

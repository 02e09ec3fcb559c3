#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "krcap/autodiff.hpp"
#include "krcap/errors.hpp"
#include "krcap/rng.hpp"
#include "krcap/tensor.hpp"

using krcap::Rng;
using krcap::Tensor;
namespace ad = krcap::ad;

namespace {

Tensor random_tensor(int rows, int cols, Rng& rng, double lo = -1.5, double hi = 1.5) {
  Tensor t(rows, cols);
  for (double& x : t.a) {
    x = rng.uniform(lo, hi);
  }
  return t;
}

using Builder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

// Central finite differences, step 1e-4, relative error bounded by 1e-4 with
// denominator max(1, |analytic|, |numeric|).
void fd_check(std::vector<Tensor> leaves, const Builder& build) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Tensor& t : leaves) {
    vars.push_back(tape.leaf(t));
  }
  ad::Var loss = build(tape, vars);
  REQUIRE(tape.value(loss).rows == 1);
  REQUIRE(tape.value(loss).cols == 1);
  tape.backward(loss);

  const double h = 1e-4;
  for (size_t li = 0; li < leaves.size(); ++li) {
    const Tensor analytic = tape.grad(vars[li]);
    for (size_t k = 0; k < leaves[li].a.size(); ++k) {
      const double orig = leaves[li].a[k];
      auto eval_at = [&](double x) {
        leaves[li].a[k] = x;
        ad::Tape t2;
        std::vector<ad::Var> vs;
        for (const Tensor& t : leaves) {
          vs.push_back(t2.leaf(t));
        }
        return t2.scalar(build(t2, vs));
      };
      const double numeric = (eval_at(orig + h) - eval_at(orig - h)) / (2.0 * h);
      leaves[li].a[k] = orig;
      const double a = analytic.a[k];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      const double rel = std::abs(a - numeric) / denom;
      INFO("leaf " << li << " entry " << k << " analytic " << a << " numeric "
                   << numeric);
      CHECK(rel <= 1e-4);
    }
  }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(101);
  Tensor w = random_tensor(3, 4, rng);

  fd_check({random_tensor(3, 4, rng), random_tensor(3, 4, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.add(v[0], v[1]), w);
           });
  fd_check({random_tensor(3, 4, rng), random_tensor(3, 4, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.sub(v[0], v[1]), w);
           });
  fd_check({random_tensor(3, 4, rng), random_tensor(3, 4, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.mul(v[0], v[1]), w);
           });
  fd_check({random_tensor(3, 4, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.affine(v[0], -1.7, 0.3), w);
           });
}

TEST_CASE("row vector and constant additions match finite differences") {
  Rng rng(102);
  Tensor w = random_tensor(3, 4, rng);
  Tensor c = random_tensor(3, 4, rng);

  fd_check({random_tensor(3, 4, rng), random_tensor(1, 4, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.add_rowvec(v[0], v[1]), w);
           });
  fd_check({random_tensor(3, 4, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.add_const(v[0], c), w);
           });
}

TEST_CASE("shape ops match finite differences") {
  Rng rng(103);
  Tensor w_slice = random_tensor(3, 2, rng);
  fd_check({random_tensor(3, 5, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.slice_cols(v[0], 1, 3), w_slice);
           });

  Tensor w_cat = random_tensor(3, 7, rng);
  fd_check({random_tensor(3, 3, rng), random_tensor(3, 4, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.concat_cols({v[0], v[1]}), w_cat);
           });

  // Repeated ids must accumulate gradient on the shared row.
  Tensor w_gather = random_tensor(4, 3, rng);
  std::vector<int> ids{2, 0, 2, 1};
  fd_check({random_tensor(3, 3, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.gather_rows(v[0], ids), w_gather);
           });
}

TEST_CASE("matrix products match finite differences") {
  Rng rng(104);
  Tensor w = random_tensor(3, 4, rng);
  fd_check({random_tensor(3, 5, rng), random_tensor(5, 4, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.matmul(v[0], v[1]), w);
           });
  fd_check({random_tensor(3, 5, rng), random_tensor(4, 5, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.matmul_nt(v[0], v[1]), w);
           });
}

TEST_CASE("nonlinearities match finite differences") {
  Rng rng(105);
  Tensor w = random_tensor(3, 4, rng);
  for (auto op : {0, 1, 2, 3}) {
    fd_check({random_tensor(3, 4, rng)},
             [&](ad::Tape& t, const std::vector<ad::Var>& v) {
               ad::Var y = op == 0   ? t.gelu(v[0])
                           : op == 1 ? t.sigmoid(v[0])
                           : op == 2 ? t.softplus(v[0])
                                     : t.square(v[0]);
               return t.weighted_sum(y, w);
             });
  }
}

TEST_CASE("row-wise normalizations match finite differences") {
  Rng rng(106);
  Tensor w = random_tensor(3, 5, rng);
  fd_check({random_tensor(3, 5, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.row_softmax(v[0]), w);
           });
  fd_check({random_tensor(3, 5, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.row_log_softmax(v[0]), w);
           });
  fd_check({random_tensor(3, 5, rng), random_tensor(1, 5, rng),
            random_tensor(1, 5, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.layer_norm(v[0], v[1], v[2]), w);
           });
}

TEST_CASE("reductions match finite differences") {
  Rng rng(107);
  fd_check({random_tensor(3, 4, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.reduce_sum(v[0]);
           });
  fd_check({random_tensor(3, 4, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.reduce_mean(v[0]);
           });

  // Entries spaced far apart so the FD step cannot cross the argmax.
  Tensor spaced(2, 3);
  spaced.a = {0.1, 0.9, -0.4, 0.5, -0.2, 1.3};
  fd_check({spaced}, [&](ad::Tape& t, const std::vector<ad::Var>& v) {
    return t.reduce_max(v[0]);
  });

  Tensor w_col = random_tensor(3, 1, rng);
  fd_check({random_tensor(3, 4, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             return t.weighted_sum(t.select_column(v[0], 2), w_col);
           });
}

TEST_CASE("composite expression matches finite differences") {
  Rng rng(108);
  Tensor gain(1, 4, 1.0);
  Tensor bias(1, 4, 0.0);
  fd_check({random_tensor(3, 4, rng), random_tensor(4, 4, rng),
            random_tensor(1, 4, rng)},
           [&](ad::Tape& t, const std::vector<ad::Var>& v) {
             ad::Var h = t.gelu(t.add_rowvec(t.matmul(v[0], v[1]), v[2]));
             ad::Var n = t.layer_norm(h, t.constant(gain), t.constant(bias));
             return t.reduce_mean(t.row_log_softmax(n));
           });
}

TEST_CASE("gradient of an unused leaf is exactly zero") {
  ad::Tape t;
  ad::Var used = t.leaf(Tensor::scalar(2.0));
  ad::Var unused = t.leaf(Tensor::scalar(5.0));
  ad::Var loss = t.square(used);
  t.backward(loss);
  CHECK(t.grad(unused).a[0] == 0.0);
  CHECK(t.grad(used).a[0] == 4.0);
}

TEST_CASE("constants never accumulate gradient and cannot be differentiated alone") {
  ad::Tape t;
  ad::Var c = t.constant(Tensor::scalar(3.0));
  ad::Var loss = t.square(c);
  CHECK_FALSE(t.requires_grad(loss));
  CHECK_THROWS_AS(t.backward(loss), krcap::Error);
}

TEST_CASE("softmax on a masked row puts exactly zero on the masked entry") {
  ad::Tape t;
  Tensor x(1, 3);
  x.a = {0.3, 0.7, 0.0};
  Tensor mask(1, 3);
  mask.a = {0.0, 0.0, -std::numeric_limits<double>::infinity()};
  ad::Var p = t.row_softmax(t.add_const(t.constant(x), mask));
  CHECK(t.value(p).a[2] == 0.0);
  CHECK(t.value(p).a[0] + t.value(p).a[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("value-level identities hold") {
  ad::Tape t;
  Tensor x(1, 4);
  x.a = {-2.0, 0.0, 0.5, 3.0};
  ad::Var v = t.constant(x);

  CHECK(t.value(t.gelu(v)).a[1] == 0.0);  // gelu(0) = 0
  CHECK(t.value(t.sigmoid(v)).a[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(t.value(t.softplus(v)).a[1] ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor r = t.value(t.row_softmax(v));
  double sum = r.a[0] + r.a[1] + r.a[2] + r.a[3];
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));

  Tensor ls = t.value(t.row_log_softmax(v));
  for (int i = 0; i < 4; ++i) {
    CHECK(std::exp(ls.a[i]) == doctest::Approx(r.a[i]).epsilon(1e-12));
  }

  Tensor gain(1, 4, 1.0);
  Tensor bias(1, 4, 0.0);
  Tensor n = t.value(t.layer_norm(v, t.constant(gain), t.constant(bias)));
  double mean = (n.a[0] + n.a[1] + n.a[2] + n.a[3]) / 4.0;
  CHECK(std::abs(mean) < 1e-12);
}

TEST_CASE("reduce_max routes gradient to the argmax entry only") {
  ad::Tape t;
  Tensor x(2, 2);
  x.a = {1.0, 5.0, 2.0, -1.0};
  ad::Var v = t.leaf(x);
  t.backward(t.reduce_max(v));
  const Tensor& g = t.grad(v);
  CHECK(g.a[0] == 0.0);
  CHECK(g.a[1] == 1.0);
  CHECK(g.a[2] == 0.0);
  CHECK(g.a[3] == 0.0);
}

TEST_CASE("matmul treats exact zeros as structural (masked softmax rows)") {
  // A probability row that is exactly zero (from a -inf mask) must not
  // contribute NaN or Inf even if the other operand holds huge values.
  ad::Tape t;
  Tensor p(1, 2);
  p.a = {1.0, 0.0};
  Tensor v(2, 2);
  v.a = {1.0, 2.0, std::numeric_limits<double>::infinity(), -4.0};
  Tensor out = t.value(t.matmul(t.constant(p), t.constant(v)));
  CHECK(out.a[0] == 1.0);
  CHECK(out.a[1] == 2.0);
}

TEST_CASE("backward requires a scalar loss") {
  ad::Tape t;
  ad::Var v = t.leaf(Tensor(2, 2, 1.0));
  CHECK_THROWS_AS(t.backward(v), krcap::Error);
}

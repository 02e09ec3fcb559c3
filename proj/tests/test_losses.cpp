#include <doctest.h>

#include <cmath>
#include <vector>

#include "krcap/autodiff.hpp"
#include "krcap/errors.hpp"
#include "krcap/losses.hpp"
#include "krcap/rng.hpp"
#include "krcap/text.hpp"

using namespace krcap;
namespace ad = krcap::ad;

namespace {

Tensor logits_row(std::vector<double> values) {
  Tensor t(1, static_cast<int>(values.size()));
  t.a = std::move(values);
  return t;
}

// Independent scalar reference for the smoothed cross-entropy of one row:
// straight std::exp/std::log evaluation of the formula, no library code.
double ce_row_reference(const std::vector<double>& logits, int target, double eps) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  std::vector<double> logp(logits.size());
  for (size_t j = 0; j < logits.size(); ++j) {
    logp[j] = logits[j] - mx - std::log(z);
  }
  const double vprime = static_cast<double>(logits.size()) - 1.0;
  double smooth = 0.0;
  for (size_t j = 1; j < logits.size(); ++j) {  // every non-PAD entry
    smooth += logp[j];
  }
  return -((1.0 - eps) * logp[static_cast<size_t>(target)] +
           (eps / vprime) * smooth);
}

}  // namespace

TEST_CASE("caption_ce: uniform logits give ln V for any smoothing") {
  // With a uniform predicted distribution both the target and smoothing
  // terms reduce to -ln(1/V).
  Tensor logits(2, 4, 0.0);
  TokenSequence target{Vocabulary::BOS, 4 - 1, 2};  // predicts ids 3 and 2
  for (double eps : {0.0, 0.1, 0.5}) {
    CHECK(caption_ce(logits, target, eps) ==
          doctest::Approx(1.3862943611198906).epsilon(1e-6));
  }
}

TEST_CASE("caption_ce: peaked-logit fixture matches the independent scalar oracle") {
  const std::vector<double> row{2.0, 0.0, 0.0, 0.0};
  const double eps = 0.1;
  const int target_id = 1;
  const double expected = ce_row_reference(row, target_id, eps);

  Tensor logits = logits_row(row);
  TokenSequence target{Vocabulary::BOS, target_id};
  CHECK(caption_ce(logits, target, eps) == doctest::Approx(expected).epsilon(1e-12));

  ad::Tape t;
  ad::Var g = graph::caption_ce(t, t.constant(logits), target, eps);
  CHECK(t.scalar(g) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("caption_ce: PAD targets are excluded from the mean") {
  Tensor logits(2, 4);
  logits.a = {1.0, -0.5, 0.25, 2.0, 9.0, 9.0, 9.0, 9.0};
  TokenSequence with_pad{Vocabulary::BOS, 3, Vocabulary::PAD};
  TokenSequence single{Vocabulary::BOS, 3};
  Tensor first_row = logits_row({1.0, -0.5, 0.25, 2.0});
  CHECK(caption_ce(logits, with_pad, 0.1) ==
        doctest::Approx(caption_ce(first_row, single, 0.1)).epsilon(1e-12));

  TokenSequence all_pad{Vocabulary::BOS, Vocabulary::PAD, Vocabulary::PAD};
  Tensor two(2, 4, 0.7);
  CHECK(caption_ce(two, all_pad, 0.1) == 0.0);
}

TEST_CASE("caption_ce validates its inputs") {
  Tensor logits(2, 4, 0.0);
  CHECK_THROWS_AS(caption_ce(logits, {1, 2}, 0.1), Error);          // rows mismatch
  CHECK_THROWS_AS(caption_ce(logits, {1, 2, 2}, 1.0), ConfigError); // eps out of range
  CHECK_THROWS_AS(caption_ce(logits, {1, 2, 2}, -0.1), ConfigError);
  Tensor narrow(2, 1, 0.0);
  CHECK_THROWS_AS(caption_ce(narrow, {1, 0, 0}, 0.0), Error);       // V too small
}

TEST_CASE("keyword_probability is the max softmax probability over positions") {
  Tensor logits(2, 3);
  logits.a = {0.0, 0.0, 0.0,                  // uniform: p = 1/3
              0.0, std::log(2.0), 0.0};       // p(id 1) = 2/4 = 0.5
  CHECK(keyword_probability(logits, 1) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(keyword_probability(logits, 0) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(keyword_probability(logits, 3), Error);
  CHECK_THROWS_AS(keyword_probability(logits, -1), Error);
}

TEST_CASE("coverage_loss closed forms") {
  CHECK(coverage_loss({0.0}) == doctest::Approx(0.6931471805599453).epsilon(1e-6));
  CHECK(coverage_loss({1.0}) == doctest::Approx(0.31326168751822286).epsilon(1e-6));
  CHECK(coverage_loss({0.0, 1.0}) ==
        doctest::Approx(0.6931471805599453 + 0.31326168751822286).epsilon(1e-6));
}

TEST_CASE("repetition_penalty closed forms") {
  CHECK(repetition_penalty({1.0}) == 0.0);
  CHECK(repetition_penalty({0.5}) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(repetition_penalty({0.0}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(repetition_penalty({1.0, 0.5, 0.0}) == doctest::Approx(1.25).epsilon(1e-12));
}

TEST_CASE("kpred_loss is coverage plus repetition") {
  CHECK(kpred_loss({1.0}) == doctest::Approx(0.313262).epsilon(1e-6));
  CHECK(kpred_loss({0.0}) == doctest::Approx(1.693147).epsilon(1e-6));
  CHECK(kpred_loss({0.25, 0.75}) ==
        doctest::Approx(coverage_loss({0.25, 0.75}) +
                        repetition_penalty({0.25, 0.75})).epsilon(1e-12));
}

TEST_CASE("distill_loss hand fixture: KL between (0.5,0.5) and (0.75,0.25)") {
  Tensor zt = logits_row({0.0, 0.0});
  Tensor zs = logits_row({std::log(3.0), 0.0});
  CHECK(distill_loss(zt, zs, 1.0) ==
        doctest::Approx(0.14384103622589045).epsilon(1e-6));
}

TEST_CASE("distill_loss softens with temperature and averages over rows") {
  Tensor zt(2, 3);
  zt.a = {0.2, -1.0, 0.5, 1.5, 0.0, -0.3};
  Tensor zs(2, 3);
  zs.a = {-0.4, 0.9, 0.1, 0.3, 0.3, 2.0};
  const double T = 2.0;

  // Independent reference: softmax(z/T) for both sides, mean row KL.
  auto soften = [&](const Tensor& z, int r) {
    std::vector<double> p(3);
    double mx = -1e300;
    for (int j = 0; j < 3; ++j) mx = std::max(mx, z(r, j) / T);
    double sum = 0.0;
    for (int j = 0; j < 3; ++j) {
      p[j] = std::exp(z(r, j) / T - mx);
      sum += p[j];
    }
    for (double& x : p) x /= sum;
    return p;
  };
  double expected = 0.0;
  for (int r = 0; r < 2; ++r) {
    auto pt = soften(zt, r);
    auto ps = soften(zs, r);
    for (int j = 0; j < 3; ++j) {
      expected += pt[j] * std::log(pt[j] / ps[j]);
    }
  }
  expected /= 2.0;
  CHECK(distill_loss(zt, zs, T) == doctest::Approx(expected).epsilon(1e-10));

  // Identical logits: zero divergence at any temperature.
  CHECK(distill_loss(zt, zt, 1.0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(distill_loss(zt, zt, 16.0) == doctest::Approx(0.0).epsilon(1e-12));

  CHECK_THROWS_AS(distill_loss(zt, zs, 0.0), ConfigError);
}

TEST_CASE("graph and plain losses agree bitwise") {
  Rng rng(2024);
  Tensor logits(3, 5);
  for (double& x : logits.a) x = rng.uniform(-2.0, 2.0);
  TokenSequence target{Vocabulary::BOS, 4, Vocabulary::PAD, 2};

  ad::Tape t;
  ad::Var lg = t.constant(logits);
  CHECK(t.scalar(graph::caption_ce(t, lg, target, 0.1)) ==
        caption_ce(logits, target, 0.1));
  CHECK(t.scalar(graph::keyword_probability(t, lg, 4)) ==
        keyword_probability(logits, 4));

  Tensor zs(3, 5);
  for (double& x : zs.a) x = rng.uniform(-2.0, 2.0);
  ad::Tape t2;
  CHECK(t2.scalar(graph::distill_loss(t2, logits, t2.constant(zs), 16.0)) ==
        distill_loss(logits, zs, 16.0));
}

TEST_CASE("graph losses differentiate correctly (finite differences)") {
  Rng rng(77);
  const double h = 1e-4;
  auto fd = [&](Tensor base, auto&& make_loss) {
    ad::Tape tape;
    ad::Var leaf = tape.leaf(base);
    ad::Var loss = make_loss(tape, leaf);
    tape.backward(loss);
    Tensor analytic = tape.grad(leaf);
    for (size_t k = 0; k < base.a.size(); ++k) {
      double orig = base.a[k];
      auto at = [&](double x) {
        base.a[k] = x;
        ad::Tape t2;
        return t2.scalar(make_loss(t2, t2.leaf(base)));
      };
      double numeric = (at(orig + h) - at(orig - h)) / (2.0 * h);
      base.a[k] = orig;
      double denom = std::max({1.0, std::abs(analytic.a[k]), std::abs(numeric)});
      INFO("entry " << k);
      CHECK(std::abs(analytic.a[k] - numeric) / denom <= 1e-4);
    }
  };

  Tensor logits(3, 5);
  for (double& x : logits.a) x = rng.uniform(-1.0, 1.0);
  TokenSequence target{Vocabulary::BOS, 4, 3, 2};
  fd(logits, [&](ad::Tape& t, ad::Var v) {
    return graph::caption_ce(t, v, target, 0.1);
  });

  fd(logits, [&](ad::Tape& t, ad::Var v) {
    std::vector<ad::Var> probs{graph::keyword_probability(t, v, 4),
                               graph::keyword_probability(t, v, 2)};
    return graph::kpred_loss(t, probs);
  });

  Tensor zt(3, 5);
  for (double& x : zt.a) x = rng.uniform(-1.0, 1.0);
  fd(logits, [&](ad::Tape& t, ad::Var v) {
    return graph::distill_loss(t, zt, v, 4.0);
  });
}

TEST_CASE("total_loss combines the branches linearly") {
  LossWeights w;
  w.lambda_k = 0.5;
  w.lambda_d = 2.0;
  CHECK(total_loss(1.0, 0.4, 0.25, w) == doctest::Approx(1.7).epsilon(1e-12));
  w.lambda_k = 0.0;
  w.lambda_d = 0.0;
  CHECK(total_loss(1.25, 9.0, 9.0, w) == 1.25);
}

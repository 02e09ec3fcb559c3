#include "krcap/losses.hpp"

#include <cmath>

#include "krcap/errors.hpp"

namespace krcap {

namespace {

// Row-wise log-softmax on a plain tensor (used for the constant teacher side).
Tensor plain_log_softmax(const Tensor& z) {
  Tensor out(z.rows, z.cols);
  for (int r = 0; r < z.rows; ++r) {
    double mx = -HUGE_VAL;
    for (int c = 0; c < z.cols; ++c) mx = std::max(mx, z(r, c));
    double sum = 0.0;
    for (int c = 0; c < z.cols; ++c) sum += std::exp(z(r, c) - mx);
    double lse = mx + std::log(sum);
    for (int c = 0; c < z.cols; ++c) out(r, c) = z(r, c) - lse;
  }
  return out;
}

}  // namespace

namespace graph {

ad::Var caption_ce(ad::Tape& t, ad::Var logits, const TokenSequence& target,
                   double epsilon) {
  const Tensor& z = t.value(logits);
  if (z.rows != static_cast<int>(target.size()) - 1)
    throw Error("caption_ce: logits rows must equal len(target) - 1");
  if (epsilon < 0.0 || epsilon >= 1.0) throw ConfigError("caption_ce: epsilon not in [0,1)");
  int v = z.cols;
  if (v < 2) throw Error("caption_ce: vocabulary too small");
  int v_smooth = v - 1;  // non-PAD entries

  // Count positions first so the weight matrix can fold in the 1/T mean.
  int included = 0;
  for (int r = 0; r < z.rows; ++r)
    if (target[r + 1] != Vocabulary::PAD) ++included;
  if (included == 0) return t.constant(Tensor::scalar(0.0));

  Tensor w(z.rows, v);
  double scale = -1.0 / included;
  for (int r = 0; r < z.rows; ++r) {
    int tgt = target[r + 1];
    if (tgt == Vocabulary::PAD) continue;
    if (tgt < 0 || tgt >= v) throw Error("caption_ce: target id out of range");
    for (int j = 0; j < v; ++j)
      if (j != Vocabulary::PAD) w(r, j) = scale * (epsilon / v_smooth);
    w(r, tgt) += scale * (1.0 - epsilon);
  }
  return t.weighted_sum(t.row_log_softmax(logits), w);
}

ad::Var keyword_probability(ad::Tape& t, ad::Var logits, int subword_id) {
  const Tensor& z = t.value(logits);
  if (subword_id < 0 || subword_id >= z.cols)
    throw Error("keyword_probability: id out of range");
  return t.reduce_max(t.select_column(t.row_softmax(logits), subword_id));
}

ad::Var coverage_loss(ad::Tape& t, const std::vector<ad::Var>& probs) {
  ad::Var acc = t.constant(Tensor::scalar(0.0));
  for (ad::Var p : probs) acc = t.add(acc, t.softplus(t.affine(p, -1.0, 0.0)));
  return acc;
}

ad::Var repetition_penalty(ad::Tape& t, const std::vector<ad::Var>& probs) {
  ad::Var acc = t.constant(Tensor::scalar(0.0));
  for (ad::Var p : probs) acc = t.add(acc, t.square(t.affine(p, -1.0, 1.0)));
  return acc;
}

ad::Var kpred_loss(ad::Tape& t, const std::vector<ad::Var>& probs) {
  return t.add(coverage_loss(t, probs), repetition_penalty(t, probs));
}

ad::Var distill_loss(ad::Tape& t, const Tensor& z_teacher, ad::Var z_student,
                     double temperature) {
  const Tensor& zs = t.value(z_student);
  if (!zs.same_shape(z_teacher)) throw Error("distill_loss: shape mismatch");
  if (!(temperature > 0.0)) throw ConfigError("distill_loss: temperature must be positive");
  int rows = zs.rows;
  if (rows == 0) return t.constant(Tensor::scalar(0.0));

  // Softened teacher distribution and its (constant) negative entropy term.
  Tensor zt_scaled = z_teacher;
  for (double& v : zt_scaled.a) v /= temperature;
  Tensor lpt = plain_log_softmax(zt_scaled);
  Tensor pt(lpt.rows, lpt.cols);
  double teacher_term = 0.0;  // (1/rows) * sum p_t * log p_t
  for (size_t i = 0; i < lpt.size(); ++i) {
    pt.a[i] = std::exp(lpt.a[i]);
    teacher_term += pt.a[i] * lpt.a[i];
  }
  teacher_term /= rows;

  // -(1/rows) * sum p_t * log p_s, differentiable through the student.
  Tensor w(pt.rows, pt.cols);
  for (size_t i = 0; i < pt.size(); ++i) w.a[i] = -pt.a[i] / rows;
  ad::Var lps = t.row_log_softmax(t.affine(z_student, 1.0 / temperature, 0.0));
  return t.affine(t.weighted_sum(lps, w), 1.0, teacher_term);
}

}  // namespace graph

double caption_ce(const LogitsMatrix& logits, const TokenSequence& target,
                  double epsilon) {
  ad::Tape t;
  return t.scalar(graph::caption_ce(t, t.constant(logits), target, epsilon));
}

double keyword_probability(const LogitsMatrix& logits, int subword_id) {
  ad::Tape t;
  return t.scalar(graph::keyword_probability(t, t.constant(logits), subword_id));
}

double coverage_loss(const std::vector<double>& probs) {
  ad::Tape t;
  std::vector<ad::Var> vars;
  for (double p : probs) vars.push_back(t.constant(Tensor::scalar(p)));
  return t.scalar(graph::coverage_loss(t, vars));
}

double repetition_penalty(const std::vector<double>& probs) {
  ad::Tape t;
  std::vector<ad::Var> vars;
  for (double p : probs) vars.push_back(t.constant(Tensor::scalar(p)));
  return t.scalar(graph::repetition_penalty(t, vars));
}

double kpred_loss(const std::vector<double>& probs) {
  return coverage_loss(probs) + repetition_penalty(probs);
}

double distill_loss(const LogitsMatrix& z_teacher, const LogitsMatrix& z_student,
                    double temperature) {
  ad::Tape t;
  return t.scalar(graph::distill_loss(t, z_teacher, t.constant(z_student), temperature));
}

double total_loss(double l_ce, double l_kpred, double l_distill,
                  const LossWeights& weights) {
  return l_ce + weights.lambda_k * l_kpred + weights.lambda_d * l_distill;
}

}  // namespace krcap

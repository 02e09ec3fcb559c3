#pragma once

#include <vector>

#include "krcap/autodiff.hpp"
#include "krcap/tensor.hpp"
#include "krcap/text.hpp"

namespace krcap {

struct LossWeights {
  double lambda_k = 1.0;  // weight of the keyword-prediction loss
  double lambda_d = 1.0;  // weight of the distillation loss
};

// Per-step loss record. Branch values are means over the samples that
// contributed to that branch; an empty branch contributes 0.
struct LossBundle {
  double l_ce = 0.0;
  double l_cov = 0.0;
  double l_rep = 0.0;
  double l_kpred = 0.0;
  double l_distill = 0.0;
  double l_total = 0.0;
  int n_caption = 0;
  int n_replay = 0;
};

namespace graph {

// Label-smoothed caption cross-entropy over a teacher-forced pass.
// logits has len(target)-1 rows; row r predicts target[r+1]. Positions whose
// target token is PAD are excluded; the result is the mean over the remaining
// positions of -[(1-eps)*log p(target) + (eps/V')*sum_{j != PAD} log p_j]
// with V' = V-1.
ad::Var caption_ce(ad::Tape& t, ad::Var logits, const TokenSequence& target,
                   double epsilon);

// Max over positions of the softmax probability assigned to subword_id.
ad::Var keyword_probability(ad::Tape& t, ad::Var logits, int subword_id);

// sum_i -log(sigmoid(p_i)), each p a 1x1 graph value in [0,1].
ad::Var coverage_loss(ad::Tape& t, const std::vector<ad::Var>& probs);

// sum_i (1 - p_i)^2.
ad::Var repetition_penalty(ad::Tape& t, const std::vector<ad::Var>& probs);

// coverage_loss + repetition_penalty.
ad::Var kpred_loss(ad::Tape& t, const std::vector<ad::Var>& probs);

// Mean over positions of KL(phi(z_teacher) || phi(z_student)) where phi is
// the temperature-softened softmax. The teacher side is a constant. No
// temperature-squared rescaling is applied.
ad::Var distill_loss(ad::Tape& t, const Tensor& z_teacher, ad::Var z_student,
                     double temperature);

}  // namespace graph

// Plain-value counterparts. These evaluate the graph forms on constants, so
// logged values and differentiated values can never drift apart.
double caption_ce(const LogitsMatrix& logits, const TokenSequence& target,
                  double epsilon);
double keyword_probability(const LogitsMatrix& logits, int subword_id);
double coverage_loss(const std::vector<double>& probs);
double repetition_penalty(const std::vector<double>& probs);
double kpred_loss(const std::vector<double>& probs);
double distill_loss(const LogitsMatrix& z_teacher, const LogitsMatrix& z_student,
                    double temperature);

// l_ce + lambda_k * l_kpred + lambda_d * l_distill.
double total_loss(double l_ce, double l_kpred, double l_distill,
                  const LossWeights& weights);

}  // namespace krcap

#include "krcap/train.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "krcap/decode.hpp"
#include "krcap/errors.hpp"

namespace krcap {

double cosine_lr(const SchedulerState& state) {
  if (state.t_max <= 0) {
    throw ConfigError("scheduler horizon must be positive");
  }
  const double phase =
      M_PI * static_cast<double>(state.t) / static_cast<double>(state.t_max);
  return state.lr_min + 0.5 * (state.lr_max - state.lr_min) * (1.0 + std::cos(phase));
}

double current_lr(const SchedulerState& state) {
  return state.cosine ? cosine_lr(state) : state.lr_max;
}

OptimizerState make_optimizer_state(const Model& model) {
  OptimizerState state;
  state.m.reserve(model.params.size());
  state.v.reserve(model.params.size());
  for (const auto& [name, tensor] : model.params) {
    (void)name;
    state.m.push_back(Tensor(tensor.rows, tensor.cols));
    state.v.push_back(Tensor(tensor.rows, tensor.cols));
  }
  state.step = 0;
  return state;
}

void optimizer_step(Model& model, const Gradients& grads, double lr,
                    OptimizerState& state, const TrainConfig& config) {
  if (model.frozen) {
    throw Error("cannot update a frozen model");
  }
  if (grads.size() != model.params.size() || state.m.size() != model.params.size() ||
      state.v.size() != model.params.size()) {
    throw Error("optimizer state does not match the model parameter list");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < model.params.size(); ++i) {
    auto& [pname, p] = model.params[i];
    const auto& [gname, g] = grads[i];
    if (gname != pname || g.rows != p.rows || g.cols != p.cols) {
      throw Error("gradient does not match parameter " + pname);
    }
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (size_t k = 0; k < p.a.size(); ++k) {
      p.a[k] *= 1.0 - lr * config.weight_decay;
      m.a[k] = config.beta1 * m.a[k] + (1.0 - config.beta1) * g.a[k];
      v.a[k] = config.beta2 * v.a[k] + (1.0 - config.beta2) * g.a[k] * g.a[k];
      const double m_hat = m.a[k] / bc1;
      const double v_hat = v.a[k] / bc2;
      p.a[k] -= lr * m_hat / (std::sqrt(v_hat) + config.adam_eps);
    }
  }
}

namespace {

// Decode a pseudo-caption for one replay image from the chosen source model
// and score it with the frozen teacher. Teacher-sourced pseudo-captions are
// deterministic per image, so both the tokens and the teacher logits can be
// reused across steps.
void pseudo_caption_for(const ReplayBatchItem& item, const Model& student,
                        const Model& teacher, const TrainConfig& config,
                        PseudoCaptionCache* cache, TokenSequence& pseudo_out,
                        Tensor& teacher_logits_out) {
  const bool from_teacher = config.pseudo_caption_source != "student";
  if (from_teacher && cache != nullptr) {
    auto it = cache->by_image.find(item.image_id);
    if (it != cache->by_image.end()) {
      pseudo_out = it->second.first;
      teacher_logits_out = it->second.second;
      return;
    }
  }
  const Model& source = from_teacher ? teacher : student;
  ModelScorer scorer(source, *item.patches);
  if (config.pseudo_beam) {
    BeamConfig bc;
    bc.width = config.beam_width;
    bc.max_len = source.config.max_len;
    bc.alpha = config.beam_alpha;
    pseudo_out = beam_decode(scorer, bc).best.tokens;
  } else {
    pseudo_out = greedy_decode(scorer, source.config.max_len).tokens;
  }
  teacher_logits_out = forward(teacher, *item.patches, pseudo_out);
  if (from_teacher && cache != nullptr) {
    cache->by_image.emplace(item.image_id,
                            std::make_pair(pseudo_out, teacher_logits_out));
  }
}

}  // namespace

LossBundle train_step(const std::vector<CaptionBatchItem>& captions,
                      const std::vector<ReplayBatchItem>& replays, Model& student,
                      const Model* teacher, const TrainConfig& config,
                      OptimizerState& optimizer, SchedulerState& scheduler,
                      PseudoCaptionCache* cache) {
  if (captions.empty() && replays.empty()) {
    throw DataError("train step requires at least one sample");
  }
  if (!replays.empty() && teacher == nullptr) {
    throw MissingArtifactError("replay samples require a teacher model");
  }
  if (config.pseudo_caption_source != "teacher" &&
      config.pseudo_caption_source != "student") {
    throw ConfigError("pseudo_caption_source must be teacher or student");
  }

  const double lr = current_lr(scheduler);

  ad::Tape tape;
  BoundModel bm = bind(tape, student, true);

  LossBundle bundle;
  bundle.n_caption = static_cast<int>(captions.size());
  bundle.n_replay = static_cast<int>(replays.size());

  // Caption branch: mean label-smoothed cross-entropy over the batch.
  const bool have_ce = !captions.empty();
  ad::Var ce_mean{};
  if (have_ce) {
    ad::Var acc{};
    for (size_t i = 0; i < captions.size(); ++i) {
      ad::Var states = encode_image_g(bm, *captions[i].patches);
      ad::Var logits = forward_g(bm, states, *captions[i].target);
      ad::Var l = graph::caption_ce(tape, logits, *captions[i].target, config.smoothing);
      acc = (i == 0) ? l : tape.add(acc, l);
    }
    ce_mean = tape.affine(acc, 1.0 / static_cast<double>(captions.size()), 0.0);
    bundle.l_ce = tape.scalar(ce_mean);
  }

  // Replay branch. With both weights at zero the branch stays off the tape so
  // the update is exactly the caption-only update; losses are still computed
  // on plain values for the log.
  const bool replay_in_graph =
      !replays.empty() &&
      (config.weights.lambda_k != 0.0 || config.weights.lambda_d != 0.0);
  ad::Var kpred_mean{};
  ad::Var distill_mean{};
  if (!replays.empty()) {
    const double inv_n = 1.0 / static_cast<double>(replays.size());
    double cov_sum = 0.0;
    double rep_sum = 0.0;
    double kpred_sum = 0.0;
    double distill_sum = 0.0;
    ad::Var kacc{};
    ad::Var dacc{};
    for (size_t i = 0; i < replays.size(); ++i) {
      const ReplayBatchItem& item = replays[i];
      TokenSequence pseudo;
      Tensor z_teacher;
      pseudo_caption_for(item, student, *teacher, config, cache, pseudo, z_teacher);

      std::vector<double> prob_values;
      prob_values.reserve(item.keyword->subword_ids.size());
      if (replay_in_graph) {
        ad::Var states = encode_image_g(bm, *item.patches);
        ad::Var z_student = forward_g(bm, states, pseudo);
        std::vector<ad::Var> probs;
        probs.reserve(item.keyword->subword_ids.size());
        for (int id : item.keyword->subword_ids) {
          probs.push_back(graph::keyword_probability(tape, z_student, id));
        }
        for (ad::Var p : probs) {
          prob_values.push_back(tape.scalar(p));
        }
        ad::Var kv = graph::kpred_loss(tape, probs);
        ad::Var dv =
            graph::distill_loss(tape, z_teacher, z_student, config.distill_temperature);
        kpred_sum += tape.scalar(kv);
        distill_sum += tape.scalar(dv);
        kacc = (i == 0) ? kv : tape.add(kacc, kv);
        dacc = (i == 0) ? dv : tape.add(dacc, dv);
      } else {
        LogitsMatrix z_student = forward(student, *item.patches, pseudo);
        for (int id : item.keyword->subword_ids) {
          prob_values.push_back(keyword_probability(z_student, id));
        }
        kpred_sum += kpred_loss(prob_values);
        distill_sum += distill_loss(z_teacher, z_student, config.distill_temperature);
      }
      cov_sum += coverage_loss(prob_values);
      rep_sum += repetition_penalty(prob_values);
    }
    if (replay_in_graph) {
      kpred_mean = tape.affine(kacc, inv_n, 0.0);
      distill_mean = tape.affine(dacc, inv_n, 0.0);
    }
    bundle.l_cov = cov_sum * inv_n;
    bundle.l_rep = rep_sum * inv_n;
    bundle.l_kpred = kpred_sum * inv_n;
    bundle.l_distill = distill_sum * inv_n;
  }

  bundle.l_total =
      total_loss(bundle.l_ce, bundle.l_kpred, bundle.l_distill, config.weights);
  if (!std::isfinite(bundle.l_total)) {
    throw DivergenceError("non-finite loss at step " + std::to_string(scheduler.t));
  }

  // Assemble the graph total and update. A batch with nothing on the tape
  // (replay-only with zero weights) legitimately produces no update.
  bool have_total = false;
  ad::Var total{};
  if (have_ce) {
    total = ce_mean;
    have_total = true;
  }
  if (replay_in_graph) {
    ad::Var weighted = tape.add(tape.affine(kpred_mean, config.weights.lambda_k, 0.0),
                                tape.affine(distill_mean, config.weights.lambda_d, 0.0));
    total = have_total ? tape.add(total, weighted) : weighted;
    have_total = true;
  }
  if (have_total && tape.requires_grad(total)) {
    Gradients grads = backward(bm, total);
    optimizer_step(student, grads, lr, optimizer, config);
  }
  scheduler.t += 1;
  return bundle;
}

const CheckpointMeta& select_best_checkpoint(const std::vector<CheckpointMeta>& metas,
                                             SelectionCriterion criterion) {
  if (metas.empty()) {
    throw DataError("no checkpoints to select from");
  }
  const CheckpointMeta* best = &metas[0];
  for (const CheckpointMeta& m : metas) {
    bool better = false;
    if (criterion == SelectionCriterion::ConceptRecognition) {
      if (m.concept_rec != best->concept_rec) {
        better = m.concept_rec > best->concept_rec;
      } else if (m.generic_cider != best->generic_cider) {
        better = m.generic_cider > best->generic_cider;
      } else {
        better = m.step < best->step;
      }
    } else {
      if (m.generic_cider != best->generic_cider) {
        better = m.generic_cider > best->generic_cider;
      } else {
        better = m.step < best->step;
      }
    }
    if (better) {
      best = &m;
    }
  }
  return *best;
}

}  // namespace krcap

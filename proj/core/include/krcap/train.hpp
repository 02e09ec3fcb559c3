#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "krcap/losses.hpp"
#include "krcap/model.hpp"
#include "krcap/tensor.hpp"
#include "krcap/text.hpp"

namespace krcap {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 8;
  double lr_max = 3e-3;
  double lr_min = 3e-5;
  double smoothing = 0.1;
  LossWeights weights;  // lambda_k, lambda_d
  double distill_temperature = 16.0;
  int beam_width = 5;
  double beam_alpha = 0.0;
  bool pseudo_beam = true;                        // false = greedy pseudo-captions
  std::string pseudo_caption_source = "teacher";  // or "student"
  bool cosine_schedule = true;                    // false = constant lr_max
  uint64_t seed = 42;
  int checkpoint_every = 0;  // extra step cadence; epoch-end checkpoints always
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
};

struct SchedulerState {
  double lr_max = 3e-3;
  double lr_min = 3e-5;
  long long t_max = 0;
  long long t = 0;
  bool cosine = true;
};

// lr(t) = lr_min + (lr_max - lr_min) * (1 + cos(pi * t / t_max)) / 2.
// Throws ConfigError when t_max is 0.
double cosine_lr(const SchedulerState& state);

// Scheduled rate for the current step (lr_max when the cosine is disabled).
double current_lr(const SchedulerState& state);

struct OptimizerState {
  std::vector<Tensor> m;  // first moments, aligned with model params
  std::vector<Tensor> v;  // second moments
  long long step = 0;
};
OptimizerState make_optimizer_state(const Model& model);

// AdamW: decoupled weight decay (p *= 1 - lr*wd), then the bias-corrected
// adaptive-moment update. Throws on frozen models and shape mismatches.
void optimizer_step(Model& model, const Gradients& grads, double lr,
                    OptimizerState& state, const TrainConfig& config);

// Views over loaded data for one training step.
struct CaptionBatchItem {
  const Tensor* patches = nullptr;
  const TokenSequence* target = nullptr;
};
struct ReplayBatchItem {
  const Tensor* patches = nullptr;
  const Keyword* keyword = nullptr;
  int image_id = 0;
};

// Pseudo-captions (and the matching frozen-teacher logits) are deterministic
// per image when the teacher generates them, so they are decoded once.
struct PseudoCaptionCache {
  std::map<int, std::pair<TokenSequence, Tensor>> by_image;
};

// One optimizer step over a mixed batch: caption samples contribute the
// smoothed cross-entropy; replay samples are pseudo-captioned (gradient-free),
// then re-scored by student and teacher for the keyword-prediction and
// distillation losses. When both lambdas are zero the replay branch is kept
// out of the graph entirely, so the update is bitwise identical to a pure
// cross-entropy step on the caption samples; replay losses are still
// evaluated for the log. Advances the scheduler. Throws DivergenceError on a
// non-finite loss.
LossBundle train_step(const std::vector<CaptionBatchItem>& captions,
                      const std::vector<ReplayBatchItem>& replays, Model& student,
                      const Model* teacher, const TrainConfig& config,
                      OptimizerState& optimizer, SchedulerState& scheduler,
                      PseudoCaptionCache* cache);

struct CheckpointMeta {
  long long step = 0;
  int epoch = 0;
  double concept_rec = 0.0;   // recognition accuracy on the concept val split
  double generic_cider = 0.0; // CIDEr on the generic val split
  std::string path;
};

enum class SelectionCriterion {
  ConceptRecognition,  // max rec, tie: higher generic CIDEr, tie: earlier step
  GenericCider,        // max CIDEr, tie: earlier step
};

const CheckpointMeta& select_best_checkpoint(const std::vector<CheckpointMeta>& metas,
                                             SelectionCriterion criterion);

}  // namespace krcap

#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "krcap/corpus.hpp"
#include "krcap/decode.hpp"
#include "krcap/eval.hpp"
#include "krcap/model.hpp"
#include "krcap/train.hpp"

namespace krcap {

// One dataset split pulled into memory. image_id = index into patches.
struct LoadedSplit {
  std::string name;
  int grid_h = 0;
  int grid_w = 0;
  int d_patch = 0;
  std::vector<Tensor> patches;
  std::vector<std::vector<std::string>> captions;  // per image; empty when absent
  std::vector<ReplayPair> pairs;                   // keyword sidecar; empty when absent
};

LoadedSplit load_split(const DatasetManifest& manifest, const std::string& name);

// First caption per image, encoded with BOS/EOS. Throws DataError when an
// image has no caption.
std::vector<TokenSequence> encode_targets(const LoadedSplit& split,
                                          const Vocabulary& vocab);

// Adapters into the metric layer.
ReferenceSet references_of(const LoadedSplit& split);
KeywordList keywords_of(const LoadedSplit& split);

// One caption per image of a split. Beam search by default; greedy when
// `greedy` is set. Optionally returns the raw hypotheses alongside.
std::vector<CandidateCaption> decode_split(const Model& model, const LoadedSplit& split,
                                           const Vocabulary& vocab,
                                           const BeamConfig& beam, bool greedy,
                                           std::vector<Hypothesis>* hyps = nullptr);

enum class Phase { Pretrain, Finetune, KReplayTrain };

struct PhaseOutcome {
  std::string best_checkpoint;         // path of the selected checkpoint copy
  std::vector<CheckpointMeta> metas;   // one per validated (epoch-end) save
  double best_concept_rec = 0.0;
  double best_generic_cider = 0.0;
};

// Runs one training phase end to end.
//   Pretrain      fresh init, cross-entropy on the pretrain split,
//                 selection by concept_val recognition.
//   Finetune      starts from init_checkpoint, cross-entropy on generic_train,
//                 selection by generic_val CIDEr.
//   KReplayTrain  starts from init_checkpoint with teacher_checkpoint frozen,
//                 mixed generic_train + replay batches, selection by
//                 concept_val recognition (ties to higher generic CIDEr).
// Writes loss.csv, checkpoints/epoch_NNNN.krck, checkpoints.json and
// best.krck under out_dir. Validation (beam decoding of concept_val and
// generic_val) runs at the end of every epoch.
PhaseOutcome run_training_phase(Phase phase, const DatasetManifest& manifest,
                                const ModelConfig& model_config,
                                const TrainConfig& train_config,
                                const std::string& init_checkpoint,
                                const std::string& teacher_checkpoint,
                                const std::string& out_dir);

// Final report: "generic" = generic_test; "seen"/"unseen" = concept_test
// partitioned by the replay eligibility of each image's concept. Writes
// report.json and report.csv under out_dir.
std::map<std::string, SplitMetrics> run_eval(const Model& model,
                                             const DatasetManifest& manifest,
                                             const TrainConfig& train_config,
                                             const std::string& out_dir);

// Caption dump for selected images (all when image_ids is empty) of one
// split, one JSON object per line, written to out_path and echoed to `echo`.
void run_decode(const Model& model, const DatasetManifest& manifest,
                const std::string& split_name, const std::vector<int>& image_ids,
                bool greedy, int width, double alpha, const std::string& out_path,
                std::ostream& echo);

}  // namespace krcap

#pragma once

#include <vector>

#include "krcap/model.hpp"
#include "krcap/tensor.hpp"
#include "krcap/text.hpp"

namespace krcap {

// Anything that can score next tokens for a BOS-initiated prefix. Decoders
// are written against this so they can be exercised with mock models.
class SequenceScorer {
public:
  virtual ~SequenceScorer() = default;
  virtual int vocab_size() const = 0;
  virtual int bos_id() const { return Vocabulary::BOS; }
  virtual int eos_id() const { return Vocabulary::EOS; }
  // Log-probabilities (base e, normalized) of the next token after `prefix`.
  virtual std::vector<double> next_log_probs(const TokenSequence& prefix) = 0;
};

// Scorer over a trained model and one image; the encoder output is computed
// once and reused for every prefix.
class ModelScorer : public SequenceScorer {
public:
  ModelScorer(const Model& model, const Tensor& patches);
  int vocab_size() const override { return model_.config.vocab_size; }
  std::vector<double> next_log_probs(const TokenSequence& prefix) override;

private:
  const Model& model_;
  Tensor patch_states_;
};

struct Hypothesis {
  TokenSequence tokens;  // BOS-initiated; EOS-terminated when complete
  double logprob = 0.0;  // sum of chosen-token log-probabilities
  bool complete = false;
};

struct BeamConfig {
  int width = 5;
  int max_len = 16;    // total tokens including BOS and EOS
  double alpha = 0.0;  // length-normalization exponent; 0 disables
};

// Argmax decoding, ties to the lowest token id; force-completes with EOS at
// max_len (the forced EOS log-probability is included, so every hypothesis
// re-scores to its own logprob).
Hypothesis greedy_decode(SequenceScorer& scorer, int max_len);

struct BeamResult {
  Hypothesis best;
  std::vector<Hypothesis> beam;  // finished pool, best first, at most `width`
};

// Standard beam search: expand every live hypothesis over the vocabulary,
// keep the global top-b extensions by score = logprob / len(generated)^alpha,
// retire EOS extensions into a finished pool, and stop when no live
// hypothesis can beat the best finished score (or at max_len, where live
// hypotheses are force-completed with EOS). Ties break toward higher logprob,
// then lexicographically smaller token ids.
BeamResult beam_decode(SequenceScorer& scorer, const BeamConfig& config);

}  // namespace krcap

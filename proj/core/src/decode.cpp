#include "krcap/decode.hpp"

#include <algorithm>
#include <cmath>

#include "krcap/errors.hpp"

namespace krcap {

namespace {

std::vector<double> log_softmax_row(const std::vector<double>& z) {
  double mx = -HUGE_VAL;
  for (double v : z) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - mx);
  double lse = mx + std::log(sum);
  std::vector<double> out(z.size());
  for (size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
  return out;
}

}  // namespace

ModelScorer::ModelScorer(const Model& model, const Tensor& patches)
    : model_(model), patch_states_(encode_image(model, patches)) {}

std::vector<double> ModelScorer::next_log_probs(const TokenSequence& prefix) {
  LogitsMatrix logits = decoder_logits(model_, patch_states_, prefix);
  std::vector<double> last(logits.cols);
  for (int c = 0; c < logits.cols; ++c) last[c] = logits(logits.rows - 1, c);
  return log_softmax_row(last);
}

Hypothesis greedy_decode(SequenceScorer& scorer, int max_len) {
  if (max_len < 2) throw ConfigError("greedy_decode: max_len must be >= 2");
  const int eos = scorer.eos_id();
  Hypothesis h;
  h.tokens.push_back(scorer.bos_id());
  while (!h.complete) {
    std::vector<double> lp = scorer.next_log_probs(h.tokens);
    int chosen;
    if (static_cast<int>(h.tokens.size()) >= max_len - 1) {
      chosen = eos;  // force-complete; its log-probability still counts
    } else {
      chosen = 0;
      for (int id = 1; id < static_cast<int>(lp.size()); ++id)
        if (lp[id] > lp[chosen]) chosen = id;
    }
    h.logprob += lp[chosen];
    h.tokens.push_back(chosen);
    if (chosen == eos) h.complete = true;
  }
  return h;
}

namespace {

struct Candidate {
  TokenSequence tokens;
  double logprob = 0.0;
  double score = 0.0;
};

double length_normalized(double logprob, int generated, double alpha) {
  if (alpha == 0.0) return logprob;
  return logprob / std::pow(static_cast<double>(generated), alpha);
}

bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  return std::lexicographical_compare(a.tokens.begin(), a.tokens.end(),
                                      b.tokens.begin(), b.tokens.end());
}

}  // namespace

BeamResult beam_decode(SequenceScorer& scorer, const BeamConfig& config) {
  if (config.width < 1) throw ConfigError("beam_decode: width must be >= 1");
  if (config.max_len < 2) throw ConfigError("beam_decode: max_len must be >= 2");
  if (config.alpha < 0.0) throw Error("beam_decode: alpha must be >= 0");
  const int eos = scorer.eos_id();
  const int vocab = scorer.vocab_size();
  const int max_generated = config.max_len - 1;

  std::vector<Candidate> live;
  live.push_back({{scorer.bos_id()}, 0.0, 0.0});
  std::vector<Candidate> finished;

  while (!live.empty()) {
    bool force_eos = static_cast<int>(live.front().tokens.size()) >= config.max_len - 1;
    std::vector<Candidate> candidates;
    for (const Candidate& hyp : live) {
      std::vector<double> lp = scorer.next_log_probs(hyp.tokens);
      int generated = static_cast<int>(hyp.tokens.size());  // after extension
      auto extend = [&](int id) {
        Candidate c;
        c.tokens = hyp.tokens;
        c.tokens.push_back(id);
        c.logprob = hyp.logprob + lp[id];
        c.score = length_normalized(c.logprob, generated, config.alpha);
        candidates.push_back(std::move(c));
      };
      if (force_eos) {
        extend(eos);
      } else {
        for (int id = 0; id < vocab; ++id) extend(id);
      }
    }
    std::sort(candidates.begin(), candidates.end(), better);
    if (static_cast<int>(candidates.size()) > config.width)
      candidates.resize(config.width);

    live.clear();
    for (Candidate& c : candidates) {
      if (c.tokens.back() == eos)
        finished.push_back(std::move(c));
      else
        live.push_back(std::move(c));
    }

    if (!finished.empty() && !live.empty()) {
      double best_finished = -HUGE_VAL;
      for (const Candidate& f : finished) best_finished = std::max(best_finished, f.score);
      // A live hypothesis's score can only reach logprob / max_generated^alpha:
      // log-probabilities only decrease and the length divisor only grows.
      double best_possible = -HUGE_VAL;
      for (const Candidate& l : live)
        best_possible = std::max(
            best_possible, length_normalized(l.logprob, max_generated, config.alpha));
      if (best_finished >= best_possible) break;
    }
  }

  std::sort(finished.begin(), finished.end(), better);
  BeamResult result;
  for (int i = 0; i < static_cast<int>(finished.size()) && i < config.width; ++i) {
    Hypothesis h;
    h.tokens = finished[i].tokens;
    h.logprob = finished[i].logprob;
    h.complete = true;
    result.beam.push_back(std::move(h));
  }
  result.best = result.beam.front();
  return result;
}

}  // namespace krcap

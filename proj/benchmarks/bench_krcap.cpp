// Microbenchmarks for the hot paths: the teacher-forced forward/backward
// pass, beam decoding, and corpus-level CIDEr.

#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "krcap/corpus.hpp"
#include "krcap/decode.hpp"
#include "krcap/eval.hpp"
#include "krcap/losses.hpp"
#include "krcap/model.hpp"
#include "krcap/rng.hpp"

namespace {

krcap::ModelConfig bench_config() {
  krcap::ModelConfig mc;
  mc.vocab_size = 64;
  return mc;
}

krcap::Tensor random_patches(const krcap::ModelConfig& mc, krcap::Rng& rng) {
  krcap::Tensor t = krcap::Tensor(mc.grid_h * mc.grid_w, mc.d_patch);
  for (double& x : t.a) {
    x = rng.normal();
  }
  return t;
}

void bm_forward_backward(benchmark::State& state) {
  krcap::ModelConfig mc = bench_config();
  krcap::Model model = krcap::init_model(mc, 1);
  krcap::Rng rng(2);
  krcap::Tensor patches = random_patches(mc, rng);
  krcap::TokenSequence tokens{1, 10, 11, 12, 13, 14, 15, 16, 17, 2};
  for (auto _ : state) {
    krcap::ad::Tape tape;
    krcap::BoundModel bm = krcap::bind(tape, model, true);
    krcap::ad::Var states = krcap::encode_image_g(bm, patches);
    krcap::ad::Var logits = krcap::forward_g(bm, states, tokens);
    krcap::ad::Var loss = krcap::graph::caption_ce(tape, logits, tokens, 0.1);
    krcap::Gradients grads = krcap::backward(bm, loss);
    benchmark::DoNotOptimize(grads);
  }
}
BENCHMARK(bm_forward_backward);

void bm_beam_decode(benchmark::State& state) {
  krcap::ModelConfig mc = bench_config();
  krcap::Model model = krcap::init_model(mc, 1);
  krcap::Rng rng(3);
  krcap::Tensor patches = random_patches(mc, rng);
  krcap::BeamConfig bc;
  bc.width = static_cast<int>(state.range(0));
  bc.max_len = mc.max_len;
  for (auto _ : state) {
    krcap::ModelScorer scorer(model, patches);
    krcap::BeamResult r = krcap::beam_decode(scorer, bc);
    benchmark::DoNotOptimize(r);
  }
}
BENCHMARK(bm_beam_decode)->Arg(1)->Arg(5);

void bm_cider(benchmark::State& state) {
  krcap::Rng rng(4);
  const char* words[] = {"red", "box", "on", "a", "table", "near", "the",
                         "river", "small", "bird"};
  std::vector<krcap::CandidateCaption> cands;
  krcap::ReferenceSet refs;
  for (int i = 0; i < 128; ++i) {
    std::string c;
    std::string r;
    for (int k = 0; k < 8; ++k) {
      c += std::string(words[rng.uniform_int(10)]) + " ";
      r += std::string(words[rng.uniform_int(10)]) + " ";
    }
    cands.push_back({i, c});
    refs.refs[i] = {r, c};
  }
  for (auto _ : state) {
    double v = krcap::cider(cands, refs);
    benchmark::DoNotOptimize(v);
  }
}
BENCHMARK(bm_cider);

}  // namespace

BENCHMARK_MAIN();

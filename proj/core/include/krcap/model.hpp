#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "krcap/autodiff.hpp"
#include "krcap/tensor.hpp"
#include "krcap/text.hpp"

namespace krcap {

struct ModelConfig {
  int d_model = 32;
  int n_heads = 2;
  int n_enc_layers = 1;
  int n_dec_layers = 2;
  int d_ff = 64;
  int vocab_size = 0;  // filled in from the built vocabulary
  int grid_h = 4;
  int grid_w = 4;
  int d_patch = 16;
  int max_len = 16;  // decoding cap, counting BOS and EOS
  bool use_patch_self_attention = true;
  int n_psa_layers = 1;  // depth of the extra patch self-attention stack
};

// Throws ConfigError on dimension problems (head divisibility, max_len < 2, …).
void validate_config(const ModelConfig& config);

// Encoder-decoder captioner. Parameters live in a fixed, named order so
// checkpoints, gradients, and optimizer state all align by index.
struct Model {
  ModelConfig config;
  bool frozen = false;
  std::vector<std::pair<std::string, Tensor>> params;

  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;

private:
  std::map<std::string, int> index_;
  friend Model init_model(const ModelConfig&, uint64_t);
  friend Model make_model_skeleton(const ModelConfig&);
  void rebuild_index();
};

// Canonical (name, rows, cols) listing for a config; defines parameter order.
struct ParamShape {
  std::string name;
  int rows;
  int cols;
};
std::vector<ParamShape> param_shapes(const ModelConfig& config);

// Zero-initialized model with the canonical parameter list.
Model make_model_skeleton(const ModelConfig& config);

// Deterministic init: every tensor uniform in +-1/sqrt(d_model).
Model init_model(const ModelConfig& config, uint64_t seed);

// Deep copy with frozen=true; later updates to the source leave it untouched.
Model clone_frozen(const Model& model);

// Named gradient tensors, aligned with Model::params order.
using Gradients = std::vector<std::pair<std::string, Tensor>>;

// A model's parameters registered on a tape. With differentiable=true every
// parameter is a leaf (gradient receiver); binding a frozen model that way
// throws Error("teacher is frozen").
struct BoundModel {
  const Model* model = nullptr;
  ad::Tape* tape = nullptr;
  bool differentiable = false;
  std::vector<ad::Var> vars;  // aligned with model->params

  ad::Var p(const std::string& name) const;

private:
  std::map<std::string, int> index_;
  friend BoundModel bind(ad::Tape&, const Model&, bool);
};
BoundModel bind(ad::Tape& tape, const Model& model, bool differentiable);

// Patch grid -> encoder states (H*W x d_model): projection + learned
// positions, optional patch self-attention stack, encoder layers, final norm.
ad::Var encode_image_g(BoundModel& bm, const Tensor& patches);

// Decoder pass over explicit input tokens (length M <= max_len-1); row r of
// the result is the logits for the token following input position r.
ad::Var decoder_logits_g(BoundModel& bm, ad::Var patch_states,
                         const TokenSequence& input_tokens);

// Teacher-forced pass over a full sequence: len(tokens)-1 rows, row r
// predicting tokens[r+1]. len(tokens) must be in [2, max_len].
ad::Var forward_g(BoundModel& bm, ad::Var patch_states, const TokenSequence& tokens);

// Plain-value counterparts (evaluate the graph form on constants).
Tensor encode_image(const Model& model, const Tensor& patches);
LogitsMatrix decoder_logits(const Model& model, const Tensor& patch_states,
                            const TokenSequence& input_tokens);
LogitsMatrix forward(const Model& model, const Tensor& patches,
                     const TokenSequence& tokens);

// Runs the reverse sweep for a scalar loss and collects per-parameter
// gradients. The bound model must be differentiable (hence not frozen).
Gradients backward(BoundModel& bm, ad::Var loss);

// Checkpoint I/O: magic + version + config JSON + named little-endian f64
// tensors in canonical order; reload is byte-identical under re-save.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace krcap

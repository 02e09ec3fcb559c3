#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "krcap/corpus.hpp"
#include "krcap/model.hpp"
#include "krcap/train.hpp"

namespace krcap {

// Everything a run can configure, resolved from a flat key=value config file
// plus command-line overrides. Unknown keys are rejected by name.
struct RunConfig {
  uint64_t seed = 42;
  std::string data_dir;  // directory holding manifest.json from gen-data

  CorpusConfig corpus;

  // Model shape (patch geometry follows the dataset at run time).
  int d_model = 32;
  int n_heads = 2;
  int n_enc_layers = 1;
  int n_dec_layers = 2;
  int d_ff = 64;
  int max_len = 16;
  bool use_patch_self_attention = true;
  int n_psa_layers = 1;

  TrainConfig train;

  // Phase wiring.
  std::string init_checkpoint;
  std::string teacher_checkpoint;
  std::string checkpoint;  // eval / decode input

  // decode command.
  std::string decode_split = "concept_test";
  std::string decode_method = "beam";  // or "greedy"
  int decode_b = 5;
  std::vector<int> image_ids;  // empty = every image of the split
};

// Sets one key. Throws ConfigError for unknown keys (naming the key) and for
// values that do not parse as the key's type.
void set_config_key(RunConfig& config, const std::string& key, const std::string& value);

// Reads `key = value` lines ('#' comments, blank lines allowed).
RunConfig parse_config_file(const std::string& path);

// Applies one `key=value` override string.
void apply_override(RunConfig& config, const std::string& assignment);

// Propagates the top-level seed into the training config and validates
// enum-like fields; call once after the file and all overrides are applied.
void finalize_config(RunConfig& config);

// Model configuration implied by the run config (vocab_size left at 0; patch
// geometry copied from the corpus section as the default).
ModelConfig model_config(const RunConfig& config);

// Canonical JSON echo of every key (stable across runs with equal configs).
nlohmann::json config_json(const RunConfig& config);

// FNV-1a hash of the canonical echo, as fixed-width hex.
std::string config_hash(const RunConfig& config);

}  // namespace krcap

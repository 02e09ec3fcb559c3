#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "krcap/rng.hpp"
#include "krcap/tensor.hpp"

namespace krcap {

// A named visual concept: images embed its signature, captions its name.
struct ConceptSpec {
  std::string name;               // normalized keyword string
  std::vector<double> signature;  // unit norm
  bool replay_eligible = true;    // false = "unseen" analog
};

struct SyntheticImage {
  int image_id = 0;
  int grid_h = 0, grid_w = 0, d_patch = 0;
  Tensor patches;                // (grid_h * grid_w) x d_patch
  std::vector<int> concept_ids;  // indices into the render bank
};

// Deterministic concept bank; signatures rejection-sampled so every pair has
// absolute cosine similarity < 0.5. The last num_unseen concepts are marked
// not replay-eligible. Throws DataError("concept bank infeasible") when the
// bound cannot be met, ConfigError on bad arguments.
std::vector<ConceptSpec> generate_concept_bank(int num_concepts, int num_unseen,
                                               int dim, uint64_t seed);

// Twelve generic object words with signatures rejected against `avoid` (and
// each other) under the same similarity bound. Objects are what generic
// captions talk about.
std::vector<ConceptSpec> generate_object_bank(int dim, uint64_t seed,
                                              const std::vector<ConceptSpec>& avoid);

// Renders concept_ids (indices into bank) as contiguous signature+noise
// blocks on a fixed non-overlapping tiling; all other patches are pure noise.
// Throws DataError("grid too small") when the blocks do not fit.
SyntheticImage render_image(const std::vector<ConceptSpec>& bank,
                            const std::vector<int>& concept_ids, int grid_h,
                            int grid_w, int d_patch, double noise_sigma, Rng& rng);

struct CorpusSizes {
  int pretrain = 1800;
  int generic_train = 2400;
  int generic_val = 64;
  int generic_test = 128;
  int replay = 480;
  int concept_val = 72;
  int concept_test = 144;
};

struct CorpusConfig {
  int num_concepts = 24;
  int num_unseen = 12;
  int grid_h = 4;
  int grid_w = 4;
  int d_patch = 16;
  double noise_sigma = 0.05;
  CorpusSizes sizes;
};

struct SplitInfo {
  int count = 0;
  std::string patches;   // filename relative to the manifest directory
  std::string captions;  // empty for the replay split
  std::string keywords;  // replay pairs / concept keyword sidecar; may be empty
};

struct DatasetManifest {
  uint64_t seed = 0;
  std::string dir;  // directory holding the files; set by save/load
  std::string concept_bank;
  std::string vocab;
  CorpusConfig config;
  std::map<std::string, SplitInfo> splits;

  std::string path(const std::string& filename) const;
  const SplitInfo& split(const std::string& name) const;
};

// Generates every split plus bank/vocab/manifest files under out_dir.
// Split recipe: pretrain and concept_val/test pair concept images with
// concept-naming captions (round-robin over all concepts); generic splits
// pair object-only images with object-describing captions that never name a
// concept; replay pairs concept images with bare concept keywords, using only
// replay-eligible concepts.
DatasetManifest generate_corpora(const std::vector<ConceptSpec>& bank,
                                 const CorpusConfig& config, uint64_t seed,
                                 const std::string& out_dir);

void save_manifest(const DatasetManifest& manifest, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

// Caption dataset files (pycocoevalcap-compatible shape).
struct CaptionAnnotation {
  int image_id = 0;
  int id = 0;
  std::string caption;
};
struct CaptionData {
  std::vector<int> image_ids;
  std::vector<CaptionAnnotation> annotations;
};
void save_captions(const CaptionData& data, const std::string& path);
CaptionData load_captions(const std::string& path);

// Image-keyword pair files ({"replay": [...]}), also used as the keyword
// sidecar of the concept splits.
struct ReplayPair {
  int image_id = 0;
  std::string keyword;
};
void save_replay_pairs(const std::vector<ReplayPair>& pairs, const std::string& path);
std::vector<ReplayPair> load_replay_pairs(const std::string& path);

// Patch tensor files: (count, H, W, d) u32 header then row-major f32 values;
// image_id = record index.
void save_patches(const std::vector<Tensor>& images, int grid_h, int grid_w,
                  int d_patch, const std::string& path);
std::vector<Tensor> load_patches(const std::string& path, int& grid_h, int& grid_w,
                                 int& d_patch);

void save_concept_bank(const std::vector<ConceptSpec>& concepts,
                       const std::vector<ConceptSpec>& objects,
                       const std::string& path);
void load_concept_bank(const std::string& path, std::vector<ConceptSpec>& concepts,
                       std::vector<ConceptSpec>& objects);

// One epoch of Algorithm-style mixed batches: the concatenated caption+replay
// pool is shuffled once, then cut into consecutive batch_size slices (final
// short batch allowed).
struct BatchItem {
  bool is_replay = false;
  int index = 0;  // into the caption set or the replay set
};
std::vector<std::vector<BatchItem>> mix_batches(int n_caption, int n_replay,
                                                int batch_size, Rng& rng);

}  // namespace krcap

#include "krcap/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "krcap/errors.hpp"
#include "krcap/text.hpp"

namespace fs = std::filesystem;

namespace krcap {

namespace {

constexpr int kSimilarityRetries = 5000;
constexpr double kMaxAbsCosine = 0.5;

const std::vector<std::string> kObjectWords = {"box",    "table", "river", "chair",
                                               "tree",   "road",  "window", "boat",
                                               "field",  "lamp",  "wall",  "door"};

const std::vector<std::string> kSyllables = {"ka", "ro", "mi", "ta", "zu",
                                             "ne", "lo", "pa", "si", "ve"};

// Words the templates use; concept names must avoid them so generic captions
// can never accidentally name a concept.
const std::set<std::string>& reserved_words() {
  static const std::set<std::string> words = [] {
    std::set<std::string> w(kObjectWords.begin(), kObjectWords.end());
    for (const char* t : {"a", "photo", "of", "the", "near", "there", "is", "in",
                          "picture", "scene"})
      w.insert(t);
    return w;
  }();
  return words;
}

std::vector<double> random_unit_vector(int dim, Rng& rng) {
  std::vector<double> v(dim);
  double norm_sq = 0.0;
  do {
    norm_sq = 0.0;
    for (double& x : v) {
      x = rng.normal();
      norm_sq += x * x;
    }
  } while (norm_sq == 0.0);
  double inv = 1.0 / std::sqrt(norm_sq);
  for (double& x : v) x *= inv;
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

bool far_from_all(const std::vector<double>& v,
                  const std::vector<std::vector<double>>& others) {
  for (const std::vector<double>& o : others)
    if (std::abs(dot(v, o)) >= kMaxAbsCosine) return false;
  return true;
}

std::string make_name_word(Rng& rng) {
  int syllables = 2 + static_cast<int>(rng.uniform_int(2));
  std::string w;
  for (int s = 0; s < syllables; ++s)
    w += kSyllables[rng.uniform_int(kSyllables.size())];
  return w;
}

}  // namespace

std::vector<ConceptSpec> generate_concept_bank(int num_concepts, int num_unseen,
                                               int dim, uint64_t seed) {
  if (num_concepts < 1 || num_unseen < 0 || num_unseen >= num_concepts)
    throw ConfigError("concept bank: need 0 <= num_unseen < num_concepts");
  if (dim < 4) throw ConfigError("concept bank: dim must be >= 4");

  Rng rng(seed);
  std::vector<ConceptSpec> bank;
  std::set<std::string> used_words = reserved_words();
  std::vector<std::vector<double>> signatures;

  for (int i = 0; i < num_concepts; ++i) {
    ConceptSpec spec;
    // Every third concept gets a two-word name so multi-word keywords exist.
    int words = (i % 3 == 2) ? 2 : 1;
    for (int attempt = 0;; ++attempt) {
      if (attempt >= kSimilarityRetries)
        throw DataError("concept bank infeasible");
      std::vector<std::string> parts;
      bool fresh = true;
      for (int w = 0; w < words; ++w) {
        parts.push_back(make_name_word(rng));
        if (used_words.count(parts.back())) fresh = false;
      }
      if (words == 2 && parts[0] == parts[1]) fresh = false;
      if (!fresh) continue;
      spec.name = parts[0];
      for (int w = 1; w < words; ++w) spec.name += " " + parts[w];
      for (const std::string& p : parts) used_words.insert(p);
      break;
    }
    int attempt = 0;
    do {
      if (attempt++ >= kSimilarityRetries) throw DataError("concept bank infeasible");
      spec.signature = random_unit_vector(dim, rng);
    } while (!far_from_all(spec.signature, signatures));
    spec.replay_eligible = i < num_concepts - num_unseen;
    signatures.push_back(spec.signature);
    bank.push_back(std::move(spec));
  }
  return bank;
}

std::vector<ConceptSpec> generate_object_bank(int dim, uint64_t seed,
                                              const std::vector<ConceptSpec>& avoid) {
  if (dim < 4) throw ConfigError("object bank: dim must be >= 4");
  Rng rng(seed);
  std::vector<ConceptSpec> objects;
  std::vector<std::vector<double>> signatures;
  for (const ConceptSpec& c : avoid) signatures.push_back(c.signature);
  for (const std::string& word : kObjectWords) {
    ConceptSpec spec;
    spec.name = word;
    spec.replay_eligible = false;
    int attempt = 0;
    do {
      if (attempt++ >= kSimilarityRetries) throw DataError("concept bank infeasible");
      spec.signature = random_unit_vector(dim, rng);
    } while (!far_from_all(spec.signature, signatures));
    signatures.push_back(spec.signature);
    objects.push_back(std::move(spec));
  }
  return objects;
}

SyntheticImage render_image(const std::vector<ConceptSpec>& bank,
                            const std::vector<int>& concept_ids, int grid_h,
                            int grid_w, int d_patch, double noise_sigma, Rng& rng) {
  if (grid_h < 1 || grid_w < 1 || d_patch < 1)
    throw ConfigError("render_image: bad grid");
  int bh = std::min(2, grid_h);
  int bw = std::min(2, grid_w);
  int block_rows = grid_h / bh;
  int block_cols = grid_w / bw;
  if (static_cast<int>(concept_ids.size()) > block_rows * block_cols)
    throw DataError("grid too small");
  for (int id : concept_ids) {
    if (id < 0 || id >= static_cast<int>(bank.size()))
      throw DataError("render_image: concept id out of range");
    if (static_cast<int>(bank[id].signature.size()) != d_patch)
      throw DataError("render_image: signature dimension mismatch");
  }

  // Which embedded concept (if any) owns each patch.
  auto owner = [&](int r, int c) -> int {
    int br = r / bh, bc = c / bw;
    if (r >= block_rows * bh || c >= block_cols * bw) return -1;
    int k = br * block_cols + bc;
    return k < static_cast<int>(concept_ids.size()) ? k : -1;
  };

  SyntheticImage img;
  img.grid_h = grid_h;
  img.grid_w = grid_w;
  img.d_patch = d_patch;
  img.concept_ids = concept_ids;
  img.patches = Tensor(grid_h * grid_w, d_patch);
  for (int r = 0; r < grid_h; ++r)
    for (int c = 0; c < grid_w; ++c) {
      int k = owner(r, c);
      for (int j = 0; j < d_patch; ++j) {
        double base = k >= 0 ? bank[concept_ids[k]].signature[j] : 0.0;
        img.patches(r * grid_w + c, j) = base + noise_sigma * rng.normal();
      }
    }
  return img;
}

std::string DatasetManifest::path(const std::string& filename) const {
  if (dir.empty()) return filename;
  return (fs::path(dir) / filename).string();
}

const SplitInfo& DatasetManifest::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw MissingArtifactError("manifest has no split: " + name);
  return it->second;
}

namespace {

std::string concept_caption(const std::string& concept_name,
                            const std::string& object_word) {
  return "a photo of the " + concept_name + " near the " + object_word;
}

std::string generic_caption(const std::string& object_word, int variant) {
  switch (variant) {
    case 0: return "a photo of the " + object_word;
    case 1: return "there is a " + object_word + " in the picture";
    default: return "a picture of the " + object_word + " in the scene";
  }
}

struct DraftItem {
  std::vector<int> embed;  // render-bank indices
  std::string caption;     // empty for replay
  std::string keyword;     // empty for generic splits
};

}  // namespace

DatasetManifest generate_corpora(const std::vector<ConceptSpec>& bank,
                                 const CorpusConfig& config, uint64_t seed,
                                 const std::string& out_dir) {
  if (bank.empty()) throw ConfigError("generate_corpora: empty concept bank");
  const CorpusSizes& sz = config.sizes;
  for (int s : {sz.pretrain, sz.generic_train, sz.generic_val, sz.generic_test,
                sz.replay, sz.concept_val, sz.concept_test})
    if (s < 1) throw ConfigError("generate_corpora: all split sizes must be positive");

  std::vector<int> eligible;
  for (int i = 0; i < static_cast<int>(bank.size()); ++i)
    if (bank[i].replay_eligible) eligible.push_back(i);
  if (eligible.empty())
    throw DataError("replay requested but no replay-eligible concepts");

  std::vector<ConceptSpec> objects =
      generate_object_bank(config.d_patch, derive_seed(seed, "objects"), bank);
  std::vector<ConceptSpec> render_bank = bank;
  render_bank.insert(render_bank.end(), objects.begin(), objects.end());
  const int c_count = static_cast<int>(bank.size());
  const int o_count = static_cast<int>(objects.size());

  auto draft_split = [&](const std::string& name, int count) {
    Rng rng(derive_seed(seed, "captions." + name));
    std::vector<DraftItem> items(count);
    for (int i = 0; i < count; ++i) {
      DraftItem& item = items[i];
      int obj = static_cast<int>(rng.uniform_int(o_count));
      if (name == "pretrain" || name == "concept_val" || name == "concept_test") {
        int cid = i % c_count;  // round-robin covers every concept
        item.embed = {cid, c_count + obj};
        item.caption = concept_caption(bank[cid].name, objects[obj].name);
        item.keyword = bank[cid].name;
      } else if (name == "replay") {
        int cid = eligible[i % static_cast<int>(eligible.size())];
        item.embed = {cid, c_count + obj};
        item.keyword = bank[cid].name;
      } else {  // generic splits: object-only images, concept-free captions
        int variant = static_cast<int>(rng.uniform_int(3));
        item.embed = {c_count + obj};
        item.caption = generic_caption(objects[obj].name, variant);
      }
    }
    return items;
  };

  const std::vector<std::pair<std::string, int>> split_plan = {
      {"pretrain", sz.pretrain},       {"generic_train", sz.generic_train},
      {"generic_val", sz.generic_val}, {"generic_test", sz.generic_test},
      {"replay", sz.replay},           {"concept_val", sz.concept_val},
      {"concept_test", sz.concept_test}};

  std::map<std::string, std::vector<DraftItem>> drafts;
  std::vector<std::string> vocab_corpus;
  for (const auto& [name, count] : split_plan) {
    drafts[name] = draft_split(name, count);
    for (const DraftItem& item : drafts[name]) {
      if (!item.caption.empty()) vocab_corpus.push_back(item.caption);
      if (!item.keyword.empty()) vocab_corpus.push_back(item.keyword);
    }
  }
  Vocabulary vocab = build_vocab(vocab_corpus, 1);

  fs::create_directories(out_dir);
  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.dir = out_dir;
  manifest.config = config;
  manifest.concept_bank = "concepts.json";
  manifest.vocab = "vocab.txt";

  for (const auto& [name, count] : split_plan) {
    Rng rng(derive_seed(seed, "images." + name));
    std::vector<Tensor> patches;
    CaptionData captions;
    std::vector<ReplayPair> keywords;
    for (int i = 0; i < count; ++i) {
      const DraftItem& item = drafts[name][i];
      SyntheticImage img = render_image(render_bank, item.embed, config.grid_h,
                                        config.grid_w, config.d_patch,
                                        config.noise_sigma, rng);
      patches.push_back(std::move(img.patches));
      captions.image_ids.push_back(i);
      if (!item.caption.empty())
        captions.annotations.push_back({i, i, item.caption});
      if (!item.keyword.empty()) keywords.push_back({i, item.keyword});
    }

    SplitInfo info;
    info.count = count;
    info.patches = name + ".patches.bin";
    save_patches(patches, config.grid_h, config.grid_w, config.d_patch,
                 manifest.path(info.patches));
    if (!captions.annotations.empty()) {
      info.captions = name + ".captions.json";
      save_captions(captions, manifest.path(info.captions));
    }
    if (!keywords.empty()) {
      info.keywords = name + ".keywords.json";
      save_replay_pairs(keywords, manifest.path(info.keywords));
    }
    manifest.splits[name] = info;
  }

  save_concept_bank(bank, objects, manifest.path(manifest.concept_bank));
  save_vocab(vocab, manifest.path(manifest.vocab));
  save_manifest(manifest, manifest.path("manifest.json"));
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
  nlohmann::json j;
  j["seed"] = manifest.seed;
  j["concept_bank"] = manifest.concept_bank;
  j["vocab"] = manifest.vocab;
  j["config"] = {{"num_concepts", manifest.config.num_concepts},
                 {"num_unseen", manifest.config.num_unseen},
                 {"grid_h", manifest.config.grid_h},
                 {"grid_w", manifest.config.grid_w},
                 {"d_patch", manifest.config.d_patch},
                 {"noise_sigma", manifest.config.noise_sigma}};
  nlohmann::json splits;
  for (const auto& [name, info] : manifest.splits) {
    nlohmann::json s = {{"count", info.count}, {"patches", info.patches}};
    if (!info.captions.empty()) s["captions"] = info.captions;
    if (!info.keywords.empty()) s["keywords"] = info.keywords;
    splits[name] = s;
  }
  j["splits"] = splits;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifactError("cannot write manifest: " + path);
  out << j.dump(2) << '\n';
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.seed = j.at("seed").get<uint64_t>();
    m.concept_bank = j.at("concept_bank").get<std::string>();
    m.vocab = j.at("vocab").get<std::string>();
    const nlohmann::json& c = j.at("config");
    m.config.num_concepts = c.at("num_concepts").get<int>();
    m.config.num_unseen = c.at("num_unseen").get<int>();
    m.config.grid_h = c.at("grid_h").get<int>();
    m.config.grid_w = c.at("grid_w").get<int>();
    m.config.d_patch = c.at("d_patch").get<int>();
    m.config.noise_sigma = c.at("noise_sigma").get<double>();
    for (const auto& [name, s] : j.at("splits").items()) {
      SplitInfo info;
      info.count = s.at("count").get<int>();
      info.patches = s.at("patches").get<std::string>();
      if (s.contains("captions")) info.captions = s.at("captions").get<std::string>();
      if (s.contains("keywords")) info.keywords = s.at("keywords").get<std::string>();
      m.splits[name] = info;
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path + ": " + e.what());
  }
  m.dir = fs::path(path).parent_path().string();
  return m;
}

void save_captions(const CaptionData& data, const std::string& path) {
  nlohmann::json j;
  j["images"] = nlohmann::json::array();
  for (int id : data.image_ids) j["images"].push_back({{"id", id}});
  j["annotations"] = nlohmann::json::array();
  for (const CaptionAnnotation& a : data.annotations)
    j["annotations"].push_back(
        {{"image_id", a.image_id}, {"id", a.id}, {"caption", a.caption}});
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifactError("cannot write captions: " + path);
  out << j.dump(2) << '\n';
}

CaptionData load_captions(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing caption file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("caption file " + path + ": " + e.what());
  }
  CaptionData data;
  if (!j.contains("images"))
    throw DataError("caption file " + path + ": missing \"images\" key");
  if (!j.contains("annotations"))
    throw DataError("caption file " + path + ": missing \"annotations\" key");
  std::set<int> known;
  try {
    for (const auto& img : j.at("images")) {
      int id = img.at("id").get<int>();
      data.image_ids.push_back(id);
      known.insert(id);
    }
    int index = 0;
    for (const auto& ann : j.at("annotations")) {
      CaptionAnnotation a;
      a.image_id = ann.at("image_id").get<int>();
      a.id = ann.at("id").get<int>();
      a.caption = ann.at("caption").get<std::string>();
      if (!known.count(a.image_id))
        throw DataError("caption file " + path + ": annotation " +
                        std::to_string(index) + " references unknown image_id " +
                        std::to_string(a.image_id));
      data.annotations.push_back(std::move(a));
      ++index;
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("caption file " + path + ": " + e.what());
  }
  return data;
}

void save_replay_pairs(const std::vector<ReplayPair>& pairs, const std::string& path) {
  nlohmann::json j;
  j["replay"] = nlohmann::json::array();
  for (const ReplayPair& p : pairs)
    j["replay"].push_back({{"image_id", p.image_id}, {"keyword", p.keyword}});
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifactError("cannot write replay pairs: " + path);
  out << j.dump(2) << '\n';
}

std::vector<ReplayPair> load_replay_pairs(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing replay file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("replay file " + path + ": " + e.what());
  }
  if (!j.contains("replay"))
    throw DataError("replay file " + path + ": missing \"replay\" key");
  std::vector<ReplayPair> pairs;
  try {
    for (const auto& p : j.at("replay"))
      pairs.push_back({p.at("image_id").get<int>(), p.at("keyword").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw DataError("replay file " + path + ": " + e.what());
  }
  return pairs;
}

namespace {

void write_u32_le(std::ofstream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32_le(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw DataError("patch file " + path + ": truncated header");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_patches(const std::vector<Tensor>& images, int grid_h, int grid_w,
                  int d_patch, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifactError("cannot write patch file: " + path);
  write_u32_le(out, static_cast<uint32_t>(images.size()));
  write_u32_le(out, static_cast<uint32_t>(grid_h));
  write_u32_le(out, static_cast<uint32_t>(grid_w));
  write_u32_le(out, static_cast<uint32_t>(d_patch));
  for (const Tensor& t : images) {
    if (t.rows != grid_h * grid_w || t.cols != d_patch)
      throw DataError("patch file " + path + ": image shape mismatch");
    for (double v : t.a) {
      float f = static_cast<float>(v);
      static_assert(sizeof(float) == 4);
      out.write(reinterpret_cast<const char*>(&f), 4);
    }
  }
}

std::vector<Tensor> load_patches(const std::string& path, int& grid_h, int& grid_w,
                                 int& d_patch) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing patch file: " + path);
  uint32_t count = read_u32_le(in, path);
  grid_h = static_cast<int>(read_u32_le(in, path));
  grid_w = static_cast<int>(read_u32_le(in, path));
  d_patch = static_cast<int>(read_u32_le(in, path));
  std::vector<Tensor> images;
  images.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Tensor t(grid_h * grid_w, d_patch);
    for (double& v : t.a) {
      float f;
      if (!in.read(reinterpret_cast<char*>(&f), 4))
        throw DataError("patch file " + path + ": truncated record " +
                        std::to_string(i));
      v = static_cast<double>(f);
    }
    images.push_back(std::move(t));
  }
  return images;
}

void save_concept_bank(const std::vector<ConceptSpec>& concepts,
                       const std::vector<ConceptSpec>& objects,
                       const std::string& path) {
  auto to_json = [](const std::vector<ConceptSpec>& specs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const ConceptSpec& c : specs)
      arr.push_back({{"name", c.name},
                     {"signature", c.signature},
                     {"replay_eligible", c.replay_eligible}});
    return arr;
  };
  nlohmann::json j;
  j["concepts"] = to_json(concepts);
  j["objects"] = to_json(objects);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifactError("cannot write concept bank: " + path);
  out << j.dump(2) << '\n';
}

void load_concept_bank(const std::string& path, std::vector<ConceptSpec>& concepts,
                       std::vector<ConceptSpec>& objects) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing concept bank: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("concept bank " + path + ": " + e.what());
  }
  auto from_json = [&](const nlohmann::json& arr) {
    std::vector<ConceptSpec> specs;
    for (const auto& c : arr) {
      ConceptSpec spec;
      spec.name = c.at("name").get<std::string>();
      spec.signature = c.at("signature").get<std::vector<double>>();
      spec.replay_eligible = c.at("replay_eligible").get<bool>();
      specs.push_back(std::move(spec));
    }
    return specs;
  };
  try {
    concepts = from_json(j.at("concepts"));
    objects = from_json(j.at("objects"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("concept bank " + path + ": " + e.what());
  }
}

std::vector<std::vector<BatchItem>> mix_batches(int n_caption, int n_replay,
                                                int batch_size, Rng& rng) {
  if (batch_size < 1) throw ConfigError("mix_batches: batch_size must be >= 1");
  if (n_caption + n_replay == 0) throw DataError("mix_batches: no samples");
  std::vector<BatchItem> pool;
  pool.reserve(static_cast<size_t>(n_caption) + n_replay);
  for (int i = 0; i < n_caption; ++i) pool.push_back({false, i});
  for (int i = 0; i < n_replay; ++i) pool.push_back({true, i});
  rng.shuffle(pool);
  std::vector<std::vector<BatchItem>> batches;
  for (size_t start = 0; start < pool.size(); start += batch_size) {
    size_t end = std::min(pool.size(), start + batch_size);
    batches.emplace_back(pool.begin() + start, pool.begin() + end);
  }
  return batches;
}

}  // namespace krcap

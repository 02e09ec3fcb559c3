#include "krcap/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "krcap/errors.hpp"

namespace krcap {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) {
    return "";
  }
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    long long v = std::stoll(value, &pos);
    if (pos != value.size()) {
      throw std::invalid_argument("trailing characters");
    }
    return v;
  } catch (const std::exception&) {
    throw ConfigError("invalid integer for config key " + key + ": " + value);
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    double v = std::stod(value, &pos);
    if (pos != value.size()) {
      throw std::invalid_argument("trailing characters");
    }
    return v;
  } catch (const std::exception&) {
    throw ConfigError("invalid number for config key " + key + ": " + value);
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") {
    return true;
  }
  if (value == "false" || value == "0") {
    return false;
  }
  throw ConfigError("invalid boolean for config key " + key + ": " + value);
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  if (trim(value).empty()) {
    return out;
  }
  std::stringstream ss(value);
  std::string part;
  while (std::getline(ss, part, ',')) {
    out.push_back(static_cast<int>(parse_int(key, trim(part))));
  }
  return out;
}

}  // namespace

void set_config_key(RunConfig& c, const std::string& key, const std::string& value) {
  // clang-format off
  if      (key == "seed")                { c.seed = static_cast<uint64_t>(parse_int(key, value)); }
  else if (key == "data_dir")            { c.data_dir = value; }

  else if (key == "num_concepts")        { c.corpus.num_concepts = static_cast<int>(parse_int(key, value)); }
  else if (key == "num_unseen")          { c.corpus.num_unseen = static_cast<int>(parse_int(key, value)); }
  else if (key == "noise_sigma")         { c.corpus.noise_sigma = parse_double(key, value); }
  else if (key == "grid_h")              { c.corpus.grid_h = static_cast<int>(parse_int(key, value)); }
  else if (key == "grid_w")              { c.corpus.grid_w = static_cast<int>(parse_int(key, value)); }
  else if (key == "d_patch")             { c.corpus.d_patch = static_cast<int>(parse_int(key, value)); }
  else if (key == "pretrain_size")       { c.corpus.sizes.pretrain = static_cast<int>(parse_int(key, value)); }
  else if (key == "generic_train_size")  { c.corpus.sizes.generic_train = static_cast<int>(parse_int(key, value)); }
  else if (key == "generic_val_size")    { c.corpus.sizes.generic_val = static_cast<int>(parse_int(key, value)); }
  else if (key == "generic_test_size")   { c.corpus.sizes.generic_test = static_cast<int>(parse_int(key, value)); }
  else if (key == "replay_size")         { c.corpus.sizes.replay = static_cast<int>(parse_int(key, value)); }
  else if (key == "concept_val_size")    { c.corpus.sizes.concept_val = static_cast<int>(parse_int(key, value)); }
  else if (key == "concept_test_size")   { c.corpus.sizes.concept_test = static_cast<int>(parse_int(key, value)); }

  else if (key == "d_model")             { c.d_model = static_cast<int>(parse_int(key, value)); }
  else if (key == "n_heads")             { c.n_heads = static_cast<int>(parse_int(key, value)); }
  else if (key == "n_enc_layers")        { c.n_enc_layers = static_cast<int>(parse_int(key, value)); }
  else if (key == "n_dec_layers")        { c.n_dec_layers = static_cast<int>(parse_int(key, value)); }
  else if (key == "d_ff")                { c.d_ff = static_cast<int>(parse_int(key, value)); }
  else if (key == "max_len")             { c.max_len = static_cast<int>(parse_int(key, value)); }
  else if (key == "use_patch_self_attention") { c.use_patch_self_attention = parse_bool(key, value); }
  else if (key == "n_psa_layers")        { c.n_psa_layers = static_cast<int>(parse_int(key, value)); }

  else if (key == "epochs")              { c.train.epochs = static_cast<int>(parse_int(key, value)); }
  else if (key == "batch_size")          { c.train.batch_size = static_cast<int>(parse_int(key, value)); }
  else if (key == "lr_max")              { c.train.lr_max = parse_double(key, value); }
  else if (key == "lr_min")              { c.train.lr_min = parse_double(key, value); }
  else if (key == "smoothing")           { c.train.smoothing = parse_double(key, value); }
  else if (key == "lambda_k")            { c.train.weights.lambda_k = parse_double(key, value); }
  else if (key == "lambda_d")            { c.train.weights.lambda_d = parse_double(key, value); }
  else if (key == "distill_t")           { c.train.distill_temperature = parse_double(key, value); }
  else if (key == "beam_width")          { c.train.beam_width = static_cast<int>(parse_int(key, value)); }
  else if (key == "beam_alpha")          { c.train.beam_alpha = parse_double(key, value); }
  else if (key == "pseudo_decode")       {
    if (value == "beam") { c.train.pseudo_beam = true; }
    else if (value == "greedy") { c.train.pseudo_beam = false; }
    else { throw ConfigError("invalid value for config key pseudo_decode: " + value); }
  }
  else if (key == "pseudo_caption_source") {
    if (value != "teacher" && value != "student") {
      throw ConfigError("invalid value for config key pseudo_caption_source: " + value);
    }
    c.train.pseudo_caption_source = value;
  }
  else if (key == "scheduler")           {
    if (value == "cosine") { c.train.cosine_schedule = true; }
    else if (value == "constant") { c.train.cosine_schedule = false; }
    else { throw ConfigError("invalid value for config key scheduler: " + value); }
  }
  else if (key == "checkpoint_every")    { c.train.checkpoint_every = static_cast<int>(parse_int(key, value)); }
  else if (key == "beta1")               { c.train.beta1 = parse_double(key, value); }
  else if (key == "beta2")               { c.train.beta2 = parse_double(key, value); }
  else if (key == "adam_eps")            { c.train.adam_eps = parse_double(key, value); }
  else if (key == "weight_decay")        { c.train.weight_decay = parse_double(key, value); }

  else if (key == "init_checkpoint")     { c.init_checkpoint = value; }
  else if (key == "teacher_checkpoint")  { c.teacher_checkpoint = value; }
  else if (key == "checkpoint")          { c.checkpoint = value; }

  else if (key == "decode_split")        { c.decode_split = value; }
  else if (key == "decode_method")       {
    if (value != "beam" && value != "greedy") {
      throw ConfigError("invalid value for config key decode_method: " + value);
    }
    c.decode_method = value;
  }
  else if (key == "decode_b")            { c.decode_b = static_cast<int>(parse_int(key, value)); }
  else if (key == "image_ids")           { c.image_ids = parse_int_list(key, value); }

  else {
    throw ConfigError("unknown config key: " + key);
  }
  // clang-format on
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file: " + path);
  }
  RunConfig config;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    size_t hash = line.find('#');
    if (hash != std::string::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        " is not key = value: " + line);
    }
    set_config_key(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return config;
}

void apply_override(RunConfig& config, const std::string& assignment) {
  size_t eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override must look like key=value: " + assignment);
  }
  set_config_key(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void finalize_config(RunConfig& config) {
  config.train.seed = config.seed;
  if (config.train.epochs < 1) {
    throw ConfigError("epochs must be positive");
  }
  if (config.train.batch_size < 1) {
    throw ConfigError("batch_size must be positive");
  }
  if (config.train.beam_width < 1 || config.decode_b < 1) {
    throw ConfigError("beam widths must be positive");
  }
  if (config.train.smoothing < 0.0 || config.train.smoothing >= 1.0) {
    throw ConfigError("smoothing must be in [0, 1)");
  }
  if (config.train.distill_temperature <= 0.0) {
    throw ConfigError("distill_t must be positive");
  }
}

ModelConfig model_config(const RunConfig& c) {
  ModelConfig mc;
  mc.d_model = c.d_model;
  mc.n_heads = c.n_heads;
  mc.n_enc_layers = c.n_enc_layers;
  mc.n_dec_layers = c.n_dec_layers;
  mc.d_ff = c.d_ff;
  mc.vocab_size = 0;
  mc.grid_h = c.corpus.grid_h;
  mc.grid_w = c.corpus.grid_w;
  mc.d_patch = c.corpus.d_patch;
  mc.max_len = c.max_len;
  mc.use_patch_self_attention = c.use_patch_self_attention;
  mc.n_psa_layers = c.n_psa_layers;
  return mc;
}

nlohmann::json config_json(const RunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["data_dir"] = c.data_dir;
  j["num_concepts"] = c.corpus.num_concepts;
  j["num_unseen"] = c.corpus.num_unseen;
  j["noise_sigma"] = c.corpus.noise_sigma;
  j["grid_h"] = c.corpus.grid_h;
  j["grid_w"] = c.corpus.grid_w;
  j["d_patch"] = c.corpus.d_patch;
  j["pretrain_size"] = c.corpus.sizes.pretrain;
  j["generic_train_size"] = c.corpus.sizes.generic_train;
  j["generic_val_size"] = c.corpus.sizes.generic_val;
  j["generic_test_size"] = c.corpus.sizes.generic_test;
  j["replay_size"] = c.corpus.sizes.replay;
  j["concept_val_size"] = c.corpus.sizes.concept_val;
  j["concept_test_size"] = c.corpus.sizes.concept_test;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["n_enc_layers"] = c.n_enc_layers;
  j["n_dec_layers"] = c.n_dec_layers;
  j["d_ff"] = c.d_ff;
  j["max_len"] = c.max_len;
  j["use_patch_self_attention"] = c.use_patch_self_attention;
  j["n_psa_layers"] = c.n_psa_layers;
  j["epochs"] = c.train.epochs;
  j["batch_size"] = c.train.batch_size;
  j["lr_max"] = c.train.lr_max;
  j["lr_min"] = c.train.lr_min;
  j["smoothing"] = c.train.smoothing;
  j["lambda_k"] = c.train.weights.lambda_k;
  j["lambda_d"] = c.train.weights.lambda_d;
  j["distill_t"] = c.train.distill_temperature;
  j["beam_width"] = c.train.beam_width;
  j["beam_alpha"] = c.train.beam_alpha;
  j["pseudo_decode"] = c.train.pseudo_beam ? "beam" : "greedy";
  j["pseudo_caption_source"] = c.train.pseudo_caption_source;
  j["scheduler"] = c.train.cosine_schedule ? "cosine" : "constant";
  j["checkpoint_every"] = c.train.checkpoint_every;
  j["beta1"] = c.train.beta1;
  j["beta2"] = c.train.beta2;
  j["adam_eps"] = c.train.adam_eps;
  j["weight_decay"] = c.train.weight_decay;
  j["init_checkpoint"] = c.init_checkpoint;
  j["teacher_checkpoint"] = c.teacher_checkpoint;
  j["checkpoint"] = c.checkpoint;
  j["decode_split"] = c.decode_split;
  j["decode_method"] = c.decode_method;
  j["decode_b"] = c.decode_b;
  j["image_ids"] = c.image_ids;
  return j;
}

std::string config_hash(const RunConfig& c) {
  const std::string dump = config_json(c).dump();
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : dump) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace krcap

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "krcap/errors.hpp"
#include "krcap/model.hpp"

namespace krcap {

namespace {

constexpr char kMagic[4] = {'K', 'R', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ofstream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw DataError("checkpoint " + path + ": truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"d_model", c.d_model},
                        {"n_heads", c.n_heads},
                        {"n_enc_layers", c.n_enc_layers},
                        {"n_dec_layers", c.n_dec_layers},
                        {"d_ff", c.d_ff},
                        {"vocab_size", c.vocab_size},
                        {"grid_h", c.grid_h},
                        {"grid_w", c.grid_w},
                        {"d_patch", c.d_patch},
                        {"max_len", c.max_len},
                        {"use_patch_self_attention", c.use_patch_self_attention},
                        {"n_psa_layers", c.n_psa_layers}};
}

ModelConfig config_from_json(const nlohmann::json& j, const std::string& path) {
  ModelConfig c;
  try {
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_enc_layers = j.at("n_enc_layers").get<int>();
    c.n_dec_layers = j.at("n_dec_layers").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.grid_h = j.at("grid_h").get<int>();
    c.grid_w = j.at("grid_w").get<int>();
    c.d_patch = j.at("d_patch").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.use_patch_self_attention = j.at("use_patch_self_attention").get<bool>();
    c.n_psa_layers = j.at("n_psa_layers").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path + ": bad config header: " + e.what());
  }
  if (j.size() != 12)
    throw DataError("checkpoint " + path + ": unexpected config key");
  return c;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifactError("cannot write checkpoint: " + path);
  out.write(kMagic, 4);
  write_u32(out, kVersion);
  std::string config = config_to_json(model.config).dump();
  write_u32(out, static_cast<uint32_t>(config.size()));
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  write_u32(out, static_cast<uint32_t>(model.params.size()));
  for (const auto& [name, tensor] : model.params) {
    write_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<uint32_t>(tensor.rows));
    write_u32(out, static_cast<uint32_t>(tensor.cols));
    out.write(reinterpret_cast<const char*>(tensor.a.data()),
              static_cast<std::streamsize>(tensor.a.size() * sizeof(double)));
  }
  if (!out) throw MissingArtifactError("write failed for checkpoint: " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing checkpoint: " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("checkpoint " + path + ": bad magic");
  uint32_t version = read_u32(in, path);
  if (version != kVersion)
    throw DataError("checkpoint " + path + ": unsupported version " +
                    std::to_string(version));
  uint32_t config_len = read_u32(in, path);
  std::string config_text(config_len, '\0');
  if (!in.read(config_text.data(), config_len))
    throw DataError("checkpoint " + path + ": truncated config");
  nlohmann::json j = nlohmann::json::parse(config_text, nullptr, false);
  if (j.is_discarded())
    throw DataError("checkpoint " + path + ": config is not valid JSON");
  ModelConfig config = config_from_json(j, path);

  Model model = make_model_skeleton(config);
  uint32_t count = read_u32(in, path);
  if (count != model.params.size())
    throw DataError("checkpoint " + path + ": tensor count mismatch");
  for (auto& [name, tensor] : model.params) {
    uint32_t name_len = read_u32(in, path);
    std::string stored(name_len, '\0');
    if (!in.read(stored.data(), name_len))
      throw DataError("checkpoint " + path + ": truncated tensor name");
    if (stored != name)
      throw DataError("checkpoint " + path + ": unexpected tensor '" + stored +
                      "' (wanted '" + name + "')");
    uint32_t rows = read_u32(in, path);
    uint32_t cols = read_u32(in, path);
    if (rows != static_cast<uint32_t>(tensor.rows) ||
        cols != static_cast<uint32_t>(tensor.cols))
      throw DataError("checkpoint " + path + ": shape mismatch for '" + name + "'");
    if (!in.read(reinterpret_cast<char*>(tensor.a.data()),
                 static_cast<std::streamsize>(tensor.a.size() * sizeof(double))))
      throw DataError("checkpoint " + path + ": truncated tensor data");
    if (!tensor.all_finite())
      throw DataError("checkpoint " + path + ": non-finite values in '" + name + "'");
  }
  return model;
}

}  // namespace krcap

#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kWork = fs::temp_directory_path() / "krcap_cli_suite";
const fs::path kData = kWork / "data";

int run_cli(const std::string& args, std::string* output = nullptr) {
  static int call = 0;
  fs::path log = kWork / ("cli_out_" + std::to_string(call++) + ".txt");
  std::string cmd =
      std::string(KREPLAY_BIN) + " " + args + " > " + log.string() + " 2>&1";
  int status = std::system(cmd.c_str());
  if (output) {
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    *output = ss.str();
  }
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return -1;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "missing file: " << p.string());
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

std::map<std::string, std::string> dir_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file()) {
      out[fs::relative(entry.path(), root).string()] = file_bytes(entry.path());
    }
  }
  return out;
}

void write_config(const fs::path& path, const fs::path& data_dir) {
  std::ofstream out(path);
  out << "# desk-size smoke configuration\n"
      << "seed = 7\n"
      << "data_dir = " << data_dir.string() << "\n"
      << "num_concepts = 4\n"
      << "num_unseen = 2\n"
      << "noise_sigma = 0.05\n"
      << "grid_h = 4\n"
      << "grid_w = 4\n"
      << "d_patch = 8\n"
      << "pretrain_size = 8\n"
      << "generic_train_size = 8\n"
      << "generic_val_size = 4\n"
      << "generic_test_size = 4\n"
      << "replay_size = 4\n"
      << "concept_val_size = 4\n"
      << "concept_test_size = 4\n"
      << "d_model = 16\n"
      << "n_heads = 2\n"
      << "n_enc_layers = 1\n"
      << "n_dec_layers = 1\n"
      << "d_ff = 32\n"
      << "max_len = 12\n"
      << "epochs = 1\n"
      << "batch_size = 4\n"
      << "beam_width = 2\n";
}

const std::string kConfig = (kWork / "config.txt").string();

struct SuiteSetup {
  SuiteSetup() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    write_config(kConfig, kData);
  }
};
SuiteSetup setup_once;

}  // namespace

TEST_CASE("argument and configuration errors exit with code 2") {
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("definitely-not-a-command --config x --out y") == 2);
  CHECK(run_cli("pretrain --out " + (kWork / "x").string()) == 2);  // no --config
  CHECK(run_cli("pretrain --config " + (kWork / "missing.txt").string() + " --out " +
                (kWork / "x").string()) == 2);

  std::string out;
  CHECK(run_cli("pretrain --config " + kConfig + " --override bogus_key=1 --out " +
                    (kWork / "x").string(),
                &out) == 2);
  CHECK(out.find("unknown config key") != std::string::npos);
  CHECK(run_cli("pretrain --config " + kConfig + " --override epochs=abc --out " +
                (kWork / "x").string()) == 2);
  CHECK(run_cli("gen-data --config " + kConfig +
                " --override num_unseen=9 --out " + (kWork / "x").string()) == 2);
}

TEST_CASE("gen-data is byte-identical across reruns and logs its run") {
  fs::path alt = kWork / "data_again";
  std::string out;
  CHECK(run_cli("gen-data --config " + kConfig + " --out " + kData.string(), &out) ==
        0);
  CHECK(out.find("pretrain") != std::string::npos);
  CHECK(run_cli("gen-data --config " + kConfig + " --out " + alt.string()) == 0);

  auto a = dir_contents(kData);
  auto b = dir_contents(alt);
  REQUIRE(a.size() == b.size());
  for (const auto& [rel, bytes] : a) {
    INFO("file " << rel);
    REQUIRE(b.count(rel) == 1);
    CHECK(bytes == b[rel]);
  }

  json run = json::parse(file_bytes(kData / "run.json"));
  CHECK(run["command"] == "gen-data");
  CHECK(run["tool"] == "kreplay");
  CHECK(run["config"]["seed"] == 7);
  CHECK(run["config_hash"].is_string());
  fs::remove_all(alt);
}

TEST_CASE("missing inputs exit with code 4, malformed data with code 3") {
  CHECK(run_cli("pretrain --config " + kConfig + " --override data_dir=" +
                (kWork / "nowhere").string() + " --out " + (kWork / "x").string()) ==
        4);
  CHECK(run_cli("eval --config " + kConfig + " --out " + (kWork / "x").string()) ==
        4);  // no checkpoint configured

  // Corrupt a copy of the dataset to hit the data-validation path.
  fs::path broken = kWork / "data_broken";
  fs::copy(kData, broken, fs::copy_options::recursive);
  std::ofstream(broken / "pretrain.captions.json") << "{broken";
  CHECK(run_cli("pretrain --config " + kConfig + " --override data_dir=" +
                broken.string() + " --out " + (kWork / "x").string()) == 3);
  fs::remove_all(broken);
}

TEST_CASE("pretrain runs deterministically and records checkpoints") {
  fs::path run1 = kWork / "pre1";
  fs::path run2 = kWork / "pre2";
  std::string out;
  REQUIRE(run_cli("pretrain --config " + kConfig + " --out " + run1.string(), &out) ==
          0);
  CHECK(out.find("epoch 1/1") != std::string::npos);
  REQUIRE(run_cli("pretrain --config " + kConfig + " --out " + run2.string()) == 0);

  for (const char* rel : {"loss.csv", "best.krck", "checkpoints.json",
                          "checkpoints/epoch_0001.krck", "run.json"}) {
    INFO("artifact " << rel);
    CHECK(file_bytes(run1 / rel) == file_bytes(run2 / rel));
  }

  json ckpts = json::parse(file_bytes(run1 / "checkpoints.json"));
  CHECK(ckpts["selection"] == "concept_rec");
  REQUIRE(ckpts["checkpoints"].is_array());
  CHECK(ckpts["checkpoints"].size() == 1);
  CHECK(ckpts["best"] == "checkpoints/epoch_0001.krck");
  std::string loss_csv = file_bytes(run1 / "loss.csv");
  CHECK(loss_csv.rfind("step,l_ce,l_cov,l_rep,l_kpred,l_distill,l_total,lr\n", 0) ==
        0);
}

TEST_CASE("pretrain refuses an init checkpoint; finetune requires one") {
  fs::path pre = kWork / "pre1";
  CHECK(run_cli("pretrain --config " + kConfig + " --override init_checkpoint=" +
                (pre / "best.krck").string() + " --out " + (kWork / "x").string()) ==
        2);
  CHECK(run_cli("finetune --config " + kConfig + " --out " +
                (kWork / "x").string()) == 4);
  CHECK(run_cli("kreplay-train --config " + kConfig + " --override init_checkpoint=" +
                (pre / "best.krck").string() + " --out " + (kWork / "x").string()) ==
        4);  // teacher missing
}

TEST_CASE("finetune matches kreplay-train with no replay data and zero lambdas") {
  fs::path pre_best = kWork / "pre1" / "best.krck";
  fs::path ft = kWork / "ft";
  REQUIRE(run_cli("finetune --config " + kConfig + " --override init_checkpoint=" +
                  pre_best.string() + " --out " + ft.string()) == 0);

  // Same starting point, replay split stripped from a copied manifest.
  fs::path data2 = kWork / "data_noreplay";
  fs::remove_all(data2);
  fs::copy(kData, data2, fs::copy_options::recursive);
  json manifest = json::parse(file_bytes(data2 / "manifest.json"));
  manifest["splits"].erase("replay");
  std::ofstream(data2 / "manifest.json") << manifest.dump(2) << '\n';

  fs::path kr = kWork / "kr_equiv";
  REQUIRE(run_cli("kreplay-train --config " + kConfig +
                  " --override data_dir=" + data2.string() +
                  " --override init_checkpoint=" + pre_best.string() +
                  " --override teacher_checkpoint=" + pre_best.string() +
                  " --override lambda_k=0 --override lambda_d=0 --out " +
                  kr.string()) == 0);

  CHECK(file_bytes(ft / "loss.csv") == file_bytes(kr / "loss.csv"));
  CHECK(file_bytes(ft / "checkpoints/epoch_0001.krck") ==
        file_bytes(kr / "checkpoints/epoch_0001.krck"));
  fs::remove_all(data2);
}

TEST_CASE("kreplay-train consumes replay batches and logs replay losses") {
  fs::path pre_best = kWork / "pre1" / "best.krck";
  fs::path kr = kWork / "kr";
  REQUIRE(run_cli("kreplay-train --config " + kConfig +
                  " --override init_checkpoint=" + pre_best.string() +
                  " --override teacher_checkpoint=" + pre_best.string() + " --out " +
                  kr.string()) == 0);
  // Some step must carry a non-zero keyword-prediction loss.
  std::istringstream loss(file_bytes(kr / "loss.csv"));
  std::string line;
  std::getline(loss, line);  // header
  bool replay_seen = false;
  while (std::getline(loss, line)) {
    std::istringstream row(line);
    std::string field;
    for (int i = 0; i <= 4 && std::getline(row, field, ','); ++i) {
    }
    if (!field.empty() && field != "0") replay_seen = true;
  }
  CHECK(replay_seen);
}

TEST_CASE("eval writes the split report; decode emits scored JSON lines") {
  fs::path pre_best = kWork / "pre1" / "best.krck";
  fs::path ev = kWork / "eval";
  REQUIRE(run_cli("eval --config " + kConfig + " --override checkpoint=" +
                  pre_best.string() + " --out " + ev.string()) == 0);
  json report = json::parse(file_bytes(ev / "report.json"));
  for (const char* split : {"generic", "seen", "unseen"}) {
    REQUIRE(report.count(split) == 1);
    for (const char* key :
         {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "rec", "count"}) {
      INFO(split << "." << key);
      CHECK(report[split].count(key) == 1);
    }
  }
  CHECK(report["seen"]["count"] == 2);
  CHECK(report["unseen"]["count"] == 2);
  std::string csv = file_bytes(ev / "report.csv");
  CHECK(csv.rfind("split,bleu1,bleu2,bleu3,bleu4,rouge_l,cider,rec,count\n", 0) == 0);

  // Rerunning evaluation reproduces the report bytes exactly.
  fs::path ev2 = kWork / "eval2";
  REQUIRE(run_cli("eval --config " + kConfig + " --override checkpoint=" +
                  pre_best.string() + " --out " + ev2.string()) == 0);
  CHECK(file_bytes(ev / "report.json") == file_bytes(ev2 / "report.json"));
  CHECK(file_bytes(ev / "report.csv") == file_bytes(ev2 / "report.csv"));

  fs::path dec = kWork / "dec";
  std::string out;
  REQUIRE(run_cli("decode --config " + kConfig + " --override checkpoint=" +
                      pre_best.string() +
                      " --override image_ids=0,1 --override decode_b=2 --out " +
                      dec.string(),
                  &out) == 0);
  std::istringstream lines(file_bytes(dec / "decodes.jsonl"));
  std::string line;
  int n_lines = 0;
  while (std::getline(lines, line)) {
    json rec = json::parse(line);
    CHECK(rec["b"] == 2);
    CHECK(rec["method"] == "beam");
    CHECK(rec["image_id"] == n_lines);
    CHECK(rec["caption"].is_string());
    CHECK(rec["logprob"].is_number());
    ++n_lines;
  }
  CHECK(n_lines == 2);
  CHECK(out.find("\"image_id\"") != std::string::npos);  // echoed to stdout

  CHECK(run_cli("decode --config " + kConfig + " --override checkpoint=" +
                pre_best.string() + " --override image_ids=999 --out " +
                (kWork / "dec_bad").string()) == 4);
}

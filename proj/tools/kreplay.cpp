// kreplay: command-line front end for the knowledge-replay captioning lab.
//
// Subcommands: gen-data, pretrain, finetune, kreplay-train, eval, decode.
// Every subcommand takes --config <file>, repeatable --override key=value,
// and --out <dir>; each writes a run.json echo of the fully resolved
// configuration so results stay attributable to their exact inputs.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 missing artifact,
// 5 divergence, 70 internal error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "krcap/config.hpp"
#include "krcap/corpus.hpp"
#include "krcap/errors.hpp"
#include "krcap/pipeline.hpp"
#include "krcap/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config", args.config_path, "flat key = value config file")
      ->required();
  sub->add_option("--override", args.overrides, "override one key, as key=value")
      ->take_all();
  sub->add_option("--out", args.out_dir, "output directory")->required();
}

krcap::RunConfig resolve(const CommonArgs& args) {
  krcap::RunConfig config = krcap::parse_config_file(args.config_path);
  for (const std::string& o : args.overrides) {
    krcap::apply_override(config, o);
  }
  krcap::finalize_config(config);
  return config;
}

void write_run_json(const std::string& command, const krcap::RunConfig& config,
                    const std::string& out_dir) {
  json j;
  j["command"] = command;
  j["config"] = krcap::config_json(config);
  j["config_hash"] = krcap::config_hash(config);
  j["tool"] = "kreplay";
  j["version"] = "0.1.0";
  std::ofstream f(fs::path(out_dir) / "run.json");
  if (!f) {
    throw krcap::DataError("cannot write run.json under " + out_dir);
  }
  f << j.dump(2) << '\n';
}

krcap::DatasetManifest manifest_of(const krcap::RunConfig& config) {
  if (config.data_dir.empty()) {
    throw krcap::ConfigError("config key data_dir must be set");
  }
  return krcap::load_manifest((fs::path(config.data_dir) / "manifest.json").string());
}

void cmd_gen_data(const krcap::RunConfig& config, const std::string& out_dir) {
  auto bank = krcap::generate_concept_bank(config.corpus.num_concepts,
                                           config.corpus.num_unseen,
                                           config.corpus.d_patch,
                                           krcap::derive_seed(config.seed, "bank"));
  krcap::DatasetManifest manifest = krcap::generate_corpora(
      bank, config.corpus, krcap::derive_seed(config.seed, "data"), out_dir);
  std::cout << "dataset written to " << out_dir << "\n";
  for (const auto& [name, info] : manifest.splits) {
    std::cout << "  " << name << ": " << info.count << " images\n";
  }
}

void cmd_train(krcap::Phase phase, const krcap::RunConfig& config,
               const std::string& out_dir) {
  krcap::DatasetManifest manifest = manifest_of(config);
  krcap::PhaseOutcome outcome = krcap::run_training_phase(
      phase, manifest, krcap::model_config(config), config.train,
      config.init_checkpoint, config.teacher_checkpoint, out_dir);
  std::cout << "best checkpoint: " << outcome.best_checkpoint
            << " (concept_val_rec=" << outcome.best_concept_rec
            << ", generic_val_cider=" << outcome.best_generic_cider << ")\n";
}

void cmd_eval(const krcap::RunConfig& config, const std::string& out_dir) {
  if (config.checkpoint.empty()) {
    throw krcap::MissingArtifactError("config key checkpoint must be set for eval");
  }
  krcap::Model model = krcap::load_checkpoint(config.checkpoint);
  krcap::DatasetManifest manifest = manifest_of(config);
  auto report = krcap::run_eval(model, manifest, config.train, out_dir);
  for (const auto& [name, m] : report) {
    std::cout << name << ": bleu4=" << m.bleu4 << " rouge_l=" << m.rouge_l
              << " cider=" << m.cider << " rec=" << m.rec << " count=" << m.count
              << "\n";
  }
}

void cmd_decode(const krcap::RunConfig& config, const std::string& out_dir) {
  if (config.checkpoint.empty()) {
    throw krcap::MissingArtifactError("config key checkpoint must be set for decode");
  }
  krcap::Model model = krcap::load_checkpoint(config.checkpoint);
  krcap::DatasetManifest manifest = manifest_of(config);
  krcap::run_decode(model, manifest, config.decode_split, config.image_ids,
                    config.decode_method == "greedy", config.decode_b,
                    config.train.beam_alpha,
                    (fs::path(out_dir) / "decodes.jsonl").string(), std::cout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowledge-replay captioning laboratory"};
  app.require_subcommand(1);

  CommonArgs args;
  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  CLI::App* pre = app.add_subcommand("pretrain", "train a fresh captioner on the concept corpus");
  CLI::App* fin = app.add_subcommand("finetune", "continue a checkpoint on the generic corpus");
  CLI::App* krt = app.add_subcommand("kreplay-train",
                                     "finetune with knowledge-replay mixed batches");
  CLI::App* evl = app.add_subcommand("eval", "score a checkpoint on the test splits");
  CLI::App* dec = app.add_subcommand("decode", "dump captions for selected images");
  for (CLI::App* sub : {gen, pre, fin, krt, evl, dec}) {
    add_common(sub, args);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      return app.exit(e);  // --help
    }
    app.exit(e);
    return 2;
  }

  try {
    krcap::RunConfig config = resolve(args);
    fs::create_directories(args.out_dir);

    std::string command;
    if (gen->parsed()) {
      command = "gen-data";
    } else if (pre->parsed()) {
      command = "pretrain";
    } else if (fin->parsed()) {
      command = "finetune";
    } else if (krt->parsed()) {
      command = "kreplay-train";
    } else if (evl->parsed()) {
      command = "eval";
    } else {
      command = "decode";
    }
    write_run_json(command, config, args.out_dir);

    if (gen->parsed()) {
      cmd_gen_data(config, args.out_dir);
    } else if (pre->parsed()) {
      cmd_train(krcap::Phase::Pretrain, config, args.out_dir);
    } else if (fin->parsed()) {
      cmd_train(krcap::Phase::Finetune, config, args.out_dir);
    } else if (krt->parsed()) {
      cmd_train(krcap::Phase::KReplayTrain, config, args.out_dir);
    } else if (evl->parsed()) {
      cmd_eval(config, args.out_dir);
    } else {
      cmd_decode(config, args.out_dir);
    }
    return 0;
  } catch (const krcap::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const krcap::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 5;
  } catch (const krcap::MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return 4;
  } catch (const krcap::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 70;
  }
}

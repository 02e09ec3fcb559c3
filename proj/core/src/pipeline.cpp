#include "krcap/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "krcap/errors.hpp"
#include "krcap/text.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace krcap {

namespace {

std::string fmt17(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return std::string(buf);
}

bool same_config(const ModelConfig& a, const ModelConfig& b) {
  return a.d_model == b.d_model && a.n_heads == b.n_heads &&
         a.n_enc_layers == b.n_enc_layers && a.n_dec_layers == b.n_dec_layers &&
         a.d_ff == b.d_ff && a.vocab_size == b.vocab_size && a.grid_h == b.grid_h &&
         a.grid_w == b.grid_w && a.d_patch == b.d_patch && a.max_len == b.max_len &&
         a.use_patch_self_attention == b.use_patch_self_attention &&
         a.n_psa_layers == b.n_psa_layers;
}

json metrics_json(const SplitMetrics& m) {
  json j;
  j["bleu1"] = m.bleu1;
  j["bleu2"] = m.bleu2;
  j["bleu3"] = m.bleu3;
  j["bleu4"] = m.bleu4;
  j["rouge_l"] = m.rouge_l;
  j["cider"] = m.cider;
  j["rec"] = m.rec;
  j["count"] = m.count;
  return j;
}

void write_report(const std::map<std::string, SplitMetrics>& report,
                  const std::string& out_dir) {
  json j;
  for (const auto& [name, m] : report) {
    j[name] = metrics_json(m);
  }
  std::ofstream jf(fs::path(out_dir) / "report.json");
  if (!jf) {
    throw DataError("cannot write report.json under " + out_dir);
  }
  jf << j.dump(2) << '\n';

  std::ofstream cf(fs::path(out_dir) / "report.csv");
  cf << "split,bleu1,bleu2,bleu3,bleu4,rouge_l,cider,rec,count\n";
  for (const char* name : {"generic", "seen", "unseen"}) {
    auto it = report.find(name);
    if (it == report.end()) {
      continue;
    }
    const SplitMetrics& m = it->second;
    cf << name << ',' << fmt17(m.bleu1) << ',' << fmt17(m.bleu2) << ','
       << fmt17(m.bleu3) << ',' << fmt17(m.bleu4) << ',' << fmt17(m.rouge_l) << ','
       << fmt17(m.cider) << ',' << fmt17(m.rec) << ',' << m.count << '\n';
  }
}

}  // namespace

LoadedSplit load_split(const DatasetManifest& manifest, const std::string& name) {
  const SplitInfo& info = manifest.split(name);
  LoadedSplit s;
  s.name = name;
  s.patches = load_patches(manifest.path(info.patches), s.grid_h, s.grid_w, s.d_patch);
  if (static_cast<int>(s.patches.size()) != info.count) {
    throw DataError("split " + name + ": patch count does not match the manifest");
  }
  if (!info.captions.empty()) {
    CaptionData data = load_captions(manifest.path(info.captions));
    s.captions.resize(s.patches.size());
    for (const CaptionAnnotation& ann : data.annotations) {
      if (ann.image_id < 0 || ann.image_id >= static_cast<int>(s.patches.size())) {
        throw DataError("split " + name + ": annotation references image " +
                        std::to_string(ann.image_id) + " outside the split");
      }
      s.captions[ann.image_id].push_back(ann.caption);
    }
  }
  if (!info.keywords.empty()) {
    s.pairs = load_replay_pairs(manifest.path(info.keywords));
    for (const ReplayPair& p : s.pairs) {
      if (p.image_id < 0 || p.image_id >= static_cast<int>(s.patches.size())) {
        throw DataError("split " + name + ": keyword references image " +
                        std::to_string(p.image_id) + " outside the split");
      }
    }
  }
  return s;
}

std::vector<TokenSequence> encode_targets(const LoadedSplit& split,
                                          const Vocabulary& vocab) {
  std::vector<TokenSequence> targets;
  targets.reserve(split.patches.size());
  for (size_t i = 0; i < split.patches.size(); ++i) {
    if (i >= split.captions.size() || split.captions[i].empty()) {
      throw DataError("split " + split.name + ": image " + std::to_string(i) +
                      " has no caption");
    }
    targets.push_back(encode(split.captions[i][0], vocab));
  }
  return targets;
}

ReferenceSet references_of(const LoadedSplit& split) {
  ReferenceSet refs;
  for (size_t i = 0; i < split.captions.size(); ++i) {
    if (!split.captions[i].empty()) {
      refs.refs[static_cast<int>(i)] = split.captions[i];
    }
  }
  return refs;
}

KeywordList keywords_of(const LoadedSplit& split) {
  KeywordList kw;
  for (const ReplayPair& p : split.pairs) {
    kw.keywords[p.image_id].push_back(p.keyword);
  }
  return kw;
}

std::vector<CandidateCaption> decode_split(const Model& model, const LoadedSplit& split,
                                           const Vocabulary& vocab,
                                           const BeamConfig& beam, bool greedy,
                                           std::vector<Hypothesis>* hyps) {
  std::vector<CandidateCaption> out;
  out.reserve(split.patches.size());
  for (size_t i = 0; i < split.patches.size(); ++i) {
    ModelScorer scorer(model, split.patches[i]);
    Hypothesis h;
    if (greedy) {
      h = greedy_decode(scorer, model.config.max_len);
    } else {
      h = beam_decode(scorer, beam).best;
    }
    out.push_back({static_cast<int>(i), decode_tokens(h.tokens, vocab)});
    if (hyps != nullptr) {
      hyps->push_back(std::move(h));
    }
  }
  return out;
}

PhaseOutcome run_training_phase(Phase phase, const DatasetManifest& manifest,
                                const ModelConfig& model_config,
                                const TrainConfig& train_config,
                                const std::string& init_checkpoint,
                                const std::string& teacher_checkpoint,
                                const std::string& out_dir) {
  const char* phase_name = phase == Phase::Pretrain    ? "pretrain"
                           : phase == Phase::Finetune  ? "finetune"
                                                       : "kreplay-train";
  fs::create_directories(fs::path(out_dir) / "checkpoints");

  Vocabulary vocab = load_vocab(manifest.path(manifest.vocab));
  ModelConfig mc = model_config;
  mc.grid_h = manifest.config.grid_h;
  mc.grid_w = manifest.config.grid_w;
  mc.d_patch = manifest.config.d_patch;
  mc.vocab_size = static_cast<int>(vocab.size());
  validate_config(mc);

  Model student;
  if (phase == Phase::Pretrain) {
    if (!init_checkpoint.empty()) {
      throw ConfigError("pretraining starts from a fresh model; init_checkpoint is not accepted");
    }
    student = init_model(mc, derive_seed(train_config.seed, "init"));
  } else {
    if (init_checkpoint.empty()) {
      throw MissingArtifactError(std::string(phase_name) +
                                 " requires init_checkpoint to be set");
    }
    student = load_checkpoint(init_checkpoint);
    if (!same_config(student.config, mc)) {
      throw ConfigError("checkpoint configuration does not match the run configuration: " +
                        init_checkpoint);
    }
  }

  Model teacher;
  const Model* teacher_ptr = nullptr;
  if (phase == Phase::KReplayTrain) {
    if (teacher_checkpoint.empty()) {
      throw MissingArtifactError("kreplay-train requires teacher_checkpoint to be set");
    }
    teacher = clone_frozen(load_checkpoint(teacher_checkpoint));
    if (!same_config(teacher.config, mc)) {
      throw ConfigError("teacher configuration does not match the run configuration: " +
                        teacher_checkpoint);
    }
    teacher_ptr = &teacher;
  }

  const std::string cap_name = phase == Phase::Pretrain ? "pretrain" : "generic_train";
  LoadedSplit cap_split = load_split(manifest, cap_name);
  std::vector<TokenSequence> targets = encode_targets(cap_split, vocab);

  LoadedSplit replay_split;
  std::vector<Keyword> replay_keywords;
  bool use_replay = false;
  if (phase == Phase::KReplayTrain && manifest.splits.count("replay") > 0) {
    replay_split = load_split(manifest, "replay");
    replay_keywords.reserve(replay_split.pairs.size());
    for (const ReplayPair& p : replay_split.pairs) {
      replay_keywords.push_back(tokenize_keyword(p.keyword, vocab));
    }
    use_replay = !replay_split.pairs.empty();
  }

  LoadedSplit concept_val = load_split(manifest, "concept_val");
  LoadedSplit generic_val = load_split(manifest, "generic_val");
  KeywordList val_keywords = keywords_of(concept_val);
  ReferenceSet val_refs = references_of(generic_val);

  const int n_caption = static_cast<int>(cap_split.patches.size());
  const int n_replay = use_replay ? static_cast<int>(replay_split.pairs.size()) : 0;
  if (train_config.epochs < 1 || train_config.batch_size < 1) {
    throw ConfigError("epochs and batch_size must be positive");
  }
  const long long batches_per_epoch =
      (n_caption + n_replay + train_config.batch_size - 1) / train_config.batch_size;

  SchedulerState sched;
  sched.lr_max = train_config.lr_max;
  sched.lr_min = train_config.lr_min;
  sched.t_max = static_cast<long long>(train_config.epochs) * batches_per_epoch;
  sched.t = 0;
  sched.cosine = train_config.cosine_schedule;

  OptimizerState opt = make_optimizer_state(student);
  PseudoCaptionCache cache;

  std::ofstream csv(fs::path(out_dir) / "loss.csv");
  if (!csv) {
    throw DataError("cannot write loss.csv under " + out_dir);
  }
  csv << "step,l_ce,l_cov,l_rep,l_kpred,l_distill,l_total,lr\n";

  BeamConfig val_beam;
  val_beam.width = train_config.beam_width;
  val_beam.max_len = mc.max_len;
  val_beam.alpha = train_config.beam_alpha;

  std::vector<CheckpointMeta> metas;
  std::vector<std::string> meta_rel_paths;
  long long step = 0;
  for (int epoch = 0; epoch < train_config.epochs; ++epoch) {
    Rng shuffle_rng(
        derive_seed(train_config.seed, "train.shuffle", static_cast<uint64_t>(epoch)));
    auto batches = mix_batches(n_caption, n_replay, train_config.batch_size, shuffle_rng);
    double epoch_loss = 0.0;
    for (const auto& batch : batches) {
      std::vector<CaptionBatchItem> cb;
      std::vector<ReplayBatchItem> rb;
      for (const BatchItem& item : batch) {
        if (item.is_replay) {
          const ReplayPair& p = replay_split.pairs[item.index];
          rb.push_back(
              {&replay_split.patches[p.image_id], &replay_keywords[item.index], p.image_id});
        } else {
          cb.push_back({&cap_split.patches[item.index], &targets[item.index]});
        }
      }
      const double lr = current_lr(sched);
      LossBundle b = train_step(cb, rb, student, teacher_ptr, train_config, opt, sched,
                                &cache);
      csv << step << ',' << fmt17(b.l_ce) << ',' << fmt17(b.l_cov) << ','
          << fmt17(b.l_rep) << ',' << fmt17(b.l_kpred) << ',' << fmt17(b.l_distill)
          << ',' << fmt17(b.l_total) << ',' << fmt17(lr) << '\n';
      epoch_loss += b.l_total;
      ++step;
      if (train_config.checkpoint_every > 0 &&
          step % train_config.checkpoint_every == 0) {
        char name[64];
        std::snprintf(name, sizeof(name), "step_%08lld.krck", step);
        save_checkpoint(student, (fs::path(out_dir) / "checkpoints" / name).string());
      }
    }

    auto cv_candidates = decode_split(student, concept_val, vocab, val_beam, false);
    const double rec = recognition_accuracy(cv_candidates, val_keywords);
    auto gv_candidates = decode_split(student, generic_val, vocab, val_beam, false);
    const double cid = cider(gv_candidates, val_refs);

    char name[64];
    std::snprintf(name, sizeof(name), "epoch_%04d.krck", epoch + 1);
    const std::string rel = std::string("checkpoints/") + name;
    const std::string abs = (fs::path(out_dir) / "checkpoints" / name).string();
    save_checkpoint(student, abs);
    metas.push_back({step, epoch + 1, rec, cid, abs});
    meta_rel_paths.push_back(rel);

    std::cout << phase_name << " epoch " << (epoch + 1) << "/" << train_config.epochs
              << " mean_loss=" << (epoch_loss / static_cast<double>(batches.size()))
              << " concept_val_rec=" << rec << " generic_val_cider=" << cid << "\n";
  }

  const SelectionCriterion criterion = phase == Phase::Finetune
                                           ? SelectionCriterion::GenericCider
                                           : SelectionCriterion::ConceptRecognition;
  const CheckpointMeta& best = select_best_checkpoint(metas, criterion);
  const std::string best_path = (fs::path(out_dir) / "best.krck").string();
  fs::copy_file(best.path, best_path, fs::copy_options::overwrite_existing);

  json cj;
  cj["selection"] =
      criterion == SelectionCriterion::GenericCider ? "generic_cider" : "concept_rec";
  cj["checkpoints"] = json::array();
  for (size_t i = 0; i < metas.size(); ++i) {
    json m;
    m["step"] = metas[i].step;
    m["epoch"] = metas[i].epoch;
    m["concept_rec"] = metas[i].concept_rec;
    m["generic_cider"] = metas[i].generic_cider;
    m["path"] = meta_rel_paths[i];
    cj["checkpoints"].push_back(m);
  }
  for (size_t i = 0; i < metas.size(); ++i) {
    if (metas[i].step == best.step && metas[i].epoch == best.epoch) {
      cj["best"] = meta_rel_paths[i];
      break;
    }
  }
  std::ofstream cjf(fs::path(out_dir) / "checkpoints.json");
  cjf << cj.dump(2) << '\n';

  PhaseOutcome outcome;
  outcome.best_checkpoint = best_path;
  outcome.metas = metas;
  outcome.best_concept_rec = best.concept_rec;
  outcome.best_generic_cider = best.generic_cider;
  return outcome;
}

std::map<std::string, SplitMetrics> run_eval(const Model& model,
                                             const DatasetManifest& manifest,
                                             const TrainConfig& train_config,
                                             const std::string& out_dir) {
  fs::create_directories(out_dir);
  Vocabulary vocab = load_vocab(manifest.path(manifest.vocab));

  BeamConfig bc;
  bc.width = train_config.beam_width;
  bc.max_len = model.config.max_len;
  bc.alpha = train_config.beam_alpha;

  std::map<std::string, SplitMetrics> report;

  LoadedSplit generic_test = load_split(manifest, "generic_test");
  auto g_candidates = decode_split(model, generic_test, vocab, bc, false);
  report["generic"] =
      compute_split_metrics(g_candidates, references_of(generic_test), nullptr);

  LoadedSplit concept_test = load_split(manifest, "concept_test");
  std::vector<ConceptSpec> concepts;
  std::vector<ConceptSpec> objects;
  load_concept_bank(manifest.path(manifest.concept_bank), concepts, objects);
  std::map<std::string, bool> eligible;
  for (const ConceptSpec& c : concepts) {
    eligible[c.name] = c.replay_eligible;
  }

  std::map<int, std::string> image_keyword;
  for (const ReplayPair& p : concept_test.pairs) {
    image_keyword[p.image_id] = p.keyword;
  }

  auto c_candidates = decode_split(model, concept_test, vocab, bc, false);
  std::vector<CandidateCaption> seen_c;
  std::vector<CandidateCaption> unseen_c;
  ReferenceSet seen_r;
  ReferenceSet unseen_r;
  KeywordList seen_k;
  KeywordList unseen_k;
  for (const CandidateCaption& cand : c_candidates) {
    auto kw_it = image_keyword.find(cand.image_id);
    if (kw_it == image_keyword.end()) {
      throw DataError("concept_test image " + std::to_string(cand.image_id) +
                      " has no keyword annotation");
    }
    auto el_it = eligible.find(kw_it->second);
    if (el_it == eligible.end()) {
      throw DataError("unknown concept keyword: " + kw_it->second);
    }
    const bool is_seen = el_it->second;
    auto& cands = is_seen ? seen_c : unseen_c;
    auto& refs = is_seen ? seen_r : unseen_r;
    auto& kws = is_seen ? seen_k : unseen_k;
    cands.push_back(cand);
    refs.refs[cand.image_id] = concept_test.captions[cand.image_id];
    kws.keywords[cand.image_id].push_back(kw_it->second);
  }
  report["seen"] = compute_split_metrics(seen_c, seen_r, &seen_k);
  report["unseen"] = compute_split_metrics(unseen_c, unseen_r, &unseen_k);

  write_report(report, out_dir);
  return report;
}

void run_decode(const Model& model, const DatasetManifest& manifest,
                const std::string& split_name, const std::vector<int>& image_ids,
                bool greedy, int width, double alpha, const std::string& out_path,
                std::ostream& echo) {
  Vocabulary vocab = load_vocab(manifest.path(manifest.vocab));
  LoadedSplit split = load_split(manifest, split_name);

  std::vector<int> ids = image_ids;
  if (ids.empty()) {
    ids.resize(split.patches.size());
    for (size_t i = 0; i < ids.size(); ++i) {
      ids[i] = static_cast<int>(i);
    }
  }
  for (int id : ids) {
    if (id < 0 || id >= static_cast<int>(split.patches.size())) {
      throw MissingArtifactError("image id " + std::to_string(id) +
                                 " is not in split " + split_name);
    }
  }

  BeamConfig bc;
  bc.width = width;
  bc.max_len = model.config.max_len;
  bc.alpha = alpha;

  std::ofstream out(out_path);
  if (!out) {
    throw DataError("cannot write decode output: " + out_path);
  }
  for (int id : ids) {
    ModelScorer scorer(model, split.patches[id]);
    Hypothesis h =
        greedy ? greedy_decode(scorer, model.config.max_len) : beam_decode(scorer, bc).best;
    json j;
    j["b"] = greedy ? 1 : width;
    j["caption"] = decode_tokens(h.tokens, vocab);
    j["image_id"] = id;
    j["logprob"] = h.logprob;
    j["method"] = greedy ? "greedy" : "beam";
    const std::string line = j.dump();
    out << line << '\n';
    echo << line << '\n';
  }
}

}  // namespace krcap

#include "ddnmt/diversify.hpp"

#include <filesystem>
#include <fstream>

#include "ddnmt/json_io.hpp"

namespace ddnmt {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(Direction d) { return d == Direction::kForward ? "fwd" : "bwd"; }

const char* to_string(DirectionMode m) {
  switch (m) {
    case DirectionMode::kBidirectional: return "bidirectional";
    case DirectionMode::kForwardOnly: return "forward_only";
    case DirectionMode::kBackwardOnly: return "backward_only";
  }
  return "?";
}

const char* to_string(SeedPolicy p) { return p == SeedPolicy::kRandom ? "random" : "fixed"; }

DirectionMode direction_mode_from_string(const std::string& s) {
  if (s == "bidirectional") return DirectionMode::kBidirectional;
  if (s == "forward_only") return DirectionMode::kForwardOnly;
  if (s == "backward_only") return DirectionMode::kBackwardOnly;
  throw std::invalid_argument("unknown direction mode '" + s + "'");
}

SeedPolicy seed_policy_from_string(const std::string& s) {
  if (s == "random") return SeedPolicy::kRandom;
  if (s == "fixed") return SeedPolicy::kFixed;
  throw std::invalid_argument("unknown seed policy '" + s + "'");
}

void DiversifyConfig::validate() const {
  if (k < 1) throw std::invalid_argument("diversify config: k must be >= 1");
  if (rounds < 1) throw std::invalid_argument("diversify config: rounds must be >= 1");
  teacher_train.validate();
  final_train.validate();
  generation_decode.validate();
}

std::uint64_t seed_for_teacher(std::uint64_t base_seed, int round, Direction direction, int index,
                               SeedPolicy policy) {
  if (policy == SeedPolicy::kFixed) return base_seed;
  std::uint64_t h = mix_seed(base_seed, 0x7eac4e5ull);
  h = mix_seed(h, static_cast<std::uint64_t>(round));
  h = mix_seed(h, direction == Direction::kForward ? 1u : 2u);
  h = mix_seed(h, static_cast<std::uint64_t>(index));
  return h;
}

std::uint64_t seed_for_final(std::uint64_t base_seed, SeedPolicy policy) {
  if (policy == SeedPolicy::kFixed) return base_seed;
  return mix_seed(base_seed, 0xf19a1ull);
}

// ---------------------------------------------------------------------------
// ModelStore

ModelStore::ModelStore(std::string directory) : dir_(std::move(directory)) {
  fs::create_directories(dir_);
}

std::uint64_t ModelStore::key_of(std::string_view purpose, std::uint64_t corpus_fingerprint,
                                 const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                 std::uint64_t seed) {
  Fnv1a h;
  h.update(purpose);
  h.update_value(corpus_fingerprint);
  h.update(json(model_cfg).dump());
  h.update(json(train_cfg).dump());
  h.update_value(seed);
  return h.digest();
}

std::optional<std::pair<ModelParametersPtr, TrainingTrace>> ModelStore::lookup(
    std::uint64_t key) const {
  {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = memory_.find(key);
    if (it != memory_.end()) return it->second;
  }
  fs::path ckpt = fs::path(dir_) / (hex64(key) + ".ckpt");
  fs::path trace_path = fs::path(dir_) / (hex64(key) + ".trace.json");
  if (!fs::exists(ckpt) || !fs::exists(trace_path)) return std::nullopt;
  auto params = std::make_shared<const ModelParameters>(load_checkpoint(ckpt.string()));
  std::ifstream in(trace_path);
  TrainingTrace trace = json::parse(in).get<TrainingTrace>();
  auto entry = std::make_pair(ModelParametersPtr(params), std::move(trace));
  std::lock_guard<std::mutex> lock(mutex_);
  memory_[key] = entry;
  return entry;
}

void ModelStore::store(std::uint64_t key, const ModelParametersPtr& params,
                       const TrainingTrace& trace) {
  save_checkpoint(*params, (fs::path(dir_) / (hex64(key) + ".ckpt")).string());
  std::ofstream out(fs::path(dir_) / (hex64(key) + ".trace.json"));
  out << json(trace).dump();
  std::lock_guard<std::mutex> lock(mutex_);
  memory_[key] = {params, trace};
}

ModelStore::Entry ModelStore::fetch_or_compute(std::uint64_t key,
                                               const std::function<Entry()>& compute) {
  std::shared_ptr<std::mutex> gate;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    auto& slot = in_flight_[key];
    if (!slot) slot = std::make_shared<std::mutex>();
    gate = slot;
  }
  std::lock_guard<std::mutex> key_lock(*gate);
  if (auto hit = lookup(key)) return *hit;
  Entry entry = compute();
  store(key, entry.first, entry.second);
  return entry;
}

// ---------------------------------------------------------------------------
// RealEngine

namespace {

ModelConfig effective_final_model(const DiversifyConfig& cfg) {
  return cfg.final_model == ModelConfig{} ? cfg.teacher_model : cfg.final_model;
}

ModelConfig with_vocab_sizes(ModelConfig cfg, const ParallelCorpus& corpus) {
  cfg.source_vocab_size = static_cast<int>(corpus.source_vocab()->size());
  cfg.target_vocab_size = static_cast<int>(corpus.target_vocab()->size());
  return cfg;
}

}  // namespace

std::function<std::vector<Sentence>(const std::vector<Sentence>&)> make_beam_translator(
    ModelParametersPtr params, DecodeConfig cfg, int threads) {
  return [params, cfg, threads](const std::vector<Sentence>& sources) {
    return translate_corpus(*params, sources, cfg, threads);
  };
}

RealEngine::RealEngine(ParallelCorpus validation, int decode_threads, ModelStore* store)
    : validation_(std::move(validation)),
      swapped_validation_(swap_direction(validation_)),
      decode_threads_(decode_threads),
      store_(store) {}

TeacherModel RealEngine::train_teacher(const ParallelCorpus& data, Direction direction, int round,
                                       int index, std::uint64_t seed, const DiversifyConfig& cfg) {
  ModelConfig model_cfg = with_vocab_sizes(cfg.teacher_model, data);
  TrainConfig train_cfg = cfg.teacher_train;
  train_cfg.seed = seed;

  const ParallelCorpus& validation =
      direction == Direction::kForward ? validation_ : swapped_validation_;
  auto compute = [&]() -> ModelStore::Entry {
    auto result = train(init_parameters(model_cfg, seed), data, train_cfg, validation);
    return {std::make_shared<const ModelParameters>(std::move(result.params)),
            std::move(result.trace)};
  };
  ModelParametersPtr params;
  if (store_) {
    std::uint64_t key = ModelStore::key_of("teacher", corpus_hash(data), model_cfg, train_cfg,
                                           seed);
    params = store_->fetch_or_compute(key, compute).first;
  } else {
    params = compute().first;
  }

  TeacherModel teacher;
  teacher.direction = direction;
  teacher.index = index;
  teacher.round = round;
  teacher.seed = seed;
  teacher.params = params;
  teacher.translate = make_beam_translator(params, cfg.generation_decode, decode_threads_);
  return teacher;
}

std::pair<ModelParametersPtr, TrainingTrace> RealEngine::train_final(const ParallelCorpus& data,
                                                                     std::uint64_t seed,
                                                                     const DiversifyConfig& cfg) {
  ModelConfig model_cfg = with_vocab_sizes(effective_final_model(cfg), data);
  TrainConfig train_cfg = cfg.final_train;
  train_cfg.seed = seed;

  auto compute = [&]() -> ModelStore::Entry {
    auto result = train(init_parameters(model_cfg, seed), data, train_cfg, validation_);
    return {std::make_shared<const ModelParameters>(std::move(result.params)),
            std::move(result.trace)};
  };
  if (store_) {
    std::uint64_t key = ModelStore::key_of("final", corpus_hash(data), model_cfg, train_cfg,
                                           seed);
    return store_->fetch_or_compute(key, compute);
  }
  return compute();
}

// ---------------------------------------------------------------------------
// Orchestration

namespace {

fs::path teacher_checkpoint_path(const std::string& run_dir, int round, Direction dir,
                                 int index) {
  return fs::path(run_dir) / "rounds" / ("r" + std::to_string(round)) /
         ("teacher_" + std::string(to_string(dir)) + "_" + std::to_string(index) + ".ckpt");
}

void verify_prefix_contains(const ParallelCorpus& prev, const ParallelCorpus& original) {
  if (prev.size() < original.size())
    throw std::invalid_argument("augment_round: prev_data does not contain the original corpus");
  for (std::size_t i = 0; i < original.size(); ++i)
    if (!(prev[i] == original[i]))
      throw std::invalid_argument(
          "augment_round: prev_data does not start with the original corpus");
}

}  // namespace

RoundArtifacts augment_round(const ParallelCorpus& prev_data, const ParallelCorpus& original,
                             int round, const DiversifyConfig& cfg, DiversifyEngine& engine,
                             const DiversifyOptions& options) {
  cfg.validate();
  verify_prefix_contains(prev_data, original);

  const bool want_forward = cfg.direction_mode != DirectionMode::kBackwardOnly;
  const bool want_backward = cfg.direction_mode != DirectionMode::kForwardOnly;

  struct Spec {
    Direction direction;
    int index;
    std::uint64_t seed;
  };
  std::vector<Spec> specs;
  for (int i = 0; want_forward && i < cfg.k; ++i)
    specs.push_back({Direction::kForward, i,
                     seed_for_teacher(cfg.base_seed, round, Direction::kForward, i,
                                      cfg.seed_policy)});
  for (int i = 0; want_backward && i < cfg.k; ++i)
    specs.push_back({Direction::kBackward, i,
                     seed_for_teacher(cfg.base_seed, round, Direction::kBackward, i,
                                      cfg.seed_policy)});

  std::optional<ParallelCorpus> swapped_prev;
  if (want_backward) swapped_prev = swap_direction(prev_data);

  std::vector<TeacherModel> teachers(specs.size());
  parallel_for(specs.size(), options.teacher_parallelism, [&](std::size_t i) {
    const Spec& spec = specs[i];
    std::string label = "teacher " + std::string(to_string(spec.direction)) + " #" +
                        std::to_string(spec.index) + " round " + std::to_string(round);
    fs::path ckpt;
    if (!options.run_dir.empty())
      ckpt = teacher_checkpoint_path(options.run_dir, round, spec.direction, spec.index);
    if (!ckpt.empty() && fs::exists(ckpt)) {
      auto params = std::make_shared<const ModelParameters>(load_checkpoint(ckpt.string()));
      TeacherModel teacher;
      teacher.direction = spec.direction;
      teacher.index = spec.index;
      teacher.round = round;
      teacher.seed = spec.seed;
      teacher.params = params;
      teacher.translate = make_beam_translator(params, cfg.generation_decode);
      teachers[i] = std::move(teacher);
      return;
    }
    try {
      teachers[i] = engine.train_teacher(
          spec.direction == Direction::kForward ? prev_data : *swapped_prev, spec.direction,
          round, spec.index, spec.seed, cfg);
    } catch (const TrainingDivergence& e) {
      throw TrainingDivergence(label + ": " + e.what(), e.trace);
    }
    if (!ckpt.empty() && teachers[i].params) {
      fs::create_directories(ckpt.parent_path());
      save_checkpoint(*teachers[i].params, ckpt.string());
    }
  });

  RoundArtifacts artifacts{round, {}, {}, prev_data, 0.0};
  for (auto& t : teachers) {
    if (t.direction == Direction::kForward)
      artifacts.forward_teachers.push_back(std::move(t));
    else
      artifacts.backward_teachers.push_back(std::move(t));
  }

  const auto original_sources = original.sources();
  const auto original_targets = original.targets();
  std::vector<ParallelCorpus> parts;
  parts.push_back(prev_data);
  for (const auto& teacher : artifacts.forward_teachers) {
    auto outputs = teacher.translate(original_sources);
    if (outputs.size() != original.size())
      throw std::logic_error("augment_round: forward teacher output count mismatch");
    std::vector<SentencePair> pairs;
    pairs.reserve(outputs.size());
    for (std::size_t j = 0; j < outputs.size(); ++j)
      pairs.push_back({original_sources[j], std::move(outputs[j]),
                       Provenance::forward_synthetic(teacher.index, round)});
    parts.emplace_back(std::move(pairs), original.source_vocab(), original.target_vocab());
  }
  for (const auto& teacher : artifacts.backward_teachers) {
    auto outputs = teacher.translate(original_targets);
    if (outputs.size() != original.size())
      throw std::logic_error("augment_round: backward teacher output count mismatch");
    std::vector<SentencePair> pairs;
    pairs.reserve(outputs.size());
    for (std::size_t j = 0; j < outputs.size(); ++j)
      pairs.push_back({std::move(outputs[j]), original_targets[j],
                       Provenance::backward_synthetic(teacher.index, round)});
    parts.emplace_back(std::move(pairs), original.source_vocab(), original.target_vocab());
  }

  ParallelCorpus unioned = union_corpora(parts);
  if (cfg.dedup_enabled) {
    auto result = dedup(unioned);
    artifacts.data = std::move(result.corpus);
    artifacts.duplicate_fraction = result.duplicate_fraction;
  } else {
    artifacts.data = std::move(unioned);
    artifacts.duplicate_fraction = 0.0;
  }
  return artifacts;
}

namespace {

json resolved_manifest(const ParallelCorpus& original, const DiversifyConfig& cfg) {
  json seeds = json::array();
  for (int r = 1; r <= cfg.rounds; ++r) {
    if (cfg.direction_mode != DirectionMode::kBackwardOnly)
      for (int i = 0; i < cfg.k; ++i)
        seeds.push_back({{"round", r},
                         {"direction", "fwd"},
                         {"index", i},
                         {"seed", seed_for_teacher(cfg.base_seed, r, Direction::kForward, i,
                                                   cfg.seed_policy)}});
    if (cfg.direction_mode != DirectionMode::kForwardOnly)
      for (int i = 0; i < cfg.k; ++i)
        seeds.push_back({{"round", r},
                         {"direction", "bwd"},
                         {"index", i},
                         {"seed", seed_for_teacher(cfg.base_seed, r, Direction::kBackward, i,
                                                   cfg.seed_policy)}});
  }
  json manifest;
  manifest["config"] = cfg;
  manifest["teacher_seeds"] = seeds;
  manifest["final_seed"] = seed_for_final(cfg.base_seed, cfg.seed_policy);
  manifest["original_corpus_hash"] = hex64(corpus_hash(original));
  return manifest;
}

}  // namespace

DiversifyResult data_diverse(const ParallelCorpus& original, const DiversifyConfig& cfg,
                             DiversifyEngine& engine, const DiversifyOptions& options) {
  cfg.validate();
  if (original.empty()) throw std::invalid_argument("data_diverse: empty original corpus");

  DiversifyOptions round_options = options;
  if (!options.run_dir.empty()) {
    fs::create_directories(options.run_dir);
    json manifest = resolved_manifest(original, cfg);
    fs::path manifest_path = fs::path(options.run_dir) / "manifest.json";
    bool resume = false;
    if (fs::exists(manifest_path)) {
      std::ifstream in(manifest_path);
      json existing = json::parse(in, nullptr, /*allow_exceptions=*/false);
      resume = !existing.is_discarded() && json_hash(existing) == json_hash(manifest);
    }
    if (!resume) {
      // stale or missing manifest: clear artifacts this run owns
      fs::remove_all(fs::path(options.run_dir) / "rounds");
      fs::remove(fs::path(options.run_dir) / "final.ckpt");
      fs::remove(fs::path(options.run_dir) / "report.json");
      std::ofstream out(manifest_path);
      out << manifest.dump(2) << '\n';
    }
  }

  DiversifyResult result;
  ParallelCorpus data = original;
  for (int r = 1; r <= cfg.rounds; ++r) {
    RoundArtifacts artifacts = augment_round(data, original, r, cfg, engine, round_options);
    data = artifacts.data;
    if (!options.run_dir.empty()) {
      fs::path dir = fs::path(options.run_dir) / "rounds" / ("r" + std::to_string(r));
      fs::create_directories(dir);
      fs::path corpus_path = dir / "data.corpus";
      if (!fs::exists(corpus_path)) save_corpus(artifacts.data, corpus_path.string());
    }
    result.rounds.push_back(std::move(artifacts));
  }

  result.final_seed = seed_for_final(cfg.base_seed, cfg.seed_policy);
  bool loaded_final = false;
  if (!options.run_dir.empty()) {
    fs::path final_path = fs::path(options.run_dir) / "final.ckpt";
    fs::path report_path = fs::path(options.run_dir) / "report.json";
    if (fs::exists(final_path) && fs::exists(report_path)) {
      result.final_model =
          std::make_shared<const ModelParameters>(load_checkpoint(final_path.string()));
      std::ifstream in(report_path);
      json report = json::parse(in);
      result.final_trace = report.at("final_trace").get<TrainingTrace>();
      loaded_final = true;
    }
  }
  if (!loaded_final) {
    auto [params, trace] = engine.train_final(data, result.final_seed, cfg);
    result.final_model = params;
    result.final_trace = std::move(trace);
    if (!options.run_dir.empty()) {
      if (result.final_model)
        save_checkpoint(*result.final_model,
                        (fs::path(options.run_dir) / "final.ckpt").string());
      json report;
      report["final_seed"] = result.final_seed;
      report["final_trace"] = result.final_trace;
      json rounds = json::array();
      for (const auto& r : result.rounds)
        rounds.push_back({{"round", r.round},
                          {"data_pairs", r.data.size()},
                          {"duplicate_fraction", r.duplicate_fraction},
                          {"forward_teachers", r.forward_teachers.size()},
                          {"backward_teachers", r.backward_teachers.size()}});
      report["rounds"] = rounds;
      std::ofstream out(fs::path(options.run_dir) / "report.json");
      out << report.dump(2) << '\n';
    }
  }
  return result;
}

ParallelCorpus backtranslate_monolingual(const std::vector<TeacherModel>& backward_teachers,
                                         const MonolingualCorpus& mono_target,
                                         VocabularyPtr source_vocab) {
  if (backward_teachers.empty())
    throw std::invalid_argument("backtranslate_monolingual: no teachers");
  for (const auto& t : backward_teachers)
    if (t.direction != Direction::kBackward)
      throw std::invalid_argument("backtranslate_monolingual: teacher is not a backward model");
  if (!mono_target.vocab)
    throw std::invalid_argument("backtranslate_monolingual: monolingual corpus without vocab");
  for (const auto& s : mono_target.sentences)
    if (s.empty())
      throw std::invalid_argument("backtranslate_monolingual: empty monolingual sentence");

  std::vector<ParallelCorpus> parts;
  parts.reserve(backward_teachers.size());
  for (const auto& teacher : backward_teachers) {
    auto sources = teacher.translate(mono_target.sentences);
    if (sources.size() != mono_target.sentences.size())
      throw std::logic_error("backtranslate_monolingual: output count mismatch");
    std::vector<SentencePair> pairs;
    pairs.reserve(sources.size());
    for (std::size_t j = 0; j < sources.size(); ++j)
      pairs.push_back({std::move(sources[j]), mono_target.sentences[j],
                       Provenance::backward_synthetic(teacher.index, teacher.round)});
    parts.emplace_back(std::move(pairs), source_vocab, mono_target.vocab);
  }
  return union_corpora(parts);
}

std::vector<ModelParametersPtr> run_ensemble_baseline(
    const ParallelCorpus& original, int member_count, const ModelConfig& model_cfg,
    const TrainConfig& train_cfg, const ParallelCorpus& validation, std::uint64_t base_seed,
    ModelStore* store, int parallelism) {
  if (member_count < 1)
    throw std::invalid_argument("run_ensemble_baseline: member_count must be >= 1");
  ModelConfig cfg = with_vocab_sizes(model_cfg, original);
  std::vector<ModelParametersPtr> members(static_cast<std::size_t>(member_count));
  parallel_for(members.size(), parallelism, [&](std::size_t i) {
    std::uint64_t seed = mix_seed(mix_seed(base_seed, 0xe75eull), i);
    TrainConfig tc = train_cfg;
    tc.seed = seed;
    auto compute = [&]() -> ModelStore::Entry {
      auto result = train(init_parameters(cfg, seed), original, tc, validation);
      return {std::make_shared<const ModelParameters>(std::move(result.params)),
              std::move(result.trace)};
    };
    if (store) {
      std::uint64_t key = ModelStore::key_of("ensemble", corpus_hash(original), cfg, tc, seed);
      members[i] = store->fetch_or_compute(key, compute).first;
    } else {
      members[i] = compute().first;
    }
  });
  return members;
}

}  // namespace ddnmt

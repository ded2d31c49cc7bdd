// diversify.hpp -- the data diversification orchestrator: per-round teacher
// training, synthetic corpus generation, union/dedup, final-model training,
// plus the monolingual back-translation extension and the ensemble baseline.
#pragma once

#include <functional>
#include <mutex>
#include <optional>
#include <string>

#include "ddnmt/corpus.hpp"
#include "ddnmt/decode.hpp"
#include "ddnmt/model.hpp"

namespace ddnmt {

enum class Direction { kForward, kBackward };
enum class DirectionMode { kBidirectional, kForwardOnly, kBackwardOnly };
enum class SeedPolicy { kRandom, kFixed };

const char* to_string(Direction d);
const char* to_string(DirectionMode m);
const char* to_string(SeedPolicy p);
DirectionMode direction_mode_from_string(const std::string& s);
SeedPolicy seed_policy_from_string(const std::string& s);

struct DiversifyConfig {
  int k = 3;       // diversification factor: teachers per direction per round
  int rounds = 1;  // N
  DirectionMode direction_mode = DirectionMode::kBidirectional;
  SeedPolicy seed_policy = SeedPolicy::kRandom;
  bool dedup_enabled = true;
  ModelConfig teacher_model;
  ModelConfig final_model;  // defaults to the teacher architecture
  TrainConfig teacher_train;
  TrainConfig final_train;
  DecodeConfig generation_decode;  // synthetic data decoding; beam 5, penalty 1.0
  std::uint64_t base_seed = 1;

  DiversifyConfig() { generation_decode.length_penalty = 1.0; }
  void validate() const;
};

// Deterministic per-teacher seeds. The random policy mixes
// (base_seed, round, direction, index) through splitmix64 steps; the fixed
// policy collapses every teacher and the final model onto base_seed.
std::uint64_t seed_for_teacher(std::uint64_t base_seed, int round, Direction direction, int index,
                               SeedPolicy policy);
std::uint64_t seed_for_final(std::uint64_t base_seed, SeedPolicy policy);

/// One trained (or stubbed) teacher and its corpus-level translator.
struct TeacherModel {
  Direction direction = Direction::kForward;
  int index = 0;  // 0-based within (round, direction)
  int round = 1;
  std::uint64_t seed = 0;
  ModelParametersPtr params;  // null for stub teachers
  std::function<std::vector<Sentence>(const std::vector<Sentence>&)> translate;
};

/// Training seam: the real engine trains transformers; tests plug in oracle
/// or fixed-output stubs to exercise the orchestration alone.
class DiversifyEngine {
 public:
  virtual ~DiversifyEngine() = default;
  virtual TeacherModel train_teacher(const ParallelCorpus& data, Direction direction, int round,
                                     int index, std::uint64_t seed,
                                     const DiversifyConfig& cfg) = 0;
  virtual std::pair<ModelParametersPtr, TrainingTrace> train_final(
      const ParallelCorpus& data, std::uint64_t seed, const DiversifyConfig& cfg) = 0;
};

/// Disk-backed cache of trained models keyed by the full training request;
/// lets arms that share teachers (and manifest reruns) skip retraining.
/// fetch_or_compute deduplicates concurrent requests for the same key.
class ModelStore {
 public:
  using Entry = std::pair<ModelParametersPtr, TrainingTrace>;

  explicit ModelStore(std::string directory);
  std::optional<Entry> lookup(std::uint64_t key) const;
  void store(std::uint64_t key, const ModelParametersPtr& params, const TrainingTrace& trace);
  Entry fetch_or_compute(std::uint64_t key, const std::function<Entry()>& compute);

  static std::uint64_t key_of(std::string_view purpose, std::uint64_t corpus_fingerprint,
                              const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                              std::uint64_t seed);

 private:
  std::string dir_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::uint64_t, Entry> memory_;
  std::unordered_map<std::uint64_t, std::shared_ptr<std::mutex>> in_flight_;
};

/// Trains real transformers; the validation corpus feeds training traces.
class RealEngine : public DiversifyEngine {
 public:
  RealEngine(ParallelCorpus validation, int decode_threads = 1, ModelStore* store = nullptr);
  TeacherModel train_teacher(const ParallelCorpus& data, Direction direction, int round, int index,
                             std::uint64_t seed, const DiversifyConfig& cfg) override;
  std::pair<ModelParametersPtr, TrainingTrace> train_final(const ParallelCorpus& data,
                                                           std::uint64_t seed,
                                                           const DiversifyConfig& cfg) override;

 private:
  ParallelCorpus validation_;
  ParallelCorpus swapped_validation_;
  int decode_threads_;
  ModelStore* store_;
};

std::function<std::vector<Sentence>(const std::vector<Sentence>&)> make_beam_translator(
    ModelParametersPtr params, DecodeConfig cfg, int threads = 1);

struct RoundArtifacts {
  int round = 0;
  std::vector<TeacherModel> forward_teachers;
  std::vector<TeacherModel> backward_teachers;
  ParallelCorpus data;  // D_r, dedup applied when enabled
  double duplicate_fraction = 0.0;
};

struct DiversifyResult {
  std::vector<RoundArtifacts> rounds;
  ModelParametersPtr final_model;
  TrainingTrace final_trace;
  std::uint64_t final_seed = 0;
};

struct DiversifyOptions {
  std::string run_dir;          // empty: no artifacts on disk
  int teacher_parallelism = 1;  // concurrent teacher trainings per round
};

// One round of Algorithm-style augmentation: trains k teachers per enabled
// direction on prev_data (backward teachers on its swap), translates the
// ORIGINAL source/target sides, and unions the synthetic corpora onto
// prev_data. Teacher failures carry the teacher identity.
RoundArtifacts augment_round(const ParallelCorpus& prev_data, const ParallelCorpus& original,
                             int round, const DiversifyConfig& cfg, DiversifyEngine& engine,
                             const DiversifyOptions& options = {});

// The full strategy: D_0 = original; N augmentation rounds; final model
// trained on D_N with a fresh seed. Deterministic given the config.
DiversifyResult data_diverse(const ParallelCorpus& original, const DiversifyConfig& cfg,
                             DiversifyEngine& engine, const DiversifyOptions& options = {});

// Back-translates extra target-side monolingual data with the k backward
// teachers; the result (k * |mono| pairs, backward-synthetic provenance) is
// meant to be unioned with a DiversifyResult's final data before training.
ParallelCorpus backtranslate_monolingual(const std::vector<TeacherModel>& backward_teachers,
                                         const MonolingualCorpus& mono_target,
                                         VocabularyPtr source_vocab);

// Independent models on the ORIGINAL data with distinct seeds, for
// ensemble-decoding comparisons.
std::vector<ModelParametersPtr> run_ensemble_baseline(const ParallelCorpus& original,
                                                      int member_count,
                                                      const ModelConfig& model_cfg,
                                                      const TrainConfig& train_cfg,
                                                      const ParallelCorpus& validation,
                                                      std::uint64_t base_seed,
                                                      ModelStore* store = nullptr,
                                                      int parallelism = 1);

}  // namespace ddnmt

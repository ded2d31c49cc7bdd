// model.hpp -- training, scoring and checkpoint handling for the miniature
// encoder-decoder transformer.
#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ddnmt/corpus.hpp"
#include "ddnmt/transformer.hpp"

namespace ddnmt {

using ModelParameters = ParametersT<float>;
using ModelParametersPtr = std::shared_ptr<const ModelParameters>;

struct TrainConfig {
  double peak_lr = 2e-3;
  int warmup_steps = 100;
  double label_smoothing = 0.1;
  int max_updates = 500;
  int batch_tokens = 600;  // target-side tokens (EOS included) per update
  std::uint64_t seed = 1;
  int checkpoint_interval = 50;
  int keep_last_checkpoints = 5;
  bool average_kept_checkpoints = false;  // fold the kept ring into the result

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Per-position probability vector over the target vocabulary.
struct TokenDistribution {
  std::vector<double> probabilities;

  std::size_t size() const { return probabilities.size(); }
  double operator[](std::size_t i) const { return probabilities[i]; }
  // Entries in [0,1] and total within 1e-6 of 1.
  void validate() const;
};

struct TraceEntry {
  std::int64_t updates = 0;
  double train_loss = 0.0;      // mean label-smoothed CE per token over the interval
  double validation_ppl = 0.0;  // unsmoothed
};

struct TrainingTrace {
  std::vector<TraceEntry> entries;
};

/// Thrown when the training loss goes non-finite; carries the trace up to
/// the aborting update.
class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(std::string message, TrainingTrace trace)
      : std::runtime_error(std::move(message)), trace(std::move(trace)) {}
  TrainingTrace trace;
};

struct TrainResult {
  ModelParameters params;
  TrainingTrace trace;
  // Snapshots taken every checkpoint_interval updates, oldest first, at most
  // keep_last_checkpoints of them.
  std::vector<ModelParameters> kept_checkpoints;
};

// Deterministic Glorot-uniform initialization: identical (config, seed)
// yields bit-identical tensors.
ModelParameters init_parameters(const ModelConfig& config, std::uint64_t seed);

// Runs exactly cfg.max_updates Adam updates of label-smoothed cross entropy
// with the inverse-sqrt warmup schedule and global-norm clipping at 1.0.
// Throws TrainingDivergence when the loss goes non-finite.
TrainResult train(ModelParameters params, const ParallelCorpus& corpus, const TrainConfig& cfg,
                  const ParallelCorpus& validation);

// Elementwise arithmetic mean over identically-shaped checkpoints.
ModelParameters average_checkpoints(const std::vector<ModelParameters>& checkpoints);

// Distribution of the next target token after `target_prefix` (may be
// empty). Dropout is always disabled here.
TokenDistribution forward_distribution(const ModelParameters& params, const Sentence& source,
                                       const Sentence& target_prefix);

// ---------------------------------------------------------------------------
// Scoring. A SequenceScorer yields, teacher-forced, the full next-token
// distribution at every target position including the final EOS slot
// (target length + 1 entries). Stub scorers in tests share the same seam.

using SequenceScorer =
    std::function<std::vector<TokenDistribution>(const Sentence& source, const Sentence& target)>;

SequenceScorer make_scorer(ModelParametersPtr params);

// p(target_j | target_<j, source) for every position, EOS included.
std::vector<double> token_probabilities(const ModelParameters& params, const SentencePair& pair);
std::vector<double> token_probabilities(const SequenceScorer& scorer, const SentencePair& pair);

// exp(mean negative log-probability per target token, EOS included); label
// smoothing is never applied to evaluation.
double perplexity(const ModelParameters& params, const ParallelCorpus& corpus);
double perplexity(const SequenceScorer& scorer, const ParallelCorpus& corpus);

// ---------------------------------------------------------------------------
// Checkpoints: single-line JSON header (config, seed, update count, tensor
// directory) + row-major little-endian float32 payload.

void save_checkpoint(const ModelParameters& params, const std::string& path,
                     std::int64_t update_count = 0);
ModelParameters load_checkpoint(const std::string& path);

// Process-global count of train() invocations; used to assert resumability.
std::int64_t training_runs_performed();

}  // namespace ddnmt

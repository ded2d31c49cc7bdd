// experiment.hpp -- manifest-driven experiment runner: baseline, diversified,
// ensemble and back-translation arms over replication seeds, with resumable
// per-arm execution and JSON/CSV/markdown reports.
#pragma once

#include <json.hpp>

#include "ddnmt/diversify.hpp"
#include "ddnmt/metrics.hpp"
#include "ddnmt/toytask.hpp"

namespace ddnmt {

struct ArmSpec {
  std::string name;
  std::string kind;  // baseline | diversify | ensemble | backtranslation
  nlohmann::json overrides = nlohmann::json::object();
};

/// External aligned text data as an alternative to the synthetic task.
struct ExternalDataSpec {
  std::string train_source, train_target;
  std::string valid_source, valid_target;
  std::string test_source, test_target;
  int bpe_merges = 0;  // 0: whitespace tokens only
};

struct ExperimentManifest {
  ToyTaskSpec task;
  std::optional<ExternalDataSpec> external;  // overrides the toy task if set
  ModelConfig model;
  TrainConfig train;
  DecodeConfig eval_decode;          // test-set decoding
  DecodeConfig generation_decode;    // synthetic-data decoding
  std::vector<std::uint64_t> replication_seeds{1};
  std::vector<ArmSpec> arms;

  ExperimentManifest() { generation_decode.length_penalty = 1.0; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ArmSpec& a);
void from_json(const nlohmann::json& j, ArmSpec& a);
void to_json(nlohmann::json& j, const ExperimentManifest& m);
void from_json(const nlohmann::json& j, ExperimentManifest& m);

ExperimentManifest load_manifest_file(const std::string& path);

/// Corpora an experiment runs on; the oracle is absent for external data.
struct ExperimentData {
  VocabularyPtr source_vocab, target_vocab;
  ParallelCorpus train, valid, test;
  std::optional<ToyOracle> oracle;
};

ExperimentData load_experiment_data(const ExperimentManifest& manifest);

struct RunOutcome {
  nlohmann::json report;
  std::int64_t trainings_performed = 0;
  std::string report_path, csv_path, markdown_path;
};

// Runs every arm x replication seed, resumably: completed (arm, seed) cells
// whose fingerprint matches are loaded from disk and perform no training.
// Per-arm failures are recorded in the report and do not stop the run.
RunOutcome run_manifest(const ExperimentManifest& manifest, const std::string& out_dir,
                        int threads = 1);

// Per-arm BLEU/PPL deltas between two run reports (b minus a), with per-seed
// breakdowns; arms missing on either side are listed as unmatched.
nlohmann::json report_diff(const nlohmann::json& run_a, const nlohmann::json& run_b);

// The five-seed toy-task experiment grid the acceptance suite evaluates.
ExperimentManifest default_acceptance_manifest();

}  // namespace ddnmt

// metrics.hpp -- corpus BLEU, Pairwise-BLEU diversity, duplicate statistics,
// and the ensemble-probability expectations with their stopping condition.
#pragma once

#include <array>
#include <map>
#include <optional>
#include <vector>

#include "ddnmt/corpus.hpp"
#include "ddnmt/model.hpp"

namespace ddnmt {

struct BleuScore {
  double score = 0.0;                       // 0..100
  std::array<double, 4> precisions{};      // modified n-gram precisions
  double brevity_penalty = 1.0;             // in (0, 1]
  std::int64_t hypothesis_length = 0;
  std::int64_t reference_length = 0;
};

enum class BleuSmoothing {
  kNone,    // multi-bleu semantics: any zero n-gram precision zeroes the score
  kAddOne,  // +1 smoothing on counts, for very short toy sentences only
};

// Corpus-level BLEU: clipped modified n-gram precision for n = 1..4,
// geometric mean with uniform weights, brevity penalty
// exp(1 - ref_len/hyp_len) when the hypothesis side is shorter.
BleuScore corpus_bleu(const std::vector<Sentence>& hypotheses,
                      const std::vector<Sentence>& references,
                      BleuSmoothing smoothing = BleuSmoothing::kNone);

struct PairwiseBleuResult {
  double pairwise = 0.0;                 // mean over ordered hypothesis-set pairs
  std::optional<double> quality;         // mean BLEU against references, if given
};

// hypothesis_sets[s][m]: hypothesis of system m for source s. Every source
// needs the same system count m >= 2. Lower pairwise = more diverse.
PairwiseBleuResult pairwise_bleu(const std::vector<std::vector<Sentence>>& hypothesis_sets,
                                 const std::vector<Sentence>* references = nullptr);

// ---------------------------------------------------------------------------
// Ensemble-probability expectations. All statistics are token-weighted means
// over every position of every teacher's own output path, EOS included.

struct ExpectationReport {
  // mean over paths/positions of (1/N) sum_m p_m(y_j | y_<j): the ensemble
  // average probability of the path token
  double teacher_self = 0.0;
  // mean of max_v (1/N) sum_m p_m(v | y_<j): ensemble-mean peak along paths
  double teacher_ensemble_max = 0.0;
  // the student's mean probability on the same path tokens
  std::optional<double> student_on_teachers;
  std::int64_t token_count = 0;
};

// per_teacher_pairs[i] holds (source, teacher-i output) pairs produced on a
// held-out source set; teachers[i] must be the scorer of the model that
// generated set i.
ExpectationReport ensemble_expectations(const std::vector<SequenceScorer>& teachers,
                                        const SequenceScorer* student,
                                        const std::vector<ParallelCorpus>& per_teacher_pairs);

struct ConditionMargin {
  double left_margin = 0.0;   // teacher_ensemble_max - student_on_teachers
  double right_margin = 0.0;  // teacher_self - teacher_ensemble_max
  bool holds() const { return left_margin >= 0.0; }
};

// The stopping condition: training the final model should not push its
// confidence on teacher outputs above the ensemble-mean peak.
ConditionMargin condition_margin(const ExpectationReport& report);

// ---------------------------------------------------------------------------

struct DuplicateStatistics {
  std::int64_t total_pairs = 0;
  std::int64_t duplicate_count = 0;  // non-first occurrences
  double fraction = 0.0;
  std::map<std::string, std::int64_t> duplicates_by_kind;
  std::map<int, std::int64_t> duplicates_by_teacher;  // synthetic pairs only
};

// Same duplicate notion as corpus dedup (exact token-id pair match, first
// occurrence wins), broken down by provenance.
DuplicateStatistics duplicate_statistics(const ParallelCorpus& corpus);

}  // namespace ddnmt

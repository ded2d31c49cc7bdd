#include "ddnmt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace ddnmt {

namespace {

// n-grams packed as byte strings (n <= 4, ids 32-bit).
std::string ngram_key(const Sentence& s, std::size_t start, int n) {
  std::string key;
  key.reserve(static_cast<std::size_t>(n) * 4);
  for (int i = 0; i < n; ++i) {
    TokenId id = s.tokens[start + static_cast<std::size_t>(i)];
    key.push_back(static_cast<char>(id & 0xFFu));
    key.push_back(static_cast<char>((id >> 8) & 0xFFu));
    key.push_back(static_cast<char>((id >> 16) & 0xFFu));
    key.push_back(static_cast<char>((id >> 24) & 0xFFu));
  }
  return key;
}

}  // namespace

BleuScore corpus_bleu(const std::vector<Sentence>& hypotheses,
                      const std::vector<Sentence>& references, BleuSmoothing smoothing) {
  if (hypotheses.empty()) throw std::invalid_argument("corpus_bleu: empty hypothesis list");
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("corpus_bleu: count mismatch (" +
                                std::to_string(hypotheses.size()) + " vs " +
                                std::to_string(references.size()) + ")");

  std::array<std::int64_t, 4> matched{};
  std::array<std::int64_t, 4> total{};
  std::int64_t hyp_len = 0, ref_len = 0;

  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const Sentence& hyp = hypotheses[i];
    const Sentence& ref = references[i];
    hyp_len += static_cast<std::int64_t>(hyp.size());
    ref_len += static_cast<std::int64_t>(ref.size());
    for (int n = 1; n <= 4; ++n) {
      if (static_cast<std::size_t>(n) > hyp.size()) break;
      std::unordered_map<std::string, std::int64_t> ref_counts;
      if (ref.size() >= static_cast<std::size_t>(n))
        for (std::size_t s = 0; s + n <= ref.size(); ++s) ++ref_counts[ngram_key(ref, s, n)];
      std::unordered_map<std::string, std::int64_t> hyp_counts;
      for (std::size_t s = 0; s + n <= hyp.size(); ++s) ++hyp_counts[ngram_key(hyp, s, n)];
      for (const auto& [key, count] : hyp_counts) {
        total[n - 1] += count;
        auto it = ref_counts.find(key);
        if (it != ref_counts.end()) matched[n - 1] += std::min(count, it->second);
      }
    }
  }

  BleuScore out;
  out.hypothesis_length = hyp_len;
  out.reference_length = ref_len;
  out.brevity_penalty =
      (hyp_len < ref_len && hyp_len > 0)
          ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len))
          : 1.0;

  double log_precision_sum = 0.0;
  bool zero_precision = false;
  for (int n = 0; n < 4; ++n) {
    double m = static_cast<double>(matched[n]);
    double t = static_cast<double>(total[n]);
    if (smoothing == BleuSmoothing::kAddOne && n > 0) {
      m += 1.0;
      t += 1.0;
    }
    // An order with no hypothesis n-grams at all is vacuously perfect; this
    // keeps corpus_bleu(x, x) == 100 on corpora of very short sentences.
    double p = t > 0.0 ? m / t : 1.0;
    out.precisions[static_cast<std::size_t>(n)] = p;
    if (p <= 0.0)
      zero_precision = true;
    else
      log_precision_sum += 0.25 * std::log(p);
  }
  out.score = zero_precision ? 0.0 : out.brevity_penalty * std::exp(log_precision_sum) * 100.0;
  return out;
}

PairwiseBleuResult pairwise_bleu(const std::vector<std::vector<Sentence>>& hypothesis_sets,
                                 const std::vector<Sentence>* references) {
  if (hypothesis_sets.empty()) throw std::invalid_argument("pairwise_bleu: no sources");
  const std::size_t m = hypothesis_sets.front().size();
  if (m < 2) throw std::invalid_argument("pairwise_bleu: need at least two hypotheses per source");
  for (const auto& set : hypothesis_sets)
    if (set.size() != m) throw std::invalid_argument("pairwise_bleu: ragged hypothesis sets");
  if (references && references->size() != hypothesis_sets.size())
    throw std::invalid_argument("pairwise_bleu: reference count mismatch");

  // column m across all sources = system m's corpus
  std::vector<std::vector<Sentence>> systems(m);
  for (auto& sys : systems) sys.reserve(hypothesis_sets.size());
  for (const auto& set : hypothesis_sets)
    for (std::size_t k = 0; k < m; ++k) systems[k].push_back(set[k]);

  double sum = 0.0;
  int pairs = 0;
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b) {
      if (a == b) continue;
      sum += corpus_bleu(systems[a], systems[b]).score;
      ++pairs;
    }

  PairwiseBleuResult out;
  out.pairwise = sum / pairs;
  if (references) {
    double q = 0.0;
    for (std::size_t k = 0; k < m; ++k) q += corpus_bleu(systems[k], *references).score;
    out.quality = q / static_cast<double>(m);
  }
  return out;
}

// ---------------------------------------------------------------------------

ExpectationReport ensemble_expectations(const std::vector<SequenceScorer>& teachers,
                                        const SequenceScorer* student,
                                        const std::vector<ParallelCorpus>& per_teacher_pairs) {
  if (teachers.empty()) throw std::invalid_argument("ensemble_expectations: no teachers");
  if (per_teacher_pairs.size() != teachers.size())
    throw std::invalid_argument("ensemble_expectations: teacher/corpus key mismatch");

  const double inv_n = 1.0 / static_cast<double>(teachers.size());
  double sum_self = 0.0, sum_max = 0.0, sum_student = 0.0;
  std::int64_t tokens = 0;

  for (std::size_t i = 0; i < teachers.size(); ++i) {
    for (const auto& pair : per_teacher_pairs[i].pairs()) {
      // Every model scores teacher i's path; distributions are per position.
      std::vector<std::vector<TokenDistribution>> by_model;
      by_model.reserve(teachers.size());
      for (const auto& scorer : teachers) by_model.push_back(scorer(pair.source, pair.target));
      std::vector<TokenDistribution> student_dists;
      if (student) student_dists = (*student)(pair.source, pair.target);

      const std::size_t positions = pair.target.size() + 1;
      for (std::size_t j = 0; j < positions; ++j) {
        const TokenId label = j < pair.target.size() ? pair.target.tokens[j] : kEosId;
        double mean_label = 0.0;
        std::vector<double> mean_dist(by_model.front()[j].size(), 0.0);
        for (const auto& dists : by_model) {
          mean_label += dists[j].probabilities[label];
          for (std::size_t v = 0; v < mean_dist.size(); ++v)
            mean_dist[v] += dists[j].probabilities[v];
        }
        mean_label *= inv_n;
        double peak = 0.0;
        for (double v : mean_dist) peak = std::max(peak, v);
        peak *= inv_n;

        sum_self += mean_label;
        sum_max += peak;
        if (student) sum_student += student_dists[j].probabilities[label];
        ++tokens;
      }
    }
  }

  if (tokens == 0) throw std::invalid_argument("ensemble_expectations: no tokens to average");
  ExpectationReport report;
  report.token_count = tokens;
  report.teacher_self = sum_self / static_cast<double>(tokens);
  report.teacher_ensemble_max = sum_max / static_cast<double>(tokens);
  if (student) report.student_on_teachers = sum_student / static_cast<double>(tokens);
  return report;
}

ConditionMargin condition_margin(const ExpectationReport& report) {
  ConditionMargin margin;
  margin.right_margin = report.teacher_self - report.teacher_ensemble_max;
  margin.left_margin =
      report.teacher_ensemble_max - report.student_on_teachers.value_or(0.0);
  return margin;
}

// ---------------------------------------------------------------------------

DuplicateStatistics duplicate_statistics(const ParallelCorpus& corpus) {
  DuplicateStatistics stats;
  stats.total_pairs = static_cast<std::int64_t>(corpus.size());
  std::unordered_set<std::string> seen;
  seen.reserve(corpus.size() * 2);
  for (const auto& p : corpus.pairs()) {
    std::string key = ngram_key(p.source, 0, static_cast<int>(p.source.size()));
    key.push_back('\x1f');
    key += ngram_key(p.target, 0, static_cast<int>(p.target.size()));
    if (!seen.insert(std::move(key)).second) {
      ++stats.duplicate_count;
      ++stats.duplicates_by_kind[to_string(p.provenance.kind)];
      if (p.provenance.teacher_index)
        ++stats.duplicates_by_teacher[*p.provenance.teacher_index];
    }
  }
  stats.fraction = corpus.empty() ? 0.0
                                  : static_cast<double>(stats.duplicate_count) /
                                        static_cast<double>(stats.total_pairs);
  return stats;
}

}  // namespace ddnmt

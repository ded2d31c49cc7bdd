#include <doctest.h>

#include <cmath>

#include "ddnmt/metrics.hpp"

using namespace ddnmt;

namespace {

Sentence sent(std::initializer_list<TokenId> ids) { return Sentence{std::vector<TokenId>(ids)}; }

VocabularyPtr small_vocab(int n) {
  std::vector<std::string> toks;
  for (int i = 0; i < n; ++i) toks.push_back("t" + std::to_string(i));
  return std::make_shared<Vocabulary>(toks);
}

SequenceScorer one_hot_scorer(std::size_t vocab) {
  return [vocab](const Sentence&, const Sentence& target) {
    std::vector<TokenDistribution> out(target.size() + 1);
    for (std::size_t j = 0; j < out.size(); ++j) {
      out[j].probabilities.assign(vocab, 0.0);
      out[j].probabilities[j < target.size() ? target.tokens[j] : kEosId] = 1.0;
    }
    return out;
  };
}

SequenceScorer uniform_scorer(std::size_t vocab) {
  return [vocab](const Sentence&, const Sentence& target) {
    std::vector<TokenDistribution> out(target.size() + 1);
    for (auto& d : out) d.probabilities.assign(vocab, 1.0 / static_cast<double>(vocab));
    return out;
  };
}

// Distribution depends on (source, position) only; deterministic by seed.
SequenceScorer random_scorer(std::size_t vocab, std::uint64_t seed) {
  return [vocab, seed](const Sentence& source, const Sentence& target) {
    std::vector<TokenDistribution> out(target.size() + 1);
    for (std::size_t j = 0; j < out.size(); ++j) {
      Fnv1a h;
      h.update_value(seed);
      for (TokenId t : source.tokens) h.update_value(t);
      h.update_value<std::uint64_t>(j);
      Rng rng(h.digest());
      out[j].probabilities.resize(vocab);
      double total = 0.0;
      for (auto& p : out[j].probabilities) {
        p = 0.01 + rng.next_double();
        total += p;
      }
      for (auto& p : out[j].probabilities) p /= total;
    }
    return out;
  };
}

ParallelCorpus pairs_corpus(std::vector<std::pair<Sentence, Sentence>> raw, VocabularyPtr vocab,
                            Provenance prov = Provenance::original()) {
  std::vector<SentencePair> pairs;
  for (auto& [s, t] : raw) pairs.push_back({std::move(s), std::move(t), prov});
  return ParallelCorpus(std::move(pairs), vocab, vocab);
}

}  // namespace

// --- corpus_bleu -----------------------------------------------------------

TEST_CASE("perfect hypotheses score 100 with unit brevity penalty") {
  std::vector<Sentence> refs{sent({4, 5, 6, 7, 8}), sent({6, 6, 7})};
  auto bleu = corpus_bleu(refs, refs);
  CHECK(bleu.score == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(bleu.brevity_penalty == 1.0);
  for (double p : bleu.precisions) CHECK(p == 1.0);
}

TEST_CASE("repeated-token hypothesis: clipping forces p1=1/4 and p2=0") {
  // hyp "the the the the" vs ref "the cat sat down"
  std::vector<Sentence> hyp{sent({4, 4, 4, 4})};
  std::vector<Sentence> ref{sent({4, 5, 6, 7})};
  auto bleu = corpus_bleu(hyp, ref);
  CHECK(bleu.precisions[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(bleu.precisions[1] == 0.0);
  CHECK(bleu.score == 0.0);
  CHECK(bleu.brevity_penalty == 1.0);
}

TEST_CASE("matching prefix hypothesis takes the brevity penalty") {
  // hyp = first 5 tokens of a 10-token reference of distinct tokens;
  // all n-gram precisions are 1, BP = exp(1 - 10/5) = e^-1.
  std::vector<Sentence> ref{sent({4, 5, 6, 7, 8, 9, 10, 11, 12, 13})};
  std::vector<Sentence> hyp{sent({4, 5, 6, 7, 8})};
  auto bleu = corpus_bleu(hyp, ref);
  for (double p : bleu.precisions) CHECK(p == 1.0);
  CHECK(bleu.brevity_penalty == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  CHECK(bleu.score == doctest::Approx(100.0 * std::exp(-1.0)).epsilon(1e-11));
}

TEST_CASE("corpus_bleu(x,x) is 100 over random corpora") {
  Rng rng(41);
  for (int iter = 0; iter < 100; ++iter) {
    std::vector<Sentence> corpus;
    int n = 1 + static_cast<int>(rng.next_below(5));
    for (int i = 0; i < n; ++i) {
      Sentence s;
      int len = 1 + static_cast<int>(rng.next_below(9));
      for (int t = 0; t < len; ++t)
        s.tokens.push_back(static_cast<TokenId>(4 + rng.next_below(12)));
      corpus.push_back(s);
    }
    auto bleu = corpus_bleu(corpus, corpus);
    CHECK(bleu.score == doctest::Approx(100.0).epsilon(1e-9));
  }
}

TEST_CASE("corpus_bleu is invariant under pair reordering") {
  std::vector<Sentence> hyp{sent({4, 5}), sent({6, 7, 8}), sent({9})};
  std::vector<Sentence> ref{sent({4, 5, 6}), sent({6, 7}), sent({9, 10})};
  auto forward = corpus_bleu(hyp, ref);
  std::vector<Sentence> hyp_r(hyp.rbegin(), hyp.rend());
  std::vector<Sentence> ref_r(ref.rbegin(), ref.rend());
  auto reversed = corpus_bleu(hyp_r, ref_r);
  CHECK(forward.score == doctest::Approx(reversed.score).epsilon(1e-12));
}

TEST_CASE("corpus_bleu rejects bad input shapes") {
  CHECK_THROWS_AS(corpus_bleu({}, {}), std::invalid_argument);
  CHECK_THROWS_AS(corpus_bleu({sent({4})}, {sent({4}), sent({5})}), std::invalid_argument);
}

TEST_CASE("add-one smoothing keeps short sentences off zero") {
  std::vector<Sentence> hyp{sent({4, 5})};
  std::vector<Sentence> ref{sent({4, 6})};
  CHECK(corpus_bleu(hyp, ref).score == 0.0);
  CHECK(corpus_bleu(hyp, ref, BleuSmoothing::kAddOne).score > 0.0);
}

// --- pairwise_bleu -----------------------------------------------------------

TEST_CASE("identical hypothesis sets have pairwise 100") {
  std::vector<std::vector<Sentence>> sets{{sent({4, 5}), sent({4, 5}), sent({4, 5})},
                                          {sent({6}), sent({6}), sent({6})}};
  auto result = pairwise_bleu(sets);
  CHECK(result.pairwise == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(!result.quality.has_value());
}

TEST_CASE("vocabulary-disjoint hypothesis sets have pairwise 0") {
  std::vector<std::vector<Sentence>> sets{{sent({4, 5}), sent({8, 9})},
                                          {sent({6, 7}), sent({10, 11})}};
  CHECK(pairwise_bleu(sets).pairwise == 0.0);
}

TEST_CASE("pairwise_bleu is symmetric under hypothesis relabeling") {
  std::vector<std::vector<Sentence>> sets{{sent({4, 5}), sent({4, 6}), sent({5, 6})},
                                          {sent({7, 8}), sent({7}), sent({8, 7})}};
  auto base = pairwise_bleu(sets).pairwise;
  std::vector<std::vector<Sentence>> permuted;
  for (const auto& s : sets) permuted.push_back({s[2], s[0], s[1]});
  CHECK(pairwise_bleu(permuted).pairwise == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("pairwise_bleu reports quality against references when given") {
  std::vector<std::vector<Sentence>> sets{{sent({4, 5}), sent({4, 5})}};
  std::vector<Sentence> refs{sent({4, 5})};
  auto result = pairwise_bleu(sets, &refs);
  REQUIRE(result.quality.has_value());
  CHECK(*result.quality == doctest::Approx(100.0).epsilon(1e-12));
}

TEST_CASE("pairwise_bleu rejects ragged sets and singletons") {
  CHECK_THROWS_AS(pairwise_bleu({{sent({4})}}), std::invalid_argument);
  CHECK_THROWS_AS(pairwise_bleu({{sent({4}), sent({5})}, {sent({4})}}), std::invalid_argument);
}

// --- ensemble expectations ---------------------------------------------------

TEST_CASE("one-hot teacher that is also the student: all statistics are 1") {
  auto vocab = small_vocab(8);
  auto corpus = pairs_corpus({{sent({4, 5}), sent({6, 7})}, {sent({5}), sent({4})}}, vocab);
  auto teacher = one_hot_scorer(12);
  auto student = one_hot_scorer(12);
  auto report = ensemble_expectations({teacher}, &student, {corpus});
  CHECK(report.teacher_self == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.teacher_ensemble_max == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(*report.student_on_teachers == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.token_count == 5);  // 2+1 and 1+1 positions
  CHECK(condition_margin(report).holds());
}

TEST_CASE("two uniform teachers over |V|=50") {
  auto vocab = small_vocab(8);
  auto corpus = pairs_corpus({{sent({4}), sent({5, 6})}}, vocab);
  std::vector<SequenceScorer> teachers{uniform_scorer(50), uniform_scorer(50)};
  auto report = ensemble_expectations(teachers, nullptr, {corpus, corpus});
  CHECK(report.teacher_self == doctest::Approx(1.0 / 50).epsilon(1e-12));
  CHECK(report.teacher_ensemble_max == doctest::Approx(1.0 / 50).epsilon(1e-12));
  CHECK(!report.student_on_teachers.has_value());
}

TEST_CASE("single teacher that is also the student gives identical statistics") {
  auto vocab = small_vocab(8);
  auto corpus =
      pairs_corpus({{sent({4, 5}), sent({6, 7, 8})}, {sent({9}), sent({10, 11})}}, vocab);
  auto scorer = random_scorer(12, 5);
  auto report = ensemble_expectations({scorer}, &scorer, {corpus});
  CHECK(report.teacher_self == *report.student_on_teachers);
}

TEST_CASE("ensemble-max dominates the mean probability of the path token") {
  auto vocab = small_vocab(8);
  auto corpus = pairs_corpus({{sent({4, 5}), sent({6, 7, 8, 9})}}, vocab);
  std::vector<SequenceScorer> teachers{random_scorer(12, 1), random_scorer(12, 2),
                                       random_scorer(12, 3)};
  auto report = ensemble_expectations(teachers, nullptr, {corpus, corpus, corpus});
  // same-prefix evaluation: pointwise max of the mean >= mean at the chosen
  // token, so the aggregate obeys the same order
  CHECK(report.teacher_ensemble_max >= report.teacher_self);

  // pointwise form on the raw distributions
  auto d1 = teachers[0](corpus[0].source, corpus[0].target);
  auto d2 = teachers[1](corpus[0].source, corpus[0].target);
  for (std::size_t j = 0; j < d1.size(); ++j) {
    std::vector<double> mean(d1[j].size());
    double peak = 0.0;
    for (std::size_t v = 0; v < mean.size(); ++v) {
      mean[v] = 0.5 * (d1[j].probabilities[v] + d2[j].probabilities[v]);
      peak = std::max(peak, mean[v]);
    }
    for (double p : mean) CHECK(peak >= p);
  }
}

TEST_CASE("convexity: expected max of mean <= expected mean of maxes") {
  std::vector<SequenceScorer> teachers{random_scorer(16, 7), random_scorer(16, 8),
                                       random_scorer(16, 9)};
  Rng rng(12);
  double sum_max_of_mean = 0.0, sum_mean_of_max = 0.0;
  int positions = 0;
  for (int iter = 0; iter < 20; ++iter) {
    Sentence src;
    for (int t = 0; t < 3; ++t) src.tokens.push_back(static_cast<TokenId>(4 + rng.next_below(8)));
    Sentence tgt;
    for (int t = 0; t < 4; ++t) tgt.tokens.push_back(static_cast<TokenId>(4 + rng.next_below(8)));
    std::vector<std::vector<TokenDistribution>> dists;
    for (const auto& s : teachers) dists.push_back(s(src, tgt));
    for (std::size_t j = 0; j < dists[0].size(); ++j) {
      double max_of_mean = 0.0;
      double mean_of_max = 0.0;
      for (std::size_t v = 0; v < dists[0][j].size(); ++v) {
        double mean = 0.0;
        for (const auto& d : dists) mean += d[j].probabilities[v];
        max_of_mean = std::max(max_of_mean, mean / 3.0);
      }
      for (const auto& d : dists) {
        double mx = 0.0;
        for (double p : d[j].probabilities) mx = std::max(mx, p);
        mean_of_max += mx;
      }
      mean_of_max /= 3.0;
      CHECK(max_of_mean <= mean_of_max + 1e-12);
      sum_max_of_mean += max_of_mean;
      sum_mean_of_max += mean_of_max;
      ++positions;
    }
  }
  CHECK(sum_max_of_mean / positions <= sum_mean_of_max / positions + 1e-12);
}

TEST_CASE("expectations are invariant under teacher reordering") {
  auto vocab = small_vocab(8);
  auto c1 = pairs_corpus({{sent({4}), sent({5, 6})}}, vocab);
  auto c2 = pairs_corpus({{sent({4}), sent({7})}}, vocab);
  auto t1 = random_scorer(12, 21), t2 = random_scorer(12, 22);
  auto a = ensemble_expectations({t1, t2}, nullptr, {c1, c2});
  auto b = ensemble_expectations({t2, t1}, nullptr, {c2, c1});
  CHECK(a.teacher_self == doctest::Approx(b.teacher_self).epsilon(1e-12));
  CHECK(a.teacher_ensemble_max == doctest::Approx(b.teacher_ensemble_max).epsilon(1e-12));
  CHECK(a.token_count == b.token_count);
}

TEST_CASE("expectation statistics stay within [0,1]") {
  auto vocab = small_vocab(8);
  auto corpus = pairs_corpus({{sent({4, 5, 6}), sent({7, 8})}}, vocab);
  std::vector<SequenceScorer> teachers{random_scorer(12, 31), random_scorer(12, 32)};
  auto student = random_scorer(12, 33);
  auto report = ensemble_expectations(teachers, &student, {corpus, corpus});
  CHECK(report.teacher_self >= 0.0);
  CHECK(report.teacher_self <= 1.0);
  CHECK(report.teacher_ensemble_max >= 0.0);
  CHECK(report.teacher_ensemble_max <= 1.0);
  CHECK(*report.student_on_teachers >= 0.0);
  CHECK(*report.student_on_teachers <= 1.0);
}

TEST_CASE("ensemble_expectations rejects mismatched inputs") {
  auto vocab = small_vocab(8);
  auto corpus = pairs_corpus({{sent({4}), sent({5})}}, vocab);
  CHECK_THROWS_AS(ensemble_expectations({}, nullptr, {}), std::invalid_argument);
  CHECK_THROWS_AS(ensemble_expectations({uniform_scorer(12)}, nullptr, {corpus, corpus}),
                  std::invalid_argument);
}

TEST_CASE("condition margins on the reference operating points") {
  ExpectationReport healthy;
  healthy.teacher_self = 0.76;
  healthy.teacher_ensemble_max = 0.75;
  healthy.student_on_teachers = 0.74;
  auto m1 = condition_margin(healthy);
  CHECK(m1.left_margin == doctest::Approx(0.01).epsilon(1e-9));
  CHECK(m1.holds());

  ExpectationReport overfit = healthy;
  overfit.student_on_teachers = 0.82;
  auto m2 = condition_margin(overfit);
  CHECK(m2.left_margin == doctest::Approx(-0.07).epsilon(1e-7));
  CHECK(!m2.holds());

  // a fresh student near 1/|V| holds with a large margin
  ExpectationReport fresh = healthy;
  fresh.student_on_teachers = 1.0 / 60.0;
  CHECK(condition_margin(fresh).left_margin > 0.7);
}

// --- duplicate statistics ----------------------------------------------------

TEST_CASE("duplicate_statistics on a unique corpus") {
  auto vocab = small_vocab(8);
  auto corpus = pairs_corpus({{sent({4}), sent({5})}, {sent({5}), sent({6})}}, vocab);
  auto stats = duplicate_statistics(corpus);
  CHECK(stats.duplicate_count == 0);
  CHECK(stats.fraction == 0.0);
  CHECK(stats.duplicates_by_kind.empty());
}

TEST_CASE("duplicate_statistics breaks counts down by provenance") {
  auto vocab = small_vocab(8);
  std::vector<SentencePair> pairs;
  pairs.push_back({sent({4}), sent({5}), Provenance::original()});
  pairs.push_back({sent({6}), sent({7}), Provenance::original()});
  // teacher 0 exactly reproduces both originals; teacher 1 reproduces one
  pairs.push_back({sent({4}), sent({5}), Provenance::forward_synthetic(0, 1)});
  pairs.push_back({sent({6}), sent({7}), Provenance::forward_synthetic(0, 1)});
  pairs.push_back({sent({4}), sent({5}), Provenance::backward_synthetic(1, 1)});
  pairs.push_back({sent({8}), sent({9}), Provenance::backward_synthetic(1, 1)});
  ParallelCorpus corpus(pairs, vocab, vocab);

  auto stats = duplicate_statistics(corpus);
  CHECK(stats.total_pairs == 6);
  CHECK(stats.duplicate_count == 3);
  CHECK(stats.fraction == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(stats.duplicates_by_kind.at("forward-synthetic") == 2);
  CHECK(stats.duplicates_by_kind.at("backward-synthetic") == 1);
  CHECK(stats.duplicates_by_teacher.at(0) == 2);
  CHECK(stats.duplicates_by_teacher.at(1) == 1);

  // breakdown sums to the overall removed count
  std::int64_t by_kind_total = 0;
  for (const auto& [kind, count] : stats.duplicates_by_kind) by_kind_total += count;
  CHECK(by_kind_total == stats.duplicate_count);

  // consistent with corpus dedup
  CHECK(stats.fraction == doctest::Approx(dedup(corpus).duplicate_fraction).epsilon(1e-12));
}

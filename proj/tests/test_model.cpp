#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "ddnmt/model.hpp"

using namespace ddnmt;

namespace {

VocabularyPtr numbered_vocab(int content_tokens) {
  std::vector<std::string> toks;
  for (int i = 0; i < content_tokens; ++i) toks.push_back("w" + std::to_string(i));
  return std::make_shared<Vocabulary>(toks);
}

ParallelCorpus copy_corpus(int n, const VocabularyPtr& vocab, int min_len, int max_len,
                           std::uint64_t seed) {
  Rng rng(seed);
  const TokenId content = static_cast<TokenId>(vocab->size() - kNumReservedTokens);
  std::vector<SentencePair> pairs;
  for (int i = 0; i < n; ++i) {
    int len = min_len + static_cast<int>(rng.next_below(max_len - min_len + 1));
    Sentence s;
    for (int t = 0; t < len; ++t)
      s.tokens.push_back(static_cast<TokenId>(kNumReservedTokens + rng.next_below(content)));
    pairs.push_back({s, s, Provenance::original()});
  }
  return ParallelCorpus(std::move(pairs), vocab, vocab);
}

ModelConfig tiny_config(int vocab_size) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.model_dim = 16;
  cfg.ffn_dim = 32;
  cfg.num_heads = 4;
  cfg.dropout = 0.1f;
  cfg.max_positions = 64;
  cfg.source_vocab_size = vocab_size;
  cfg.target_vocab_size = vocab_size;
  return cfg;
}

bool params_equal(const ModelParameters& a, const ModelParameters& b) {
  std::vector<const MatT<float>*> ta, tb;
  a.visit([&](const std::string&, const MatT<float>& m) { ta.push_back(&m); });
  b.visit([&](const std::string&, const MatT<float>& m) { tb.push_back(&m); });
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i]->rows() != tb[i]->rows() || ta[i]->cols() != tb[i]->cols()) return false;
    if (std::memcmp(ta[i]->data(), tb[i]->data(),
                    sizeof(float) * static_cast<std::size_t>(ta[i]->size())) != 0)
      return false;
  }
  return true;
}

SequenceScorer uniform_scorer(std::size_t vocab_size) {
  return [vocab_size](const Sentence&, const Sentence& target) {
    std::vector<TokenDistribution> out(target.size() + 1);
    for (auto& d : out)
      d.probabilities.assign(vocab_size, 1.0 / static_cast<double>(vocab_size));
    return out;
  };
}

SequenceScorer one_hot_scorer(std::size_t vocab_size) {
  return [vocab_size](const Sentence&, const Sentence& target) {
    std::vector<TokenDistribution> out(target.size() + 1);
    for (std::size_t j = 0; j < out.size(); ++j) {
      out[j].probabilities.assign(vocab_size, 0.0);
      TokenId label = j < target.size() ? target.tokens[j] : kEosId;
      out[j].probabilities[label] = 1.0;
    }
    return out;
  };
}

}  // namespace

TEST_CASE("init_parameters is deterministic and seed-sensitive") {
  auto cfg = tiny_config(20);
  auto a = init_parameters(cfg, 7);
  auto b = init_parameters(cfg, 7);
  CHECK(params_equal(a, b));
  auto c = init_parameters(cfg, 8);
  CHECK(!params_equal(a, c));
}

TEST_CASE("init_parameters rejects indivisible head count") {
  auto cfg = tiny_config(20);
  cfg.model_dim = 30;
  cfg.num_heads = 4;
  CHECK_THROWS_AS(init_parameters(cfg, 1), std::invalid_argument);
}

TEST_CASE("forward_distribution is normalized") {
  auto cfg = tiny_config(20);
  auto params = init_parameters(cfg, 3);
  auto dist = forward_distribution(params, Sentence{{4, 5, 6}}, Sentence{{7, 8}});
  REQUIRE(dist.size() == 20);
  dist.validate();
  auto first = forward_distribution(params, Sentence{{4, 5, 6}}, Sentence{});
  first.validate();
}

TEST_CASE("forward_distribution with zero weights is uniform") {
  auto cfg = tiny_config(24);
  auto params = init_parameters(cfg, 3);
  params.visit([](const std::string&, MatT<float>& m) { m.setZero(); });
  auto dist = forward_distribution(params, Sentence{{4, 5}}, Sentence{{6}});
  for (double p : dist.probabilities) CHECK(p == doctest::Approx(1.0 / 24).epsilon(1e-9));
}

TEST_CASE("forward_distribution rejects oversized inputs") {
  auto cfg = tiny_config(20);
  cfg.max_positions = 4;
  auto params = init_parameters(cfg, 3);
  Sentence long_src{{4, 5, 6, 7, 8}};
  CHECK_THROWS_AS(forward_distribution(params, long_src, Sentence{}), std::invalid_argument);
}

TEST_CASE("token_probabilities satisfies the chain rule") {
  auto cfg = tiny_config(20);
  auto params = init_parameters(cfg, 11);
  SentencePair pair{Sentence{{4, 5, 6, 7}}, Sentence{{8, 9, 10}}, Provenance::original()};
  auto probs = token_probabilities(params, pair);
  REQUIRE(probs.size() == pair.target.size() + 1);

  double log_sum = 0.0;
  for (double p : probs) log_sum += std::log(p);
  double product = std::accumulate(probs.begin(), probs.end(), 1.0,
                                   [](double acc, double p) { return acc * p; });
  CHECK(product == doctest::Approx(std::exp(log_sum)).epsilon(1e-6));
}

TEST_CASE("token_probabilities through stub scorers") {
  SentencePair pair{Sentence{{4, 5}}, Sentence{{6, 7, 8}}, Provenance::original()};
  auto ones = token_probabilities(one_hot_scorer(20), pair);
  for (double p : ones) CHECK(p == 1.0);
  auto unif = token_probabilities(uniform_scorer(20), pair);
  for (double p : unif) CHECK(p == doctest::Approx(0.05).epsilon(1e-12));
}

TEST_CASE("perplexity of stub models") {
  auto vocab = numbered_vocab(96);  // |V| = 100 with reserved ids
  auto corpus = copy_corpus(10, vocab, 3, 6, 5);
  CHECK(perplexity(uniform_scorer(100), corpus) == doctest::Approx(100.0).epsilon(1e-9));
  CHECK(perplexity(one_hot_scorer(100), corpus) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("average_checkpoints means tensors elementwise") {
  auto cfg = tiny_config(20);
  auto a = init_parameters(cfg, 1);
  SUBCASE("single checkpoint is identity") {
    auto avg = average_checkpoints({a});
    CHECK(params_equal(avg, a));
  }
  SUBCASE("two checkpoints average") {
    auto b = init_parameters(cfg, 2);
    auto avg = average_checkpoints({a, b});
    std::vector<const MatT<float>*> ta, tb, tv;
    a.visit([&](const std::string&, const MatT<float>& m) { ta.push_back(&m); });
    b.visit([&](const std::string&, const MatT<float>& m) { tb.push_back(&m); });
    avg.visit([&](const std::string&, const MatT<float>& m) { tv.push_back(&m); });
    for (std::size_t i = 0; i < ta.size(); ++i) {
      MatT<float> expected = (*ta[i] + *tb[i]) * 0.5f;
      CHECK((*tv[i] - expected).cwiseAbs().maxCoeff() <= 1e-7f);
    }
  }
  SUBCASE("layer count mismatch is an error") {
    auto cfg1 = cfg;
    cfg1.num_layers = 1;
    auto small = init_parameters(cfg1, 1);
    CHECK_THROWS_AS(average_checkpoints({a, small}), std::invalid_argument);
  }
  SUBCASE("empty input is an error") {
    CHECK_THROWS_AS(average_checkpoints({}), std::invalid_argument);
  }
}

TEST_CASE("train with zero updates returns parameters unchanged") {
  auto vocab = numbered_vocab(16);
  auto corpus = copy_corpus(8, vocab, 3, 5, 1);
  auto cfg = tiny_config(static_cast<int>(vocab->size()));
  auto params = init_parameters(cfg, 5);
  TrainConfig tc;
  tc.max_updates = 0;
  auto result = train(params, corpus, tc, corpus);
  CHECK(params_equal(result.params, params));
  CHECK(result.trace.entries.empty());
}

TEST_CASE("train rejects an empty corpus") {
  auto vocab = numbered_vocab(16);
  ParallelCorpus empty({}, vocab, vocab);
  auto cfg = tiny_config(static_cast<int>(vocab->size()));
  auto params = init_parameters(cfg, 5);
  CHECK_THROWS_AS(train(params, empty, TrainConfig{}, empty), std::invalid_argument);
}

TEST_CASE("train diverges loudly on an absurd learning rate") {
  auto vocab = numbered_vocab(16);
  auto corpus = copy_corpus(32, vocab, 3, 6, 2);
  auto cfg = tiny_config(static_cast<int>(vocab->size()));
  auto params = init_parameters(cfg, 5);
  TrainConfig tc;
  tc.peak_lr = 1e18;
  tc.warmup_steps = 1;
  tc.max_updates = 50;
  CHECK_THROWS_AS(train(params, corpus, tc, corpus), TrainingDivergence);
}

TEST_CASE("training learns the copy task") {
  auto vocab = numbered_vocab(16);
  auto train_corpus = copy_corpus(300, vocab, 3, 8, 10);
  auto valid_corpus = copy_corpus(40, vocab, 3, 8, 11);
  auto cfg = tiny_config(static_cast<int>(vocab->size()));
  auto params = init_parameters(cfg, 21);
  TrainConfig tc;
  tc.peak_lr = 2e-2;
  tc.warmup_steps = 50;
  tc.max_updates = 500;
  tc.batch_tokens = 600;
  tc.seed = 33;
  tc.checkpoint_interval = 100;
  auto result = train(params, train_corpus, tc, valid_corpus);

  REQUIRE(!result.trace.entries.empty());
  const auto& entries = result.trace.entries;
  for (std::size_t i = 1; i < entries.size(); ++i)
    CHECK(entries[i].updates > entries[i - 1].updates);
  CHECK(entries.back().updates == 500);
  // the copy task is learnable to near-determinism
  CHECK(entries.back().validation_ppl < 1.5);
  CHECK(entries.front().train_loss > entries.back().train_loss);

  // a trained model's next-token distribution reacts to the prefix
  const auto& pair = valid_corpus[0];
  Sentence prefix1;
  Sentence prefix2{{pair.target.tokens[0]}};
  auto d1 = forward_distribution(result.params, pair.source, prefix1);
  auto d2 = forward_distribution(result.params, pair.source, prefix2);
  double max_diff = 0.0;
  for (std::size_t v = 0; v < d1.size(); ++v)
    max_diff = std::max(max_diff, std::abs(d1[v] - d2[v]));
  CHECK(max_diff > 1e-3);

  // perplexity of a single-checkpoint average equals the checkpoint's
  double ppl_direct = perplexity(result.params, valid_corpus);
  double ppl_avg = perplexity(average_checkpoints({result.params}), valid_corpus);
  CHECK(ppl_direct == ppl_avg);

  CHECK(static_cast<int>(result.kept_checkpoints.size()) <= tc.keep_last_checkpoints);
}

TEST_CASE("training is bit-identical across runs") {
  auto vocab = numbered_vocab(16);
  auto corpus = copy_corpus(60, vocab, 3, 6, 3);
  auto valid = copy_corpus(10, vocab, 3, 6, 4);
  auto cfg = tiny_config(static_cast<int>(vocab->size()));
  TrainConfig tc;
  tc.max_updates = 60;
  tc.batch_tokens = 200;
  tc.seed = 9;
  auto r1 = train(init_parameters(cfg, 17), corpus, tc, valid);
  auto r2 = train(init_parameters(cfg, 17), corpus, tc, valid);
  CHECK(params_equal(r1.params, r2.params));
  REQUIRE(r1.trace.entries.size() == r2.trace.entries.size());
  for (std::size_t i = 0; i < r1.trace.entries.size(); ++i) {
    CHECK(r1.trace.entries[i].train_loss == r2.trace.entries[i].train_loss);
    CHECK(r1.trace.entries[i].validation_ppl == r2.trace.entries[i].validation_ppl);
  }
}

TEST_CASE("checkpoint file round-trip is bit-exact") {
  auto cfg = tiny_config(20);
  cfg.share_target_embeddings_with_output = false;
  auto params = init_parameters(cfg, 77);
  std::string path = "test_model_ckpt.ckpt";
  save_checkpoint(params, path, 123);
  auto loaded = load_checkpoint(path);
  CHECK(params_equal(loaded, params));
  CHECK(loaded.config == params.config);
  CHECK(loaded.creation_seed == params.creation_seed);
  std::remove(path.c_str());
}

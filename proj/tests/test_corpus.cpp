#include <doctest.h>

#include <cstdio>
#include <sstream>

#include "ddnmt/corpus.hpp"

using namespace ddnmt;

namespace {

VocabularyPtr letters_vocab() {
  std::vector<std::string> toks;
  for (char c = 'a'; c <= 'j'; ++c) toks.emplace_back(1, c);
  return std::make_shared<Vocabulary>(toks);
}

Sentence sent(std::initializer_list<TokenId> ids) { return Sentence{std::vector<TokenId>(ids)}; }

ParallelCorpus corpus_of(std::vector<std::pair<Sentence, Sentence>> raw, VocabularyPtr vocab) {
  std::vector<SentencePair> pairs;
  for (auto& [s, t] : raw) pairs.push_back({std::move(s), std::move(t), Provenance::original()});
  return ParallelCorpus(std::move(pairs), vocab, vocab);
}

}  // namespace

TEST_CASE("load_parallel builds original pairs in order") {
  auto vocab = letters_vocab();
  auto corpus = load_parallel({"a b", "c d"}, {"b a", "d c"}, vocab, vocab);
  REQUIRE(corpus.size() == 2);
  CHECK(corpus[0].source == sent({vocab->id_of("a"), vocab->id_of("b")}));
  CHECK(corpus[0].target == sent({vocab->id_of("b"), vocab->id_of("a")}));
  CHECK(corpus[0].provenance.kind == ProvenanceKind::kOriginal);
  CHECK(!corpus[0].provenance.teacher_index.has_value());
  CHECK(corpus[1].source == sent({vocab->id_of("c"), vocab->id_of("d")}));
}

TEST_CASE("load_parallel rejects mismatched line counts") {
  auto vocab = letters_vocab();
  CHECK_THROWS_WITH_AS(load_parallel({"a", "b", "c"}, {"a", "b"}, vocab, vocab),
                       doctest::Contains("line-count mismatch"), std::invalid_argument);
}

TEST_CASE("load_parallel reports 1-based empty line numbers") {
  auto vocab = letters_vocab();
  CHECK_THROWS_WITH_AS(load_parallel({"a", "   "}, {"a", "b"}, vocab, vocab),
                       doctest::Contains("empty line 2"), std::invalid_argument);
}

TEST_CASE("unknown tokens map to UNK at lookup time") {
  auto vocab = letters_vocab();
  auto corpus = load_parallel({"a zzz"}, {"b"}, vocab, vocab);
  CHECK(corpus[0].source.tokens[1] == kUnkId);
}

TEST_CASE("corpus construction validates reserved ids and empty sides") {
  auto vocab = letters_vocab();
  CHECK_THROWS_AS(corpus_of({{sent({kPadId}), sent({4})}}, vocab), std::invalid_argument);
  CHECK_THROWS_AS(corpus_of({{sent({kBosId}), sent({4})}}, vocab), std::invalid_argument);
  CHECK_THROWS_AS(corpus_of({{Sentence{}, sent({4})}}, vocab), std::invalid_argument);
  CHECK_THROWS_AS(corpus_of({{sent({999}), sent({4})}}, vocab), std::invalid_argument);
}

TEST_CASE("provenance fields present iff synthetic") {
  auto vocab = letters_vocab();
  Provenance bad;
  bad.kind = ProvenanceKind::kForwardSynthetic;  // missing teacher/round
  std::vector<SentencePair> pairs{{sent({4}), sent({5}), bad}};
  CHECK_THROWS_AS(ParallelCorpus(std::move(pairs), vocab, vocab), std::invalid_argument);
}

// --- BPE ---------------------------------------------------------------

TEST_CASE("learn_bpe merges the most frequent pair") {
  // "aaab" has pairs (a,a) x2 and (a,b) x1 per line.
  auto model = learn_bpe({"aaab", "aaab"}, 1);
  REQUIRE(model.num_merges() == 1);
  CHECK(model.merges()[0] == std::pair<std::string, std::string>("a", "a"));
}

TEST_CASE("learn_bpe with zero merges is a character-level model") {
  auto model = learn_bpe({"aaab"}, 0);
  CHECK(model.num_merges() == 0);
}

TEST_CASE("learn_bpe on distinct single characters learns nothing") {
  auto model = learn_bpe({"a b c d e"}, 10);
  CHECK(model.num_merges() == 0);
}

TEST_CASE("learn_bpe rejects an empty corpus") {
  CHECK_THROWS_AS(learn_bpe({}, 5), std::invalid_argument);
  CHECK_THROWS_AS(learn_bpe({"   ", ""}, 5), std::invalid_argument);
}

TEST_CASE("learn_bpe breaks frequency ties lexicographically") {
  // "ab" and "cd" both occur twice; (a,b) < (c,d).
  auto model = learn_bpe({"ab cd", "ab cd"}, 1);
  REQUIRE(model.num_merges() == 1);
  CHECK(model.merges()[0] == std::pair<std::string, std::string>("a", "b"));
}

TEST_CASE("bpe_encode character fallback marks word-internal pieces") {
  BpeModel empty;
  auto toks = bpe_encode(empty, "ab");
  REQUIRE(toks.size() == 2);
  CHECK(toks[0] == "a@@");
  CHECK(toks[1] == "b");
}

TEST_CASE("bpe_encode applies merges") {
  BpeModel model(std::vector<std::pair<std::string, std::string>>{{"a", "b"}});
  auto toks = bpe_encode(model, "ab");
  REQUIRE(toks.size() == 1);
  CHECK(toks[0] == "ab");
}

TEST_CASE("bpe round-trips marker-free text") {
  auto model = learn_bpe({"hello world", "hello there"}, 8);
  CHECK(bpe_decode(bpe_encode(model, "hello world")) == "hello world");
  CHECK(bpe_decode(bpe_encode(model, "")) == "");
}

TEST_CASE("bpe round-trip property on random text") {
  Rng rng(99);
  auto model = learn_bpe({"the cat sat on the mat", "a cat and a hat"}, 12);
  for (int iter = 0; iter < 100; ++iter) {
    std::string line;
    int words = 1 + static_cast<int>(rng.next_below(6));
    for (int w = 0; w < words; ++w) {
      if (w) line += ' ';
      int len = 1 + static_cast<int>(rng.next_below(7));
      for (int i = 0; i < len; ++i)
        line += static_cast<char>('a' + static_cast<char>(rng.next_below(26)));
    }
    CAPTURE(line);
    CHECK(bpe_decode(bpe_encode(model, line)) == line);
  }
}

TEST_CASE("bpe model file round-trip") {
  auto model = learn_bpe({"aaab aab", "aaab ab"}, 4);
  std::ostringstream out;
  model.save(out);
  std::istringstream in(out.str());
  auto loaded = BpeModel::load(in);
  CHECK(loaded.merges() == model.merges());
}

// --- swap / union / dedup ------------------------------------------------

TEST_CASE("swap_direction exchanges sides and is an involution") {
  auto vocab = letters_vocab();
  auto c = corpus_of({{sent({4, 5}), sent({6})}, {sent({7}), sent({8, 9})}}, vocab);
  auto swapped = swap_direction(c);
  CHECK(swapped[0].source == c[0].target);
  CHECK(swapped[0].target == c[0].source);
  auto twice = swap_direction(swapped);
  REQUIRE(twice.size() == c.size());
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(twice[i] == c[i]);
}

TEST_CASE("swap_direction of an empty corpus is empty") {
  auto vocab = letters_vocab();
  ParallelCorpus empty({}, vocab, vocab);
  CHECK(swap_direction(empty).empty());
}

TEST_CASE("union_corpora concatenates and sizes add") {
  auto vocab = letters_vocab();
  std::vector<std::pair<Sentence, Sentence>> raw;
  for (TokenId i = 0; i < 100; ++i) raw.push_back({sent({4 + i % 6}), sent({4 + (i + 1) % 6})});
  auto c = corpus_of(raw, vocab);
  auto u = union_corpora({c, c, c});
  CHECK(u.size() == 300);
  // union shape of one original plus k forward and k backward corpora, k = 3
  auto seven = union_corpora({c, c, c, c, c, c, c});
  CHECK(seven.size() == 7 * c.size());
  auto one = union_corpora({c});
  REQUIRE(one.size() == c.size());
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(one[i] == c[i]);
}

TEST_CASE("union_corpora rejects vocabulary mismatch") {
  auto a = corpus_of({{sent({4}), sent({5})}}, letters_vocab());
  auto other = std::make_shared<Vocabulary>(std::vector<std::string>{"x", "y"});
  ParallelCorpus b({{sent({4}), sent({5}), Provenance::original()}}, other, other);
  CHECK_THROWS_AS(union_corpora({a, b}), std::invalid_argument);
}

TEST_CASE("dedup keeps first occurrences and reports the removed fraction") {
  auto vocab = letters_vocab();
  std::vector<std::pair<Sentence, Sentence>> raw;
  for (TokenId i = 0; i < 7; ++i) raw.push_back({sent({4 + i % 10}), sent({4, 4 + i % 10})});
  raw.push_back(raw[0]);
  raw.push_back(raw[1]);
  raw.push_back(raw[2]);
  auto c = corpus_of(raw, vocab);
  auto [deduped, fraction] = dedup(c);
  CHECK(deduped.size() == 7);
  CHECK(fraction == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("dedup of a repeat-free corpus removes nothing") {
  auto vocab = letters_vocab();
  auto c = corpus_of({{sent({4}), sent({5})}, {sent({5}), sent({4})}}, vocab);
  auto [deduped, fraction] = dedup(c);
  CHECK(deduped.size() == 2);
  CHECK(fraction == 0.0);
}

TEST_CASE("dedup is idempotent after a union") {
  auto vocab = letters_vocab();
  std::vector<std::pair<Sentence, Sentence>> raw;
  for (TokenId i = 0; i < 20; ++i) raw.push_back({sent({4 + i % 5}), sent({4 + (i * 3) % 5})});
  auto c = corpus_of(raw, vocab);
  auto once = dedup(union_corpora({c, c}));
  auto twice = dedup(once.corpus);
  CHECK(twice.duplicate_fraction == 0.0);
  CHECK(twice.corpus.size() == once.corpus.size());
}

TEST_CASE("dedup commutes with swap_direction") {
  auto vocab = letters_vocab();
  std::vector<std::pair<Sentence, Sentence>> raw;
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    Sentence s{{static_cast<TokenId>(4 + rng.next_below(3))}};
    Sentence t{{static_cast<TokenId>(4 + rng.next_below(3))}};
    raw.push_back({s, t});
  }
  auto c = corpus_of(raw, vocab);
  auto a = dedup(swap_direction(c)).corpus;
  auto b = swap_direction(dedup(c).corpus);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

// --- serialization ---------------------------------------------------------

TEST_CASE("corpus archive round-trip is bit-exact") {
  auto vocab = letters_vocab();
  std::vector<SentencePair> pairs;
  pairs.push_back({sent({4, 5, 6}), sent({7}), Provenance::original()});
  pairs.push_back({sent({8}), sent({9, 4}), Provenance::forward_synthetic(2, 1)});
  pairs.push_back({sent({5}), sent({6}), Provenance::backward_synthetic(0, 3)});
  ParallelCorpus c(pairs, vocab, vocab);

  std::string path = "test_corpus_roundtrip.corpus";
  save_corpus(c, path);
  auto loaded = load_corpus(path);
  REQUIRE(loaded.size() == c.size());
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(loaded[i] == c[i]);
  CHECK(*loaded.source_vocab() == *c.source_vocab());
  CHECK(corpus_hash(loaded) == corpus_hash(c));
  std::remove(path.c_str());
}

TEST_CASE("vocabulary file round-trip") {
  auto vocab = letters_vocab();
  std::ostringstream out;
  vocab->save(out);
  std::istringstream in(out.str());
  auto loaded = Vocabulary::load(in);
  CHECK(loaded == *vocab);
  CHECK(loaded.id_of("c") == vocab->id_of("c"));
  CHECK(loaded.token_of(kUnkId) == "<unk>");
}

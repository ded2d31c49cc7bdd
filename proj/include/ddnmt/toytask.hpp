// toytask.hpp -- synthetic translation tasks with an exact bijective oracle,
// standing in for full-size parallel corpora at desk scale.
#pragma once

#include <cstdint>

#include "ddnmt/corpus.hpp"

namespace ddnmt {

struct ToyTaskSpec {
  int vocab_size = 60;  // content tokens; reserved ids come on top
  int min_len = 3;
  int max_len = 12;
  int train_size = 2000;
  int valid_size = 200;
  int test_size = 200;
  std::uint64_t rule_seed = 17;

  void validate() const;
  bool operator==(const ToyTaskSpec&) const = default;
};

/// The task's deterministic mapping: a seeded bijective per-token
/// substitution composed with a local reordering that swaps each disjoint
/// adjacent position pair (0,1), (2,3), ... when both (substituted) token
/// ids are even. The reordering is an involution and the substitution a
/// bijection, so exact forward and backward translators exist.
class ToyOracle {
 public:
  ToyOracle(std::uint64_t rule_seed, int vocab_size);

  Sentence forward(const Sentence& source) const;
  Sentence backward(const Sentence& target) const;

  std::vector<Sentence> forward_corpus(const std::vector<Sentence>& sources) const;
  std::vector<Sentence> backward_corpus(const std::vector<Sentence>& targets) const;

 private:
  TokenId substitute(TokenId id) const;
  TokenId unsubstitute(TokenId id) const;
  static void reorder_in_place(Sentence& s);

  std::vector<TokenId> subst_;      // indexed by id - reserved
  std::vector<TokenId> inv_subst_;
};

struct ToyTask {
  ToyTaskSpec spec;
  VocabularyPtr vocab;  // shared by both sides
  ParallelCorpus train;
  ParallelCorpus valid;
  ParallelCorpus test;
  ToyOracle oracle;
};

// Sources are sampled uniformly and deterministically from rule_seed;
// train/valid/test source sets are disjoint; targets come from the oracle.
// Throws when the requested sizes exceed the number of distinct sentences.
ToyTask generate_toy_task(const ToyTaskSpec& spec);

}  // namespace ddnmt

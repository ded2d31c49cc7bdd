#include "ddnmt/toytask.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace ddnmt {

void ToyTaskSpec::validate() const {
  if (vocab_size < 8) throw std::invalid_argument("toy task: vocab_size must be >= 8");
  if (min_len < 1 || max_len < min_len)
    throw std::invalid_argument("toy task: invalid length range");
  if (train_size < 1 || valid_size < 1 || test_size < 1)
    throw std::invalid_argument("toy task: split sizes must be >= 1");
}

ToyOracle::ToyOracle(std::uint64_t rule_seed, int vocab_size) {
  subst_.resize(static_cast<std::size_t>(vocab_size));
  std::iota(subst_.begin(), subst_.end(), TokenId{0});
  Rng rng(mix_seed(rule_seed, 0x5b5u));
  rng.shuffle(subst_);
  inv_subst_.resize(subst_.size());
  for (std::size_t i = 0; i < subst_.size(); ++i) inv_subst_[subst_[i]] = static_cast<TokenId>(i);
}

TokenId ToyOracle::substitute(TokenId id) const {
  std::size_t index = id - kNumReservedTokens;
  if (index >= subst_.size()) throw std::out_of_range("toy oracle: token outside task vocabulary");
  return static_cast<TokenId>(subst_[index] + kNumReservedTokens);
}

TokenId ToyOracle::unsubstitute(TokenId id) const {
  std::size_t index = id - kNumReservedTokens;
  if (index >= inv_subst_.size())
    throw std::out_of_range("toy oracle: token outside task vocabulary");
  return static_cast<TokenId>(inv_subst_[index] + kNumReservedTokens);
}

void ToyOracle::reorder_in_place(Sentence& s) {
  for (std::size_t i = 0; i + 1 < s.tokens.size(); i += 2)
    if (s.tokens[i] % 2 == 0 && s.tokens[i + 1] % 2 == 0) std::swap(s.tokens[i], s.tokens[i + 1]);
}

Sentence ToyOracle::forward(const Sentence& source) const {
  Sentence out;
  out.tokens.reserve(source.size());
  for (TokenId id : source.tokens) out.tokens.push_back(substitute(id));
  reorder_in_place(out);
  return out;
}

Sentence ToyOracle::backward(const Sentence& target) const {
  Sentence mid = target;
  reorder_in_place(mid);  // involution
  for (TokenId& id : mid.tokens) id = unsubstitute(id);
  return mid;
}

std::vector<Sentence> ToyOracle::forward_corpus(const std::vector<Sentence>& sources) const {
  std::vector<Sentence> out;
  out.reserve(sources.size());
  for (const auto& s : sources) out.push_back(forward(s));
  return out;
}

std::vector<Sentence> ToyOracle::backward_corpus(const std::vector<Sentence>& targets) const {
  std::vector<Sentence> out;
  out.reserve(targets.size());
  for (const auto& t : targets) out.push_back(backward(t));
  return out;
}

ToyTask generate_toy_task(const ToyTaskSpec& spec) {
  spec.validate();

  // Distinct-sentence capacity, saturating well above any sane request.
  double capacity = 0.0;
  for (int len = spec.min_len; len <= spec.max_len; ++len)
    capacity += std::pow(static_cast<double>(spec.vocab_size), len);
  const std::int64_t requested =
      static_cast<std::int64_t>(spec.train_size) + spec.valid_size + spec.test_size;
  if (capacity < static_cast<double>(requested))
    throw std::invalid_argument(
        "toy task: impossible disjointness, requested " + std::to_string(requested) +
        " distinct sentences but only about " + std::to_string(capacity) + " exist");

  std::vector<std::string> tokens;
  int width = spec.vocab_size >= 100 ? 3 : 2;
  for (int i = 0; i < spec.vocab_size; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "w%0*d", width, i);
    tokens.emplace_back(buf);
  }
  auto vocab = std::make_shared<Vocabulary>(tokens);

  Rng rng(mix_seed(spec.rule_seed, 0xda7au));
  std::unordered_set<std::string> seen;
  std::vector<Sentence> sources;
  sources.reserve(static_cast<std::size_t>(requested));
  std::int64_t attempts = 0;
  const std::int64_t attempt_cap = requested * 1000 + 10000;
  while (static_cast<std::int64_t>(sources.size()) < requested) {
    if (++attempts > attempt_cap)
      throw std::runtime_error("toy task: sampling failed to find enough distinct sentences");
    int len = spec.min_len + static_cast<int>(rng.next_below(
                                 static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1)));
    Sentence s;
    s.tokens.reserve(static_cast<std::size_t>(len));
    std::string key;
    key.reserve(static_cast<std::size_t>(len) * 2);
    for (int t = 0; t < len; ++t) {
      TokenId id = static_cast<TokenId>(
          kNumReservedTokens + rng.next_below(static_cast<std::uint64_t>(spec.vocab_size)));
      s.tokens.push_back(id);
      key.push_back(static_cast<char>(id & 0xFF));
      key.push_back(static_cast<char>((id >> 8) & 0xFF));
    }
    if (seen.insert(std::move(key)).second) sources.push_back(std::move(s));
  }

  ToyOracle oracle(spec.rule_seed, spec.vocab_size);
  auto make_corpus = [&](std::int64_t begin, std::int64_t count) {
    std::vector<SentencePair> pairs;
    pairs.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = begin; i < begin + count; ++i) {
      SentencePair p;
      p.source = sources[static_cast<std::size_t>(i)];
      p.target = oracle.forward(p.source);
      p.provenance = Provenance::original();
      pairs.push_back(std::move(p));
    }
    return ParallelCorpus(std::move(pairs), vocab, vocab);
  };

  ToyTask task{spec,
               vocab,
               make_corpus(0, spec.train_size),
               make_corpus(spec.train_size, spec.valid_size),
               make_corpus(spec.train_size + spec.valid_size, spec.test_size),
               oracle};
  return task;
}

}  // namespace ddnmt

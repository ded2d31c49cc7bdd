// corpus.hpp -- parallel/monolingual corpora, vocabulary, BPE subword model,
// and the corpus-level operations the augmentation pipeline is built from
// (direction swap, union, exact dedup).
#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ddnmt/common.hpp"

namespace ddnmt {

using TokenId = std::uint32_t;

// Reserved vocabulary slots. BOS/EOS are model-facing only and never appear
// inside stored corpora.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr std::size_t kNumReservedTokens = 4;

/// Token <-> id bijection with the four reserved ids fixed at 0..3.
class Vocabulary {
 public:
  Vocabulary();
  // Content tokens get ids 4.. in the given order. Throws on duplicates or
  // reserved token strings.
  explicit Vocabulary(const std::vector<std::string>& content_tokens);

  std::size_t size() const { return tokens_.size(); }
  // Returns kUnkId for unknown tokens.
  TokenId id_of(const std::string& token) const;
  const std::string& token_of(TokenId id) const;
  bool contains(const std::string& token) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

  // One token per line, including the reserved four on the first lines.
  void save(std::ostream& out) const;
  static Vocabulary load(std::istream& in);
  void save_file(const std::string& path) const;
  static Vocabulary load_file(const std::string& path);

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

using VocabularyPtr = std::shared_ptr<const Vocabulary>;

struct Sentence {
  std::vector<TokenId> tokens;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
  bool operator==(const Sentence&) const = default;
  auto operator<=>(const Sentence&) const = default;
};

enum class ProvenanceKind : std::uint8_t {
  kOriginal = 0,
  kForwardSynthetic = 1,
  kBackwardSynthetic = 2,
};

const char* to_string(ProvenanceKind kind);

/// Identifies which model (if any) generated a pair and in which round.
struct Provenance {
  ProvenanceKind kind = ProvenanceKind::kOriginal;
  std::optional<int> teacher_index;
  std::optional<int> round;

  static Provenance original() { return {}; }
  static Provenance forward_synthetic(int teacher_index, int round);
  static Provenance backward_synthetic(int teacher_index, int round);

  bool operator==(const Provenance&) const = default;
};

struct SentencePair {
  Sentence source;
  Sentence target;
  Provenance provenance;

  bool operator==(const SentencePair&) const = default;
};

/// Ordered, provenance-tagged aligned pairs over a fixed vocabulary pair.
/// Immutable once constructed; construction validates token ids.
class ParallelCorpus {
 public:
  ParallelCorpus(std::vector<SentencePair> pairs, VocabularyPtr source_vocab,
                 VocabularyPtr target_vocab);

  const std::vector<SentencePair>& pairs() const { return pairs_; }
  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }
  const SentencePair& operator[](std::size_t i) const { return pairs_[i]; }

  const VocabularyPtr& source_vocab() const { return source_vocab_; }
  const VocabularyPtr& target_vocab() const { return target_vocab_; }

  std::vector<Sentence> sources() const;
  std::vector<Sentence> targets() const;

 private:
  std::vector<SentencePair> pairs_;
  VocabularyPtr source_vocab_;
  VocabularyPtr target_vocab_;
};

struct MonolingualCorpus {
  std::vector<Sentence> sentences;
  VocabularyPtr vocab;
};

/// Ordered list of BPE merges. Applying a model to text is deterministic;
/// merges are applied in learned order (earlier merge wins).
class BpeModel {
 public:
  BpeModel() = default;
  explicit BpeModel(std::vector<std::pair<std::string, std::string>> merges);

  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  std::size_t num_merges() const { return merges_.size(); }

  // Splits one whitespace-tokenized word into subword strings. Non-final
  // subwords of a word carry the "@@" continuation suffix.
  std::vector<std::string> split_word(const std::string& word) const;

  // One merge per line, two space-separated symbols.
  void save(std::ostream& out) const;
  static BpeModel load(std::istream& in);
  void save_file(const std::string& path) const;
  static BpeModel load_file(const std::string& path);

 private:
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, int> rank_;  // "a b" -> merge index
};

// ---------------------------------------------------------------------------
// Operations

// One pair per aligned line; provenance = original. Throws on line-count
// mismatch or an empty/whitespace-only line (message carries the 1-based
// line number). Tokens are whitespace-separated and looked up in the
// vocabularies; unknown tokens map to UNK.
ParallelCorpus load_parallel(const std::vector<std::string>& source_lines,
                             const std::vector<std::string>& target_lines,
                             VocabularyPtr source_vocab, VocabularyPtr target_vocab);

// Greedy most-frequent-pair merges over whitespace-tokenized words; ties are
// broken toward the lexicographically smallest (left, right) pair. Returns
// at most num_merges merges, fewer when no adjacent pair repeats.
BpeModel learn_bpe(const std::vector<std::string>& lines, int num_merges);

// Subword-encode / decode one line of text. decode(encode(x)) == x for any
// line free of the "@@" marker.
std::vector<std::string> bpe_encode(const BpeModel& model, const std::string& line);
std::string bpe_decode(const std::vector<std::string>& tokens);

// Every pair's sides exchanged (vocabularies too); provenance untouched.
// Involution: swap(swap(c)) == c.
ParallelCorpus swap_direction(const ParallelCorpus& corpus);

// Concatenation in argument order. All inputs must share the vocabulary pair.
ParallelCorpus union_corpora(const std::vector<ParallelCorpus>& corpora);

struct DedupResult {
  ParallelCorpus corpus;
  double duplicate_fraction = 0.0;  // removed / input size
};

// Removes every pair whose exact (source ids, target ids) already occurred
// earlier; first occurrence wins, so originals listed first always survive.
DedupResult dedup(const ParallelCorpus& corpus);

// ---------------------------------------------------------------------------
// Serialization: single-line JSON header + little-endian u32 token payload.

void save_corpus(const ParallelCorpus& corpus, const std::string& path);
ParallelCorpus load_corpus(const std::string& path);

// Content fingerprint (vocab + ids + provenance), stable across processes.
std::uint64_t corpus_hash(const ParallelCorpus& corpus);

// Reads a whole text file into lines (no trailing-newline artifacts).
std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, const std::vector<std::string>& lines);

}  // namespace ddnmt

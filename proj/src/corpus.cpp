#include "ddnmt/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

namespace ddnmt {

using nlohmann::json;

namespace {

const char* kReservedTokens[kNumReservedTokens] = {"<pad>", "<bos>", "<eos>", "<unk>"};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\v' || c == '\f'; }

std::vector<std::string> split_whitespace(const std::string& line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    std::size_t start = i;
    while (i < line.size() && !is_space(line[i])) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

// Splits a word into UTF-8 codepoints; invalid bytes fall back to singletons.
std::vector<std::string> utf8_chars(const std::string& word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    unsigned char c = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if ((c & 0x80u) == 0)
      len = 1;
    else if ((c & 0xE0u) == 0xC0u)
      len = 2;
    else if ((c & 0xF0u) == 0xE0u)
      len = 3;
    else if ((c & 0xF8u) == 0xF0u)
      len = 4;
    if (i + len > word.size()) len = 1;
    out.push_back(word.substr(i, len));
    i += len;
  }
  return out;
}

void validate_sentence(const Sentence& s, const Vocabulary& vocab, const char* side,
                       std::size_t pair_index) {
  if (s.empty())
    throw std::invalid_argument("corpus pair " + std::to_string(pair_index) + ": empty " + side +
                                " side");
  for (TokenId id : s.tokens) {
    if (id >= vocab.size())
      throw std::invalid_argument("corpus pair " + std::to_string(pair_index) + ": token id " +
                                  std::to_string(id) + " out of range on " + side + " side");
    if (id == kPadId || id == kBosId || id == kEosId)
      throw std::invalid_argument("corpus pair " + std::to_string(pair_index) +
                                  ": reserved id " + std::to_string(id) + " stored on " + side +
                                  " side");
  }
}

void validate_provenance(const Provenance& p, std::size_t pair_index) {
  bool synthetic = p.kind != ProvenanceKind::kOriginal;
  if (synthetic != (p.teacher_index.has_value() && p.round.has_value()))
    throw std::invalid_argument("corpus pair " + std::to_string(pair_index) +
                                ": provenance teacher/round must be present iff synthetic");
}

void append_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFFu));
  out.push_back(static_cast<char>((v >> 8) & 0xFFu));
  out.push_back(static_cast<char>((v >> 16) & 0xFFu));
  out.push_back(static_cast<char>((v >> 24) & 0xFFu));
}

std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

const char* to_string(ProvenanceKind kind) {
  switch (kind) {
    case ProvenanceKind::kOriginal: return "original";
    case ProvenanceKind::kForwardSynthetic: return "forward-synthetic";
    case ProvenanceKind::kBackwardSynthetic: return "backward-synthetic";
  }
  return "?";
}

Provenance Provenance::forward_synthetic(int teacher_index, int round) {
  Provenance p;
  p.kind = ProvenanceKind::kForwardSynthetic;
  p.teacher_index = teacher_index;
  p.round = round;
  return p;
}

Provenance Provenance::backward_synthetic(int teacher_index, int round) {
  Provenance p;
  p.kind = ProvenanceKind::kBackwardSynthetic;
  p.teacher_index = teacher_index;
  p.round = round;
  return p;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  for (const char* t : kReservedTokens) {
    index_.emplace(t, static_cast<TokenId>(tokens_.size()));
    tokens_.emplace_back(t);
  }
}

Vocabulary::Vocabulary(const std::vector<std::string>& content_tokens) : Vocabulary() {
  for (const auto& tok : content_tokens) {
    if (tok.empty()) throw std::invalid_argument("vocabulary: empty token string");
    if (index_.count(tok))
      throw std::invalid_argument("vocabulary: duplicate or reserved token '" + tok + "'");
    index_.emplace(tok, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(tok);
  }
}

TokenId Vocabulary::id_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token_of(TokenId id) const {
  if (id >= tokens_.size()) throw std::out_of_range("vocabulary: id out of range");
  return tokens_[id];
}

bool Vocabulary::contains(const std::string& token) const { return index_.count(token) != 0; }

void Vocabulary::save(std::ostream& out) const {
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(std::istream& in) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  if (lines.size() < kNumReservedTokens)
    throw std::runtime_error("vocabulary file: missing reserved tokens");
  for (std::size_t i = 0; i < kNumReservedTokens; ++i)
    if (lines[i] != kReservedTokens[i])
      throw std::runtime_error("vocabulary file: reserved token mismatch at line " +
                               std::to_string(i + 1));
  return Vocabulary(std::vector<std::string>(lines.begin() + kNumReservedTokens, lines.end()));
}

void Vocabulary::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  save(out);
}

Vocabulary Vocabulary::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  return load(in);
}

// ---------------------------------------------------------------------------
// ParallelCorpus

ParallelCorpus::ParallelCorpus(std::vector<SentencePair> pairs, VocabularyPtr source_vocab,
                               VocabularyPtr target_vocab)
    : pairs_(std::move(pairs)),
      source_vocab_(std::move(source_vocab)),
      target_vocab_(std::move(target_vocab)) {
  if (!source_vocab_ || !target_vocab_)
    throw std::invalid_argument("corpus: null vocabulary reference");
  for (std::size_t i = 0; i < pairs_.size(); ++i) {
    validate_sentence(pairs_[i].source, *source_vocab_, "source", i);
    validate_sentence(pairs_[i].target, *target_vocab_, "target", i);
    validate_provenance(pairs_[i].provenance, i);
  }
}

std::vector<Sentence> ParallelCorpus::sources() const {
  std::vector<Sentence> out;
  out.reserve(pairs_.size());
  for (const auto& p : pairs_) out.push_back(p.source);
  return out;
}

std::vector<Sentence> ParallelCorpus::targets() const {
  std::vector<Sentence> out;
  out.reserve(pairs_.size());
  for (const auto& p : pairs_) out.push_back(p.target);
  return out;
}

// ---------------------------------------------------------------------------
// BPE

BpeModel::BpeModel(std::vector<std::pair<std::string, std::string>> merges)
    : merges_(std::move(merges)) {
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    std::string key = merges_[i].first + " " + merges_[i].second;
    if (!rank_.emplace(key, static_cast<int>(i)).second)
      throw std::invalid_argument("bpe model: duplicate merge '" + key + "'");
  }
}

std::vector<std::string> BpeModel::split_word(const std::string& word) const {
  std::vector<std::string> symbols = utf8_chars(word);
  if (symbols.empty()) return symbols;
  while (symbols.size() > 1) {
    // Lowest-rank applicable merge wins each iteration.
    int best_rank = std::numeric_limits<int>::max();
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = rank_.find(symbols[i] + " " + symbols[i + 1]);
      if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == std::numeric_limits<int>::max()) break;
    const auto& merge = merges_[static_cast<std::size_t>(best_rank)];
    std::vector<std::string> next;
    next.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == merge.first && symbols[i + 1] == merge.second) {
        next.push_back(merge.first + merge.second);
        i += 2;
      } else {
        next.push_back(symbols[i]);
        ++i;
      }
    }
    symbols = std::move(next);
  }
  return symbols;
}

void BpeModel::save(std::ostream& out) const {
  for (const auto& m : merges_) out << m.first << ' ' << m.second << '\n';
}

BpeModel BpeModel::load(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> merges;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto parts = split_whitespace(line);
    if (parts.size() != 2)
      throw std::runtime_error("bpe model: malformed merge line '" + line + "'");
    merges.emplace_back(parts[0], parts[1]);
  }
  return BpeModel(std::move(merges));
}

void BpeModel::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  save(out);
}

BpeModel BpeModel::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  return load(in);
}

BpeModel learn_bpe(const std::vector<std::string>& lines, int num_merges) {
  if (num_merges < 0) throw std::invalid_argument("learn_bpe: negative merge count");
  std::map<std::string, std::int64_t> word_counts;
  for (const auto& line : lines)
    for (auto& w : split_whitespace(line)) ++word_counts[w];
  if (word_counts.empty()) throw std::invalid_argument("learn_bpe: empty corpus");

  struct WordEntry {
    std::vector<std::string> symbols;
    std::int64_t count;
  };
  std::vector<WordEntry> words;
  words.reserve(word_counts.size());
  for (const auto& [w, c] : word_counts) words.push_back({utf8_chars(w), c});

  std::vector<std::pair<std::string, std::string>> merges;
  for (int step = 0; step < num_merges; ++step) {
    std::map<std::pair<std::string, std::string>, std::int64_t> pair_counts;
    for (const auto& we : words)
      for (std::size_t i = 0; i + 1 < we.symbols.size(); ++i)
        pair_counts[{we.symbols[i], we.symbols[i + 1]}] += we.count;

    // std::map iterates keys in lexicographic order, so scanning with a
    // strict > keeps the lexicographically smallest pair among ties.
    std::int64_t best_count = 0;
    std::pair<std::string, std::string> best;
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count) {
        best_count = count;
        best = pair;
      }
    }
    if (best_count < 2) break;  // nothing repeats

    merges.push_back(best);
    for (auto& we : words) {
      std::vector<std::string> next;
      next.reserve(we.symbols.size());
      for (std::size_t i = 0; i < we.symbols.size();) {
        if (i + 1 < we.symbols.size() && we.symbols[i] == best.first &&
            we.symbols[i + 1] == best.second) {
          next.push_back(best.first + best.second);
          i += 2;
        } else {
          next.push_back(we.symbols[i]);
          ++i;
        }
      }
      we.symbols = std::move(next);
    }
  }
  return BpeModel(std::move(merges));
}

std::vector<std::string> bpe_encode(const BpeModel& model, const std::string& line) {
  std::vector<std::string> out;
  for (const auto& word : split_whitespace(line)) {
    auto pieces = model.split_word(word);
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      if (i + 1 < pieces.size())
        out.push_back(pieces[i] + "@@");
      else
        out.push_back(pieces[i]);
    }
  }
  return out;
}

std::string bpe_decode(const std::vector<std::string>& tokens) {
  std::string line;
  bool glue = false;
  for (const auto& tok : tokens) {
    std::string piece = tok;
    bool continues = piece.size() >= 2 && piece.compare(piece.size() - 2, 2, "@@") == 0;
    if (continues) piece.resize(piece.size() - 2);
    if (!glue && !line.empty()) line += ' ';
    line += piece;
    glue = continues;
  }
  return line;
}

// ---------------------------------------------------------------------------
// Corpus operations

ParallelCorpus load_parallel(const std::vector<std::string>& source_lines,
                             const std::vector<std::string>& target_lines,
                             VocabularyPtr source_vocab, VocabularyPtr target_vocab) {
  if (source_lines.size() != target_lines.size())
    throw std::invalid_argument("line-count mismatch: " + std::to_string(source_lines.size()) +
                                " source vs " + std::to_string(target_lines.size()) + " target");
  auto to_sentence = [](const std::string& line, const Vocabulary& vocab, std::size_t lineno,
                        const char* side) {
    auto toks = split_whitespace(line);
    if (toks.empty())
      throw std::invalid_argument("empty line " + std::to_string(lineno) + " on " + side +
                                  " side");
    Sentence s;
    s.tokens.reserve(toks.size());
    for (const auto& t : toks) s.tokens.push_back(vocab.id_of(t));
    return s;
  };
  std::vector<SentencePair> pairs;
  pairs.reserve(source_lines.size());
  for (std::size_t i = 0; i < source_lines.size(); ++i) {
    SentencePair p;
    p.source = to_sentence(source_lines[i], *source_vocab, i + 1, "source");
    p.target = to_sentence(target_lines[i], *target_vocab, i + 1, "target");
    p.provenance = Provenance::original();
    pairs.push_back(std::move(p));
  }
  return ParallelCorpus(std::move(pairs), std::move(source_vocab), std::move(target_vocab));
}

ParallelCorpus swap_direction(const ParallelCorpus& corpus) {
  std::vector<SentencePair> pairs;
  pairs.reserve(corpus.size());
  for (const auto& p : corpus.pairs()) pairs.push_back({p.target, p.source, p.provenance});
  return ParallelCorpus(std::move(pairs), corpus.target_vocab(), corpus.source_vocab());
}

ParallelCorpus union_corpora(const std::vector<ParallelCorpus>& corpora) {
  if (corpora.empty()) throw std::invalid_argument("union_corpora: no inputs");
  const auto& first = corpora.front();
  std::size_t total = 0;
  for (const auto& c : corpora) {
    if (!(*c.source_vocab() == *first.source_vocab()) ||
        !(*c.target_vocab() == *first.target_vocab()))
      throw std::invalid_argument("union_corpora: vocabulary mismatch");
    total += c.size();
  }
  std::vector<SentencePair> pairs;
  pairs.reserve(total);
  for (const auto& c : corpora)
    pairs.insert(pairs.end(), c.pairs().begin(), c.pairs().end());
  return ParallelCorpus(std::move(pairs), first.source_vocab(), first.target_vocab());
}

DedupResult dedup(const ParallelCorpus& corpus) {
  std::unordered_set<std::string> seen;
  seen.reserve(corpus.size() * 2);
  std::vector<SentencePair> kept;
  kept.reserve(corpus.size());
  for (const auto& p : corpus.pairs()) {
    std::string key;
    key.reserve((p.source.size() + p.target.size() + 1) * 4);
    append_u32_le(key, static_cast<std::uint32_t>(p.source.size()));
    for (TokenId id : p.source.tokens) append_u32_le(key, id);
    for (TokenId id : p.target.tokens) append_u32_le(key, id);
    if (seen.insert(std::move(key)).second) kept.push_back(p);
  }
  double fraction = corpus.empty() ? 0.0
                                   : static_cast<double>(corpus.size() - kept.size()) /
                                         static_cast<double>(corpus.size());
  return {ParallelCorpus(std::move(kept), corpus.source_vocab(), corpus.target_vocab()),
          fraction};
}

// ---------------------------------------------------------------------------
// Archive

void save_corpus(const ParallelCorpus& corpus, const std::string& path) {
  json header;
  header["format"] = "ddnmt-corpus";
  header["version"] = 1;
  header["pairs"] = corpus.size();
  header["source_vocab"] = corpus.source_vocab()->tokens();
  header["target_vocab"] = corpus.target_vocab()->tokens();
  std::vector<int> kinds, teachers, rounds, src_len, tgt_len;
  kinds.reserve(corpus.size());
  std::size_t total_ids = 0;
  for (const auto& p : corpus.pairs()) {
    kinds.push_back(static_cast<int>(p.provenance.kind));
    teachers.push_back(p.provenance.teacher_index.value_or(-1));
    rounds.push_back(p.provenance.round.value_or(-1));
    src_len.push_back(static_cast<int>(p.source.size()));
    tgt_len.push_back(static_cast<int>(p.target.size()));
    total_ids += p.source.size() + p.target.size();
  }
  header["prov_kind"] = kinds;
  header["prov_teacher"] = teachers;
  header["prov_round"] = rounds;
  header["source_lengths"] = src_len;
  header["target_lengths"] = tgt_len;
  header["total_ids"] = total_ids;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << header.dump() << '\n';
  std::string payload;
  payload.reserve(total_ids * 4);
  for (const auto& p : corpus.pairs()) {
    for (TokenId id : p.source.tokens) append_u32_le(payload, id);
    for (TokenId id : p.target.tokens) append_u32_le(payload, id);
  }
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

ParallelCorpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string header_line;
  if (!std::getline(in, header_line)) throw std::runtime_error("corpus archive: missing header");
  json header = json::parse(header_line);
  if (header.value("format", "") != std::string("ddnmt-corpus"))
    throw std::runtime_error("corpus archive: bad magic");
  auto src_vocab = std::make_shared<Vocabulary>(Vocabulary(
      [&] {
        std::vector<std::string> toks = header.at("source_vocab").get<std::vector<std::string>>();
        return std::vector<std::string>(toks.begin() + kNumReservedTokens, toks.end());
      }()));
  auto tgt_vocab = std::make_shared<Vocabulary>(Vocabulary(
      [&] {
        std::vector<std::string> toks = header.at("target_vocab").get<std::vector<std::string>>();
        return std::vector<std::string>(toks.begin() + kNumReservedTokens, toks.end());
      }()));
  std::size_t n = header.at("pairs").get<std::size_t>();
  auto kinds = header.at("prov_kind").get<std::vector<int>>();
  auto teachers = header.at("prov_teacher").get<std::vector<int>>();
  auto rounds = header.at("prov_round").get<std::vector<int>>();
  auto src_len = header.at("source_lengths").get<std::vector<int>>();
  auto tgt_len = header.at("target_lengths").get<std::vector<int>>();
  if (kinds.size() != n || teachers.size() != n || rounds.size() != n || src_len.size() != n ||
      tgt_len.size() != n)
    throw std::runtime_error("corpus archive: inconsistent header tables");

  std::size_t total_ids = header.at("total_ids").get<std::size_t>();
  std::string payload(total_ids * 4, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(in.gcount()) != payload.size())
    throw std::runtime_error("corpus archive: truncated payload");

  const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());
  std::size_t pos = 0;
  auto read_ids = [&](int count) {
    Sentence s;
    s.tokens.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      s.tokens.push_back(read_u32_le(bytes + pos));
      pos += 4;
    }
    return s;
  };
  std::vector<SentencePair> pairs;
  pairs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SentencePair p;
    p.source = read_ids(src_len[i]);
    p.target = read_ids(tgt_len[i]);
    p.provenance.kind = static_cast<ProvenanceKind>(kinds[i]);
    if (p.provenance.kind != ProvenanceKind::kOriginal) {
      p.provenance.teacher_index = teachers[i];
      p.provenance.round = rounds[i];
    }
    pairs.push_back(std::move(p));
  }
  return ParallelCorpus(std::move(pairs), std::move(src_vocab), std::move(tgt_vocab));
}

std::uint64_t corpus_hash(const ParallelCorpus& corpus) {
  Fnv1a h;
  for (const auto& t : corpus.source_vocab()->tokens()) {
    h.update(t);
    h.update("\x01", 1);
  }
  h.update("\x02", 1);
  for (const auto& t : corpus.target_vocab()->tokens()) {
    h.update(t);
    h.update("\x01", 1);
  }
  for (const auto& p : corpus.pairs()) {
    h.update_value<std::uint32_t>(static_cast<std::uint32_t>(p.source.size()));
    for (TokenId id : p.source.tokens) h.update_value(id);
    h.update_value<std::uint32_t>(static_cast<std::uint32_t>(p.target.size()));
    for (TokenId id : p.target.tokens) h.update_value(id);
    h.update_value<int>(static_cast<int>(p.provenance.kind));
    h.update_value<int>(p.provenance.teacher_index.value_or(-1));
    h.update_value<int>(p.provenance.round.value_or(-1));
  }
  return h.digest();
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace ddnmt

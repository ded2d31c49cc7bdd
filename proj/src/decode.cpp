#include "ddnmt/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>

#include "ddnmt/transformer.hpp"

namespace ddnmt {

namespace {

double length_penalty_factor(int len_with_eos, double alpha) {
  return std::pow((5.0 + static_cast<double>(len_with_eos)) / 6.0, alpha);
}

struct LiveHyp {
  std::vector<TokenId> tokens;
  double logp = 0.0;
  std::unique_ptr<DecodeStepper::State> state;
};

struct FinishedHyp {
  std::vector<TokenId> tokens;
  double score = 0.0;  // length-normalized
};

bool lex_less(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

Sentence beam_core(const DecodeStepper& stepper, const Sentence& source, int beam_size,
                   double alpha, int max_output) {
  if (source.empty()) throw std::invalid_argument("decode: empty source");
  if (max_output < 1) max_output = 1;
  const std::size_t vocab = stepper.vocab_size();

  std::vector<LiveHyp> live;
  {
    LiveHyp root;
    root.state = stepper.begin(source);
    live.push_back(std::move(root));
  }
  std::vector<FinishedHyp> finished;

  struct Candidate {
    std::size_t parent;
    TokenId token;
    double logp;
  };

  auto candidate_tokens = [&](const Candidate& c, const std::vector<LiveHyp>& pool) {
    std::vector<TokenId> toks = pool[c.parent].tokens;
    toks.push_back(c.token);
    return toks;
  };

  for (int step = 1; step <= max_output && !live.empty(); ++step) {
    std::vector<Candidate> candidates;
    candidates.reserve(live.size() * vocab);
    for (std::size_t i = 0; i < live.size(); ++i) {
      TokenDistribution dist = stepper.next(*live[i].state);
      for (TokenId v = 0; v < vocab; ++v) {
        if (v == kPadId || v == kBosId) continue;
        if (v == kEosId && step == 1) continue;  // empty outputs are forbidden
        candidates.push_back({i, v, live[i].logp + std::log(dist[v])});
      }
    }
    // All candidates share the same length this step, so raw cumulative
    // log-probability ranks them exactly as the normalized score would.
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](const Candidate& a, const Candidate& b) {
                       if (a.logp != b.logp) return a.logp > b.logp;
                       return lex_less(candidate_tokens(a, live), candidate_tokens(b, live));
                     });
    if (static_cast<int>(candidates.size()) > beam_size) candidates.resize(beam_size);

    std::vector<LiveHyp> next_live;
    for (const auto& c : candidates) {
      if (c.token == kEosId) {
        FinishedHyp f;
        f.tokens = live[c.parent].tokens;
        int len = static_cast<int>(f.tokens.size()) + 1;  // EOS counts
        f.score = c.logp / length_penalty_factor(len, alpha);
        finished.push_back(std::move(f));
      } else {
        LiveHyp h;
        h.tokens = candidate_tokens(c, live);
        h.logp = c.logp;
        h.state = live[c.parent].state->clone();
        stepper.advance(*h.state, c.token);
        next_live.push_back(std::move(h));
      }
    }
    live = std::move(next_live);

    // Drop live hypotheses whose best reachable normalized score cannot beat
    // the best finished one. The bound divides by the largest reachable
    // penalty factor; equality keeps the hypothesis alive for tie-breaks.
    if (!finished.empty() && !live.empty()) {
      double best = -std::numeric_limits<double>::infinity();
      for (const auto& f : finished) best = std::max(best, f.score);
      std::vector<LiveHyp> survivors;
      for (auto& h : live) {
        int min_len = static_cast<int>(h.tokens.size()) + 2;  // finishing next step
        int max_len = max_output + 1;
        double lp = std::max(length_penalty_factor(min_len, alpha),
                             length_penalty_factor(max_len, alpha));
        double bound = h.logp / lp;  // logp <= 0 always
        if (bound >= best) survivors.push_back(std::move(h));
      }
      live = std::move(survivors);
    }
  }

  // Length cap reached: force-finish what is still alive.
  for (auto& h : live) {
    TokenDistribution dist = stepper.next(*h.state);
    double logp = h.logp + std::log(dist[kEosId]);
    int len = static_cast<int>(h.tokens.size()) + 1;
    finished.push_back({std::move(h.tokens), logp / length_penalty_factor(len, alpha)});
  }

  if (finished.empty()) throw std::logic_error("decode: no finished hypothesis");
  const FinishedHyp* best = &finished.front();
  for (const auto& f : finished) {
    if (f.score > best->score || (f.score == best->score && lex_less(f.tokens, best->tokens)))
      best = &f;
  }
  return Sentence{best->tokens};
}

int output_cap(const DecodeConfig& cfg, const Sentence& source) {
  return static_cast<int>(cfg.max_len_factor * static_cast<double>(source.size())) + 8;
}

TokenDistribution softmax_logits(const std::vector<double>& logits) {
  TokenDistribution dist;
  dist.probabilities.resize(logits.size());
  double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double e = std::exp(logits[i] - mx);
    dist.probabilities[i] = e;
    z += e;
  }
  for (auto& p : dist.probabilities) p /= z;
  return dist;
}

struct ModelState : DecodeStepper::State {
  tfm::IncrementalStateT<float> inc;
  std::unique_ptr<DecodeStepper::State> clone() const override {
    return std::make_unique<ModelState>(*this);
  }
};

struct EnsembleState : DecodeStepper::State {
  std::vector<std::unique_ptr<DecodeStepper::State>> members;
  std::unique_ptr<DecodeStepper::State> clone() const override {
    auto out = std::make_unique<EnsembleState>();
    out->members.reserve(members.size());
    for (const auto& m : members) out->members.push_back(m->clone());
    return out;
  }
};

}  // namespace

// ---------------------------------------------------------------------------

ModelStepper::ModelStepper(ModelParametersPtr params) : params_(std::move(params)) {
  if (!params_) throw std::invalid_argument("model stepper: null parameters");
}

std::unique_ptr<DecodeStepper::State> ModelStepper::begin(const Sentence& source) const {
  auto state = std::make_unique<ModelState>();
  state->inc = tfm::begin_decode(*params_, tfm::make_decode_session(*params_, source));
  return state;
}

TokenDistribution ModelStepper::next(const State& state) const {
  const auto& ms = static_cast<const ModelState&>(state);
  return softmax_logits(ms.inc.next_logits);
}

void ModelStepper::advance(State& state, TokenId token) const {
  auto& ms = static_cast<ModelState&>(state);
  tfm::advance_state(*params_, ms.inc, token);
}

std::size_t ModelStepper::vocab_size() const {
  return static_cast<std::size_t>(params_->config.target_vocab_size);
}

EnsembleStepper::EnsembleStepper(std::vector<std::shared_ptr<const DecodeStepper>> members)
    : members_(std::move(members)) {
  if (members_.empty()) throw std::invalid_argument("ensemble: no members");
  for (const auto& m : members_) {
    if (!m) throw std::invalid_argument("ensemble: null member");
    if (m->vocab_size() != members_.front()->vocab_size())
      throw std::invalid_argument("ensemble: vocabulary mismatch");
  }
}

std::unique_ptr<DecodeStepper::State> EnsembleStepper::begin(const Sentence& source) const {
  auto state = std::make_unique<EnsembleState>();
  state->members.reserve(members_.size());
  for (const auto& m : members_) state->members.push_back(m->begin(source));
  return state;
}

TokenDistribution EnsembleStepper::next(const State& state) const {
  const auto& es = static_cast<const EnsembleState&>(state);
  TokenDistribution mean;
  mean.probabilities.assign(vocab_size(), 0.0);
  for (std::size_t i = 0; i < members_.size(); ++i) {
    TokenDistribution d = members_[i]->next(*es.members[i]);
    for (std::size_t v = 0; v < mean.probabilities.size(); ++v)
      mean.probabilities[v] += d.probabilities[v];
  }
  const double inv = 1.0 / static_cast<double>(members_.size());
  for (auto& p : mean.probabilities) p *= inv;
  return mean;
}

void EnsembleStepper::advance(State& state, TokenId token) const {
  auto& es = static_cast<EnsembleState&>(state);
  for (std::size_t i = 0; i < members_.size(); ++i) members_[i]->advance(*es.members[i], token);
}

std::size_t EnsembleStepper::vocab_size() const { return members_.front()->vocab_size(); }

// ---------------------------------------------------------------------------

Sentence beam_search(const DecodeStepper& stepper, const Sentence& source, int beam_size,
                     double length_penalty, int max_output) {
  if (beam_size < 1) throw std::invalid_argument("beam_search: beam_size must be >= 1");
  return beam_core(stepper, source, beam_size, length_penalty, max_output);
}

Sentence beam_translate(const DecodeStepper& stepper, const Sentence& source,
                        const DecodeConfig& cfg) {
  cfg.validate();
  return beam_core(stepper, source, cfg.beam_size, cfg.length_penalty, output_cap(cfg, source));
}

Sentence beam_translate(const ModelParameters& params, const Sentence& source,
                        const DecodeConfig& cfg) {
  ModelStepper stepper(std::make_shared<const ModelParameters>(params));
  return beam_translate(stepper, source, cfg);
}

Sentence greedy_translate(const DecodeStepper& stepper, const Sentence& source, int max_output) {
  return beam_core(stepper, source, 1, 0.0, max_output);
}

Sentence greedy_translate(const ModelParameters& params, const Sentence& source, int max_output) {
  ModelStepper stepper(std::make_shared<const ModelParameters>(params));
  return greedy_translate(stepper, source, max_output);
}

Sentence ensemble_translate(const std::vector<ModelParametersPtr>& models, const Sentence& source,
                            const DecodeConfig& cfg) {
  if (models.empty()) throw std::invalid_argument("ensemble_translate: no models");
  std::vector<std::shared_ptr<const DecodeStepper>> steppers;
  steppers.reserve(models.size());
  for (const auto& m : models) steppers.push_back(std::make_shared<ModelStepper>(m));
  EnsembleStepper ensemble(std::move(steppers));
  return beam_translate(ensemble, source, cfg);
}

std::vector<Sentence> translate_corpus(const DecodeStepper& stepper,
                                       const std::vector<Sentence>& sources,
                                       const DecodeConfig& cfg, int threads) {
  cfg.validate();
  std::vector<Sentence> out(sources.size());
  std::vector<std::pair<std::size_t, std::string>> errors;
  std::mutex errors_mutex;
  parallel_for(sources.size(), threads, [&](std::size_t i) {
    try {
      out[i] = beam_core(stepper, sources[i], cfg.beam_size, cfg.length_penalty,
                         output_cap(cfg, sources[i]));
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(errors_mutex);
      errors.emplace_back(i, e.what());
    }
  });
  if (!errors.empty()) {
    std::sort(errors.begin(), errors.end());
    std::string msg = "translate_corpus: " + std::to_string(errors.size()) + " failure(s):";
    for (std::size_t i = 0; i < errors.size() && i < 5; ++i)
      msg += " [sentence " + std::to_string(errors[i].first) + "] " + errors[i].second + ";";
    throw std::runtime_error(msg);
  }
  return out;
}

std::vector<Sentence> translate_corpus(const ModelParameters& params,
                                       const std::vector<Sentence>& sources,
                                       const DecodeConfig& cfg, int threads) {
  ModelStepper stepper(std::make_shared<const ModelParameters>(params));
  return translate_corpus(stepper, sources, cfg, threads);
}

}  // namespace ddnmt

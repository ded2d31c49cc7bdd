// decode.hpp -- greedy, beam and ensemble decoding over a stepper interface
// so table-driven stub models and real transformers share one search.
#pragma once

#include <memory>
#include <vector>

#include "ddnmt/model.hpp"

namespace ddnmt {

struct DecodeConfig {
  int beam_size = 5;
  double length_penalty = 0.6;
  double max_len_factor = 2.0;  // output cap = factor * source length + 8

  void validate() const {
    if (beam_size < 1) throw std::invalid_argument("decode config: beam_size must be >= 1");
    if (max_len_factor <= 0.0)
      throw std::invalid_argument("decode config: max_len_factor must be positive");
  }
  bool operator==(const DecodeConfig&) const = default;
};

/// Incremental next-token model. begin() yields the state after consuming
/// BOS; next() scores the upcoming token; advance() consumes one token.
/// States are value-cloneable so beam search can branch hypotheses.
class DecodeStepper {
 public:
  struct State {
    virtual ~State() = default;
    virtual std::unique_ptr<State> clone() const = 0;
  };

  virtual ~DecodeStepper() = default;
  virtual std::unique_ptr<State> begin(const Sentence& source) const = 0;
  virtual TokenDistribution next(const State& state) const = 0;
  virtual void advance(State& state, TokenId token) const = 0;
  virtual std::size_t vocab_size() const = 0;
};

/// Steps a single transformer.
class ModelStepper : public DecodeStepper {
 public:
  explicit ModelStepper(ModelParametersPtr params);
  std::unique_ptr<State> begin(const Sentence& source) const override;
  TokenDistribution next(const State& state) const override;
  void advance(State& state, TokenId token) const override;
  std::size_t vocab_size() const override;

 private:
  ModelParametersPtr params_;
};

/// Averages member distributions at every step (probability space).
class EnsembleStepper : public DecodeStepper {
 public:
  explicit EnsembleStepper(std::vector<std::shared_ptr<const DecodeStepper>> members);
  std::unique_ptr<State> begin(const Sentence& source) const override;
  TokenDistribution next(const State& state) const override;
  void advance(State& state, TokenId token) const override;
  std::size_t vocab_size() const override;

 private:
  std::vector<std::shared_ptr<const DecodeStepper>> members_;
};

// Length-normalized beam search: finished hypotheses are ranked by
// logP / ((5+len)/6)^length_penalty with len counting emitted tokens plus
// EOS; ties break toward the lexicographically smaller token sequence.
// Empty outputs are forbidden (EOS is not a candidate at the first step);
// hypotheses hitting the length cap are force-finished with EOS. The
// returned sentence excludes BOS/EOS.
Sentence beam_search(const DecodeStepper& stepper, const Sentence& source, int beam_size,
                     double length_penalty, int max_output);

// beam_search with the cap derived from the config: max_len_factor * source
// length + 8.
Sentence beam_translate(const DecodeStepper& stepper, const Sentence& source,
                        const DecodeConfig& cfg);
Sentence beam_translate(const ModelParameters& params, const Sentence& source,
                        const DecodeConfig& cfg);

// beam_size = 1 with an explicit output cap.
Sentence greedy_translate(const DecodeStepper& stepper, const Sentence& source, int max_output);
Sentence greedy_translate(const ModelParameters& params, const Sentence& source, int max_output);

Sentence ensemble_translate(const std::vector<ModelParametersPtr>& models, const Sentence& source,
                            const DecodeConfig& cfg);

// Elementwise decode, order preserved; per-sentence failures are collected
// and reported together with their indices.
std::vector<Sentence> translate_corpus(const DecodeStepper& stepper,
                                       const std::vector<Sentence>& sources,
                                       const DecodeConfig& cfg, int threads = 1);
std::vector<Sentence> translate_corpus(const ModelParameters& params,
                                       const std::vector<Sentence>& sources,
                                       const DecodeConfig& cfg, int threads = 1);

}  // namespace ddnmt

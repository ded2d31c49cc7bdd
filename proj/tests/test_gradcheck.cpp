#include <doctest.h>

#include <cmath>

#include "ddnmt/model.hpp"
#include "ddnmt/transformer.hpp"

using namespace ddnmt;

namespace {

using DMat = MatT<double>;
using DParams = ParametersT<double>;

TokenBatch small_batch() {
  // Mixed lengths so padding and masking paths are exercised.
  static std::vector<SentencePair> pairs = {
      {Sentence{{4, 5, 6}}, Sentence{{7, 8, 9, 4}}, Provenance::original()},
      {Sentence{{10, 11, 12, 13, 14}}, Sentence{{5, 6}}, Provenance::original()},
      {Sentence{{6, 4}}, Sentence{{14, 13, 12}}, Provenance::original()},
  };
  std::vector<const SentencePair*> ptrs;
  for (auto& p : pairs) ptrs.push_back(&p);
  return make_batch(ptrs, 32);
}

double loss_only(const DParams& p, const TokenBatch& batch, double smoothing) {
  tfm::ForwardCache<double> cache;
  tfm::DropoutPlan no_drop;
  tfm::Net<double>::encode(p, batch, cache, no_drop);
  tfm::Net<double>::decode_forward(p, batch, cache, no_drop);
  DMat lg = tfm::Net<double>::logits(p, cache.dec_out);
  return tfm::Net<double>::loss_and_dlogits(lg, batch, smoothing, nullptr);
}

void run_gradient_check(bool tied_output) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.model_dim = 16;
  cfg.ffn_dim = 32;
  cfg.num_heads = 4;
  cfg.dropout = 0.0f;
  cfg.share_target_embeddings_with_output = tied_output;
  cfg.max_positions = 32;
  cfg.source_vocab_size = 15;
  cfg.target_vocab_size = 15;

  DParams params = init_parameters_t<double>(cfg, 42);
  TokenBatch batch = small_batch();
  const double smoothing = 0.1;

  DParams grads = params.zeros_like();
  double base_loss =
      tfm::Net<double>::forward_backward(params, batch, smoothing, tfm::DropoutPlan{}, grads);
  CHECK(std::isfinite(base_loss));

  std::vector<DMat*> tensors;
  std::vector<DMat*> grad_tensors;
  params.visit([&](const std::string&, DMat& t) { tensors.push_back(&t); });
  grads.visit([&](const std::string&, DMat& t) { grad_tensors.push_back(&t); });
  REQUIRE(tensors.size() == grad_tensors.size());

  std::int64_t total = 0;
  for (auto* t : tensors) total += t->size();

  Rng rng(2024);
  const double h = 1e-4;
  int worst_reported = 0;
  for (int sample = 0; sample < 100; ++sample) {
    std::int64_t flat = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(total)));
    std::size_t ti = 0;
    while (flat >= tensors[ti]->size()) {
      flat -= tensors[ti]->size();
      ++ti;
    }
    double* slot = tensors[ti]->data() + flat;
    const double saved = *slot;
    *slot = saved + h;
    double loss_plus = loss_only(params, batch, smoothing);
    *slot = saved - h;
    double loss_minus = loss_only(params, batch, smoothing);
    *slot = saved;

    double fd = (loss_plus - loss_minus) / (2.0 * h);
    double analytic = *(grad_tensors[ti]->data() + flat);
    double rel = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-8});
    if (rel > 1e-3 && worst_reported < 5) {
      ++worst_reported;
      CAPTURE(ti);
      CAPTURE(flat);
      CAPTURE(fd);
      CAPTURE(analytic);
    }
    CHECK(rel <= 1e-3);
  }
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences (tied output)") {
  run_gradient_check(true);
}

TEST_CASE("analytic gradients match central finite differences (untied output)") {
  run_gradient_check(false);
}

TEST_CASE("loss decreases along the negative gradient direction") {
  ModelConfig cfg;
  cfg.num_layers = 1;
  cfg.model_dim = 16;
  cfg.ffn_dim = 16;
  cfg.num_heads = 2;
  cfg.dropout = 0.0f;
  cfg.max_positions = 16;
  cfg.source_vocab_size = 15;
  cfg.target_vocab_size = 15;
  DParams params = init_parameters_t<double>(cfg, 7);
  TokenBatch batch = small_batch();
  DParams grads = params.zeros_like();
  double loss0 =
      tfm::Net<double>::forward_backward(params, batch, 0.0, tfm::DropoutPlan{}, grads);

  std::vector<DMat*> tensors, grad_tensors;
  params.visit([&](const std::string&, DMat& t) { tensors.push_back(&t); });
  grads.visit([&](const std::string&, DMat& t) { grad_tensors.push_back(&t); });
  for (std::size_t i = 0; i < tensors.size(); ++i) *tensors[i] -= 0.05 * *grad_tensors[i];

  double loss1 = loss_only(params, batch, 0.0);
  CHECK(loss1 < loss0);
}

#include "ddnmt/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace ddnmt {

using nlohmann::json;
using Mat = MatT<float>;

namespace {

std::atomic<std::int64_t> g_training_runs{0};

void check_corpus_matches(const ModelConfig& cfg, const ParallelCorpus& corpus) {
  if (static_cast<int>(corpus.source_vocab()->size()) != cfg.source_vocab_size ||
      static_cast<int>(corpus.target_vocab()->size()) != cfg.target_vocab_size)
    throw std::invalid_argument("train: corpus vocabulary does not match model");
}

std::vector<TokenBatch> build_batches(const ParallelCorpus& corpus, int batch_tokens,
                                      int max_positions) {
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = corpus[a];
    const auto& pb = corpus[b];
    if (pa.target.size() != pb.target.size()) return pa.target.size() < pb.target.size();
    if (pa.source.size() != pb.source.size()) return pa.source.size() < pb.source.size();
    return a < b;
  });
  std::vector<TokenBatch> batches;
  std::vector<const SentencePair*> current;
  std::int64_t current_tokens = 0;
  auto flush = [&] {
    if (current.empty()) return;
    batches.push_back(make_batch(current, max_positions));
    current.clear();
    current_tokens = 0;
  };
  for (std::size_t idx : order) {
    const auto& pair = corpus[idx];
    std::int64_t cost = static_cast<std::int64_t>(pair.target.size()) + 1;
    if (!current.empty() && current_tokens + cost > batch_tokens) flush();
    current.push_back(&pair);
    current_tokens += cost;
  }
  flush();
  return batches;
}

double schedule_lr(double peak_lr, int warmup_steps, std::int64_t step) {
  double s = static_cast<double>(step);
  double w = static_cast<double>(warmup_steps);
  return peak_lr * std::min(s / w, std::sqrt(w / s));
}

// Validation scoring shared by perplexity() and the training loop.
double corpus_nll(const ModelParameters& params, const ParallelCorpus& corpus,
                  std::int64_t* token_count_out) {
  auto batches = build_batches(corpus, 2000, params.config.max_positions);
  double total = 0.0;
  std::int64_t tokens = 0;
  for (const auto& batch : batches) {
    Mat lg = tfm::Net<float>::score_logits(params, batch);
    for (int b = 0; b < batch.batch; ++b) {
      for (int t = 0; t < batch.dec_lens[b]; ++t) {
        const int row = b * batch.dec_width + t;
        const std::int32_t label = batch.labels[static_cast<std::size_t>(row)];
        double mx = static_cast<double>(lg.row(row).maxCoeff());
        double z = 0.0;
        for (Eigen::Index v = 0; v < lg.cols(); ++v)
          z += std::exp(static_cast<double>(lg(row, v)) - mx);
        total -= static_cast<double>(lg(row, label)) - mx - std::log(z);
        ++tokens;
      }
    }
  }
  if (token_count_out) *token_count_out = tokens;
  return total;
}

std::vector<TokenDistribution> softmax_rows(const Mat& lg, int row_begin, int row_count) {
  std::vector<TokenDistribution> out;
  out.reserve(static_cast<std::size_t>(row_count));
  for (int r = row_begin; r < row_begin + row_count; ++r) {
    TokenDistribution dist;
    dist.probabilities.resize(static_cast<std::size_t>(lg.cols()));
    double mx = static_cast<double>(lg.row(r).maxCoeff());
    double z = 0.0;
    for (Eigen::Index v = 0; v < lg.cols(); ++v) {
      double e = std::exp(static_cast<double>(lg(r, v)) - mx);
      dist.probabilities[static_cast<std::size_t>(v)] = e;
      z += e;
    }
    for (auto& p : dist.probabilities) p /= z;
    out.push_back(std::move(dist));
  }
  return out;
}

TokenBatch single_pair_batch(const Sentence& source, const Sentence& target,
                             int max_positions) {
  SentencePair pair;
  pair.source = source;
  pair.target = target;
  std::vector<const SentencePair*> one{&pair};
  return make_batch(one, max_positions);
}

}  // namespace

// ---------------------------------------------------------------------------

TokenBatch make_batch(const std::vector<const SentencePair*>& pairs, int max_positions) {
  TokenBatch batch;
  batch.batch = static_cast<int>(pairs.size());
  for (const auto* p : pairs) {
    if (static_cast<int>(p->source.size()) > max_positions ||
        static_cast<int>(p->target.size()) + 1 > max_positions)
      throw std::invalid_argument("batch: sequence too long for max_positions");
    batch.src_width = std::max(batch.src_width, static_cast<int>(p->source.size()));
    batch.dec_width = std::max(batch.dec_width, static_cast<int>(p->target.size()) + 1);
  }
  batch.src.assign(static_cast<std::size_t>(batch.batch) * batch.src_width,
                   static_cast<std::int32_t>(kPadId));
  batch.dec_in.assign(static_cast<std::size_t>(batch.batch) * batch.dec_width,
                      static_cast<std::int32_t>(kPadId));
  batch.labels.assign(static_cast<std::size_t>(batch.batch) * batch.dec_width,
                      static_cast<std::int32_t>(kPadId));
  for (int b = 0; b < batch.batch; ++b) {
    const auto& pair = *pairs[static_cast<std::size_t>(b)];
    const int slen = static_cast<int>(pair.source.size());
    const int tlen = static_cast<int>(pair.target.size());
    batch.src_lens.push_back(slen);
    batch.dec_lens.push_back(tlen + 1);
    for (int t = 0; t < slen; ++t)
      batch.src[static_cast<std::size_t>(b * batch.src_width + t)] =
          static_cast<std::int32_t>(pair.source.tokens[static_cast<std::size_t>(t)]);
    batch.dec_in[static_cast<std::size_t>(b * batch.dec_width)] =
        static_cast<std::int32_t>(kBosId);
    for (int t = 0; t < tlen; ++t) {
      batch.dec_in[static_cast<std::size_t>(b * batch.dec_width + t + 1)] =
          static_cast<std::int32_t>(pair.target.tokens[static_cast<std::size_t>(t)]);
      batch.labels[static_cast<std::size_t>(b * batch.dec_width + t)] =
          static_cast<std::int32_t>(pair.target.tokens[static_cast<std::size_t>(t)]);
    }
    batch.labels[static_cast<std::size_t>(b * batch.dec_width + tlen)] =
        static_cast<std::int32_t>(kEosId);
    batch.label_tokens += tlen + 1;
  }
  return batch;
}

namespace tfm {

const PositionalTable& PositionalTable::instance(int dim, int max_positions) {
  static std::mutex mutex;
  static std::map<std::pair<int, int>, std::unique_ptr<PositionalTable>> cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto& slot = cache[{dim, max_positions}];
  if (!slot) slot.reset(new PositionalTable(dim, max_positions));
  return *slot;
}

PositionalTable::PositionalTable(int dim, int max_positions) : dim_(dim) {
  table_.resize(static_cast<std::size_t>(dim) * max_positions);
  for (int pos = 0; pos < max_positions; ++pos) {
    for (int c = 0; c < dim; ++c) {
      int pair_index = c / 2;
      double rate = std::exp(-std::log(10000.0) * (2.0 * pair_index / dim));
      double angle = pos * rate;
      table_[static_cast<std::size_t>(pos) * dim_ + c] =
          (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
}

}  // namespace tfm

void TrainConfig::validate() const {
  if (peak_lr <= 0.0) throw std::invalid_argument("train config: peak_lr must be positive");
  if (warmup_steps < 1) throw std::invalid_argument("train config: warmup_steps must be >= 1");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0)
    throw std::invalid_argument("train config: label_smoothing must lie in [0,1)");
  if (max_updates < 0) throw std::invalid_argument("train config: max_updates must be >= 0");
  if (batch_tokens < 1) throw std::invalid_argument("train config: batch_tokens must be >= 1");
  if (checkpoint_interval < 1)
    throw std::invalid_argument("train config: checkpoint_interval must be >= 1");
  if (keep_last_checkpoints < 1)
    throw std::invalid_argument("train config: keep_last_checkpoints must be >= 1");
}

void TokenDistribution::validate() const {
  double sum = 0.0;
  for (double p : probabilities) {
    if (!(p >= 0.0 && p <= 1.0))
      throw std::logic_error("token distribution: entry outside [0,1]");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw std::logic_error("token distribution: does not sum to 1");
}

ModelParameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
  return init_parameters_t<float>(config, seed);
}

TrainResult train(ModelParameters params, const ParallelCorpus& corpus, const TrainConfig& cfg,
                  const ParallelCorpus& validation) {
  cfg.validate();
  params.config.validate();
  if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
  check_corpus_matches(params.config, corpus);
  if (!validation.empty()) check_corpus_matches(params.config, validation);
  g_training_runs.fetch_add(1);

  TrainResult result;
  result.trace = TrainingTrace{};
  if (cfg.max_updates == 0) {
    result.params = std::move(params);
    return result;
  }

  auto batches = build_batches(corpus, cfg.batch_tokens, params.config.max_positions);
  std::vector<std::size_t> order(batches.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  Rng shuffle_rng(mix_seed(cfg.seed, 0x5u));
  Rng dropout_rng(mix_seed(cfg.seed, 0xd0u));
  tfm::DropoutPlan drop;
  drop.rate = params.config.dropout;
  drop.rng = &dropout_rng;

  // Adam with the standard transformer betas.
  const double beta1 = 0.9, beta2 = 0.98, adam_eps = 1e-9;
  ModelParameters m = params.zeros_like();
  ModelParameters v = params.zeros_like();
  ModelParameters grads = params.zeros_like();

  double interval_loss = 0.0;
  int interval_updates = 0;

  auto validation_ppl = [&]() -> double {
    if (validation.empty()) return 0.0;
    std::int64_t tokens = 0;
    double nll = corpus_nll(params, validation, &tokens);
    return tokens == 0 ? 0.0 : std::exp(nll / static_cast<double>(tokens));
  };

  for (std::int64_t step = 1; step <= cfg.max_updates; ++step) {
    std::size_t cursor = static_cast<std::size_t>((step - 1) % batches.size());
    if (cursor == 0) shuffle_rng.shuffle(order);
    const TokenBatch& batch = batches[order[cursor]];

    grads.visit([](const std::string&, Mat& g) { g.setZero(); });
    double loss =
        tfm::Net<float>::forward_backward(params, batch, cfg.label_smoothing, drop, grads);
    if (!std::isfinite(loss))
      throw TrainingDivergence("training diverged: non-finite loss at update " +
                                   std::to_string(step),
                               result.trace);

    // global-norm clip at 1.0
    double norm_sq = 0.0;
    grads.visit([&](const std::string&, Mat& g) {
      norm_sq += static_cast<double>(g.cast<double>().squaredNorm());
    });
    double norm = std::sqrt(norm_sq);
    if (norm > 1.0) {
      float inv = static_cast<float>(1.0 / norm);
      grads.visit([&](const std::string&, Mat& g) { g *= inv; });
    }

    const double lr = schedule_lr(cfg.peak_lr, cfg.warmup_steps, step);
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    {
      // single visit over (param, grad, m, v) quadruples via parallel walks
      std::vector<Mat*> gs, ms, vs, ps;
      grads.visit([&](const std::string&, Mat& g) { gs.push_back(&g); });
      m.visit([&](const std::string&, Mat& x) { ms.push_back(&x); });
      v.visit([&](const std::string&, Mat& x) { vs.push_back(&x); });
      params.visit([&](const std::string&, Mat& x) { ps.push_back(&x); });
      for (std::size_t i = 0; i < gs.size(); ++i) {
        Mat& g = *gs[i];
        Mat& mi = *ms[i];
        Mat& vi = *vs[i];
        Mat& pi = *ps[i];
        mi = static_cast<float>(beta1) * mi + static_cast<float>(1.0 - beta1) * g;
        vi = static_cast<float>(beta2) * vi +
             static_cast<float>(1.0 - beta2) * g.cwiseProduct(g);
        Mat mhat = mi / static_cast<float>(bc1);
        Mat vhat = vi / static_cast<float>(bc2);
        pi -= (static_cast<float>(lr) * mhat.array() /
               (vhat.array().sqrt() + static_cast<float>(adam_eps)))
                  .matrix();
      }
    }

    interval_loss += loss;
    ++interval_updates;
    if (step % cfg.checkpoint_interval == 0 || step == cfg.max_updates) {
      TraceEntry entry;
      entry.updates = step;
      entry.train_loss = interval_loss / interval_updates;
      entry.validation_ppl = validation_ppl();
      result.trace.entries.push_back(entry);
      interval_loss = 0.0;
      interval_updates = 0;
      result.kept_checkpoints.push_back(params);
      if (static_cast<int>(result.kept_checkpoints.size()) > cfg.keep_last_checkpoints)
        result.kept_checkpoints.erase(result.kept_checkpoints.begin());
    }
  }

  if (cfg.average_kept_checkpoints && !result.kept_checkpoints.empty())
    result.params = average_checkpoints(result.kept_checkpoints);
  else
    result.params = std::move(params);
  return result;
}

ModelParameters average_checkpoints(const std::vector<ModelParameters>& checkpoints) {
  if (checkpoints.empty())
    throw std::invalid_argument("average_checkpoints: need at least one checkpoint");
  const auto& first = checkpoints.front();
  for (const auto& c : checkpoints) {
    if (c.encoder.size() != first.encoder.size() || c.decoder.size() != first.decoder.size())
      throw std::invalid_argument("average_checkpoints: layer count mismatch");
  }
  ModelParameters acc = first.zeros_like();
  std::vector<Mat*> acc_tensors;
  acc.visit([&](const std::string&, Mat& t) { acc_tensors.push_back(&t); });
  for (const auto& c : checkpoints) {
    std::vector<const Mat*> tensors;
    c.visit([&](const std::string&, const Mat& t) { tensors.push_back(&t); });
    if (tensors.size() != acc_tensors.size())
      throw std::invalid_argument("average_checkpoints: tensor count mismatch");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i]->rows() != acc_tensors[i]->rows() ||
          tensors[i]->cols() != acc_tensors[i]->cols())
        throw std::invalid_argument("average_checkpoints: shape mismatch");
      *acc_tensors[i] += *tensors[i];
    }
  }
  const float inv = 1.0f / static_cast<float>(checkpoints.size());
  for (Mat* t : acc_tensors) *t *= inv;
  return acc;
}

TokenDistribution forward_distribution(const ModelParameters& params, const Sentence& source,
                                       const Sentence& target_prefix) {
  if (source.empty()) throw std::invalid_argument("forward_distribution: empty source");
  if (static_cast<int>(source.size()) > params.config.max_positions ||
      static_cast<int>(target_prefix.size()) + 1 > params.config.max_positions)
    throw std::invalid_argument("forward_distribution: sequence too long");
  TokenBatch batch = single_pair_batch(source, target_prefix, params.config.max_positions);
  Mat lg = tfm::Net<float>::score_logits(params, batch);
  int last_row = static_cast<int>(target_prefix.size());
  auto dists = softmax_rows(lg, last_row, 1);
  return dists.front();
}

SequenceScorer make_scorer(ModelParametersPtr params) {
  if (!params) throw std::invalid_argument("make_scorer: null parameters");
  return [params](const Sentence& source, const Sentence& target) {
    TokenBatch batch = single_pair_batch(source, target, params->config.max_positions);
    Mat lg = tfm::Net<float>::score_logits(*params, batch);
    return softmax_rows(lg, 0, static_cast<int>(target.size()) + 1);
  };
}

std::vector<double> token_probabilities(const SequenceScorer& scorer, const SentencePair& pair) {
  auto dists = scorer(pair.source, pair.target);
  if (dists.size() != pair.target.size() + 1)
    throw std::logic_error("token_probabilities: scorer returned wrong position count");
  std::vector<double> probs;
  probs.reserve(dists.size());
  for (std::size_t j = 0; j < dists.size(); ++j) {
    TokenId label = j < pair.target.size() ? pair.target.tokens[j] : kEosId;
    probs.push_back(dists[j].probabilities[label]);
  }
  return probs;
}

std::vector<double> token_probabilities(const ModelParameters& params, const SentencePair& pair) {
  TokenBatch batch = single_pair_batch(pair.source, pair.target, params.config.max_positions);
  Mat lg = tfm::Net<float>::score_logits(params, batch);
  auto dists = softmax_rows(lg, 0, static_cast<int>(pair.target.size()) + 1);
  std::vector<double> probs;
  probs.reserve(dists.size());
  for (std::size_t j = 0; j < dists.size(); ++j) {
    TokenId label = j < pair.target.size() ? pair.target.tokens[j] : kEosId;
    probs.push_back(dists[j].probabilities[label]);
  }
  return probs;
}

double perplexity(const ModelParameters& params, const ParallelCorpus& corpus) {
  if (corpus.empty()) throw std::invalid_argument("perplexity: empty corpus");
  std::int64_t tokens = 0;
  double nll = corpus_nll(params, corpus, &tokens);
  return std::exp(nll / static_cast<double>(tokens));
}

double perplexity(const SequenceScorer& scorer, const ParallelCorpus& corpus) {
  if (corpus.empty()) throw std::invalid_argument("perplexity: empty corpus");
  double nll = 0.0;
  std::int64_t tokens = 0;
  for (const auto& pair : corpus.pairs()) {
    for (double p : token_probabilities(scorer, pair)) {
      nll -= std::log(p);
      ++tokens;
    }
  }
  return std::exp(nll / static_cast<double>(tokens));
}

// ---------------------------------------------------------------------------
// Checkpoint IO

namespace {

json config_to_json(const ModelConfig& c) {
  return json{{"num_layers", c.num_layers},
              {"model_dim", c.model_dim},
              {"ffn_dim", c.ffn_dim},
              {"num_heads", c.num_heads},
              {"dropout", c.dropout},
              {"share_target_embeddings_with_output", c.share_target_embeddings_with_output},
              {"max_positions", c.max_positions},
              {"source_vocab_size", c.source_vocab_size},
              {"target_vocab_size", c.target_vocab_size}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.num_layers = j.at("num_layers").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.dropout = j.at("dropout").get<float>();
  c.share_target_embeddings_with_output = j.at("share_target_embeddings_with_output").get<bool>();
  c.max_positions = j.at("max_positions").get<int>();
  c.source_vocab_size = j.at("source_vocab_size").get<int>();
  c.target_vocab_size = j.at("target_vocab_size").get<int>();
  return c;
}

void append_f32_le(std::string& out, float f) {
  std::uint32_t bits;
  static_assert(sizeof(bits) == sizeof(f));
  std::memcpy(&bits, &f, sizeof(bits));
  out.push_back(static_cast<char>(bits & 0xFFu));
  out.push_back(static_cast<char>((bits >> 8) & 0xFFu));
  out.push_back(static_cast<char>((bits >> 16) & 0xFFu));
  out.push_back(static_cast<char>((bits >> 24) & 0xFFu));
}

float read_f32_le(const unsigned char* p) {
  std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                       (static_cast<std::uint32_t>(p[2]) << 16) |
                       (static_cast<std::uint32_t>(p[3]) << 24);
  float f;
  std::memcpy(&f, &bits, sizeof(f));
  return f;
}

}  // namespace

void save_checkpoint(const ModelParameters& params, const std::string& path,
                     std::int64_t update_count) {
  json header;
  header["format"] = "ddnmt-checkpoint";
  header["version"] = 1;
  header["config"] = config_to_json(params.config);
  header["seed"] = params.creation_seed;
  header["update_count"] = update_count;
  json dir = json::array();
  std::int64_t offset = 0;
  params.visit([&](const std::string& name, const Mat& t) {
    dir.push_back(json{{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"offset", offset}});
    offset += static_cast<std::int64_t>(t.size()) * 4;
  });
  header["tensors"] = dir;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << header.dump() << '\n';
  std::string payload;
  payload.reserve(static_cast<std::size_t>(offset));
  params.visit([&](const std::string&, const Mat& t) {
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) append_f32_le(payload, t(r, c));
  });
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

ModelParameters load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string header_line;
  if (!std::getline(in, header_line)) throw std::runtime_error("checkpoint: missing header");
  json header = json::parse(header_line);
  if (header.value("format", "") != std::string("ddnmt-checkpoint"))
    throw std::runtime_error("checkpoint: bad magic");
  ModelConfig config = config_from_json(header.at("config"));
  ModelParameters params = init_parameters(config, header.at("seed").get<std::uint64_t>());

  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());

  std::map<std::string, std::pair<std::int64_t, std::pair<std::int64_t, std::int64_t>>> dir;
  for (const auto& e : header.at("tensors"))
    dir[e.at("name").get<std::string>()] = {
        e.at("offset").get<std::int64_t>(),
        {e.at("rows").get<std::int64_t>(), e.at("cols").get<std::int64_t>()}};

  params.visit([&](const std::string& name, Mat& t) {
    auto it = dir.find(name);
    if (it == dir.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
    auto [offset, shape] = it->second;
    if (shape.first != t.rows() || shape.second != t.cols())
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    std::size_t need = static_cast<std::size_t>(offset) +
                       static_cast<std::size_t>(t.size()) * 4;
    if (need > payload.size()) throw std::runtime_error("checkpoint: truncated payload");
    std::size_t pos = static_cast<std::size_t>(offset);
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        t(r, c) = read_f32_le(bytes + pos);
        pos += 4;
      }
  });
  return params;
}

std::int64_t training_runs_performed() { return g_training_runs.load(); }

}  // namespace ddnmt

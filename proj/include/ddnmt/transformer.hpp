// transformer.hpp -- a miniature encoder-decoder transformer with explicit
// forward/backward passes, templated on the scalar type so the same math can
// run in float for training and in double for finite-difference checking.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ddnmt/common.hpp"
#include "ddnmt/corpus.hpp"

namespace ddnmt {

struct ModelConfig {
  int num_layers = 2;
  int model_dim = 64;
  int ffn_dim = 128;
  int num_heads = 4;
  float dropout = 0.1f;
  bool share_target_embeddings_with_output = true;
  int max_positions = 256;
  int source_vocab_size = 0;
  int target_vocab_size = 0;

  void validate() const {
    if (num_layers < 1 || model_dim < 1 || ffn_dim < 1 || num_heads < 1)
      throw std::invalid_argument("model config: dimensions must be positive");
    if (model_dim % num_heads != 0)
      throw std::invalid_argument("model config: model_dim not divisible by num_heads");
    if (dropout < 0.0f || dropout >= 1.0f)
      throw std::invalid_argument("model config: dropout must lie in [0,1)");
    if (max_positions < 1) throw std::invalid_argument("model config: max_positions < 1");
    if (source_vocab_size < static_cast<int>(kNumReservedTokens) ||
        target_vocab_size < static_cast<int>(kNumReservedTokens))
      throw std::invalid_argument("model config: vocabulary sizes not set");
  }
  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
struct AttentionParamsT {
  MatT<S> wq, wk, wv, wo;  // [d x d]
  MatT<S> bq, bk, bv, bo;  // [1 x d]
};

template <typename S>
struct LayerNormParamsT {
  MatT<S> gain, bias;  // [1 x d]
};

template <typename S>
struct FfnParamsT {
  MatT<S> w1, b1;  // [d x f], [1 x f]
  MatT<S> w2, b2;  // [f x d], [1 x d]
};

template <typename S>
struct EncoderLayerT {
  AttentionParamsT<S> self_attn;
  LayerNormParamsT<S> ln_self;
  FfnParamsT<S> ffn;
  LayerNormParamsT<S> ln_ffn;
};

template <typename S>
struct DecoderLayerT {
  AttentionParamsT<S> self_attn;
  LayerNormParamsT<S> ln_self;
  AttentionParamsT<S> cross_attn;
  LayerNormParamsT<S> ln_cross;
  FfnParamsT<S> ffn;
  LayerNormParamsT<S> ln_ffn;
};

/// The full tensor set of one model. `visit` enumerates every tensor with a
/// stable name in a fixed canonical order; serialization, checkpoint
/// averaging, clipping and the finite-difference harness all build on it.
template <typename S>
struct ParametersT {
  ModelConfig config;
  std::uint64_t creation_seed = 0;

  MatT<S> source_embed;  // [V_src x d]
  MatT<S> target_embed;  // [V_tgt x d]
  MatT<S> output_proj;   // [d x V_tgt]; 0x0 when tied to target_embed
  std::vector<EncoderLayerT<S>> encoder;
  std::vector<DecoderLayerT<S>> decoder;

  template <typename Fn>
  void visit(Fn&& fn) {
    visit_impl(*this, fn);
  }
  template <typename Fn>
  void visit(Fn&& fn) const {
    visit_impl(*this, fn);
  }

  template <typename S2>
  ParametersT<S2> cast() const {
    ParametersT<S2> out;
    out.config = config;
    out.creation_seed = creation_seed;
    out.encoder.resize(encoder.size());
    out.decoder.resize(decoder.size());
    auto cvt = [](const MatT<S>& m) { return MatT<S2>(m.template cast<S2>()); };
    out.source_embed = cvt(source_embed);
    out.target_embed = cvt(target_embed);
    out.output_proj = cvt(output_proj);
    for (std::size_t l = 0; l < encoder.size(); ++l) {
      auto& a = encoder[l];
      auto& b = out.encoder[l];
      b.self_attn = {cvt(a.self_attn.wq), cvt(a.self_attn.wk), cvt(a.self_attn.wv),
                     cvt(a.self_attn.wo), cvt(a.self_attn.bq), cvt(a.self_attn.bk),
                     cvt(a.self_attn.bv), cvt(a.self_attn.bo)};
      b.ln_self = {cvt(a.ln_self.gain), cvt(a.ln_self.bias)};
      b.ffn = {cvt(a.ffn.w1), cvt(a.ffn.b1), cvt(a.ffn.w2), cvt(a.ffn.b2)};
      b.ln_ffn = {cvt(a.ln_ffn.gain), cvt(a.ln_ffn.bias)};
    }
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      auto& a = decoder[l];
      auto& b = out.decoder[l];
      b.self_attn = {cvt(a.self_attn.wq), cvt(a.self_attn.wk), cvt(a.self_attn.wv),
                     cvt(a.self_attn.wo), cvt(a.self_attn.bq), cvt(a.self_attn.bk),
                     cvt(a.self_attn.bv), cvt(a.self_attn.bo)};
      b.ln_self = {cvt(a.ln_self.gain), cvt(a.ln_self.bias)};
      b.cross_attn = {cvt(a.cross_attn.wq), cvt(a.cross_attn.wk), cvt(a.cross_attn.wv),
                      cvt(a.cross_attn.wo), cvt(a.cross_attn.bq), cvt(a.cross_attn.bk),
                      cvt(a.cross_attn.bv), cvt(a.cross_attn.bo)};
      b.ln_cross = {cvt(a.ln_cross.gain), cvt(a.ln_cross.bias)};
      b.ffn = {cvt(a.ffn.w1), cvt(a.ffn.b1), cvt(a.ffn.w2), cvt(a.ffn.b2)};
      b.ln_ffn = {cvt(a.ln_ffn.gain), cvt(a.ln_ffn.bias)};
    }
    return out;
  }

  /// Same structure, all tensors zero-filled.
  ParametersT<S> zeros_like() const {
    ParametersT<S> out = *this;
    out.visit([](const std::string&, MatT<S>& m) { m.setZero(); });
    return out;
  }

 private:
  template <typename Self, typename Fn>
  static void visit_impl(Self& self, Fn& fn) {
    fn("src_embed", self.source_embed);
    fn("tgt_embed", self.target_embed);
    if (self.output_proj.size() > 0) fn("out_proj", self.output_proj);
    auto visit_attn = [&](const std::string& prefix, auto& a) {
      fn(prefix + ".wq", a.wq);
      fn(prefix + ".wk", a.wk);
      fn(prefix + ".wv", a.wv);
      fn(prefix + ".wo", a.wo);
      fn(prefix + ".bq", a.bq);
      fn(prefix + ".bk", a.bk);
      fn(prefix + ".bv", a.bv);
      fn(prefix + ".bo", a.bo);
    };
    auto visit_ln = [&](const std::string& prefix, auto& ln) {
      fn(prefix + ".gain", ln.gain);
      fn(prefix + ".bias", ln.bias);
    };
    auto visit_ffn = [&](const std::string& prefix, auto& f) {
      fn(prefix + ".w1", f.w1);
      fn(prefix + ".b1", f.b1);
      fn(prefix + ".w2", f.w2);
      fn(prefix + ".b2", f.b2);
    };
    for (std::size_t l = 0; l < self.encoder.size(); ++l) {
      std::string base = "enc." + std::to_string(l);
      visit_attn(base + ".self", self.encoder[l].self_attn);
      visit_ln(base + ".ln_self", self.encoder[l].ln_self);
      visit_ffn(base + ".ffn", self.encoder[l].ffn);
      visit_ln(base + ".ln_ffn", self.encoder[l].ln_ffn);
    }
    for (std::size_t l = 0; l < self.decoder.size(); ++l) {
      std::string base = "dec." + std::to_string(l);
      visit_attn(base + ".self", self.decoder[l].self_attn);
      visit_ln(base + ".ln_self", self.decoder[l].ln_self);
      visit_attn(base + ".cross", self.decoder[l].cross_attn);
      visit_ln(base + ".ln_cross", self.decoder[l].ln_cross);
      visit_ffn(base + ".ffn", self.decoder[l].ffn);
      visit_ln(base + ".ln_ffn", self.decoder[l].ln_ffn);
    }
  }
};

// Glorot-uniform init. Draws are made in double in canonical visit order and
// cast to S, so float and double instantiations see the same values.
template <typename S>
ParametersT<S> init_parameters_t(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParametersT<S> p;
  p.config = config;
  p.creation_seed = seed;
  const int d = config.model_dim;
  const int f = config.ffn_dim;
  auto attn = [&] {
    AttentionParamsT<S> a;
    a.wq.resize(d, d);
    a.wk.resize(d, d);
    a.wv.resize(d, d);
    a.wo.resize(d, d);
    a.bq = MatT<S>::Zero(1, d);
    a.bk = MatT<S>::Zero(1, d);
    a.bv = MatT<S>::Zero(1, d);
    a.bo = MatT<S>::Zero(1, d);
    return a;
  };
  auto ln = [&] {
    LayerNormParamsT<S> l;
    l.gain = MatT<S>::Ones(1, d);
    l.bias = MatT<S>::Zero(1, d);
    return l;
  };
  auto ffn = [&] {
    FfnParamsT<S> x;
    x.w1.resize(d, f);
    x.b1 = MatT<S>::Zero(1, f);
    x.w2.resize(f, d);
    x.b2 = MatT<S>::Zero(1, d);
    return x;
  };
  p.source_embed.resize(config.source_vocab_size, d);
  p.target_embed.resize(config.target_vocab_size, d);
  if (!config.share_target_embeddings_with_output) p.output_proj.resize(d, config.target_vocab_size);
  p.encoder.resize(static_cast<std::size_t>(config.num_layers));
  p.decoder.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& layer : p.encoder) layer = {attn(), ln(), ffn(), ln()};
  for (auto& layer : p.decoder) layer = {attn(), ln(), attn(), ln(), ffn(), ln()};

  Rng rng(mix_seed(seed, 0x1417u));
  p.visit([&](const std::string& name, MatT<S>& m) {
    bool is_weight = name.find(".b") == std::string::npos &&
                     name.find("gain") == std::string::npos &&
                     name.find("bias") == std::string::npos;
    if (!is_weight) return;  // biases stay zero, gains one
    double bound = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        m(r, c) = static_cast<S>(rng.uniform(-bound, bound));
  });
  return p;
}

// ---------------------------------------------------------------------------
// Batched token layout shared by training and scoring.

struct TokenBatch {
  int batch = 0;
  int src_width = 0;  // padded source length
  int dec_width = 0;  // padded decoder length (BOS + target)
  std::vector<std::int32_t> src;     // [batch x src_width], PAD-filled
  std::vector<std::int32_t> dec_in;  // [batch x dec_width], BOS + target
  std::vector<std::int32_t> labels;  // [batch x dec_width], target + EOS, PAD-filled
  std::vector<int> src_lens;         // live source rows per sentence
  std::vector<int> dec_lens;         // live decoder rows per sentence (= target len + 1)
  std::int64_t label_tokens = 0;
};

TokenBatch make_batch(const std::vector<const SentencePair*>& pairs, int max_positions);

namespace tfm {

template <typename S>
struct LayerNormCache {
  MatT<S> xhat;                 // [R x d]
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std;  // [R]
};

template <typename S>
struct AttentionCache {
  MatT<S> input;               // sublayer input [R x d]
  MatT<S> q, k, v;             // [R x d] (k, v over the key-side rows)
  std::vector<MatT<S>> probs;  // per (sentence, head): softmaxed scores
  MatT<S> ctx;                 // [R x d]
  std::vector<std::uint8_t> residual_dropout;
  LayerNormCache<S> ln;
};

template <typename S>
struct FfnCache {
  MatT<S> input;    // [R x d]
  MatT<S> hidden;   // post-ReLU [R x f]
  std::vector<std::uint8_t> residual_dropout;
  LayerNormCache<S> ln;
};

template <typename S>
struct EncoderLayerCache {
  AttentionCache<S> attn;
  FfnCache<S> ffn;
};

template <typename S>
struct DecoderLayerCache {
  AttentionCache<S> self_attn;
  AttentionCache<S> cross_attn;
  FfnCache<S> ffn;
};

template <typename S>
struct ForwardCache {
  std::vector<std::uint8_t> src_embed_dropout, dec_embed_dropout;
  MatT<S> src_x0, dec_x0;  // embedding outputs
  std::vector<EncoderLayerCache<S>> enc_layers;
  std::vector<DecoderLayerCache<S>> dec_layers;
  MatT<S> enc_out;  // [B*src_width x d]
  MatT<S> dec_out;  // [B*dec_width x d]
};

// Dropout behaviour for one forward pass. rng == nullptr disables dropout
// (inference / scoring / gradient checking).
struct DropoutPlan {
  Rng* rng = nullptr;
  float rate = 0.0f;
  bool active() const { return rng != nullptr && rate > 0.0f; }
};

// Sinusoidal position encoding, cached per dimension.
class PositionalTable {
 public:
  static const PositionalTable& instance(int dim, int max_positions);
  double value(int pos, int col) const { return table_[static_cast<std::size_t>(pos) * dim_ + col]; }

 private:
  PositionalTable(int dim, int max_positions);
  int dim_;
  std::vector<double> table_;
};

template <typename S>
class Net {
 public:
  using Mat = MatT<S>;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  // --- forward -------------------------------------------------------------

  static void embed_rows(const Mat& table, const std::vector<std::int32_t>& ids, int width,
                         int batch, const ModelConfig& cfg, Mat& out,
                         std::vector<std::uint8_t>& dropout_mask, const DropoutPlan& drop) {
    const int d = cfg.model_dim;
    const double scale = std::sqrt(static_cast<double>(d));
    const auto& pos_table = PositionalTable::instance(d, cfg.max_positions);
    out.resize(batch * width, d);
    for (int b = 0; b < batch; ++b) {
      for (int t = 0; t < width; ++t) {
        const int row = b * width + t;
        const std::int32_t id = ids[static_cast<std::size_t>(row)];
        for (int c = 0; c < d; ++c)
          out(row, c) = static_cast<S>(static_cast<double>(table(id, c)) * scale +
                                       pos_table.value(t, c));
      }
    }
    apply_dropout(out, dropout_mask, drop);
  }

  static void apply_dropout(Mat& x, std::vector<std::uint8_t>& mask, const DropoutPlan& drop) {
    if (!drop.active()) {
      mask.clear();
      return;
    }
    const S keep_scale = static_cast<S>(1.0 / (1.0 - static_cast<double>(drop.rate)));
    mask.resize(static_cast<std::size_t>(x.size()));
    S* data = x.data();
    for (std::size_t i = 0; i < mask.size(); ++i) {
      bool keep = drop.rng->next_double() >= static_cast<double>(drop.rate);
      mask[i] = keep ? 1 : 0;
      data[i] = keep ? data[i] * keep_scale : S(0);
    }
  }

  static void dropout_backward(Mat& dx, const std::vector<std::uint8_t>& mask, float rate) {
    if (mask.empty()) return;
    const S keep_scale = static_cast<S>(1.0 / (1.0 - static_cast<double>(rate)));
    S* data = dx.data();
    for (std::size_t i = 0; i < mask.size(); ++i) data[i] = mask[i] ? data[i] * keep_scale : S(0);
  }

  static void layer_norm(const Mat& x, const LayerNormParamsT<S>& ln, Mat& out,
                         LayerNormCache<S>& cache) {
    const S eps = static_cast<S>(1e-5);
    const Eigen::Index rows = x.rows(), cols = x.cols();
    out.resize(rows, cols);
    cache.xhat.resize(rows, cols);
    cache.inv_std.resize(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
      S mean = x.row(r).mean();
      S var = (x.row(r).array() - mean).square().mean();
      S inv = S(1) / std::sqrt(var + eps);
      cache.inv_std(r) = inv;
      cache.xhat.row(r) = ((x.row(r).array() - mean) * inv).matrix();
      out.row(r) = cache.xhat.row(r).cwiseProduct(ln.gain.row(0)) + ln.bias.row(0);
    }
  }

  static void layer_norm_backward(const Mat& dy, const LayerNormParamsT<S>& ln,
                                  const LayerNormCache<S>& cache, Mat& dx,
                                  LayerNormParamsT<S>& dln) {
    const Eigen::Index rows = dy.rows(), cols = dy.cols();
    dx.resize(rows, cols);
    Mat dxhat(1, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      dxhat.row(0) = dy.row(r).cwiseProduct(ln.gain.row(0));
      S m1 = dxhat.row(0).mean();
      S m2 = dxhat.row(0).cwiseProduct(cache.xhat.row(r)).mean();
      dx.row(r) =
          ((dxhat.row(0).array() - m1 - cache.xhat.row(r).array() * m2) * cache.inv_std(r))
              .matrix();
      dln.gain.row(0) += dy.row(r).cwiseProduct(cache.xhat.row(r));
      dln.bias.row(0) += dy.row(r);
    }
  }

  // Multi-head attention over live rows only; padded rows keep zero context.
  // query rows [b*q_width, b*q_width+q_lens[b]) attend key rows of the same
  // sentence; causal restricts query row t to key rows <= t + causal_offset.
  static void attention(const Mat& query_in, const Mat& key_in, const AttentionParamsT<S>& ap,
                        const ModelConfig& cfg, int q_width, int k_width,
                        const std::vector<int>& q_lens, const std::vector<int>& k_lens,
                        bool causal, Mat& out, AttentionCache<S>& cache,
                        const DropoutPlan& drop) {
    const int d = cfg.model_dim;
    const int heads = cfg.num_heads;
    const int dh = d / heads;
    const int batch = static_cast<int>(q_lens.size());
    const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    cache.q.noalias() = query_in * ap.wq;
    cache.q.rowwise() += ap.bq.row(0);
    cache.k.noalias() = key_in * ap.wk;
    cache.k.rowwise() += ap.bk.row(0);
    cache.v.noalias() = key_in * ap.wv;
    cache.v.rowwise() += ap.bv.row(0);
    cache.ctx = Mat::Zero(query_in.rows(), d);
    cache.probs.assign(static_cast<std::size_t>(batch) * heads, Mat());

    for (int b = 0; b < batch; ++b) {
      const int qlen = q_lens[b], klen = k_lens[b];
      const int q0 = b * q_width, k0 = b * k_width;
      for (int h = 0; h < heads; ++h) {
        auto qb = cache.q.block(q0, h * dh, qlen, dh);
        auto kb = cache.k.block(k0, h * dh, klen, dh);
        auto vb = cache.v.block(k0, h * dh, klen, dh);
        Mat scores = (qb * kb.transpose()) * inv_sqrt_dh;
        Mat& probs = cache.probs[static_cast<std::size_t>(b) * heads + h];
        probs.resize(qlen, klen);
        for (int i = 0; i < qlen; ++i) {
          const int limit = causal ? std::min(klen, i + 1) : klen;
          S mx = scores(i, 0);
          for (int j = 1; j < limit; ++j) mx = std::max(mx, scores(i, j));
          S denom = S(0);
          for (int j = 0; j < limit; ++j) {
            S e = std::exp(scores(i, j) - mx);
            probs(i, j) = e;
            denom += e;
          }
          for (int j = 0; j < limit; ++j) probs(i, j) /= denom;
          for (int j = limit; j < klen; ++j) probs(i, j) = S(0);
        }
        cache.ctx.block(q0, h * dh, qlen, dh).noalias() = probs * vb;
      }
    }

    out.noalias() = cache.ctx * ap.wo;
    out.rowwise() += ap.bo.row(0);
    apply_dropout(out, cache.residual_dropout, drop);
  }

  static void attention_backward(const Mat& d_out, const AttentionParamsT<S>& ap,
                                 const ModelConfig& cfg, int q_width, int k_width,
                                 const std::vector<int>& q_lens, const std::vector<int>& k_lens,
                                 const Mat& query_in, const Mat& key_in,
                                 const AttentionCache<S>& cache, float dropout_rate,
                                 Mat& d_query_in, Mat& d_key_in, AttentionParamsT<S>& dap) {
    const int d = cfg.model_dim;
    const int heads = cfg.num_heads;
    const int dh = d / heads;
    const int batch = static_cast<int>(q_lens.size());
    const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    Mat do_post = d_out;
    dropout_backward(do_post, cache.residual_dropout, dropout_rate);

    dap.wo += cache.ctx.transpose() * do_post;
    dap.bo.row(0) += do_post.colwise().sum();
    Mat d_ctx = do_post * ap.wo.transpose();

    Mat dq = Mat::Zero(cache.q.rows(), d);
    Mat dk = Mat::Zero(cache.k.rows(), d);
    Mat dv = Mat::Zero(cache.v.rows(), d);

    for (int b = 0; b < batch; ++b) {
      const int qlen = q_lens[b], klen = k_lens[b];
      const int q0 = b * q_width, k0 = b * k_width;
      for (int h = 0; h < heads; ++h) {
        const Mat& probs = cache.probs[static_cast<std::size_t>(b) * heads + h];
        auto qb = cache.q.block(q0, h * dh, qlen, dh);
        auto kb = cache.k.block(k0, h * dh, klen, dh);
        auto vb = cache.v.block(k0, h * dh, klen, dh);
        auto d_ctx_b = d_ctx.block(q0, h * dh, qlen, dh);
        Mat d_probs = d_ctx_b * vb.transpose();
        dv.block(k0, h * dh, klen, dh).noalias() += probs.transpose() * d_ctx_b;
        // softmax backward; masked cells have probs == 0 so d_scores == 0
        Mat d_scores(qlen, klen);
        for (int i = 0; i < qlen; ++i) {
          S dot = S(0);
          for (int j = 0; j < klen; ++j) dot += d_probs(i, j) * probs(i, j);
          for (int j = 0; j < klen; ++j)
            d_scores(i, j) = probs(i, j) * (d_probs(i, j) - dot);
        }
        dq.block(q0, h * dh, qlen, dh).noalias() += d_scores * kb * inv_sqrt_dh;
        dk.block(k0, h * dh, klen, dh).noalias() += d_scores.transpose() * qb * inv_sqrt_dh;
      }
    }

    dap.wq += query_in.transpose() * dq;
    dap.bq.row(0) += dq.colwise().sum();
    dap.wk += key_in.transpose() * dk;
    dap.bk.row(0) += dk.colwise().sum();
    dap.wv += key_in.transpose() * dv;
    dap.bv.row(0) += dv.colwise().sum();
    d_query_in.noalias() += dq * ap.wq.transpose();
    d_key_in.noalias() += dk * ap.wk.transpose();
    d_key_in.noalias() += dv * ap.wv.transpose();
  }

  static void ffn_forward(const Mat& x, const FfnParamsT<S>& fp, Mat& out, FfnCache<S>& cache,
                          const DropoutPlan& drop) {
    cache.hidden.noalias() = x * fp.w1;
    cache.hidden.rowwise() += fp.b1.row(0);
    cache.hidden = cache.hidden.cwiseMax(S(0));
    out.noalias() = cache.hidden * fp.w2;
    out.rowwise() += fp.b2.row(0);
    apply_dropout(out, cache.residual_dropout, drop);
  }

  static void ffn_backward(const Mat& d_out, const Mat& x, const FfnParamsT<S>& fp,
                           const FfnCache<S>& cache, float dropout_rate, Mat& dx,
                           FfnParamsT<S>& dfp) {
    Mat d_post = d_out;
    dropout_backward(d_post, cache.residual_dropout, dropout_rate);
    dfp.w2 += cache.hidden.transpose() * d_post;
    dfp.b2.row(0) += d_post.colwise().sum();
    Mat dh = d_post * fp.w2.transpose();
    // ReLU gate
    dh = (cache.hidden.array() > S(0)).select(dh, Mat::Zero(dh.rows(), dh.cols()));
    dfp.w1 += x.transpose() * dh;
    dfp.b1.row(0) += dh.colwise().sum();
    dx.noalias() += dh * fp.w1.transpose();
  }

  // Encoder stack over a batch; returns final hidden states.
  static void encode(const ParametersT<S>& p, const TokenBatch& batch, ForwardCache<S>& cache,
                     const DropoutPlan& drop) {
    const auto& cfg = p.config;
    cache.enc_layers.resize(p.encoder.size());
    embed_rows(p.source_embed, batch.src, batch.src_width, batch.batch, cfg, cache.src_x0,
               cache.src_embed_dropout, drop);
    Mat x = cache.src_x0;
    for (std::size_t l = 0; l < p.encoder.size(); ++l) {
      auto& lc = cache.enc_layers[l];
      const auto& lp = p.encoder[l];
      lc.attn.input = x;
      Mat sub;
      attention(x, x, lp.self_attn, cfg, batch.src_width, batch.src_width, batch.src_lens,
                batch.src_lens, /*causal=*/false, sub, lc.attn, drop);
      Mat res = x + sub;
      layer_norm(res, lp.ln_self, x, lc.attn.ln);
      lc.ffn.input = x;
      ffn_forward(x, lp.ffn, sub, lc.ffn, drop);
      res = x + sub;
      layer_norm(res, lp.ln_ffn, x, lc.ffn.ln);
    }
    cache.enc_out = std::move(x);
  }

  // Decoder stack (teacher-forced); fills cache.dec_out.
  static void decode_forward(const ParametersT<S>& p, const TokenBatch& batch,
                             ForwardCache<S>& cache, const DropoutPlan& drop) {
    const auto& cfg = p.config;
    cache.dec_layers.resize(p.decoder.size());
    embed_rows(p.target_embed, batch.dec_in, batch.dec_width, batch.batch, cfg, cache.dec_x0,
               cache.dec_embed_dropout, drop);
    Mat y = cache.dec_x0;
    for (std::size_t l = 0; l < p.decoder.size(); ++l) {
      auto& lc = cache.dec_layers[l];
      const auto& lp = p.decoder[l];
      lc.self_attn.input = y;
      Mat sub;
      attention(y, y, lp.self_attn, cfg, batch.dec_width, batch.dec_width, batch.dec_lens,
                batch.dec_lens, /*causal=*/true, sub, lc.self_attn, drop);
      Mat res = y + sub;
      layer_norm(res, lp.ln_self, y, lc.self_attn.ln);
      lc.cross_attn.input = y;
      attention(y, cache.enc_out, lp.cross_attn, cfg, batch.dec_width, batch.src_width,
                batch.dec_lens, batch.src_lens, /*causal=*/false, sub, lc.cross_attn, drop);
      res = y + sub;
      layer_norm(res, lp.ln_cross, y, lc.cross_attn.ln);
      lc.ffn.input = y;
      ffn_forward(y, lp.ffn, sub, lc.ffn, drop);
      res = y + sub;
      layer_norm(res, lp.ln_ffn, y, lc.ffn.ln);
    }
    cache.dec_out = std::move(y);
  }

  static Mat logits(const ParametersT<S>& p, const Mat& dec_out) {
    if (p.output_proj.size() > 0) return dec_out * p.output_proj;
    return dec_out * p.target_embed.transpose();
  }

  // Label-smoothed cross entropy, averaged per live label token. Returns the
  // loss; fills d_logits (already divided by token count) when requested.
  static double loss_and_dlogits(const Mat& lg, const TokenBatch& batch, double label_smoothing,
                                 Mat* d_logits) {
    const int vocab = static_cast<int>(lg.cols());
    const double eps = label_smoothing;
    const double inv_tokens = 1.0 / static_cast<double>(batch.label_tokens);
    double total = 0.0;
    if (d_logits) *d_logits = Mat::Zero(lg.rows(), lg.cols());
    for (int b = 0; b < batch.batch; ++b) {
      for (int t = 0; t < batch.dec_lens[b]; ++t) {
        const int row = b * batch.dec_width + t;
        const std::int32_t label = batch.labels[static_cast<std::size_t>(row)];
        double mx = static_cast<double>(lg.row(row).maxCoeff());
        double z = 0.0;
        for (int v = 0; v < vocab; ++v) z += std::exp(static_cast<double>(lg(row, v)) - mx);
        double log_z = std::log(z) + mx;
        double sum_logp = 0.0;
        for (int v = 0; v < vocab; ++v) sum_logp += static_cast<double>(lg(row, v)) - log_z;
        double logp_label = static_cast<double>(lg(row, label)) - log_z;
        total += -((1.0 - eps) * logp_label + eps / vocab * sum_logp);
        if (d_logits) {
          for (int v = 0; v < vocab; ++v) {
            double softmax = std::exp(static_cast<double>(lg(row, v)) - log_z);
            double q = eps / vocab + ((v == label) ? (1.0 - eps) : 0.0);
            (*d_logits)(row, v) = static_cast<S>((softmax - q) * inv_tokens);
          }
        }
      }
    }
    return total * inv_tokens;
  }

  // Full backward pass given d(logits); accumulates into `grads`.
  static void backward(const ParametersT<S>& p, const TokenBatch& batch,
                       const ForwardCache<S>& cache, const Mat& d_logits,
                       ParametersT<S>& grads) {
    const auto& cfg = p.config;
    const float rate = cfg.dropout;

    Mat d_dec = Mat::Zero(cache.dec_out.rows(), cfg.model_dim);
    if (p.output_proj.size() > 0) {
      grads.output_proj += cache.dec_out.transpose() * d_logits;
      d_dec.noalias() = d_logits * p.output_proj.transpose();
    } else {
      grads.target_embed += d_logits.transpose() * cache.dec_out;
      d_dec.noalias() = d_logits * p.target_embed;
    }

    Mat d_enc = Mat::Zero(cache.enc_out.rows(), cfg.model_dim);

    for (int l = static_cast<int>(p.decoder.size()) - 1; l >= 0; --l) {
      const auto& lp = p.decoder[static_cast<std::size_t>(l)];
      const auto& lc = cache.dec_layers[static_cast<std::size_t>(l)];
      auto& gl = grads.decoder[static_cast<std::size_t>(l)];

      // ffn sublayer
      Mat d_res;
      layer_norm_backward(d_dec, lp.ln_ffn, lc.ffn.ln, d_res, gl.ln_ffn);
      Mat dx = d_res;  // residual branch
      ffn_backward(d_res, lc.ffn.input, lp.ffn, lc.ffn, rate, dx, gl.ffn);

      // cross attention sublayer
      layer_norm_backward(dx, lp.ln_cross, lc.cross_attn.ln, d_res, gl.ln_cross);
      dx = d_res;
      attention_backward(d_res, lp.cross_attn, cfg, batch.dec_width, batch.src_width,
                         batch.dec_lens, batch.src_lens, lc.cross_attn.input, cache.enc_out,
                         lc.cross_attn, rate, dx, d_enc, gl.cross_attn);

      // self attention sublayer
      layer_norm_backward(dx, lp.ln_self, lc.self_attn.ln, d_res, gl.ln_self);
      dx = d_res;
      attention_backward(d_res, lp.self_attn, cfg, batch.dec_width, batch.dec_width,
                         batch.dec_lens, batch.dec_lens, lc.self_attn.input, lc.self_attn.input,
                         lc.self_attn, rate, dx, dx, gl.self_attn);
      d_dec = std::move(dx);
    }
    embed_backward(p.target_embed, batch.dec_in, batch.dec_width, batch.batch, cfg,
                   cache.dec_embed_dropout, d_dec, grads.target_embed);

    for (int l = static_cast<int>(p.encoder.size()) - 1; l >= 0; --l) {
      const auto& lp = p.encoder[static_cast<std::size_t>(l)];
      const auto& lc = cache.enc_layers[static_cast<std::size_t>(l)];
      auto& gl = grads.encoder[static_cast<std::size_t>(l)];

      Mat d_res;
      layer_norm_backward(d_enc, lp.ln_ffn, lc.ffn.ln, d_res, gl.ln_ffn);
      Mat dx = d_res;
      ffn_backward(d_res, lc.ffn.input, lp.ffn, lc.ffn, rate, dx, gl.ffn);

      layer_norm_backward(dx, lp.ln_self, lc.attn.ln, d_res, gl.ln_self);
      dx = d_res;
      attention_backward(d_res, lp.self_attn, cfg, batch.src_width, batch.src_width,
                         batch.src_lens, batch.src_lens, lc.attn.input, lc.attn.input, lc.attn,
                         rate, dx, dx, gl.self_attn);
      d_enc = std::move(dx);
    }
    embed_backward(p.source_embed, batch.src, batch.src_width, batch.batch, cfg,
                   cache.src_embed_dropout, d_enc, grads.source_embed);
  }

  static void embed_backward(const Mat& table, const std::vector<std::int32_t>& ids, int width,
                             int batch, const ModelConfig& cfg,
                             const std::vector<std::uint8_t>& dropout_mask, const Mat& d_x,
                             Mat& d_table) {
    (void)table;
    Mat dx = d_x;
    dropout_backward(dx, dropout_mask, cfg.dropout);
    const S scale = static_cast<S>(std::sqrt(static_cast<double>(cfg.model_dim)));
    for (int b = 0; b < batch; ++b)
      for (int t = 0; t < width; ++t) {
        const int row = b * width + t;
        const std::int32_t id = ids[static_cast<std::size_t>(row)];
        if (id == static_cast<std::int32_t>(kPadId)) continue;
        d_table.row(id) += dx.row(row) * scale;
      }
  }

  // Convenience: loss + gradients for one batch (the training step kernel).
  static double forward_backward(const ParametersT<S>& p, const TokenBatch& batch,
                                 double label_smoothing, const DropoutPlan& drop,
                                 ParametersT<S>& grads) {
    ForwardCache<S> cache;
    encode(p, batch, cache, drop);
    decode_forward(p, batch, cache, drop);
    Mat lg = logits(p, cache.dec_out);
    Mat d_logits;
    double loss = loss_and_dlogits(lg, batch, label_smoothing, &d_logits);
    backward(p, batch, cache, d_logits, grads);
    return loss;
  }

  // Teacher-forced scoring pass without dropout; returns logits and keeps
  // batch layout for the caller to index.
  static Mat score_logits(const ParametersT<S>& p, const TokenBatch& batch) {
    ForwardCache<S> cache;
    DropoutPlan no_drop;
    encode(p, batch, cache, no_drop);
    decode_forward(p, batch, cache, no_drop);
    return logits(p, cache.dec_out);
  }
};

// ---------------------------------------------------------------------------
// Incremental decoding: per-source session (encoder output and projected
// cross-attention keys/values) shared between hypotheses; per-hypothesis
// grown self-attention keys/values.

template <typename S>
struct DecodeSessionT {
  int src_len = 0;
  MatT<S> enc_out;                         // [src_len x d]
  std::vector<MatT<S>> cross_k, cross_v;   // per decoder layer [src_len x d]
};

template <typename S>
std::shared_ptr<const DecodeSessionT<S>> make_decode_session(const ParametersT<S>& p,
                                                             const Sentence& source) {
  if (source.empty()) throw std::invalid_argument("decode: empty source");
  if (static_cast<int>(source.size()) > p.config.max_positions)
    throw std::invalid_argument("decode: source sequence too long (" +
                                std::to_string(source.size()) + " > " +
                                std::to_string(p.config.max_positions) + ")");
  TokenBatch batch;
  batch.batch = 1;
  batch.src_width = static_cast<int>(source.size());
  batch.dec_width = 0;
  batch.src.assign(source.tokens.begin(), source.tokens.end());
  batch.src_lens = {batch.src_width};
  batch.dec_lens = {0};

  tfm::ForwardCache<S> cache;
  DropoutPlan no_drop;
  Net<S>::encode(p, batch, cache, no_drop);

  auto session = std::make_shared<DecodeSessionT<S>>();
  session->src_len = batch.src_width;
  session->enc_out = std::move(cache.enc_out);
  session->cross_k.reserve(p.decoder.size());
  session->cross_v.reserve(p.decoder.size());
  for (const auto& layer : p.decoder) {
    MatT<S> k = session->enc_out * layer.cross_attn.wk;
    k.rowwise() += layer.cross_attn.bk.row(0);
    MatT<S> v = session->enc_out * layer.cross_attn.wv;
    v.rowwise() += layer.cross_attn.bv.row(0);
    session->cross_k.push_back(std::move(k));
    session->cross_v.push_back(std::move(v));
  }
  return session;
}

template <typename S>
struct IncrementalStateT {
  std::shared_ptr<const DecodeSessionT<S>> session;
  std::vector<MatT<S>> self_k, self_v;  // per decoder layer [consumed x d]
  int consumed = 0;                     // decoder input tokens so far (BOS included)
  std::vector<double> next_logits;      // logits over the target vocabulary
};

// Feeds one decoder-input token; next_logits afterwards scores the token
// that would follow it.
template <typename S>
void advance_state(const ParametersT<S>& p, IncrementalStateT<S>& st, TokenId token) {
  const auto& cfg = p.config;
  const int d = cfg.model_dim;
  const int heads = cfg.num_heads;
  const int dh = d / heads;
  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  if (st.consumed >= cfg.max_positions)
    throw std::invalid_argument("decode: output exceeds max_positions");
  if (st.self_k.empty()) {
    st.self_k.resize(p.decoder.size());
    st.self_v.resize(p.decoder.size());
  }

  const int pos = st.consumed;
  const auto& pos_table = PositionalTable::instance(d, cfg.max_positions);
  const double scale = std::sqrt(static_cast<double>(d));
  MatT<S> x(1, d);
  for (int c = 0; c < d; ++c)
    x(0, c) = static_cast<S>(static_cast<double>(p.target_embed(static_cast<int>(token), c)) *
                                 scale +
                             pos_table.value(pos, c));

  auto attend = [&](const MatT<S>& q_row, const MatT<S>& keys, const MatT<S>& values) {
    MatT<S> ctx(1, d);
    const int klen = static_cast<int>(keys.rows());
    for (int h = 0; h < heads; ++h) {
      auto qh = q_row.block(0, h * dh, 1, dh);
      auto kh = keys.block(0, h * dh, klen, dh);
      auto vh = values.block(0, h * dh, klen, dh);
      Eigen::Matrix<S, 1, Eigen::Dynamic> scores = (qh * kh.transpose()) * inv_sqrt_dh;
      S mx = scores.maxCoeff();
      S denom = S(0);
      for (int j = 0; j < klen; ++j) {
        scores(0, j) = std::exp(scores(0, j) - mx);
        denom += scores(0, j);
      }
      scores /= denom;
      ctx.block(0, h * dh, 1, dh).noalias() = scores * vh;
    }
    return ctx;
  };

  auto norm_row = [&](const MatT<S>& row, const LayerNormParamsT<S>& ln) {
    const S eps = static_cast<S>(1e-5);
    S mean = row.row(0).mean();
    S var = (row.row(0).array() - mean).square().mean();
    S inv = S(1) / std::sqrt(var + eps);
    MatT<S> out(1, row.cols());
    out.row(0) = (((row.row(0).array() - mean) * inv).matrix().cwiseProduct(ln.gain.row(0))) +
                 ln.bias.row(0);
    return out;
  };

  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const auto& lp = p.decoder[l];
    // self attention over the grown cache
    MatT<S> q = x * lp.self_attn.wq;
    q.rowwise() += lp.self_attn.bq.row(0);
    MatT<S> k_new = x * lp.self_attn.wk;
    k_new.rowwise() += lp.self_attn.bk.row(0);
    MatT<S> v_new = x * lp.self_attn.wv;
    v_new.rowwise() += lp.self_attn.bv.row(0);
    MatT<S>& ks = st.self_k[l];
    MatT<S>& vs = st.self_v[l];
    ks.conservativeResize(pos + 1, d);
    vs.conservativeResize(pos + 1, d);
    ks.row(pos) = k_new.row(0);
    vs.row(pos) = v_new.row(0);
    MatT<S> ctx = attend(q, ks, vs);
    MatT<S> sub = ctx * lp.self_attn.wo;
    sub.rowwise() += lp.self_attn.bo.row(0);
    x = norm_row(x + sub, lp.ln_self);

    // cross attention against the session
    q.noalias() = x * lp.cross_attn.wq;
    q.rowwise() += lp.cross_attn.bq.row(0);
    ctx = attend(q, st.session->cross_k[l], st.session->cross_v[l]);
    sub.noalias() = ctx * lp.cross_attn.wo;
    sub.rowwise() += lp.cross_attn.bo.row(0);
    x = norm_row(x + sub, lp.ln_cross);

    // feed-forward
    MatT<S> h = x * lp.ffn.w1;
    h.rowwise() += lp.ffn.b1.row(0);
    h = h.cwiseMax(S(0));
    sub.noalias() = h * lp.ffn.w2;
    sub.rowwise() += lp.ffn.b2.row(0);
    x = norm_row(x + sub, lp.ln_ffn);
  }

  MatT<S> lg;
  if (p.output_proj.size() > 0)
    lg = x * p.output_proj;
  else
    lg = x * p.target_embed.transpose();
  st.next_logits.resize(static_cast<std::size_t>(lg.cols()));
  for (Eigen::Index c = 0; c < lg.cols(); ++c)
    st.next_logits[static_cast<std::size_t>(c)] = static_cast<double>(lg(0, c));
  st.consumed = pos + 1;
}

template <typename S>
IncrementalStateT<S> begin_decode(const ParametersT<S>& p,
                                  std::shared_ptr<const DecodeSessionT<S>> session) {
  IncrementalStateT<S> st;
  st.session = std::move(session);
  advance_state(p, st, kBosId);
  return st;
}

}  // namespace tfm
}  // namespace ddnmt

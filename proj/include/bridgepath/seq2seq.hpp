// Pre-norm encoder-decoder transformer with latent mixup.
//
// Encoder outputs are mixed with one latent per context utterance:
//   e_hat = w_enc_x * e + w_enc_z * z_segment(token)
// and every decoder layer mixes its self-attention output with the response
// latent before cross-attention:
//   d_hat = w_dec_x * d + w_dec_z * z_T
// All products are elementwise. With w_x = 1 and w_z = 0 the model is a plain
// transformer.
#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "bridgepath/autograd.hpp"
#include "bridgepath/corpus.hpp"
#include "bridgepath/mapper.hpp"
#include "bridgepath/params.hpp"
#include "bridgepath/rng.hpp"

namespace bridgepath {

struct ModelConfig {
  int vocab_size = 32;
  int d_model = 16;  // token embedding and latent dimension
  int heads = 2;
  int encoder_layers = 1;
  int decoder_layers = 1;
  int ffn_dim = 0;  // 0 -> 4 * d_model
  int max_len = 128;
  double dropout = 0.1;
  bool per_utterance_encoding = false;
  int mapper_hidden = 32;

  int ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * d_model; }

  void validate() const {
    if (vocab_size < 5) throw std::invalid_argument("model: vocab_size must be at least 5");
    if (d_model < 1 || heads < 1 || d_model % heads != 0) throw std::invalid_argument("model: d_model must be a positive multiple of heads");
    if (encoder_layers < 1 || decoder_layers < 1) throw std::invalid_argument("model: need at least one encoder and one decoder layer");
    if (max_len < 2) throw std::invalid_argument("model: max_len must be at least 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("model: dropout must lie in [0, 1)");
  }
};

struct AttentionParams {
  ParamId wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerNormParams {
  ParamId gamma, beta;
};

struct FeedForwardParams {
  ParamId w1, b1, w2, b2;
};

struct EncoderLayer {
  LayerNormParams ln_attn, ln_ffn;
  AttentionParams attn;
  FeedForwardParams ffn;
};

struct DecoderLayer {
  LayerNormParams ln_self, ln_cross, ln_ffn;
  AttentionParams self_attn, cross_attn;
  FeedForwardParams ffn;
  ParamId mix_x, mix_z;
};

struct Seq2SeqModel {
  ModelConfig cfg;
  ParamId embedding = -1;
  std::vector<EncoderLayer> encoder;
  LayerNormParams encoder_norm{};
  std::vector<DecoderLayer> decoder;
  LayerNormParams decoder_norm{};
  ParamId mix_enc_x = -1, mix_enc_z = -1;
};

namespace detail {
inline LayerNormParams make_ln(ParameterStore& s, const std::string& name, int d) {
  return {s.add(name + ".gamma", group::kLayerNorm, Matrix::Ones(1, d)),
          s.add(name + ".beta", group::kLayerNorm, Matrix::Zero(1, d))};
}

inline AttentionParams make_attention(ParameterStore& s, const std::string& name, int d, Rng& rng) {
  AttentionParams a{};
  a.wq = s.add(name + ".wq", group::kAttention, xavier_uniform(d, d, rng));
  a.bq = s.add(name + ".bq", group::kAttention, Matrix::Zero(1, d));
  a.wk = s.add(name + ".wk", group::kAttention, xavier_uniform(d, d, rng));
  a.bk = s.add(name + ".bk", group::kAttention, Matrix::Zero(1, d));
  a.wv = s.add(name + ".wv", group::kAttention, xavier_uniform(d, d, rng));
  a.bv = s.add(name + ".bv", group::kAttention, Matrix::Zero(1, d));
  a.wo = s.add(name + ".wo", group::kAttention, xavier_uniform(d, d, rng));
  a.bo = s.add(name + ".bo", group::kAttention, Matrix::Zero(1, d));
  return a;
}

inline FeedForwardParams make_ffn(ParameterStore& s, const std::string& name, int d, int h, Rng& rng) {
  return {s.add(name + ".w1", group::kFeedForward, xavier_uniform(d, h, rng)),
          s.add(name + ".b1", group::kFeedForward, Matrix::Zero(1, h)),
          s.add(name + ".w2", group::kFeedForward, xavier_uniform(h, d, rng)),
          s.add(name + ".b2", group::kFeedForward, Matrix::Zero(1, d))};
}
}  // namespace detail

inline Seq2SeqModel create_seq2seq(ParameterStore& store, const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Seq2SeqModel m;
  m.cfg = cfg;
  const int d = cfg.d_model;
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  Matrix emb(cfg.vocab_size, d);
  for (Eigen::Index i = 0; i < emb.size(); ++i) emb.data()[i] = normal(rng);
  m.embedding = store.add("embedding", group::kEmbedding, std::move(emb));
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    const std::string n = "encoder." + std::to_string(l);
    EncoderLayer layer{};
    layer.ln_attn = detail::make_ln(store, n + ".ln_attn", d);
    layer.attn = detail::make_attention(store, n + ".attn", d, rng);
    layer.ln_ffn = detail::make_ln(store, n + ".ln_ffn", d);
    layer.ffn = detail::make_ffn(store, n + ".ffn", d, cfg.ffn(), rng);
    m.encoder.push_back(layer);
  }
  m.encoder_norm = detail::make_ln(store, "encoder.ln_final", d);
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    const std::string n = "decoder." + std::to_string(l);
    DecoderLayer layer{};
    layer.ln_self = detail::make_ln(store, n + ".ln_self", d);
    layer.self_attn = detail::make_attention(store, n + ".self_attn", d, rng);
    layer.mix_x = store.add(n + ".mix_x", group::kMixDecX, Matrix::Ones(1, d));
    layer.mix_z = store.add(n + ".mix_z", group::kMixDecZ, Matrix::Zero(1, d));
    layer.ln_cross = detail::make_ln(store, n + ".ln_cross", d);
    layer.cross_attn = detail::make_attention(store, n + ".cross_attn", d, rng);
    layer.ln_ffn = detail::make_ln(store, n + ".ln_ffn", d);
    layer.ffn = detail::make_ffn(store, n + ".ffn", d, cfg.ffn(), rng);
    m.decoder.push_back(layer);
  }
  m.decoder_norm = detail::make_ln(store, "decoder.ln_final", d);
  m.mix_enc_x = store.add("encoder.mix_x", group::kMixEncX, Matrix::Ones(1, d));
  m.mix_enc_z = store.add("encoder.mix_z", group::kMixEncZ, Matrix::Zero(1, d));
  return m;
}

// Freezes the mix vectors at w_x = 1, w_z = 0 (plain transformer).
inline void disable_mixup(ParameterStore& store, const Seq2SeqModel& m) {
  auto freeze = [&](ParamId id, double v) {
    store.value(id).setConstant(v);
    store.at(id).trainable = false;
  };
  freeze(m.mix_enc_x, 1.0);
  freeze(m.mix_enc_z, 0.0);
  for (const auto& l : m.decoder) {
    freeze(l.mix_x, 1.0);
    freeze(l.mix_z, 0.0);
  }
}

// Concatenated context: each utterance followed by an end token; segment id
// is the index of the source utterance.
struct SegmentedContext {
  std::vector<int> tokens;
  std::vector<int> segments;
  std::vector<int> positions;
  int num_segments = 0;
  int dropped_tokens = 0;  // removed from the left to fit max_len
};

inline SegmentedContext build_context(const std::vector<const Utterance*>& context, int max_len,
                                      bool per_utterance_positions = false) {
  if (context.empty()) throw std::invalid_argument("context needs at least one utterance");
  SegmentedContext c;
  c.num_segments = static_cast<int>(context.size());
  for (std::size_t t = 0; t < context.size(); ++t) {
    int pos = 0;
    for (const int tok : context[t]->tokens) {
      c.tokens.push_back(tok);
      c.segments.push_back(static_cast<int>(t));
      c.positions.push_back(pos++);
    }
    c.tokens.push_back(Vocab::kEos);
    c.segments.push_back(static_cast<int>(t));
    c.positions.push_back(pos++);
  }
  const int n = static_cast<int>(c.tokens.size());
  if (n > max_len) {
    c.dropped_tokens = n - max_len;
    c.tokens.erase(c.tokens.begin(), c.tokens.begin() + c.dropped_tokens);
    c.segments.erase(c.segments.begin(), c.segments.begin() + c.dropped_tokens);
    c.positions.erase(c.positions.begin(), c.positions.begin() + c.dropped_tokens);
  }
  if (!per_utterance_positions) {
    for (std::size_t i = 0; i < c.positions.size(); ++i) c.positions[i] = static_cast<int>(i);
  }
  return c;
}

inline SegmentedContext build_context(const Dialogue& d, int max_len, bool per_utterance_positions = false) {
  std::vector<const Utterance*> ctx;
  for (int t = 0; t < d.T(); ++t) ctx.push_back(&d.utterances[static_cast<std::size_t>(t)]);
  return build_context(ctx, max_len, per_utterance_positions);
}

inline Matrix sinusoidal_positions(int length, int d) {
  Matrix pe(length, d);
  for (int pos = 0; pos < length; ++pos) {
    for (int i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe(pos, i) = std::sin(pos * freq);
      if (i + 1 < d) pe(pos, i + 1) = std::cos(pos * freq);
    }
  }
  return pe;
}

// Decoder input (bos + response) and gold targets (response + eos).
inline std::vector<int> decoder_input(const std::vector<int>& response) {
  std::vector<int> in{Vocab::kBos};
  in.insert(in.end(), response.begin(), response.end());
  return in;
}

inline std::vector<int> decoder_target(const std::vector<int>& response) {
  std::vector<int> out = response;
  out.push_back(Vocab::kEos);
  return out;
}

// Row-wise log-softmax; non-finite logits raise instead of propagating.
inline Matrix log_softmax(const Matrix& logits) {
  if (!logits.allFinite()) throw std::domain_error("log_softmax: non-finite logits");
  return ag::detail::log_softmax_rows(logits);
}

namespace ag {

// Everything a forward pass needs besides its inputs.
template <class S>
struct Forward {
  Tape<S>& tape;
  const ParameterStore& store;
  const Seq2SeqModel& model;
  bool train = false;  // dropout active
  Rng* rng = nullptr;  // dropout masks; required when train and dropout > 0
  bool mixup = true;   // false skips both mixup points entirely

  Var<S> p(ParamId id) const { return tape.param(store, id); }

  Var<S> dropout(Var<S> x) const {
    const double rate = model.cfg.dropout;
    if (!train || rate <= 0.0) return x;
    if (rng == nullptr) throw std::logic_error("dropout requires an rng");
    std::bernoulli_distribution keep(1.0 - rate);
    const S scale = static_cast<S>(1.0 / (1.0 - rate));
    Mat<S> mask(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? scale : S(0);
    return mul_const(x, std::move(mask));
  }
};

template <class S>
Var<S> linear(const Forward<S>& f, Var<S> x, ParamId w, ParamId b) {
  return add_rowvec(matmul(x, f.p(w)), f.p(b));
}

template <class S>
Var<S> norm(const Forward<S>& f, Var<S> x, const LayerNormParams& ln) {
  return layer_norm(x, f.p(ln.gamma), f.p(ln.beta));
}

// Multi-head attention; `mask` (rows = queries, cols = keys) is 1 where
// attention is allowed, empty for no masking.
template <class S>
Var<S> attention(const Forward<S>& f, const AttentionParams& a, Var<S> query_in, Var<S> kv_in, const Mat<S>& mask) {
  const int heads = f.model.cfg.heads;
  const int dh = f.model.cfg.d_model / heads;
  Var<S> q = linear(f, query_in, a.wq, a.bq);
  Var<S> k = linear(f, kv_in, a.wk, a.bk);
  Var<S> v = linear(f, kv_in, a.wv, a.bv);
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
  std::vector<Var<S>> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var<S> qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
    Var<S> kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
    Var<S> vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
    Var<S> probs = f.dropout(softmax(scale(matmul_nt(qh, kh), inv_sqrt), mask));
    outs.push_back(matmul(probs, vh));
  }
  Var<S> o = heads == 1 ? outs.front() : concat_cols(outs);
  return linear(f, o, a.wo, a.bo);
}

template <class S>
Var<S> feed_forward(const Forward<S>& f, const FeedForwardParams& p, Var<S> x) {
  Var<S> h = f.dropout(relu(linear(f, x, p.w1, p.b1)));
  return linear(f, h, p.w2, p.b2);
}

template <class S>
Var<S> embed_tokens(const Forward<S>& f, const std::vector<int>& tokens, const std::vector<int>& positions) {
  const int d = f.model.cfg.d_model;
  int max_pos = 0;
  for (const int p : positions) max_pos = std::max(max_pos, p);
  if (max_pos >= f.model.cfg.max_len) throw std::invalid_argument("sequence longer than max_len");
  const Matrix pe = sinusoidal_positions(max_pos + 1, d);
  Mat<S> pos(static_cast<Eigen::Index>(positions.size()), d);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    pos.row(static_cast<Eigen::Index>(i)) = pe.row(positions[i]).template cast<S>();
  }
  Var<S> e = scale(gather_rows(f.p(f.model.embedding), tokens), static_cast<S>(std::sqrt(static_cast<double>(d))));
  return f.dropout(add(e, f.tape.constant(std::move(pos))));
}

// Encoder outputs (one row per context token), after the final layer norm.
template <class S>
Var<S> encode(const Forward<S>& f, const SegmentedContext& ctx) {
  if (ctx.tokens.empty()) throw std::invalid_argument("encode: empty context");
  if (static_cast<int>(ctx.tokens.size()) > f.model.cfg.max_len) throw std::invalid_argument("encode: context longer than max_len");
  Mat<S> mask;
  if (f.model.cfg.per_utterance_encoding) {
    const auto n = static_cast<Eigen::Index>(ctx.tokens.size());
    mask.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        mask(i, j) = ctx.segments[static_cast<std::size_t>(i)] == ctx.segments[static_cast<std::size_t>(j)] ? S(1) : S(0);
      }
    }
  }
  Var<S> x = embed_tokens(f, ctx.tokens, ctx.positions);
  for (const auto& layer : f.model.encoder) {
    Var<S> h = norm(f, x, layer.ln_attn);
    x = add(x, f.dropout(attention(f, layer.attn, h, h, mask)));
    x = add(x, f.dropout(feed_forward(f, layer.ffn, norm(f, x, layer.ln_ffn))));
  }
  return norm(f, x, f.model.encoder_norm);
}

// e_hat = w_x * e + w_z * z_segment; `zs` holds one latent row per segment.
template <class S>
Var<S> mixup_encoder(const Forward<S>& f, Var<S> e, const std::vector<int>& segments, Var<S> zs) {
  if (zs.cols() != e.cols()) throw std::invalid_argument("mixup_encoder: latent and encoder dimensions differ");
  for (const int s : segments) {
    if (s < 0 || s >= zs.rows()) throw std::invalid_argument("mixup_encoder: missing latent for segment");
  }
  Var<S> z_tok = gather_rows(zs, segments);
  return add(mul_rowvec(e, f.p(f.model.mix_enc_x)), mul_rowvec(z_tok, f.p(f.model.mix_enc_z)));
}

inline Matrix causal_mask(Eigen::Index n) {
  Matrix m = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) m.row(i).head(i + 1).setOnes();
  return m;
}

// Teacher-forced decoder; returns logits (one row per prefix position).
// `z_T` is the 1 x d response latent used by every decoder layer's mixup.
template <class S>
Var<S> decode_forward(const Forward<S>& f, const std::vector<int>& prefix, Var<S> memory, std::optional<Var<S>> z_T) {
  if (prefix.empty() || prefix.front() != Vocab::kBos) throw std::invalid_argument("decode_forward: prefix must start with bos");
  if (static_cast<int>(prefix.size()) > f.model.cfg.max_len) throw std::invalid_argument("decode_forward: prefix longer than max_len");
  const auto m = static_cast<Eigen::Index>(prefix.size());
  std::vector<int> positions(prefix.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  const Mat<S> causal = causal_mask(m).template cast<S>();
  Var<S> x = embed_tokens(f, prefix, positions);
  std::optional<Var<S>> z_rows;
  if (f.mixup) {
    if (!z_T) throw std::invalid_argument("decode_forward: mixup needs a response latent");
    if (z_T->rows() != 1 || z_T->cols() != x.cols()) throw std::invalid_argument("decode_forward: latent dimension mismatch");
    z_rows = gather_rows(*z_T, std::vector<int>(prefix.size(), 0));
  }
  for (const auto& layer : f.model.decoder) {
    Var<S> h = norm(f, x, layer.ln_self);
    x = add(x, f.dropout(attention(f, layer.self_attn, h, h, causal)));
    if (f.mixup) x = add(mul_rowvec(x, f.p(layer.mix_x)), mul_rowvec(*z_rows, f.p(layer.mix_z)));
    x = add(x, f.dropout(attention(f, layer.cross_attn, norm(f, x, layer.ln_cross), memory, Mat<S>{})));
    x = add(x, f.dropout(feed_forward(f, layer.ffn, norm(f, x, layer.ln_ffn))));
  }
  x = norm(f, x, f.model.decoder_norm);
  return matmul_nt(x, f.p(f.model.embedding));
}

// Full conditional forward: encoder (+ mixup with `context_latents`, one row
// per context utterance) and decoder (+ mixup with `response_latent`).
// Returns per-position log-distributions.
template <class S>
Var<S> conditional_log_probs(const Forward<S>& f, const SegmentedContext& ctx, const std::vector<int>& prefix,
                             std::optional<Var<S>> context_latents, std::optional<Var<S>> response_latent) {
  Var<S> e = encode(f, ctx);
  if (f.mixup) {
    if (!context_latents) throw std::invalid_argument("conditional_log_probs: mixup needs context latents");
    e = mixup_encoder(f, e, ctx.segments, *context_latents);
  }
  return log_softmax(decode_forward(f, prefix, e, response_latent));
}

}  // namespace ag
}  // namespace bridgepath

// Response generation.
//
// Expectation mode mixes the context with the mapper's expectations and the
// decoder with mu_T extrapolated from mu_0 and mu_{T-1}. Sampled mode draws
// one path from the bridge pinned at (mu_0, mu_T) and mixes with it instead.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "bridgepath/bridge.hpp"
#include "bridgepath/corpus.hpp"
#include "bridgepath/distill.hpp"
#include "bridgepath/model.hpp"
#include "bridgepath/rng.hpp"
#include "bridgepath/seq2seq.hpp"

namespace bridgepath {

enum class LatentMode { kExpectation, kSampled };
enum class Decoding { kGreedy, kBeam, kTopK };

inline const char* to_string(LatentMode m) { return m == LatentMode::kExpectation ? "expectation" : "sampled"; }

struct GenerationRequest {
  std::vector<Utterance> context;
  LatentMode mode = LatentMode::kExpectation;
  Decoding decoding = Decoding::kGreedy;
  int beam_width = 5;
  int top_k = 5;
  int max_tokens = 20;
  std::uint64_t seed = 0;
  double delta = 0.5;
  double variance_scale = 1.0;  // multiplies every path variance in sampled mode

  void validate() const {
    if (context.empty()) throw std::invalid_argument("generate: empty context");
    if (beam_width < 1) throw std::invalid_argument("generate: beam width must be >= 1");
    if (top_k < 1) throw std::invalid_argument("generate: top-k must be >= 1");
    if (max_tokens < 1) throw std::invalid_argument("generate: max tokens must be >= 1");
    if (!(variance_scale >= 0.0)) throw std::invalid_argument("generate: variance scale must be >= 0");
  }
};

struct ContextMus {
  Matrix context;  // mu_0..mu_{T-1}, one row each
  Vector mu_T;
  bool mu_T_fallback = false;  // single-utterance context: mu_T = mu_0
};

inline ContextMus context_mus(const DialogueModel& m, const ParameterStore& store, const std::vector<Utterance>& context) {
  if (context.empty()) throw std::invalid_argument("context_mus: empty context");
  std::vector<const Utterance*> us;
  for (const auto& u : context) us.push_back(&u);
  ContextMus out;
  out.context = utterance_mus(m, store, us);
  const int T = static_cast<int>(context.size());
  const Vector mu0 = out.context.row(0).transpose();
  if (auto mu = infer_mu_T(mu0, out.context.row(T - 1).transpose(), T)) {
    out.mu_T = *mu;
  } else {
    out.mu_T = mu0;
    out.mu_T_fallback = true;
  }
  return out;
}

struct Generation {
  std::vector<int> tokens;  // without the closing eos
  std::vector<double> step_logprobs;
  double logprob = 0.0;
  bool mu_T_fallback = false;
};

namespace detail {

// Fixed encoder memory and decoder latent for one request.
struct DecodeContext {
  Matrix memory;
  Matrix z_T;  // 1 x d
};

inline DecodeContext prepare(const DialogueModel& m, const ParameterStore& store, const GenerationRequest& req,
                             bool& fallback) {
  const auto mus = context_mus(m, store, req.context);
  fallback = mus.mu_T_fallback;
  const int T = static_cast<int>(req.context.size());
  const Eigen::Index d = m.cfg.d_model;
  Matrix ctx_z(T, d);
  Matrix z_T(1, d);
  if (req.mode == LatentMode::kExpectation) {
    ctx_z = mus.context;
    z_T.row(0) = mus.mu_T.transpose();
  } else {
    // Interior means follow the interpolant between mu_0 and mu_T.
    Rng rng = make_rng(req.seed, Stream::kDecode, {0});
    const auto eps = standard_noise(T, d, rng);
    const auto pm = path_map(T, req.delta, eps, req.variance_scale);
    Matrix ends(2, d);
    ends.row(0) = mus.context.row(0);
    ends.row(1) = mus.mu_T.transpose();
    const Matrix z = pm.coeff * ends + pm.noise;
    ctx_z = z.topRows(T);
    z_T = z.bottomRows(1);
  }
  std::vector<const Utterance*> us;
  for (const auto& u : req.context) us.push_back(&u);
  const auto ctx = build_context(us, m.cfg.max_len, m.cfg.per_utterance_encoding);
  ag::Tape<double> tape(false);
  ag::Forward<double> f{tape, store, m.seq, false, nullptr, true};
  const auto e = ag::mixup_encoder(f, ag::encode(f, ctx), ctx.segments, tape.constant(ctx_z));
  return {e.value(), z_T};
}

// Log-distribution over the next token after `prefix` (bos-led).
inline Eigen::RowVectorXd next_log_probs(const DialogueModel& m, const ParameterStore& store, const DecodeContext& dc,
                                         const std::vector<int>& prefix) {
  ag::Tape<double> tape(false);
  ag::Forward<double> f{tape, store, m.seq, false, nullptr, true};
  const auto logits = ag::decode_forward<double>(f, prefix, tape.constant(dc.memory), tape.constant(dc.z_T));
  Eigen::RowVectorXd last = logits.value().bottomRows(1);
  // Never emit padding or a second bos.
  last(Vocab::kPad) = -std::numeric_limits<double>::infinity();
  last(Vocab::kBos) = -std::numeric_limits<double>::infinity();
  const double mx = last.maxCoeff();
  const double lse = mx + std::log((last.array() - mx).exp().sum());
  return last.array() - lse;
}

inline int argmax(const Eigen::RowVectorXd& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

}  // namespace detail

inline Generation generate(const GenerationRequest& req, const DialogueModel& m, const ParameterStore& store) {
  req.validate();
  Generation out;
  const auto dc = detail::prepare(m, store, req, out.mu_T_fallback);
  const int max_new = std::min(req.max_tokens, m.cfg.max_len - 1);

  if (req.decoding == Decoding::kBeam) {
    struct Hyp {
      std::vector<int> prefix{Vocab::kBos};
      std::vector<double> lps;
      double score = 0.0;
      bool done = false;
      double avg() const { return score / static_cast<double>(std::max<std::size_t>(1, lps.size())); }
    };
    std::vector<Hyp> beam(1);
    for (int step = 0; step < max_new; ++step) {
      std::vector<Hyp> pool;
      bool any_live = false;
      for (const auto& h : beam) {
        if (h.done) {
          pool.push_back(h);
          continue;
        }
        any_live = true;
        const auto lp = detail::next_log_probs(m, store, dc, h.prefix);
        std::vector<int> ids(static_cast<std::size_t>(lp.size()));
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
        const auto w = std::min<std::size_t>(static_cast<std::size_t>(req.beam_width), ids.size());
        std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(w), ids.end(),
                          [&](int a, int b) { return lp(a) > lp(b) || (lp(a) == lp(b) && a < b); });
        for (std::size_t i = 0; i < w; ++i) {
          Hyp n = h;
          n.lps.push_back(lp(ids[i]));
          n.score += lp(ids[i]);
          if (ids[i] == Vocab::kEos) {
            n.done = true;
          } else {
            n.prefix.push_back(ids[i]);
          }
          pool.push_back(std::move(n));
        }
      }
      if (!any_live) break;
      std::stable_sort(pool.begin(), pool.end(), [](const Hyp& a, const Hyp& b) { return a.avg() > b.avg(); });
      pool.resize(std::min(pool.size(), static_cast<std::size_t>(req.beam_width)));
      beam = std::move(pool);
    }
    const Hyp& best = beam.front();
    out.tokens.assign(best.prefix.begin() + 1, best.prefix.end());
    out.step_logprobs = best.lps;
    out.logprob = best.score;
    return out;
  }

  Rng rng = make_rng(req.seed, Stream::kDecode, {1});
  std::vector<int> prefix{Vocab::kBos};
  for (int step = 0; step < max_new; ++step) {
    const auto lp = detail::next_log_probs(m, store, dc, prefix);
    int tok = 0;
    if (req.decoding == Decoding::kGreedy) {
      tok = detail::argmax(lp);
    } else {
      std::vector<int> ids(static_cast<std::size_t>(lp.size()));
      for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
      const auto k = std::min<std::size_t>(static_cast<std::size_t>(req.top_k), ids.size());
      std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                        [&](int a, int b) { return lp(a) > lp(b) || (lp(a) == lp(b) && a < b); });
      std::vector<double> w(k);
      for (std::size_t i = 0; i < k; ++i) w[i] = std::exp(lp(ids[i]) - lp(ids[0]));
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      tok = ids[pick(rng)];
    }
    out.step_logprobs.push_back(lp(tok));
    out.logprob += lp(tok);
    if (tok == Vocab::kEos) break;
    out.tokens.push_back(tok);
    prefix.push_back(tok);
  }
  return out;
}

struct ResponseCount {
  std::vector<int> tokens;
  int count = 0;
};

// n generations with seeds base..base+n-1, deduplicated, most frequent first
// (ties keep first-seen order).
inline std::vector<ResponseCount> diverse_generate(GenerationRequest req, int n, const DialogueModel& m,
                                                   const ParameterStore& store, std::uint64_t base_seed) {
  if (n < 1) throw std::invalid_argument("diverse_generate: n must be >= 1");
  std::vector<ResponseCount> out;
  for (int i = 0; i < n; ++i) {
    req.seed = base_seed + static_cast<std::uint64_t>(i);
    const auto g = generate(req, m, store);
    auto it = std::find_if(out.begin(), out.end(), [&](const ResponseCount& r) { return r.tokens == g.tokens; });
    if (it == out.end()) {
      out.push_back({g.tokens, 1});
    } else {
      ++it->count;
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const ResponseCount& a, const ResponseCount& b) { return a.count > b.count; });
  return out;
}

}  // namespace bridgepath

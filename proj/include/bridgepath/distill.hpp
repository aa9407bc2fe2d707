// Training objective and loop.
//
//   L = w_beta * L_beta
//     + w_nll  * NLL(x_T | context mixed with mu_0..mu_{T-1}, decoder mixed with mu_T)
//     + w_kl   * (1/K) sum_k KL(P(. | mu) || P(. | z^k))
//
// z^k are paths drawn from the extended bridge built on the dialogue's own
// expectations (reparameterized, so gradients reach mu_0 and mu_T). The
// expectation branch is the teacher; by default its distribution is a
// constant target for the KL term.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "bridgepath/autograd.hpp"
#include "bridgepath/bridge.hpp"
#include "bridgepath/corpus.hpp"
#include "bridgepath/mapper.hpp"
#include "bridgepath/model.hpp"
#include "bridgepath/params.hpp"
#include "bridgepath/rng.hpp"
#include "bridgepath/seq2seq.hpp"

namespace bridgepath {

struct TrainConfig {
  ModelConfig model;
  int K = 4;
  double learning_rate = 1.5e-4;
  int batch_size = 16;
  long long warmup = 4000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double delta = 0.5;
  long long max_steps = 1000;
  std::uint64_t seed = 1;
  double w_beta = 1.0;
  double w_nll = 1.0;
  double w_kl = 1.0;
  int window = 5;
  bool mixup = true;          // false trains the plain transformer baseline
  bool block_teacher = true;  // teacher distribution is a constant KL target
  int patience = 10;          // epochs without validation improvement
  int threads = 1;
  long long checkpoint_every = 0;

  void validate() const {
    model.validate();
    if (K < 1) throw std::invalid_argument("train: K must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (warmup < 0) throw std::invalid_argument("train: warmup must be >= 0");
    if (max_steps < 0) throw std::invalid_argument("train: max_steps must be >= 0");
    if (!(delta > 0.0)) throw std::invalid_argument("train: delta must be > 0");
    if (window < 2) throw std::invalid_argument("train: window must be >= 2");
    if (threads < 1) throw std::invalid_argument("train: threads must be >= 1");
    if (w_beta < 0 || w_nll < 0 || w_kl < 0) throw std::invalid_argument("train: loss weights must be >= 0");
  }
};

struct LossBreakdown {
  double l_beta = 0.0;
  double nll = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

struct TeacherOutput {
  Matrix log_probs;  // one row per target position (response tokens + eos)
  Matrix mus;        // T + 1 expectations
};

// Latent path rows z_0..z_T as an affine function of mu_0 and mu_T plus
// scaled noise: z = A [mu_0; mu_T] + sigma * eps. An empty map means z = mu
// row for row.
struct PathMap {
  Matrix coeff;  // (T + 1) x 2
  Matrix noise;  // (T + 1) x d, already scaled by the marginal std
};

inline PathMap path_map(int T, double delta, const std::vector<Vector>& eps, double variance_scale = 1.0) {
  if (static_cast<int>(eps.size()) != T + 1) throw std::invalid_argument("path_map: noise length mismatch");
  PathMap pm;
  pm.coeff = Matrix::Zero(T + 1, 2);
  pm.noise = Matrix(T + 1, eps.front().size());
  for (int t = 0; t <= T; ++t) {
    double var = 0.0;
    if (t == 0 || t == T) {
      pm.coeff(t, t == 0 ? 0 : 1) = 1.0;
      var = endpoint_variance(T, delta);
    } else {
      const double w = static_cast<double>(t) / static_cast<double>(T);
      pm.coeff(t, 0) = 1.0 - w;
      pm.coeff(t, 1) = w;
      var = interior_variance(t, T);
    }
    pm.noise.row(t) = std::sqrt(var * variance_scale) * eps[static_cast<std::size_t>(t)].transpose();
  }
  return pm;
}

inline std::vector<Vector> path_noise(const TrainConfig& cfg, long long step, std::uint64_t item, int k, int T) {
  Rng rng = make_rng(cfg.seed, Stream::kPaths, {static_cast<std::uint64_t>(step), item, static_cast<std::uint64_t>(k)});
  return standard_noise(T, cfg.model.d_model, rng);
}

namespace ag {

template <class S>
struct DialogueTerms {
  Var<S> nll;
  std::optional<Var<S>> kl;  // absent when mixup or the KL term is off
  Var<S> teacher_log_probs;
  std::vector<Var<S>> student_log_probs;
};

// Teacher and student branches for one dialogue. `mus` is (T + 1) x d.
// `train` enables dropout, with masks derived from (seed, step, item, branch).
template <class S>
DialogueTerms<S> dialogue_terms(Tape<S>& tape, const DialogueModel& m, const ParameterStore& store,
                                const TrainConfig& cfg, const Dialogue& d, std::optional<Var<S>> mus,
                                const std::vector<PathMap>& paths, bool train, long long step, std::uint64_t item) {
  const int T = d.T();
  if (T < 1) throw std::invalid_argument("dialogue needs a context and a response");
  const auto ctx = build_context(d, m.cfg.max_len, m.cfg.per_utterance_encoding);
  const auto prefix = decoder_input(d.response().tokens);
  const auto target = decoder_target(d.response().tokens);
  if (cfg.mixup && (!mus || mus->rows() != T + 1)) throw std::invalid_argument("dialogue_terms: need T + 1 expectations");

  const bool dropout_on = train && m.cfg.dropout > 0.0;
  std::vector<Rng> rngs;
  const std::size_t branches = 1 + paths.size();
  for (std::size_t b = 0; b < branches; ++b) {
    rngs.push_back(make_rng(cfg.seed, Stream::kDropout, {static_cast<std::uint64_t>(step), item, b}));
  }
  auto forward = [&](std::size_t branch) {
    return Forward<S>{tape, store, m.seq, dropout_on, &rngs[branch], cfg.mixup};
  };

  // Encoder outputs do not depend on the latents, so without dropout they are
  // shared by every branch.
  std::optional<Var<S>> shared_e;
  if (!dropout_on) shared_e = encode(forward(0), ctx);
  auto branch_log_probs = [&](std::size_t branch, std::optional<Var<S>> ctx_z, std::optional<Var<S>> resp_z) {
    const auto f = forward(branch);
    Var<S> e = shared_e ? *shared_e : encode(f, ctx);
    if (cfg.mixup) e = mixup_encoder(f, e, ctx.segments, *ctx_z);
    return log_softmax(decode_forward(f, prefix, e, resp_z));
  };

  DialogueTerms<S> out;
  std::optional<Var<S>> ctx_mu, resp_mu;
  if (cfg.mixup) {
    ctx_mu = slice_rows(*mus, 0, T);
    resp_mu = slice_rows(*mus, T, 1);
  }
  out.teacher_log_probs = branch_log_probs(0, ctx_mu, resp_mu);
  out.nll = nll(out.teacher_log_probs, target);

  if (cfg.mixup && !paths.empty()) {
    Var<S> ends = gather_rows(*mus, {0, T});
    Var<S> target_dist = cfg.block_teacher ? detach(out.teacher_log_probs) : out.teacher_log_probs;
    std::vector<Var<S>> kls;
    for (std::size_t k = 0; k < paths.size(); ++k) {
      const auto& pm = paths[k];
      Var<S> z = pm.coeff.size() == 0
                     ? *mus
                     : add(matmul(tape.constant(pm.coeff.template cast<S>()), ends), tape.constant(pm.noise.template cast<S>()));
      Var<S> lp = branch_log_probs(k + 1, slice_rows(z, 0, T), slice_rows(z, T, 1));
      out.student_log_probs.push_back(lp);
      kls.push_back(kl_rows(target_dist, lp));
    }
    out.kl = scale(sum(concat_rows(kls)), S(1) / static_cast<S>(kls.size()));
  }
  return out;
}

}  // namespace ag

// Teacher-forced expectation branch without dropout.
inline TeacherOutput teacher_forward(const Dialogue& d, const DialogueModel& m, const ParameterStore& store,
                                     bool mixup = true) {
  ag::Tape<double> tape(false);
  TeacherOutput out;
  std::optional<ag::Var<double>> mus;
  if (mixup) {
    out.mus = dialogue_mus(m, store, d);
    mus = tape.constant(out.mus);
  }
  TrainConfig cfg;
  cfg.model = m.cfg;
  cfg.mixup = mixup;
  auto terms = ag::dialogue_terms<double>(tape, m, store, cfg, d, mus, {}, false, 0, 0);
  out.log_probs = terms.teacher_log_probs.value();
  return out;
}

// Mean over positions of -log p(gold); pad targets are skipped.
inline double nll_loss(const Matrix& log_probs, const std::vector<int>& targets) {
  if (static_cast<Eigen::Index>(targets.size()) != log_probs.rows()) throw std::invalid_argument("nll_loss: length mismatch");
  double total = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == Vocab::kPad) continue;
    total -= log_probs(static_cast<Eigen::Index>(i), targets[i]);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("nll_loss: no non-pad targets");
  return total / count;
}

// Mean over rows of KL(teacher || student), both given as log-distributions.
inline double kl_divergence(const Matrix& teacher_log_probs, const Matrix& student_log_probs) {
  if (teacher_log_probs.rows() != student_log_probs.rows() || teacher_log_probs.cols() != student_log_probs.cols()) {
    throw std::invalid_argument("kl_divergence: shape mismatch");
  }
  const Matrix p = teacher_log_probs.array().exp();
  return p.cwiseProduct(teacher_log_probs - student_log_probs).sum() / static_cast<double>(teacher_log_probs.rows());
}

// Student distribution with context latents z_0..z_{T-1} and response latent
// z_T, no dropout.
inline Matrix student_forward(const Dialogue& d, const DialogueModel& m, const ParameterStore& store,
                              const LatentPath& path) {
  if (static_cast<int>(path.zs.size()) != d.T() + 1) throw std::invalid_argument("student_forward: path length does not match dialogue");
  ag::Tape<double> tape(false);
  Matrix z(d.T() + 1, m.cfg.d_model);
  for (int t = 0; t <= d.T(); ++t) z.row(t) = path.zs[static_cast<std::size_t>(t)].transpose();
  ag::Var<double> zv = tape.constant(z);
  ag::Forward<double> f{tape, store, m.seq, false, nullptr, true};
  const auto ctx = build_context(d, m.cfg.max_len, m.cfg.per_utterance_encoding);
  return ag::conditional_log_probs<double>(f, ctx, decoder_input(d.response().tokens), ag::slice_rows(zv, 0, d.T()),
                                           ag::slice_rows(zv, d.T(), 1))
      .value();
}

// (1/K) sum_k KL(teacher || student_k) without dropout.
inline double distill_kl(const Dialogue& d, const Matrix& teacher_log_probs, const DialogueModel& m,
                         const ParameterStore& store, const std::vector<LatentPath>& paths) {
  if (paths.empty()) throw std::invalid_argument("distill_kl: need at least one path");
  double total = 0.0;
  for (const auto& p : paths) total += kl_divergence(teacher_log_probs, student_forward(d, m, store, p));
  return total / static_cast<double>(paths.size());
}

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const LossBreakdown& l, long long step)
      : std::runtime_error(describe(l, step)), losses(l) {}
  LossBreakdown losses;

 private:
  static std::string describe(const LossBreakdown& l, long long step) {
    std::ostringstream os;
    os << "non-finite loss at step " << step << ": l_beta=" << l.l_beta << " nll=" << l.nll << " kl=" << l.kl;
    return os.str();
  }
};

// Options that only tests and diagnostics touch.
struct ObjectiveOptions {
  bool train = true;             // dropout on
  double variance_scale = 1.0;   // multiplies every path variance
  bool force_mean_paths = false; // every path is z_t = mu_t
};

namespace detail {
template <class F>
void parallel_for(int n, int threads, F&& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const int workers = std::min(threads, n);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}
}  // namespace detail

// Full objective over a mini-batch. Randomness (triplet sampling, paths,
// dropout) is a function of (cfg.seed, step, position in batch), so repeated
// calls with the same arguments are identical. Gradients are added to `grads`
// when given. Dialogues are processed independently and reduced in order,
// which keeps the result bitwise independent of the thread count.
template <class S = double>
LossBreakdown batch_objective(const DialogueModel& m, const ParameterStore& store, const TrainConfig& cfg,
                              const std::vector<const Dialogue*>& batch, long long step, GradBuffer* grads,
                              const ObjectiveOptions& opt = {}) {
  if (batch.empty()) throw std::invalid_argument("batch_objective: empty batch");
  const bool want_grad = grads != nullptr;
  if (want_grad && grads->size() < store.size()) grads->resize(store.size());
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  LossBreakdown out;

  // Expectations and the contrastive term share one tape over the batch.
  ag::Tape<S> mtape(want_grad);
  std::optional<ag::Var<S>> all_mus;
  std::optional<ag::Var<S>> lbeta;
  std::vector<int> first_row(batch.size() + 1, 0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    first_row[b + 1] = first_row[b] + static_cast<int>(batch[b]->utterances.size());
  }
  if (cfg.mixup) {
    std::vector<const Utterance*> us;
    for (const auto* d : batch) {
      for (const auto& u : d->utterances) us.push_back(&u);
    }
    all_mus = ag::utterance_mus(mtape, m, store, us);
    std::vector<Triplet> triplets;
    const int total_rows = first_row.back();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      Rng trng = make_rng(cfg.seed, Stream::kTriplets, {static_cast<std::uint64_t>(step), b});
      for (const auto& tri : dialogue_triplets(static_cast<int>(batch[b]->utterances.size()), trng)) {
        Triplet tr;
        tr.t0 = tri[0];
        tr.t1 = tri[1];
        tr.t2 = tri[2];
        tr.row0 = first_row[b] + tri[0];
        tr.row1 = first_row[b] + tri[1];
        tr.row2 = first_row[b] + tri[2];
        for (int r = 0; r < total_rows; ++r) {
          if (r != tr.row1) tr.negatives.push_back(r);
        }
        triplets.push_back(std::move(tr));
      }
    }
    lbeta = ag::contrastive_loss(*all_mus, triplets);
    out.l_beta = static_cast<double>(lbeta->scalar());
  }

  struct Item {
    double nll = 0.0;
    double kl = 0.0;
    GradBuffer grads;
    ag::Mat<S> mu_grad;
  };
  std::vector<Item> items(batch.size());
  const bool use_kl = cfg.mixup && cfg.w_kl > 0.0;
  detail::parallel_for(static_cast<int>(batch.size()), cfg.threads, [&](int bi) {
    const auto b = static_cast<std::size_t>(bi);
    const Dialogue& d = *batch[b];
    const int T = d.T();
    ag::Tape<S> tape(want_grad);
    std::optional<ag::Var<S>> mus;
    if (cfg.mixup) mus = tape.input(all_mus->value().middleRows(first_row[b], T + 1));
    std::vector<PathMap> paths;
    if (use_kl) {
      for (int k = 0; k < cfg.K; ++k) {
        if (opt.force_mean_paths) {
          paths.emplace_back();
        } else {
          paths.push_back(path_map(T, cfg.delta, path_noise(cfg, step, b, k, T), opt.variance_scale));
        }
      }
    }
    auto terms = ag::dialogue_terms<S>(tape, m, store, cfg, d, mus, paths, opt.train, step, b);
    Item& it = items[b];
    it.nll = static_cast<double>(terms.nll.scalar());
    it.kl = terms.kl ? static_cast<double>(terms.kl->scalar()) : 0.0;
    if (!want_grad) return;
    ag::Var<S> obj = ag::scale(terms.nll, static_cast<S>(cfg.w_nll));
    if (terms.kl) obj = ag::add(obj, ag::scale(*terms.kl, static_cast<S>(cfg.w_kl)));
    tape.backward(obj);
    it.grads.resize(store.size());
    tape.flush(it.grads, inv_b);
    if (mus && tape.grad(mus->id).size() != 0) it.mu_grad = tape.grad(mus->id) * static_cast<S>(inv_b);
  });

  for (const auto& it : items) {
    out.nll += it.nll * inv_b;
    out.kl += it.kl * inv_b;
  }
  out.total = cfg.w_nll * out.nll + (cfg.mixup ? cfg.w_beta * out.l_beta + cfg.w_kl * out.kl : 0.0);
  if (!std::isfinite(out.total)) throw NonFiniteLoss(out, step);

  if (want_grad) {
    for (const auto& it : items) grads->add(it.grads);
    if (cfg.mixup) {
      ag::Mat<S> dmus = ag::Mat<S>::Zero(all_mus->rows(), all_mus->cols());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        if (items[b].mu_grad.size() != 0) dmus.middleRows(first_row[b], items[b].mu_grad.rows()) += items[b].mu_grad;
      }
      mtape.seed(*all_mus, dmus);
      mtape.seed(*lbeta, ag::Mat<S>::Constant(1, 1, static_cast<S>(cfg.w_beta)));
      mtape.propagate();
      mtape.flush(*grads);
    }
  }
  return out;
}

// Single-dialogue objective (a batch of one).
inline LossBreakdown total_loss(const Dialogue& d, const DialogueModel& m, const ParameterStore& store,
                                const TrainConfig& cfg, long long step, GradBuffer* grads,
                                const ObjectiveOptions& opt = {}) {
  return batch_objective<double>(m, store, cfg, {&d}, step, grads, opt);
}

}  // namespace bridgepath

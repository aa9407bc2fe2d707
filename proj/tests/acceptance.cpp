// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Each check draws its oracle from test code, not from the library
// routine under test.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Cholesky>

#include "fixtures.hpp"

using namespace bridgepath;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... xs) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, xs...);
  return buf;
}

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---------------------------------------------------------------------------
// 1. Marginal means and variances of the extended bridge.

Outcome marginals() {
  const auto t0 = Clock::now();
  const int T = 4, N = 200000;
  const double delta = 0.5;
  // Entries of magnitude >= 1 or exactly 0, so the 1% / 0.01 rule is well posed.
  std::vector<Vector> mus(5, Vector(4));
  mus[0] << 1.0, -2.0, 0.0, 3.0;
  mus[1] << 0.5, 0.5, 0.5, 0.5;
  mus[2] << -1.0, 1.0, 2.0, 0.0;
  mus[3] << 2.0, 2.0, -2.0, 1.0;
  mus[4] << 3.0, -1.0, 0.0, -3.0;
  const BridgeParams p(mus, delta);

  std::vector<Vector> sum(5, Vector::Zero(4)), sq(5, Vector::Zero(4));
  Rng rng(2024);
  for (int n = 0; n < N; ++n) {
    const auto path = sample_path(p, rng);
    for (int t = 0; t <= T; ++t) {
      sum[t] += path.zs[t];
      sq[t] += path.zs[t].cwiseProduct(path.zs[t]);
    }
  }
  double worst_mean = 0.0, worst_var = 0.0;
  bool ok = true;
  for (int t = 0; t <= T; ++t) {
    // Interior mean moves linearly from mu_0 to mu_T.
    const Vector want = (t == 0 || t == T) ? mus[t] : Vector(mus[0] + (double(t) / T) * (mus[4] - mus[0]));
    const double want_var = (t == 0 || t == T) ? 0.875 : t * (T - t) / double(T);
    for (int i = 0; i < 4; ++i) {
      const double m = sum[t](i) / N;
      const double v = sq[t](i) / N - m * m;
      const double em = want(i) == 0.0 ? std::abs(m) / 0.01 : std::abs(m - want(i)) / (0.01 * std::abs(want(i)));
      const double ev = std::abs(v - want_var) / want_var;
      worst_mean = std::max(worst_mean, em);
      worst_var = std::max(worst_var, ev);
      ok = ok && em < 1.0 && ev < 0.02;
    }
  }
  const double sec = since(t0);
  ok = ok && sec < 10.0;
  return {ok, fmt("mean err %.2f of tolerance, max var rel err %.4f, %.1f s", worst_mean, worst_var, sec)};
}

// ---------------------------------------------------------------------------
// 2. Joint law: an independent sampler built from the full interior
// covariance min(s, t) (T - max(s, t)) / T.

Outcome covariance() {
  const auto t0 = Clock::now();
  const int T = 4, N = 200000;
  Eigen::Matrix3d C;
  for (int a = 1; a <= 3; ++a) {
    for (int b = 1; b <= 3; ++b) C(a - 1, b - 1) = std::min(a, b) * double(T - std::max(a, b)) / T;
  }
  const Eigen::Matrix3d L = C.llt().matrixL();
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n01;
  double s1 = 0, s3 = 0, s13 = 0;
  for (int n = 0; n < N; ++n) {
    const Eigen::Vector3d e(n01(rng), n01(rng), n01(rng));
    const Eigen::Vector3d z = L * e;
    s1 += z(0);
    s3 += z(2);
    s13 += z(0) * z(2);
  }
  const double cov = s13 / N - (s1 / N) * (s3 / N);
  const double lib = interior_covariance(1, 3, T);
  const double rel = std::abs(cov - 0.25) / 0.25;
  const double sec = since(t0);
  const bool ok = rel < 0.03 && std::abs(lib - 0.25) < 1e-15 && sec < 10.0;
  return {ok, fmt("empirical Cov(z1,z3) %.5f (rel err %.4f), library %.4f, %.1f s", cov, rel, lib, sec)};
}

// ---------------------------------------------------------------------------
// 3. The extrapolated mu_T puts mu_{T-1} back on the segment from mu_0.

Outcome extrapolation() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> Td(2, 10), dd(0, 2);
  std::normal_distribution<double> n01;
  const int dims[] = {2, 8, 32};
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const int T = Td(rng), d = dims[dd(rng)];
    Vector mu0(d), prev(d);
    for (int i = 0; i < d; ++i) {
      mu0(i) = n01(rng);
      prev(i) = n01(rng);
    }
    const Vector muT = *infer_mu_T(mu0, prev, T);
    const double w = double(T - 1) / T;
    worst = std::max(worst, (prev - ((1.0 - w) * mu0 + w * muT)).cwiseAbs().maxCoeff());
  }
  const double sec = since(t0);
  return {worst < 1e-9 && sec < 1.0, fmt("max residual %.3g, %.3f s", worst, sec)};
}

// ---------------------------------------------------------------------------
// 4. Finite differences on the full objective, every entry of every tensor.

Outcome gradients() {
  const auto t0 = Clock::now();
  GradcheckOptions opt;
  opt.h = 1e-5;
  opt.threshold = 1e-4;
  const auto rep = run_gradcheck(tiny_gradcheck_setup(), opt);
  std::string worst;
  double w = 0.0;
  int checked = 0;
  for (const auto& g : rep.groups) {
    checked += g.checked;
    if (g.max_rel_error >= w) {
      w = g.max_rel_error;
      worst = g.group;
    }
  }
  const double sec = since(t0);
  return {rep.pass && sec < 120.0,
          fmt("%zu groups, %d entries, worst %s %.3g, %.1f s", rep.groups.size(), checked, worst.c_str(), w, sec)};
}

// ---------------------------------------------------------------------------
// 5. Identity gates: logits bitwise equal to the unmixed transformer.

Outcome ablation() {
  ModelConfig cfg;
  cfg.vocab_size = 30;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.encoder_layers = 2;
  cfg.decoder_layers = 2;
  cfg.ffn_dim = 32;
  cfg.max_len = 64;
  cfg.dropout = 0.0;
  ParameterStore store;
  Rng init(5);
  const auto model = create_seq2seq(store, cfg, init);
  for (ParamId id = 0; id < static_cast<ParamId>(store.size()); ++id) {
    Matrix& v = store.value(id);
    v += fixtures::randn(v.rows(), v.cols(), 100 + static_cast<unsigned>(id), 0.3);
  }
  disable_mixup(store, model);

  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> tok(4, cfg.vocab_size - 1), len(1, 6), turns(1, 4);
  int equal = 0;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Utterance> us(static_cast<std::size_t>(turns(rng)));
    for (auto& u : us) {
      for (int i = len(rng); i > 0; --i) u.tokens.push_back(tok(rng));
    }
    std::vector<const Utterance*> up;
    for (const auto& u : us) up.push_back(&u);
    const auto ctx = build_context(up, cfg.max_len);
    std::vector<int> prefix{Vocab::kBos};
    for (int i = len(rng); i > 0; --i) prefix.push_back(tok(rng));
    const Matrix zc = fixtures::randn(ctx.num_segments, cfg.d_model, 300 + trial, 3.0);
    const Matrix zr = fixtures::randn(1, cfg.d_model, 400 + trial, 3.0);

    auto logits = [&](bool mixup) {
      ag::Tape<double> tape(false);
      ag::Forward<double> f{tape, store, model, false, nullptr, mixup};
      ag::Var<double> e = ag::encode(f, ctx);
      std::optional<ag::Var<double>> z;
      if (mixup) {
        e = ag::mixup_encoder(f, e, ctx.segments, tape.constant(zc));
        z = tape.constant(zr);
      }
      return Matrix(ag::decode_forward<double>(f, prefix, e, z).value());
    };
    if (logits(true) == logits(false)) ++equal;
  }
  return {equal == 10, fmt("%d/10 inputs bitwise equal", equal)};
}

// ---------------------------------------------------------------------------
// Shared corpus for 6, 7 and 10: branching 3, five turns, first 200 dialogues.

struct Branching {
  SynthCorpus corpus;
  std::vector<Dialogue> dialogues;
};

Branching branching_corpus() {
  SynthSpec s;
  s.branching = 3;
  s.templates = 3;
  s.turns = 5;
  s.vocab_size = 40;
  s.seed = 11;
  Branching b{synth_corpus(s), {}};
  b.dialogues.assign(b.corpus.dialogues.begin(), b.corpus.dialogues.begin() + 200);
  return b;
}

TrainConfig small_config(int vocab, int d = 32) {
  TrainConfig c = fixtures::tiny_config(vocab);
  c.model.d_model = d;
  c.model.ffn_dim = 2 * d;
  c.model.mapper_hidden = 2 * d;
  c.batch_size = 16;
  c.learning_rate = 1e-3;
  c.warmup = 100;
  c.threads = 1;
  return c;
}

// Mean |mu_t1 - interpolant| over every ordered triplet of every dialogue.
double mean_residual(const TrainState& st, const std::vector<Dialogue>& ds) {
  double total = 0.0;
  int count = 0;
  for (const auto& d : ds) {
    const Matrix mus = dialogue_mus(st.model, st.store, d);
    Rng unused(0);
    for (const auto& tri : dialogue_triplets(static_cast<int>(mus.rows()), unused, 1 << 20)) {
      Triplet tr;
      tr.t0 = tr.row0 = tri[0];
      tr.t1 = tr.row1 = tri[1];
      tr.t2 = tr.row2 = tri[2];
      total += triplet_residual(mus, tr);
      ++count;
    }
  }
  return total / count;
}

double mean_norm(const TrainState& st, const std::vector<Dialogue>& ds) {
  double total = 0.0;
  int count = 0;
  for (const auto& d : ds) {
    const Matrix mus = dialogue_mus(st.model, st.store, d);
    for (Eigen::Index r = 0; r < mus.rows(); ++r, ++count) total += mus.row(r).norm();
  }
  return total / count;
}

struct ContrastiveRun {
  std::unique_ptr<TrainState> st;
  double residual0 = 0.0, residual1 = 0.0;
  double norm0 = 0.0, norm1 = 0.0;
  double last_lbeta = 0.0;
  int n_neg = 0;
  long long kl_negative = 0, kl_steps = 0;
  double min_kl = 0.0;
  double seconds = 0.0;
};

ContrastiveRun contrastive_run(const Branching& b) {
  const auto t0 = Clock::now();
  ContrastiveRun r;
  auto cfg = small_config(b.corpus.vocab.size());
  cfg.K = 2;
  cfg.max_steps = 500;
  cfg.model.dropout = 0.1;
  r.st = init_state(cfg, b.corpus.vocab);
  r.residual0 = mean_residual(*r.st, b.dialogues);
  r.norm0 = mean_norm(*r.st, b.dialogues);
  r.min_kl = std::numeric_limits<double>::infinity();
  TrainOptions opt;
  opt.on_step = [&](const TrainState&, const StepLog& s) {
    ++r.kl_steps;
    if (!(s.kl >= 0.0)) ++r.kl_negative;
    r.min_kl = std::min(r.min_kl, s.kl);
  };
  const auto res = train(*r.st, b.dialogues, nullptr, opt);
  r.residual1 = mean_residual(*r.st, b.dialogues);
  r.norm1 = mean_norm(*r.st, b.dialogues);
  r.last_lbeta = res.log.back().l_beta;
  r.n_neg = cfg.batch_size * 5 - 1;
  r.seconds = since(t0);
  return r;
}

// ---------------------------------------------------------------------------
// 6. KL vanishes on mean paths and is never negative on sampled ones.

Outcome self_distillation(const Branching& b, const ContrastiveRun& run) {
  auto cfg = small_config(b.corpus.vocab.size());
  cfg.K = 4;
  cfg.model.dropout = 0.0;
  auto st = init_state(cfg, b.corpus.vocab);
  fixtures::jitter_mix(st->store, st->model, 21);
  ObjectiveOptions oo;
  oo.train = false;
  oo.force_mean_paths = true;
  double worst = 0.0;
  for (int i = 0; i < 4; ++i) {
    std::vector<const Dialogue*> batch;
    for (int j = 0; j < 8; ++j) batch.push_back(&b.dialogues[static_cast<std::size_t>(i * 8 + j)]);
    worst = std::max(worst, std::abs(batch_objective<double>(st->model, st->store, cfg, batch, i, nullptr, oo).kl));
  }
  const bool ok = worst <= 1e-12 && run.kl_negative == 0 && run.kl_steps == 500;
  return {ok, fmt("mean-path |KL| max %.3g; sampled KL >= 0 on %lld/%lld steps (min %.4g)", worst,
                  run.kl_steps - run.kl_negative, run.kl_steps, run.min_kl)};
}

// ---------------------------------------------------------------------------
// 7. Contrastive descent.

Outcome contrastive(const ContrastiveRun& r) {
  const double drop = 1.0 - r.residual1 / r.residual0;
  const double bound = std::log(1.0 + r.n_neg);
  const bool ok = drop >= 0.5 && r.last_lbeta < bound && r.seconds < 180.0;
  return {ok, fmt("residual %.4f -> %.4f (drop %.1f%%; mean |mu| %.3f -> %.3f), L_beta %.4f vs ln(1+%d) = %.4f, %.1f s",
                  r.residual0, r.residual1, 100.0 * drop, r.norm0, r.norm1, r.last_lbeta, r.n_neg, bound, r.seconds)};
}

// ---------------------------------------------------------------------------
// 8. Overfit 32 dialogues.

Outcome overfit() {
  const auto t0 = Clock::now();
  SynthSpec s;
  s.branching = 2;
  s.templates = 8;
  s.turns = 3;
  s.vocab_size = 40;
  s.seed = 3;
  const auto c = synth_corpus(s);
  auto cfg = small_config(c.vocab.size());
  cfg.K = 1;
  cfg.max_steps = 2000;
  auto st = init_state(cfg, c.vocab);
  double nll = std::numeric_limits<double>::infinity();
  TrainOptions opt;
  opt.stop_after = 100;
  while (st->step < cfg.max_steps) {
    train(*st, c.dialogues, nullptr, opt);
    nll = std::log(perplexity(st->model, st->store, c.dialogues, cfg.mixup));
    if (nll < 0.1) break;
  }
  const double sec = since(t0);
  return {nll < 0.1 && sec < 300.0,
          fmt("%zu dialogues, per-token NLL %.4f after %lld steps, %.1f s", c.dialogues.size(), nll, st->step, sec)};
}

// ---------------------------------------------------------------------------
// 9. Directional generalization against the no-mixup baseline.

struct SystemScore {
  double distinct2 = 0.0;
  double valid = 0.0;  // percent
};

Outcome generalization(std::string& log) {
  const auto t0 = Clock::now();
  SynthSpec s;
  s.branching = 3;
  s.templates = 90;
  s.turns = 4;
  s.vocab_size = 60;
  s.seed = 5;
  const auto c = synth_corpus(s);
  // Hold out whole contexts (all of their responses).
  std::map<std::string, std::vector<const Dialogue*>> by_context;
  for (const auto& d : c.dialogues) by_context[prefix_key(d, d.T())].push_back(&d);
  std::vector<std::string> keys;
  for (const auto& [k, v] : by_context) keys.push_back(k);
  std::shuffle(keys.begin(), keys.end(), std::mt19937_64(8));
  const std::size_t held = keys.size() - 2000 / 3 - 1;
  std::set<std::string> held_keys(keys.begin(), keys.begin() + static_cast<long>(held));
  std::vector<Dialogue> train_set;
  std::vector<const Dialogue*> held_out;
  for (const auto& [k, v] : by_context) {
    if (held_keys.count(k)) {
      held_out.push_back(v.front());
    } else {
      for (const auto* d : v) train_set.push_back(*d);
    }
  }

  auto run = [&](std::uint64_t seed, bool mixup) {
    auto cfg = small_config(c.vocab.size(), 32);
    cfg.seed = seed;
    cfg.mixup = mixup;
    cfg.K = 4;
    cfg.max_steps = 4000;
    cfg.model.dropout = 0.1;
    auto st = init_state(cfg, c.vocab);
    if (!mixup) disable_mixup(st->store, st->model.seq);
    train(*st, train_set);
    std::vector<Sentence> hyps;
    int valid = 0;
    GenerationRequest req;
    req.decoding = Decoding::kTopK;
    req.max_tokens = 8;
    req.delta = cfg.delta;
    for (std::size_t i = 0; i < held_out.size(); ++i) {
      const auto& d = *held_out[i];
      req.context.assign(d.utterances.begin(), d.utterances.end() - 1);
      req.seed = seed * 100000 + i;
      const auto text = detokenize(generate(req, st->model, st->store).tokens, c.vocab);
      hyps.push_back(split_words(text));
      const auto& conts = c.continuations.at(prefix_key(d, d.T()));
      if (std::find(conts.begin(), conts.end(), text) != conts.end()) ++valid;
    }
    return SystemScore{distinct_n(hyps, 2), 100.0 * valid / static_cast<double>(held_out.size())};
  };

  int wins = 0;
  bool valid_ok = true;
  std::ostringstream os;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto gps = run(seed, true);
    const auto base = run(seed, false);
    if (gps.distinct2 >= base.distinct2) ++wins;
    valid_ok = valid_ok && gps.valid >= base.valid - 5.0;
    os << fmt("    seed %d: mixup distinct-2 %.2f valid %.1f%% | baseline distinct-2 %.2f valid %.1f%%\n", int(seed),
              gps.distinct2, gps.valid, base.distinct2, base.valid);
  }
  log = os.str();
  const double sec = since(t0);
  return {wins >= 2 && valid_ok && sec < 1800.0,
          fmt("%zu train / %zu held-out contexts; distinct-2 wins %d/3, valid within 5 pts: %s, %.0f s", train_set.size(),
              held_out.size(), wins, valid_ok ? "yes" : "no", sec)};
}

// ---------------------------------------------------------------------------
// 10. Hull area of path points against K, in the normalized coordinates of
// the path dump (dim0, dim1 after per-dimension min-max scaling). Areas are
// means over 20 path draws. The unnormalized growth along the two leading
// principal axes of the expectations is reported alongside.

Outcome saturation(const TrainState& st, const Dialogue& d) {
  const int draws = 20;
  const std::vector<int> Ks{1, 2, 4, 8, 16};
  const Matrix mus = dialogue_mus(st.model, st.store, d);
  const Eigen::RowVectorXd mean = mus.colwise().mean();
  Eigen::JacobiSVD<Matrix> svd(Matrix(mus.rowwise() - mean), Eigen::ComputeThinV);
  const Matrix axes = svd.matrixV().leftCols(2);
  std::vector<double> norm(Ks.size(), 0.0), raw(Ks.size(), 0.0);
  for (int r = 0; r < draws; ++r) {
    for (std::size_t i = 0; i < Ks.size(); ++i) {
      const auto paths = dialogue_paths(st.model, st.store, d, Ks[i], 77 + 1000 * static_cast<std::uint64_t>(r), st.config.delta);
      std::vector<Point2> pts, proj;
      for (const auto& p : normalize_paths(paths)) {
        for (const auto& z : p.zs) pts.push_back({z(0), z(1)});
      }
      for (const auto& p : paths) {
        for (const auto& z : p.zs) {
          const Eigen::Vector2d q = axes.transpose() * (z - mean.transpose());
          proj.push_back({q(0), q(1)});
        }
      }
      norm[i] += convex_hull_area(pts) / draws;
      raw[i] += convex_hull_area(proj) / draws;
    }
  }
  bool mono = true;
  for (std::size_t i = 1; i < 4; ++i) mono = mono && norm[i] > norm[i - 1];
  const double growth = norm[4] / norm[3] - 1.0;
  return {mono && growth < 0.10,
          fmt("normalized areas K=1,2,4,8,16: %.4f %.4f %.4f %.4f %.4f; 8->16 growth %.1f%% (unnormalized %.1f%%)",
              norm[0], norm[1], norm[2], norm[3], norm[4], 100.0 * growth, 100.0 * (raw[4] / raw[3] - 1.0))};
}

// ---------------------------------------------------------------------------
// 11. Diverse generation from an overfit branching model.

Outcome diverse(const TrainState& st, const Dialogue& d, std::string& log) {
  GenerationRequest req;
  req.context.assign(d.utterances.begin(), d.utterances.end() - 1);
  req.max_tokens = 8;
  req.delta = st.config.delta;
  const auto expected = generate(req, st.model, st.store).tokens;
  req.mode = LatentMode::kSampled;
  std::set<std::vector<int>> distinct;
  int modal_hits = 0;
  std::ostringstream os;
  for (std::uint64_t group = 0; group < 3; ++group) {
    const auto hist = diverse_generate(req, 10, st.model, st.store, 1000 * (group + 1));
    for (const auto& h : hist) distinct.insert(h.tokens);
    if (hist.front().tokens == expected) ++modal_hits;
    os << "    group " << group << ":";
    for (const auto& h : hist) os << " [" << detokenize(h.tokens, st.vocab) << "] x" << h.count;
    os << "\n";
  }
  log = os.str();
  return {distinct.size() >= 2 && modal_hits >= 2,
          fmt("%zu distinct responses over 30 draws; modal == expectation in %d/3 groups", distinct.size(), modal_hits)};
}

// ---------------------------------------------------------------------------
// 12. Metric fixtures, three per metric, derived by hand.

Outcome metric_fixtures() {
  auto H = [](std::initializer_list<const char*> xs) {
    std::vector<Sentence> out;
    for (const char* x : xs) out.push_back(split_words(x));
    return out;
  };
  int good = 0, total = 0;
  auto check = [&](double got, double want) {
    ++total;
    if (std::abs(got - want) <= 1e-12 * std::max(1.0, std::abs(want))) ++good;
  };
  // BLEU-1: exact match; "a a" vs "a b" clips to 1/2; short hyp BP = exp(1 - 4/2).
  check(bleu_n(H({"the cat sat"}), {H({"the cat sat"})}, 1), 100.0);
  check(bleu_n(H({"a a"}), {H({"a b"})}, 1), 50.0);
  check(bleu_n(H({"a b"}), {H({"a b c d"})}, 1), 100.0 * std::exp(-1.0));
  // BLEU-2: p1 = 2/3, p2 = 1/2; corpus p1 = 1, p2 = 1/2; p2 = 0 floored.
  check(bleu_n(H({"a b c"}), {H({"a b d"})}, 2), 100.0 * std::sqrt(1.0 / 3.0));
  check(bleu_n(H({"a b", "c d"}), {H({"a b"}), H({"d c"})}, 2), 100.0 * std::sqrt(0.5));
  check(bleu_n(H({"a b"}), {H({"b a"})}, 2), 100.0 * std::sqrt(kBleuEpsilon));
  // Distinct-1: 1/3, 1/3; distinct-2: 2/2.
  check(distinct_n(H({"a a a"}), 1), 100.0 / 3.0);
  check(distinct_n(H({"x", "x", "x"}), 1), 100.0 / 3.0);
  check(distinct_n(H({"a b", "b c"}), 2), 100.0);
  // Distinct-2 pooled: ab, ba, ab -> 2/3; plus "a b" -> 2/4; "b a" + "c d e" -> 3/3.
  check(distinct_n(H({"a b a b"}), 2), 200.0 / 3.0);
  check(distinct_n(H({"a b a b", "a b"}), 2), 50.0);
  check(distinct_n(H({"b a", "c d e"}), 2), 100.0);
  // Entropy-4: one 4-gram; two equiprobable; (1/2, 1/4, 1/4).
  check(entropy_n(H({"a b c d", "a b c d"}), 4), 0.0);
  check(entropy_n(H({"a b c d e"}), 4), std::log(2.0));
  check(entropy_n(H({"a b c d", "a b c d", "b c d e", "w x y z"}), 4), 1.5 * std::log(2.0));
  // Perplexity: uniform over 8; perfect model; (ln 2 + ln 4) / 2.
  check(perplexity_from_nll(5.0 * std::log(8.0), 5.0), 8.0);
  check(perplexity_from_nll(0.0, 3.0), 1.0);
  check(perplexity_from_nll(std::log(2.0) + std::log(4.0), 2.0), std::pow(2.0, 1.5));
  return {good == total, fmt("%d/%d fixtures reproduced", good, total)};
}

std::unique_ptr<TrainState> overfit_branching(const SynthCorpus& c) {
  auto cfg = small_config(c.vocab.size());
  cfg.K = 2;
  cfg.max_steps = 1500;
  auto st = init_state(cfg, c.vocab);
  train(*st, c.dialogues);
  return st;
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](int id, const char* name, const Outcome& o, const std::string& extra = "") {
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    if (!extra.empty()) std::printf("%s", extra.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  };
  auto guarded = [&](auto&& fn) -> Outcome {
    try {
      return fn();
    } catch (const std::exception& e) {
      return {false, std::string("exception: ") + e.what()};
    }
  };

  report(1, "bridge marginals", guarded(marginals));
  report(2, "bridge covariance", guarded(covariance));
  report(3, "mu_T extrapolation", guarded(extrapolation));
  report(4, "gradient check", guarded(gradients));
  report(5, "ablation identity", guarded(ablation));

  const auto branching = branching_corpus();
  const auto run = contrastive_run(branching);
  report(6, "self-distillation", guarded([&] { return self_distillation(branching, run); }));
  report(7, "contrastive descent", guarded([&] { return contrastive(run); }));
  report(8, "overfit", guarded(overfit));

  std::string gen_log;
  const auto gen = guarded([&] { return generalization(gen_log); });
  report(9, "generalization", gen, gen_log);

  SynthSpec s;
  s.branching = 2;
  s.templates = 4;
  s.turns = 5;
  s.vocab_size = 40;
  s.seed = 9;
  const auto small = synth_corpus(s);
  const auto overfit_st = overfit_branching(small);
  report(10, "K saturation", guarded([&] { return saturation(*overfit_st, small.dialogues.front()); }));
  std::string div_log;
  const auto div = guarded([&] { return diverse(*overfit_st, small.dialogues.front(), div_log); });
  report(11, "diverse generation", div, div_log);
  report(12, "metric fixtures", guarded(metric_fixtures));

  std::printf("%d/12 criteria passed\n", 12 - failed);
  return failed == 0 ? 0 : 1;
}

#include <gtest/gtest.h>

#include <random>

#include "bridgepath/seq2seq.hpp"
#include "oracle.hpp"

using namespace bridgepath;

namespace {

Matrix randn(Eigen::Index r, Eigen::Index c, unsigned seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

struct Fixture {
  ParameterStore store;
  Seq2SeqModel model;
  explicit Fixture(ModelConfig cfg, unsigned seed = 1) {
    Rng rng(seed);
    model = create_seq2seq(store, cfg, rng);
  }
  // Random values everywhere, including biases, norms and mix gates.
  void randomize(unsigned seed) {
    for (ParamId id = 0; id < static_cast<ParamId>(store.size()); ++id) {
      Matrix& v = store.value(id);
      v += randn(v.rows(), v.cols(), seed + static_cast<unsigned>(id), 0.3);
    }
  }
};

ModelConfig small_cfg() {
  ModelConfig c;
  c.vocab_size = 17;
  c.d_model = 8;
  c.heads = 2;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.ffn_dim = 12;
  c.max_len = 32;
  c.dropout = 0.0;
  return c;
}

std::vector<Utterance> sample_context() {
  return {Utterance{{5, 6, 7}, ""}, Utterance{{8, 9}, ""}, Utterance{{10, 11, 12, 13}, ""}};
}

std::vector<const Utterance*> ptrs(const std::vector<Utterance>& us) {
  std::vector<const Utterance*> out;
  for (const auto& u : us) out.push_back(&u);
  return out;
}

Matrix run(const Fixture& fx, const SegmentedContext& ctx, const std::vector<int>& prefix, bool mixup,
           const std::optional<oracle::Latents>& z) {
  ag::Tape<double> tape(false);
  ag::Forward<double> f{tape, fx.store, fx.model, false, nullptr, mixup};
  std::optional<ag::Var<double>> zc, zr;
  if (z) {
    zc = tape.constant(z->context);
    zr = tape.constant(z->response);
  }
  return ag::conditional_log_probs<double>(f, ctx, prefix, zc, zr).value();
}

}  // namespace

TEST(Context, SegmentsAndEosMarkers) {
  const auto us = sample_context();
  const auto c = build_context(ptrs(us), 64);
  const std::vector<int> want{5, 6, 7, Vocab::kEos, 8, 9, Vocab::kEos, 10, 11, 12, 13, Vocab::kEos};
  EXPECT_EQ(c.tokens, want);
  EXPECT_EQ(c.segments, (std::vector<int>{0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2}));
  EXPECT_EQ(c.positions.back(), 11);
  EXPECT_EQ(c.num_segments, 3);
  const auto per = build_context(ptrs(us), 64, true);
  EXPECT_EQ(per.positions, (std::vector<int>{0, 1, 2, 3, 0, 1, 2, 0, 1, 2, 3, 4}));
}

TEST(Context, TruncatesFromTheLeft) {
  const auto us = sample_context();
  const auto c = build_context(ptrs(us), 6);
  EXPECT_EQ(c.dropped_tokens, 6);
  EXPECT_EQ(c.tokens, (std::vector<int>{Vocab::kEos, 10, 11, 12, 13, Vocab::kEos}));
  EXPECT_EQ(c.segments.front(), 1);
  EXPECT_THROW(build_context(std::vector<const Utterance*>{}, 8), std::invalid_argument);
}

TEST(Context, DecoderInputAndTarget) {
  EXPECT_EQ(decoder_input({4, 5}), (std::vector<int>{Vocab::kBos, 4, 5}));
  EXPECT_EQ(decoder_target({4, 5}), (std::vector<int>{4, 5, Vocab::kEos}));
}

TEST(Seq2Seq, SinusoidalValues) {
  const Matrix pe = sinusoidal_positions(3, 4);
  EXPECT_DOUBLE_EQ(pe(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(pe(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(pe(2, 0), std::sin(2.0));
  EXPECT_NEAR(pe(2, 2), std::sin(2.0 / 100.0), 1e-15);
  EXPECT_NEAR(pe(1, 3), std::cos(1.0 / 100.0), 1e-15);
}

TEST(Seq2Seq, InitialMixGatesAreIdentity) {
  Fixture fx(small_cfg());
  EXPECT_EQ(fx.store.value(fx.model.mix_enc_x), Matrix::Ones(1, 8));
  EXPECT_EQ(fx.store.value(fx.model.mix_enc_z), Matrix::Zero(1, 8));
  for (const auto& l : fx.model.decoder) {
    EXPECT_EQ(fx.store.value(l.mix_x), Matrix::Ones(1, 8));
    EXPECT_EQ(fx.store.value(l.mix_z), Matrix::Zero(1, 8));
  }
}

TEST(Seq2Seq, MatchesOracleWithoutMixup) {
  Fixture fx(small_cfg());
  fx.randomize(3);
  const auto us = sample_context();
  const auto ctx = build_context(ptrs(us), 32);
  const std::vector<int> prefix{Vocab::kBos, 4, 9, 3};
  const Matrix got = run(fx, ctx, prefix, false, std::nullopt);
  const Matrix want = log_softmax(oracle::logits(fx.store, fx.model, ctx, prefix, std::nullopt));
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Seq2Seq, MatchesOracleWithMixup) {
  Fixture fx(small_cfg());
  fx.randomize(4);
  const auto us = sample_context();
  const auto ctx = build_context(ptrs(us), 32);
  const std::vector<int> prefix{Vocab::kBos, 7, 7};
  const oracle::Latents z{randn(3, 8, 5), randn(1, 8, 6)};
  const Matrix got = run(fx, ctx, prefix, true, z);
  const Matrix want = log_softmax(oracle::logits(fx.store, fx.model, ctx, prefix, z));
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Seq2Seq, MatchesOraclePerUtteranceEncoding) {
  auto cfg = small_cfg();
  cfg.per_utterance_encoding = true;
  Fixture fx(cfg);
  fx.randomize(8);
  const auto us = sample_context();
  const auto ctx = build_context(ptrs(us), 32, true);
  const std::vector<int> prefix{Vocab::kBos, 6};
  const oracle::Latents z{randn(3, 8, 9), randn(1, 8, 10)};
  const Matrix got = run(fx, ctx, prefix, true, z);
  const Matrix want = log_softmax(oracle::logits(fx.store, fx.model, ctx, prefix, z));
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Seq2Seq, IdentityGatesReduceToPlainTransformer) {
  // With w_x = 1 and w_z = 0 the latents must have no effect at all.
  Fixture fx(small_cfg());
  fx.randomize(11);
  disable_mixup(fx.store, fx.model);
  const auto us = sample_context();
  const auto ctx = build_context(ptrs(us), 32);
  const std::vector<int> prefix{Vocab::kBos, 4, 5, 6};
  const Matrix plain = run(fx, ctx, prefix, false, std::nullopt);
  for (unsigned s = 0; s < 3; ++s) {
    const oracle::Latents z{randn(3, 8, 20 + s, 5.0), randn(1, 8, 30 + s, 5.0)};
    const Matrix mixed = run(fx, ctx, prefix, true, z);
    EXPECT_EQ(mixed, plain);  // bitwise
  }
  EXPECT_FALSE(fx.store.at(fx.model.mix_enc_z).trainable);
}

TEST(Seq2Seq, CausalPrefixConsistency) {
  // Logits at position i do not depend on tokens after i.
  Fixture fx(small_cfg());
  fx.randomize(12);
  const auto us = sample_context();
  const auto ctx = build_context(ptrs(us), 32);
  const Matrix a = run(fx, ctx, {Vocab::kBos, 4, 5, 6}, false, std::nullopt);
  const Matrix b = run(fx, ctx, {Vocab::kBos, 4, 9, 9}, false, std::nullopt);
  EXPECT_LT((a.topRows(2) - b.topRows(2)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT((a.row(2) - b.row(2)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Seq2Seq, OutputShapeAndNormalisation) {
  Fixture fx(small_cfg());
  const auto us = sample_context();
  const auto ctx = build_context(ptrs(us), 32);
  const Matrix lp = run(fx, ctx, {Vocab::kBos, 4}, false, std::nullopt);
  ASSERT_EQ(lp.rows(), 2);
  ASSERT_EQ(lp.cols(), 17);
  for (Eigen::Index i = 0; i < lp.rows(); ++i) EXPECT_NEAR(lp.row(i).array().exp().sum(), 1.0, 1e-12);
}

TEST(Seq2Seq, RejectsBadInputs) {
  Fixture fx(small_cfg());
  const auto us = sample_context();
  const auto ctx = build_context(ptrs(us), 32);
  EXPECT_THROW(run(fx, ctx, {4, 5}, false, std::nullopt), std::invalid_argument);
  EXPECT_THROW(run(fx, ctx, {Vocab::kBos}, true, std::nullopt), std::invalid_argument);
  const oracle::Latents short_z{randn(2, 8, 1), randn(1, 8, 2)};
  EXPECT_THROW(run(fx, ctx, {Vocab::kBos}, true, short_z), std::invalid_argument);
  auto bad = small_cfg();
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_THROW(log_softmax(Matrix::Constant(1, 3, NAN)), std::domain_error);
}

TEST(Seq2Seq, DropoutIsSeededAndInactiveAtEval) {
  auto cfg = small_cfg();
  cfg.dropout = 0.3;
  Fixture fx(cfg);
  const auto us = sample_context();
  const auto ctx = build_context(ptrs(us), 32);
  auto train_run = [&](std::uint64_t seed) {
    Rng rng(seed);
    ag::Tape<double> tape(false);
    ag::Forward<double> f{tape, fx.store, fx.model, true, &rng, false};
    return ag::conditional_log_probs<double>(f, ctx, {Vocab::kBos, 4}, std::nullopt, std::nullopt).value();
  };
  EXPECT_EQ(train_run(5), train_run(5));
  EXPECT_NE(train_run(5), train_run(6));
  EXPECT_EQ(run(fx, ctx, {Vocab::kBos, 4}, false, std::nullopt), run(fx, ctx, {Vocab::kBos, 4}, false, std::nullopt));
}

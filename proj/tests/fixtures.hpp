// Small shared builders for tests.
#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "bridgepath/bridgepath.hpp"

namespace fixtures {

using namespace bridgepath;

inline TrainConfig tiny_config(int vocab_size) {
  TrainConfig c;
  c.model.vocab_size = vocab_size;
  c.model.d_model = 16;
  c.model.heads = 2;
  c.model.encoder_layers = 1;
  c.model.decoder_layers = 1;
  c.model.ffn_dim = 32;
  c.model.max_len = 64;
  c.model.dropout = 0.0;
  c.model.mapper_hidden = 32;
  c.K = 2;
  c.batch_size = 4;
  c.learning_rate = 1e-3;
  c.warmup = 10;
  c.max_steps = 0;
  return c;
}

inline SynthCorpus small_synth(std::uint64_t seed = 1, int templates = 2, int branching = 2, int turns = 4) {
  SynthSpec s;
  s.templates = templates;
  s.branching = branching;
  s.turns = turns;
  s.vocab_size = 20;
  s.seed = seed;
  return synth_corpus(s);
}

inline std::vector<const Dialogue*> ptrs(const std::vector<Dialogue>& ds, std::size_t n = 0) {
  std::vector<const Dialogue*> out;
  for (std::size_t i = 0; i < ds.size() && (n == 0 || i < n); ++i) out.push_back(&ds[i]);
  return out;
}

inline Matrix randn(Eigen::Index r, Eigen::Index c, unsigned seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Moves the mix gates away from identity so latents matter.
inline void jitter_mix(ParameterStore& store, const DialogueModel& m, unsigned seed) {
  auto j = [&](ParamId id) { store.value(id) += randn(1, m.cfg.d_model, seed + static_cast<unsigned>(id), 0.3); };
  j(m.seq.mix_enc_x);
  j(m.seq.mix_enc_z);
  for (const auto& l : m.seq.decoder) {
    j(l.mix_x);
    j(l.mix_z);
  }
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("bridgepath_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string str(const std::string& leaf = "") const { return leaf.empty() ? path.string() : (path / leaf).string(); }
};

}  // namespace fixtures

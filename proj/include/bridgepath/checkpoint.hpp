// Training state and its on-disk form.
//
// A checkpoint is a directory holding manifest.json and tensors.bin. The
// binary file is every tensor of each section, in manifest order, as
// little-endian float64, sections concatenated in the order listed.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "bridgepath/corpus.hpp"
#include "bridgepath/distill.hpp"
#include "bridgepath/model.hpp"
#include "bridgepath/params.hpp"
#include "json.hpp"

namespace bridgepath {

inline constexpr int kCheckpointFormat = 1;

struct TrainState {
  TrainConfig config;
  Vocab vocab;
  ParameterStore store;
  DialogueModel model;
  AdamState adam;
  long long step = 0;
  long long epoch = 0;
  long long epoch_pos = 0;  // dialogues of the current epoch already consumed
  double best_valid_ppl = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  std::vector<Matrix> best_params;  // empty until a validation pass improves
};

// Fresh parameters for `vocab`; the config's vocab size is overwritten.
inline std::unique_ptr<TrainState> init_state(TrainConfig cfg, Vocab vocab) {
  cfg.model.vocab_size = vocab.size();
  cfg.validate();
  auto s = std::make_unique<TrainState>();
  s->config = cfg;
  s->vocab = std::move(vocab);
  s->model = create_model(s->store, cfg.model, cfg.seed);
  if (!cfg.mixup) disable_mixup(s->store, s->model.seq);
  s->adam.init(s->store);
  return s;
}

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},         {"d_model", c.d_model},
          {"heads", c.heads},                   {"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers}, {"ffn_dim", c.ffn_dim},
          {"max_len", c.max_len},               {"dropout", c.dropout},
          {"per_utterance_encoding", c.per_utterance_encoding},
          {"mapper_hidden", c.mapper_hidden}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.heads = j.at("heads").get<int>();
  c.encoder_layers = j.at("encoder_layers").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.per_utterance_encoding = j.at("per_utterance_encoding").get<bool>();
  c.mapper_hidden = j.at("mapper_hidden").get<int>();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"model", to_json(c.model)},
          {"K", c.K},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"warmup", c.warmup},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"delta", c.delta},
          {"max_steps", c.max_steps},
          {"seed", c.seed},
          {"w_beta", c.w_beta},
          {"w_nll", c.w_nll},
          {"w_kl", c.w_kl},
          {"window", c.window},
          {"mixup", c.mixup},
          {"block_teacher", c.block_teacher},
          {"patience", c.patience},
          {"threads", c.threads},
          {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.model = model_config_from_json(j.at("model"));
  c.K = j.at("K").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.warmup = j.at("warmup").get<long long>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.delta = j.at("delta").get<double>();
  c.max_steps = j.at("max_steps").get<long long>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.w_beta = j.at("w_beta").get<double>();
  c.w_nll = j.at("w_nll").get<double>();
  c.w_kl = j.at("w_kl").get<double>();
  c.window = j.at("window").get<int>();
  c.mixup = j.at("mixup").get<bool>();
  c.block_teacher = j.at("block_teacher").get<bool>();
  c.patience = j.at("patience").get<int>();
  c.threads = j.at("threads").get<int>();
  c.checkpoint_every = j.at("checkpoint_every").get<long long>();
  return c;
}

namespace detail {

inline void write_f64(std::ostream& os, const Matrix& m) {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::uint64_t bits;
    const double v = m.data()[i];
    std::memcpy(&bits, &v, sizeof bits);
    unsigned char buf[8];
    for (int b = 0; b < 8; ++b) buf[b] = static_cast<unsigned char>(bits >> (8 * b));
    os.write(reinterpret_cast<const char*>(buf), 8);
  }
}

inline void read_f64(std::istream& is, Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    unsigned char buf[8];
    if (!is.read(reinterpret_cast<char*>(buf), 8)) throw CheckpointError("checkpoint: tensors.bin is truncated");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
    double v;
    std::memcpy(&v, &bits, sizeof v);
    m.data()[i] = v;
  }
}

}  // namespace detail

inline void save_checkpoint(const TrainState& s, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CheckpointError("checkpoint: cannot create " + dir + ": " + ec.message());

  nlohmann::json man;
  man["format_version"] = kCheckpointFormat;
  man["dtype"] = "float64";
  man["byte_order"] = "little";
  man["config"] = to_json(s.config);
  man["vocab"] = s.vocab.words();
  man["step"] = s.step;
  man["epoch"] = s.epoch;
  man["epoch_pos"] = s.epoch_pos;
  man["best_valid_ppl"] = std::isfinite(s.best_valid_ppl) ? nlohmann::json(s.best_valid_ppl) : nlohmann::json(nullptr);
  man["bad_epochs"] = s.bad_epochs;
  man["adam_steps"] = s.adam.steps;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : s.store) {
    tensors.push_back({{"name", p.name}, {"group", p.group}, {"shape", {p.value.rows(), p.value.cols()}}, {"trainable", p.trainable}});
  }
  man["tensors"] = tensors;
  std::vector<std::string> sections{"params", "adam_m", "adam_v"};
  if (!s.best_params.empty()) sections.push_back("best");
  man["sections"] = sections;

  const fs::path bin_tmp = fs::path(dir) / "tensors.bin.tmp";
  const fs::path man_tmp = fs::path(dir) / "manifest.json.tmp";
  {
    std::ofstream os(bin_tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("checkpoint: cannot write " + bin_tmp.string());
    for (const auto& p : s.store) detail::write_f64(os, p.value);
    for (const auto& m : s.adam.m) detail::write_f64(os, m);
    for (const auto& v : s.adam.v) detail::write_f64(os, v);
    for (const auto& b : s.best_params) detail::write_f64(os, b);
    if (!os.flush()) throw CheckpointError("checkpoint: write failed for " + bin_tmp.string());
  }
  {
    std::ofstream os(man_tmp, std::ios::trunc);
    if (!os) throw CheckpointError("checkpoint: cannot write " + man_tmp.string());
    os << man.dump(2) << "\n";
    if (!os.flush()) throw CheckpointError("checkpoint: write failed for " + man_tmp.string());
  }
  fs::rename(bin_tmp, fs::path(dir) / "tensors.bin", ec);
  if (!ec) fs::rename(man_tmp, fs::path(dir) / "manifest.json", ec);
  if (ec) throw CheckpointError("checkpoint: cannot finalize " + dir + ": " + ec.message());
}

inline std::unique_ptr<TrainState> load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream ms(fs::path(dir) / "manifest.json");
  if (!ms) throw CheckpointError("checkpoint: no manifest.json in " + dir);
  nlohmann::json man;
  try {
    man = nlohmann::json::parse(ms);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  if (man.value("format_version", 0) != kCheckpointFormat) throw CheckpointError("checkpoint: unsupported format_version");

  auto s = init_state(train_config_from_json(man.at("config")), Vocab::from_words(man.at("vocab").get<std::vector<std::string>>()));
  const auto& tensors = man.at("tensors");
  if (tensors.size() != s->store.size()) throw CheckpointError("checkpoint: tensor count does not match the configured model");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& p = s->store.at(static_cast<ParamId>(i));
    const auto& t = tensors[i];
    const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
    if (t.at("name").get<std::string>() != p.name || shape.size() != 2 || shape[0] != p.value.rows() || shape[1] != p.value.cols()) {
      throw CheckpointError("checkpoint: tensor " + std::to_string(i) + " (" + t.at("name").get<std::string>() + ") does not match the model");
    }
    p.trainable = t.at("trainable").get<bool>();
  }
  std::ifstream bs(fs::path(dir) / "tensors.bin", std::ios::binary);
  if (!bs) throw CheckpointError("checkpoint: no tensors.bin in " + dir);
  const auto sections = man.at("sections").get<std::vector<std::string>>();
  for (const auto& sec : sections) {
    for (std::size_t i = 0; i < s->store.size(); ++i) {
      const auto id = static_cast<ParamId>(i);
      if (sec == "params") {
        detail::read_f64(bs, s->store.value(id));
      } else if (sec == "adam_m") {
        detail::read_f64(bs, s->adam.m[i]);
      } else if (sec == "adam_v") {
        detail::read_f64(bs, s->adam.v[i]);
      } else if (sec == "best") {
        if (s->best_params.size() < s->store.size()) s->best_params.resize(s->store.size());
        s->best_params[i] = Matrix(s->store.value(id).rows(), s->store.value(id).cols());
        detail::read_f64(bs, s->best_params[i]);
      } else {
        throw CheckpointError("checkpoint: unknown section " + sec);
      }
    }
  }
  if (bs.peek() != std::char_traits<char>::eof()) throw CheckpointError("checkpoint: trailing bytes in tensors.bin");
  s->step = man.at("step").get<long long>();
  s->epoch = man.at("epoch").get<long long>();
  s->epoch_pos = man.at("epoch_pos").get<long long>();
  s->best_valid_ppl = man.at("best_valid_ppl").is_null() ? std::numeric_limits<double>::infinity()
                                                         : man.at("best_valid_ppl").get<double>();
  s->bad_epochs = man.at("bad_epochs").get<int>();
  s->adam.steps = man.at("adam_steps").get<long long>();
  return s;
}

}  // namespace bridgepath

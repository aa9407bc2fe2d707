// Flat `key = value` run configuration. Lines starting with '#' are comments.
// Unknown keys, malformed values and duplicate keys are errors naming the
// offending field.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bridgepath/distill.hpp"
#include "bridgepath/infer.hpp"

namespace bridgepath {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& msg)
      : std::runtime_error("config field '" + field + "': " + msg), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct RunConfig {
  TrainConfig train;
  std::string corpus;          // training corpus (JSONL)
  std::string valid;           // optional validation corpus
  std::string checkpoint_dir;  // all outputs of `train` go here
  int min_freq = 2;
  LatentMode mode = LatentMode::kExpectation;
  Decoding decoding = Decoding::kTopK;
  int beam_width = 5;
  int top_k = 5;
  int max_tokens = 20;
  bool deterministic = false;  // forces threads = 1
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (!is || !is.eof()) throw ConfigError(key, "expected a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key, "expected true/false, got '" + v + "'");
}

}  // namespace detail

inline RunConfig parse_run_config(std::istream& is) {
  RunConfig c;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto num = [](auto& field) -> Setter {
    return [&field](const std::string& k, const std::string& v) {
      field = detail::parse_number<std::remove_reference_t<decltype(field)>>(k, v);
    };
  };
  auto flag = [](bool& field) -> Setter { return [&field](const std::string& k, const std::string& v) { field = detail::parse_bool(k, v); }; };
  auto text = [](std::string& field) -> Setter { return [&field](const std::string&, const std::string& v) { field = v; }; };
  auto& t = c.train;
  auto& m = c.train.model;
  const std::map<std::string, Setter> setters{
      {"corpus", text(c.corpus)},
      {"valid", text(c.valid)},
      {"checkpoint_dir", text(c.checkpoint_dir)},
      {"min_freq", num(c.min_freq)},
      {"d_model", num(m.d_model)},
      {"heads", num(m.heads)},
      {"encoder_layers", num(m.encoder_layers)},
      {"decoder_layers", num(m.decoder_layers)},
      {"ffn_dim", num(m.ffn_dim)},
      {"max_len", num(m.max_len)},
      {"dropout", num(m.dropout)},
      {"mapper_hidden", num(m.mapper_hidden)},
      {"encode_per_utterance", flag(m.per_utterance_encoding)},
      {"K", num(t.K)},
      {"learning_rate", num(t.learning_rate)},
      {"batch_size", num(t.batch_size)},
      {"warmup", num(t.warmup)},
      {"beta1", num(t.beta1)},
      {"beta2", num(t.beta2)},
      {"delta", num(t.delta)},
      {"max_steps", num(t.max_steps)},
      {"seed", num(t.seed)},
      {"w_beta", num(t.w_beta)},
      {"w_nll", num(t.w_nll)},
      {"w_kl", num(t.w_kl)},
      {"window", num(t.window)},
      {"mixup", flag(t.mixup)},
      {"block_teacher", flag(t.block_teacher)},
      {"patience", num(t.patience)},
      {"threads", num(t.threads)},
      {"checkpoint_every", num(t.checkpoint_every)},
      {"deterministic", flag(c.deterministic)},
      {"beam_width", num(c.beam_width)},
      {"top_k", num(c.top_k)},
      {"max_tokens", num(c.max_tokens)},
      {"mode",
       [&c](const std::string& k, const std::string& v) {
         if (v == "expectation") {
           c.mode = LatentMode::kExpectation;
         } else if (v == "sampled") {
           c.mode = LatentMode::kSampled;
         } else {
           throw ConfigError(k, "expected expectation|sampled, got '" + v + "'");
         }
       }},
      {"decoding",
       [&c](const std::string& k, const std::string& v) {
         if (v == "greedy") {
           c.decoding = Decoding::kGreedy;
         } else if (v == "beam") {
           c.decoding = Decoding::kBeam;
         } else if (v == "topk") {
           c.decoding = Decoding::kTopK;
         } else {
           throw ConfigError(k, "expected greedy|beam|topk, got '" + v + "'");
         }
       }},
  };

  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(key, "unknown key");
    if (!seen.insert(key).second) throw ConfigError(key, "given more than once");
    it->second(key, value);
  }
  if (c.deterministic) t.threads = 1;
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config", "cannot read " + path);
  return parse_run_config(is);
}

// Checks that need no compute: required fields, file existence, ranges.
inline void validate_for_training(const RunConfig& c) {
  namespace fs = std::filesystem;
  if (c.corpus.empty()) throw ConfigError("corpus", "missing (path to the training corpus)");
  if (!fs::is_regular_file(c.corpus)) throw ConfigError("corpus", "no such file: " + c.corpus);
  if (!c.valid.empty() && !fs::is_regular_file(c.valid)) throw ConfigError("valid", "no such file: " + c.valid);
  if (c.checkpoint_dir.empty()) throw ConfigError("checkpoint_dir", "missing (output directory)");
  if (c.min_freq < 1) throw ConfigError("min_freq", "must be >= 1");
  if (c.beam_width < 1) throw ConfigError("beam_width", "must be >= 1");
  if (c.top_k < 1) throw ConfigError("top_k", "must be >= 1");
  if (c.max_tokens < 1) throw ConfigError("max_tokens", "must be >= 1");
  try {
    TrainConfig probe = c.train;
    probe.model.vocab_size = std::max(probe.model.vocab_size, 5);
    probe.validate();
  } catch (const std::invalid_argument& e) {
    // TrainConfig messages are "<area>: <field> ...".
    std::string msg = e.what();
    std::string field = "train";
    if (const auto colon = msg.find(": "); colon != std::string::npos) {
      const auto rest = msg.substr(colon + 2);
      field = rest.substr(0, rest.find(' '));
    }
    throw ConfigError(field, msg);
  }
}

}  // namespace bridgepath

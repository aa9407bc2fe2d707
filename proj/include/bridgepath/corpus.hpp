// Dialogue corpora: vocabulary, tokenization, JSONL loading, windowing and a
// synthetic many-to-many corpus generator with known continuation sets.
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "bridgepath/rng.hpp"

namespace bridgepath {

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocab() {
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(s);
  }

  // Reserved entries plus every word whose count reaches `min_freq`, ordered
  // by descending count then lexicographically.
  static Vocab build(const std::vector<std::vector<std::string>>& sentences, int min_freq = 2) {
    std::map<std::string, int> counts;
    for (const auto& s : sentences) {
      for (const auto& w : s) ++counts[w];
    }
    std::vector<std::pair<std::string, int>> items(counts.begin(), counts.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [w, c] : items) {
      if (c >= min_freq) v.add(w);
    }
    return v;
  }

  static Vocab from_words(const std::vector<std::string>& words) {
    Vocab v;
    for (const auto& w : words) v.add(w);
    return v;
  }

  int add(const std::string& word) {
    if (auto it = index_.find(word); it != index_.end()) return it->second;
    const int id = static_cast<int>(words_.size());
    words_.push_back(word);
    index_.emplace(word, id);
    return id;
  }

  int id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& word) const { return index_.count(word) != 0; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct Utterance {
  std::vector<int> tokens;
  std::string text;
};

struct Dialogue {
  std::vector<Utterance> utterances;

  int T() const { return static_cast<int>(utterances.size()) - 1; }
  const Utterance& response() const { return utterances.back(); }
};

// Lowercased whitespace split.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(w);
  }
  return out;
}

inline Utterance make_utterance(const std::string& text, const Vocab& vocab) {
  Utterance u;
  u.text = text;
  for (const auto& w : split_words(text)) u.tokens.push_back(vocab.id(w));
  if (u.tokens.empty()) throw std::invalid_argument("utterance has no tokens");
  return u;
}

inline std::string detokenize(const std::vector<int>& tokens, const Vocab& vocab) {
  std::string out;
  for (const int t : tokens) {
    if (!out.empty()) out += ' ';
    out += vocab.word(t);
  }
  return out;
}

inline Dialogue make_dialogue(const std::vector<std::string>& turns, const Vocab& vocab) {
  if (turns.size() < 2) throw std::invalid_argument("dialogue needs at least two utterances");
  Dialogue d;
  for (const auto& t : turns) d.utterances.push_back(make_utterance(t, vocab));
  return d;
}

struct CorpusIssue {
  int line = 0;
  std::string message;
};

struct LoadedCorpus {
  std::vector<Dialogue> dialogues;
  Vocab vocab;
  std::vector<CorpusIssue> errors;  // malformed lines
  int rejected = 0;                 // well-formed records that violate dialogue invariants
  std::vector<CorpusIssue> warnings;
};

namespace detail {
struct RawRecord {
  int line;
  std::vector<std::string> turns;
};

inline std::vector<RawRecord> read_jsonl_turns(const std::string& path, LoadedCorpus& out) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  std::vector<RawRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      out.errors.push_back({lineno, std::string("parse error: ") + e.what()});
      continue;
    }
    if (!j.is_object() || !j.contains("turns") || !j["turns"].is_array()) {
      out.errors.push_back({lineno, "parse error: expected an object with a \"turns\" array"});
      continue;
    }
    RawRecord rec{lineno, {}};
    bool ok = true;
    for (const auto& t : j["turns"]) {
      if (!t.is_string()) {
        ok = false;
        break;
      }
      rec.turns.push_back(t.get<std::string>());
    }
    if (!ok) {
      out.errors.push_back({lineno, "parse error: turns must be strings"});
      continue;
    }
    bool empty_turn = false;
    for (const auto& t : rec.turns) empty_turn = empty_turn || split_words(t).empty();
    if (empty_turn) {
      ++out.rejected;
      out.warnings.push_back({lineno, "empty turn"});
      continue;
    }
    if (rec.turns.size() < 2) {
      ++out.rejected;
      out.warnings.push_back({lineno, "fewer than two turns"});
      continue;
    }
    records.push_back(std::move(rec));
  }
  return records;
}
}  // namespace detail

// One JSON object per line: {"turns": [string, ...]}. Builds the vocabulary
// from this corpus when none is given.
inline LoadedCorpus load_corpus(const std::string& path, const std::optional<Vocab>& vocab = std::nullopt,
                                int min_freq = 2) {
  LoadedCorpus out;
  auto records = detail::read_jsonl_turns(path, out);
  if (vocab) {
    out.vocab = *vocab;
  } else {
    std::vector<std::vector<std::string>> sentences;
    for (const auto& r : records) {
      for (const auto& t : r.turns) sentences.push_back(split_words(t));
    }
    out.vocab = Vocab::build(sentences, min_freq);
  }
  for (const auto& r : records) out.dialogues.push_back(make_dialogue(r.turns, out.vocab));
  return out;
}

inline void write_corpus(const std::string& path, const std::vector<Dialogue>& dialogues) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write corpus file: " + path);
  for (const auto& d : dialogues) {
    nlohmann::json j;
    j["turns"] = nlohmann::json::array();
    for (const auto& u : d.utterances) j["turns"].push_back(u.text);
    out << j.dump() << '\n';
  }
}

// Contiguous windows of `w` utterances with stride 1; shorter dialogues are
// returned unchanged.
inline std::vector<Dialogue> window_dialogue(const Dialogue& d, int w) {
  if (w < 2) throw std::invalid_argument("window size must be at least 2");
  const int n = static_cast<int>(d.utterances.size());
  if (n <= w) return {d};
  std::vector<Dialogue> out;
  for (int k = 0; k + w <= n; ++k) {
    Dialogue win;
    win.utterances.assign(d.utterances.begin() + k, d.utterances.begin() + k + w);
    out.push_back(std::move(win));
  }
  return out;
}

inline std::vector<Dialogue> window_corpus(const std::vector<Dialogue>& ds, int w) {
  std::vector<Dialogue> out;
  for (const auto& d : ds) {
    auto ws = window_dialogue(d, w);
    out.insert(out.end(), ws.begin(), ws.end());
  }
  return out;
}

inline std::string prefix_key(const std::vector<std::string>& context) {
  std::string key;
  for (std::size_t i = 0; i < context.size(); ++i) {
    if (i) key += " | ";
    key += context[i];
  }
  return key;
}

inline std::string prefix_key(const Dialogue& d, int context_len) {
  std::vector<std::string> ctx;
  for (int i = 0; i < context_len; ++i) ctx.push_back(d.utterances[static_cast<std::size_t>(i)].text);
  return prefix_key(ctx);
}

// Synthetic corpus: utterance pools per turn depth; each utterance at depth
// t < turns - 1 has `branching` distinct successors drawn from the pool at
// depth t + 1. Successor pools are shared, so a response follows many
// contexts and a context admits `branching` responses.
struct SynthSpec {
  int branching = 3;
  int templates = 10;
  int turns = 4;
  int vocab_size = 40;
  std::uint64_t seed = 1;
  int pool_size = 0;  // utterances per depth t >= 1; 0 picks max(4 * branching, 12)
  int min_len = 3;
  int max_len = 5;

  void validate() const {
    if (branching < 1) throw std::invalid_argument("synth: branching must be >= 1");
    if (turns < 2) throw std::invalid_argument("synth: turns must be >= 2");
    if (templates < 1) throw std::invalid_argument("synth: templates must be >= 1");
    if (vocab_size < 2) throw std::invalid_argument("synth: vocab_size must be >= 2");
    if (min_len < 1 || max_len < min_len) throw std::invalid_argument("synth: bad utterance length range");
    if (pool_size != 0 && pool_size < branching) throw std::invalid_argument("synth: pool_size below branching");
  }
  int effective_pool() const { return pool_size > 0 ? pool_size : std::max(4 * branching, 12); }
};

struct SynthCorpus {
  std::vector<Dialogue> dialogues;
  Vocab vocab;
  // prefix_key(context) -> sorted valid continuations, for every proper
  // prefix of every dialogue.
  std::map<std::string, std::vector<std::string>> continuations;
};

inline SynthCorpus synth_corpus(const SynthSpec& spec) {
  spec.validate();
  Rng rng = make_rng(spec.seed, Stream::kSynth);
  std::vector<std::string> lexicon;
  for (int i = 0; i < spec.vocab_size; ++i) lexicon.push_back("w" + std::to_string(i));

  std::set<std::string> used;
  std::uniform_int_distribution<int> len_dist(spec.min_len, spec.max_len);
  std::uniform_int_distribution<int> word_dist(0, spec.vocab_size - 1);
  auto fresh_utterance = [&]() {
    for (int attempt = 0; attempt < 10000; ++attempt) {
      const int len = len_dist(rng);
      std::string s;
      for (int i = 0; i < len; ++i) {
        if (i) s += ' ';
        s += lexicon[static_cast<std::size_t>(word_dist(rng))];
      }
      if (used.insert(s).second) return s;
    }
    throw std::runtime_error("synth: cannot generate distinct utterances; increase vocab_size or lengths");
  };

  std::vector<std::vector<std::string>> pools(static_cast<std::size_t>(spec.turns));
  for (int i = 0; i < spec.templates; ++i) pools[0].push_back(fresh_utterance());
  for (int t = 1; t < spec.turns; ++t) {
    for (int i = 0; i < spec.effective_pool(); ++i) pools[static_cast<std::size_t>(t)].push_back(fresh_utterance());
  }
  // successors[t][i]: indices into pools[t + 1]
  std::vector<std::vector<std::vector<int>>> successors(static_cast<std::size_t>(spec.turns - 1));
  for (int t = 0; t + 1 < spec.turns; ++t) {
    const int next = static_cast<int>(pools[static_cast<std::size_t>(t + 1)].size());
    std::vector<int> idx(static_cast<std::size_t>(next));
    for (int i = 0; i < next; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (std::size_t i = 0; i < pools[static_cast<std::size_t>(t)].size(); ++i) {
      std::shuffle(idx.begin(), idx.end(), rng);
      successors[static_cast<std::size_t>(t)].emplace_back(idx.begin(), idx.begin() + spec.branching);
    }
  }

  SynthCorpus out;
  out.vocab = Vocab::from_words(lexicon);
  std::vector<std::string> path;
  std::vector<int> indices;
  auto emit = [&](auto&& self, int t, int i) -> void {
    path.push_back(pools[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)]);
    if (t + 1 == spec.turns) {
      out.dialogues.push_back(make_dialogue(path, out.vocab));
    } else {
      auto& conts = out.continuations[prefix_key(path)];
      if (conts.empty()) {
        for (const int s : successors[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)]) {
          conts.push_back(pools[static_cast<std::size_t>(t + 1)][static_cast<std::size_t>(s)]);
        }
        std::sort(conts.begin(), conts.end());
      }
      for (const int s : successors[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)]) self(self, t + 1, s);
    }
    path.pop_back();
  };
  for (int r = 0; r < spec.templates; ++r) emit(emit, 0, r);
  return out;
}

inline void write_continuations(const std::string& path,
                                const std::map<std::string, std::vector<std::string>>& continuations) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write metadata file: " + path);
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : continuations) j[k] = v;
  out << j.dump(2) << '\n';
}

inline std::map<std::string, std::vector<std::string>> read_continuations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metadata file: " + path);
  const auto j = nlohmann::json::parse(in);
  std::map<std::string, std::vector<std::string>> out;
  for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = it.value().get<std::vector<std::string>>();
  return out;
}

}  // namespace bridgepath

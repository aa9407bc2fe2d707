// bridgepath command line: synth, train, generate, eval, sample-paths, gradcheck.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bridgepath/bridgepath.hpp"
#include "json.hpp"

namespace bp = bridgepath;
using nlohmann::json;

namespace {

constexpr int kExitInvalid = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --threads, then BRIDGEPATH_THREADS, then `fallback`.
int resolve_threads(int flag, int fallback) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("BRIDGEPATH_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
    throw UsageError("BRIDGEPATH_THREADS must be a positive integer");
  }
  return fallback;
}

// Output sink: a file when a path is given, stdout otherwise.
class Sink {
 public:
  explicit Sink(const std::string& path) {
    if (!path.empty()) {
      file_.open(path, std::ios::trunc);
      if (!file_) throw UsageError("cannot write " + path);
    }
  }
  std::ostream& out() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

 private:
  std::ofstream file_;
};

// JSONL of {"turns": [...]}; every line is kept, including one-turn records.
std::vector<std::vector<std::string>> read_turn_lists(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  std::vector<std::vector<std::string>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line).at("turns").get<std::vector<std::string>>());
    } catch (const std::exception& e) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<bp::Utterance> to_utterances(const std::vector<std::string>& turns, const bp::Vocab& vocab) {
  std::vector<bp::Utterance> us;
  for (const auto& t : turns) {
    auto u = bp::make_utterance(t, vocab);
    if (u.tokens.empty()) u.tokens.push_back(bp::Vocab::kUnk);
    us.push_back(std::move(u));
  }
  return us;
}

bp::LatentMode parse_mode(const std::string& s) {
  if (s == "expectation") return bp::LatentMode::kExpectation;
  if (s == "sampled") return bp::LatentMode::kSampled;
  throw UsageError("--mode must be expectation or sampled");
}

bp::Decoding parse_decoding(const std::string& s) {
  if (s == "greedy") return bp::Decoding::kGreedy;
  if (s == "beam") return bp::Decoding::kBeam;
  if (s == "topk") return bp::Decoding::kTopK;
  throw UsageError("--decoding must be greedy, beam or topk");
}

struct DecodeFlags {
  std::string mode = "expectation";
  std::string decoding = "greedy";
  int beam_width = 5;
  int top_k = 5;
  int max_tokens = 20;
  std::uint64_t seed = 0;

  void add(CLI::App* cmd) {
    cmd->add_option("--mode", mode, "expectation | sampled")->capture_default_str();
    cmd->add_option("--decoding", decoding, "greedy | beam | topk")->capture_default_str();
    cmd->add_option("--beam-width", beam_width)->capture_default_str();
    cmd->add_option("--top-k", top_k)->capture_default_str();
    cmd->add_option("--max-tokens", max_tokens)->capture_default_str();
    cmd->add_option("--seed", seed, "decoding seed (sampled mode, top-k)")->capture_default_str();
  }

  bp::GenerationRequest request(const bp::TrainConfig& cfg) const {
    bp::GenerationRequest r;
    r.mode = parse_mode(mode);
    r.decoding = parse_decoding(decoding);
    r.beam_width = beam_width;
    r.top_k = top_k;
    r.max_tokens = max_tokens;
    r.seed = seed;
    r.delta = cfg.delta;
    if (beam_width < 1 || top_k < 1 || max_tokens < 1) throw UsageError("beam width, top-k and max tokens must be >= 1");
    return r;
  }
};

int cmd_synth(const bp::SynthSpec& spec, const std::string& output, const std::string& meta) {
  const auto syn = bp::synth_corpus(spec);
  bp::write_corpus(output, syn.dialogues);
  if (!meta.empty()) bp::write_continuations(meta, syn.continuations);
  std::cerr << "wrote " << syn.dialogues.size() << " dialogues to " << output << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, int threads_flag, bool resume) {
  bp::RunConfig rc;
  try {
    rc = bp::load_run_config(config_path);
    rc.train.threads = rc.deterministic ? 1 : resolve_threads(threads_flag, rc.train.threads);
    bp::validate_for_training(rc);
  } catch (const bp::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const UsageError& e) {
    std::cerr << "error: config field 'threads': " << e.what() << "\n";
    return kExitInvalid;
  }
  std::unique_ptr<bp::TrainState> st;
  const auto manifest = std::filesystem::path(rc.checkpoint_dir) / "manifest.json";
  if (resume && std::filesystem::exists(manifest)) {
    st = bp::load_checkpoint(rc.checkpoint_dir);
    st->config.max_steps = rc.train.max_steps;
    st->config.threads = rc.train.threads;
    std::cerr << "resumed at step " << st->step << "\n";
  }
  const auto corpus = bp::load_corpus(rc.corpus, st ? std::optional<bp::Vocab>(st->vocab) : std::nullopt, rc.min_freq);
  for (const auto& [line, msg] : corpus.errors) std::cerr << rc.corpus << ":" << line << ": " << msg << "\n";
  if (corpus.dialogues.empty()) {
    std::cerr << "error: corpus " << rc.corpus << " has no usable dialogues\n";
    return 1;
  }
  if (!st) st = bp::init_state(rc.train, corpus.vocab);
  const auto train_set = bp::window_corpus(corpus.dialogues, st->config.window);
  std::vector<bp::Dialogue> valid_set;
  if (!rc.valid.empty()) valid_set = bp::window_corpus(bp::load_corpus(rc.valid, st->vocab).dialogues, st->config.window);

  bp::TrainOptions opt;
  opt.checkpoint_dir = rc.checkpoint_dir;
  opt.metrics_csv = (std::filesystem::path(rc.checkpoint_dir) / "metrics.csv").string();
  std::filesystem::create_directories(rc.checkpoint_dir);
  const auto res = bp::train(*st, train_set, valid_set.empty() ? nullptr : &valid_set, opt);
  const double ppl = res.valid_ppl ? *res.valid_ppl : bp::perplexity(st->model, st->store, train_set, st->config.mixup);
  std::cout << (res.valid_ppl ? "valid_ppl " : "train_ppl ") << ppl << "\n";
  std::cout << "steps " << st->step << (res.stopped_early ? " (early stop)" : "") << "\n";
  return 0;
}

int cmd_generate(const std::string& ckpt, const std::string& contexts, const DecodeFlags& flags, int n,
                 const std::string& output) {
  const auto st = bp::load_checkpoint(ckpt);
  auto req = flags.request(st->config);
  if (n < 1) throw UsageError("--n must be >= 1");
  Sink sink(output);
  for (const auto& turns : read_turn_lists(contexts)) {
    if (turns.empty()) throw UsageError("context with no turns in " + contexts);
    req.context = to_utterances(turns, st->vocab);
    json line;
    line["context"] = turns;
    line["mode"] = flags.mode;
    line["seed"] = flags.seed;
    if (n == 1) {
      const auto g = bp::generate(req, st->model, st->store);
      line["response"] = bp::detokenize(g.tokens, st->vocab);
      line["logprob"] = g.logprob;
      line["mu_T_fallback"] = g.mu_T_fallback;
    } else {
      const auto counts = bp::diverse_generate(req, n, st->model, st->store, flags.seed);
      line["response"] = bp::detokenize(counts.front().tokens, st->vocab);
      json table = json::array();
      for (const auto& c : counts) table.push_back({{"response", bp::detokenize(c.tokens, st->vocab)}, {"count", c.count}});
      line["responses"] = table;
      line["n"] = n;
    }
    sink.out() << line.dump() << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& corpus_path, const DecodeFlags& flags, const std::string& csv) {
  const auto st = bp::load_checkpoint(ckpt);
  const auto corpus = bp::load_corpus(corpus_path, st->vocab);
  if (corpus.dialogues.empty()) throw UsageError("corpus " + corpus_path + " has no usable dialogues");
  const auto dialogues = bp::window_corpus(corpus.dialogues, st->config.window);

  // Dialogues sharing a context pool their responses as references.
  std::map<std::string, std::size_t> index;
  std::vector<const bp::Dialogue*> contexts;
  std::vector<std::vector<bp::Sentence>> refs;
  for (const auto& d : dialogues) {
    const auto key = bp::prefix_key(d, d.T());
    auto [it, inserted] = index.emplace(key, contexts.size());
    if (inserted) {
      contexts.push_back(&d);
      refs.emplace_back();
    }
    refs[it->second].push_back(bp::split_words(d.response().text));
  }
  auto req = flags.request(st->config);
  std::vector<bp::Sentence> hyps;
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    req.context.assign(contexts[i]->utterances.begin(), contexts[i]->utterances.end() - 1);
    req.seed = flags.seed + i;
    hyps.push_back(bp::split_words(bp::detokenize(bp::generate(req, st->model, st->store).tokens, st->vocab)));
  }
  auto report = bp::evaluate(hyps, refs);
  report.ppl = bp::perplexity(st->model, st->store, dialogues, st->config.mixup);
  std::cout << bp::to_json(report).dump(2) << "\n";
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  if (!csv.empty()) {
    const bool fresh = !std::filesystem::exists(csv);
    std::ofstream os(csv, std::ios::app);
    if (!os) throw UsageError("cannot write " + csv);
    if (fresh) os << bp::csv_header(report) << "\n";
    os << bp::csv_row(report) << "\n";
  }
  return 0;
}

int cmd_sample_paths(const std::string& ckpt, const std::string& dialogue_path, int K, std::uint64_t seed, bool normalize,
                     const std::string& output) {
  const auto st = bp::load_checkpoint(ckpt);
  const auto lists = read_turn_lists(dialogue_path);
  if (lists.empty()) throw UsageError("no dialogue in " + dialogue_path);
  if (lists.front().size() < 2) throw UsageError("dialogue needs at least 2 utterances");
  bp::Dialogue d;
  d.utterances = to_utterances(lists.front(), st->vocab);
  auto paths = bp::dialogue_paths(st->model, st->store, d, K, seed, st->config.delta);
  if (normalize) paths = bp::normalize_paths(std::move(paths));
  Sink sink(output);
  bp::write_paths_csv(sink.out(), paths);
  return 0;
}

int cmd_gradcheck(const std::string& config_path, const std::string& precision, const std::string& corrupt, int max_entries,
                  std::uint64_t seed) {
  auto setup = bp::tiny_gradcheck_setup();
  if (!config_path.empty()) {
    bp::RunConfig rc;
    try {
      rc = bp::load_run_config(config_path);
    } catch (const bp::ConfigError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitInvalid;
    }
    setup.train.model = rc.train.model;
    setup.train.model.vocab_size = 32;
    setup.train.K = rc.train.K;
    setup.train.delta = rc.train.delta;
    setup.train.w_beta = rc.train.w_beta;
    setup.train.w_nll = rc.train.w_nll;
    setup.train.w_kl = rc.train.w_kl;
  }
  bp::GradcheckOptions opt;
  opt.seed = seed;
  opt.corrupt_group = corrupt;
  opt.max_entries_per_param = max_entries;
  if (precision == "float") {
    opt.precision = bp::Precision::kFloat;
    opt.threshold = 1e-2;
  } else if (precision != "double") {
    throw UsageError("--precision must be double or float");
  }
  const auto report = bp::run_gradcheck(setup, opt);
  std::cout << "group,max_rel_error,checked,result\n";
  for (const auto& g : report.groups) {
    std::cout << g.group << ',' << g.max_rel_error << ',' << g.checked << ',' << (g.pass ? "pass" : "FAIL") << "\n";
  }
  std::cout << "threshold " << report.threshold << ": " << (report.pass ? "PASS" : "FAIL") << "\n";
  return report.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dialogue generation with latent bridge paths"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (fallback: BRIDGEPATH_THREADS)");

  bp::SynthSpec spec;
  std::string synth_out, synth_meta;
  auto* synth = app.add_subcommand("synth", "write a synthetic many-to-many corpus");
  synth->add_option("--output", synth_out, "corpus JSONL")->required();
  synth->add_option("--continuations", synth_meta, "prefix -> continuations JSON");
  synth->add_option("--branching", spec.branching)->capture_default_str();
  synth->add_option("--templates", spec.templates)->capture_default_str();
  synth->add_option("--turns", spec.turns)->capture_default_str();
  synth->add_option("--vocab-size", spec.vocab_size)->capture_default_str();
  synth->add_option("--pool-size", spec.pool_size)->capture_default_str();
  synth->add_option("--seed", spec.seed)->capture_default_str();

  std::string train_cfg;
  bool resume = false;
  auto* train = app.add_subcommand("train", "train from a key = value config");
  train->add_option("config", train_cfg, "config file")->required();
  train->add_flag("--resume", resume, "continue from the checkpoint in checkpoint_dir");

  std::string ckpt, contexts, gen_out;
  int n = 1;
  DecodeFlags gen_flags;
  auto* gen = app.add_subcommand("generate", "generate responses (JSONL)");
  gen->add_option("--checkpoint", ckpt)->required();
  gen->add_option("--contexts", contexts, "JSONL of {\"turns\": [...]}; all turns are context")->required();
  gen->add_option("--n", n, "generations per context; > 1 reports a frequency table")->capture_default_str();
  gen->add_option("--output", gen_out);
  gen_flags.add(gen);

  std::string eval_corpus, eval_csv;
  DecodeFlags eval_flags;
  eval_flags.decoding = "topk";
  auto* ev = app.add_subcommand("eval", "BLEU, distinct, entropy and perplexity on a corpus");
  ev->add_option("--checkpoint", ckpt)->required();
  ev->add_option("--corpus", eval_corpus)->required();
  ev->add_option("--csv", eval_csv, "append a row to this CSV");
  eval_flags.add(ev);

  std::string dialogue, paths_out;
  int K = 8;
  std::uint64_t path_seed = 0;
  bool normalize = false;
  auto* sp = app.add_subcommand("sample-paths", "dump K latent paths over one dialogue (CSV)");
  sp->add_option("--checkpoint", ckpt)->required();
  sp->add_option("--dialogue", dialogue, "JSONL; the first line is used")->required();
  sp->add_option("-K,--paths", K)->capture_default_str();
  sp->add_option("--seed", path_seed)->capture_default_str();
  sp->add_flag("--normalize", normalize, "min-max scale each dimension to [0, 1]");
  sp->add_option("--output", paths_out);

  std::string gc_cfg, precision = "double", corrupt;
  int max_entries = 0;
  std::uint64_t gc_seed = 1;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check per parameter group");
  gc->add_option("--config", gc_cfg, "optional config overriding model sizes and loss weights");
  gc->add_option("--precision", precision, "double | float")->capture_default_str();
  gc->add_option("--corrupt-group", corrupt, "test hook: perturb this group's analytic gradient");
  gc->add_option("--max-entries", max_entries, "entries checked per tensor (0 = all)")->capture_default_str();
  gc->add_option("--seed", gc_seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitInvalid;
  }

  try {
    if (*synth) return cmd_synth(spec, synth_out, synth_meta);
    if (*train) return cmd_train(train_cfg, threads, resume);
    if (*gen) return cmd_generate(ckpt, contexts, gen_flags, n, gen_out);
    if (*ev) return cmd_eval(ckpt, eval_corpus, eval_flags, eval_csv);
    if (*sp) return cmd_sample_paths(ckpt, dialogue, K, path_seed, normalize, paths_out);
    if (*gc) return cmd_gradcheck(gc_cfg, precision, corrupt, max_entries, gc_seed);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const bp::CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

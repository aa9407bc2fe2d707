// Central-difference check of the analytic gradient of the full objective,
// reported per parameter group.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "bridgepath/corpus.hpp"
#include "bridgepath/distill.hpp"
#include "bridgepath/model.hpp"
#include "bridgepath/params.hpp"
#include "bridgepath/rng.hpp"

namespace bridgepath {

enum class Precision { kDouble, kFloat };

struct GradcheckOptions {
  double h = 1e-5;
  double threshold = 1e-4;
  // Entries per parameter tensor; 0 checks every entry.
  int max_entries_per_param = 0;
  Precision precision = Precision::kDouble;
  // Test hook: scales this group's analytic gradient by 1.01 before comparing.
  std::string corrupt_group;
  std::uint64_t seed = 1;
};

struct GroupResult {
  std::string group;
  double max_rel_error = 0.0;
  int checked = 0;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<GroupResult> groups;
  double threshold = 0.0;
  bool pass = true;
};

// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
// gradient is ~0 (key biases, by softmax shift invariance) from being judged
// on roundoff in the difference quotient, which is ~1e-10 here.
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// `loss(grads)` must be a deterministic function of the store contents; it
// fills `grads` when non-null. With Precision::kFloat, `loss_float` supplies
// the analytic gradient and the double loss the numeric reference.
template <class Loss, class LossFloat>
GradcheckReport gradcheck(ParameterStore& store, Loss&& loss, LossFloat&& loss_float, const GradcheckOptions& opt) {
  GradBuffer analytic(store.size());
  if (opt.precision == Precision::kFloat) {
    loss_float(&analytic);
  } else {
    loss(&analytic);
  }

  std::map<std::string, GroupResult> by_group;
  Rng rng = make_rng(opt.seed, Stream::kInit, {0x9c});
  for (std::size_t pi = 0; pi < store.size(); ++pi) {
    const auto id = static_cast<ParamId>(pi);
    if (!store.at(id).trainable) continue;
    const std::string grp = store.at(id).group;
    auto& res = by_group[grp];
    res.group = grp;
    Matrix g = analytic.get(id, store);
    if (grp == opt.corrupt_group) g *= 1.01;

    std::vector<Eigen::Index> entries(static_cast<std::size_t>(store.value(id).size()));
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = static_cast<Eigen::Index>(i);
    if (opt.max_entries_per_param > 0 && static_cast<int>(entries.size()) > opt.max_entries_per_param) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(static_cast<std::size_t>(opt.max_entries_per_param));
    }
    for (const auto e : entries) {
      double& x = store.value(id).data()[e];
      const double x0 = x;
      x = x0 + opt.h;
      const double up = loss(nullptr);
      x = x0 - opt.h;
      const double down = loss(nullptr);
      x = x0;
      const double numeric = (up - down) / (2.0 * opt.h);
      res.max_rel_error = std::max(res.max_rel_error, relative_error(g.data()[e], numeric));
      ++res.checked;
    }
  }

  GradcheckReport report;
  report.threshold = opt.threshold;
  for (auto& [name, res] : by_group) {
    res.pass = res.max_rel_error < opt.threshold;
    report.pass = report.pass && res.pass;
    report.groups.push_back(res);
  }
  return report;
}

// The standard check: tiny model, two synthetic dialogues, full objective.
struct GradcheckSetup {
  TrainConfig train;
  int dialogues = 2;
};

inline GradcheckSetup tiny_gradcheck_setup() {
  GradcheckSetup s;
  s.train.model.vocab_size = 32;
  s.train.model.d_model = 16;
  s.train.model.heads = 2;
  s.train.model.encoder_layers = 1;
  s.train.model.decoder_layers = 1;
  s.train.model.dropout = 0.0;
  s.train.K = 2;
  // A blocked teacher makes the analytic gradient differ from the derivative
  // of the loss by design.
  s.train.block_teacher = false;
  return s;
}

inline GradcheckReport run_gradcheck(const GradcheckSetup& setup, const GradcheckOptions& opt) {
  SynthSpec spec;
  spec.vocab_size = setup.train.model.vocab_size - 4;
  spec.templates = 2;
  spec.branching = 2;
  spec.turns = 4;
  spec.seed = opt.seed;
  const auto syn = synth_corpus(spec);
  TrainConfig cfg = setup.train;
  cfg.model.vocab_size = std::max(cfg.model.vocab_size, syn.vocab.size());
  cfg.seed = opt.seed;

  ParameterStore store;
  const auto model = create_model(store, cfg.model, opt.seed);
  // Move the gates off their (1, 0) initialization so every pathway carries
  // gradient.
  Rng rng = make_rng(opt.seed, Stream::kInit, {0x6a7e});
  std::normal_distribution<double> n01(0.0, 1.0);
  for (std::size_t pi = 0; pi < store.size(); ++pi) {
    auto& p = store.at(static_cast<ParamId>(pi));
    if (p.group.rfind("mix_", 0) != 0) continue;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += 0.3 * n01(rng);
  }

  std::vector<const Dialogue*> batch;
  for (int i = 0; i < setup.dialogues && i < static_cast<int>(syn.dialogues.size()); ++i) {
    batch.push_back(&syn.dialogues[static_cast<std::size_t>(i) * syn.dialogues.size() / static_cast<std::size_t>(setup.dialogues)]);
  }
  ObjectiveOptions oo;
  oo.train = cfg.model.dropout > 0.0;
  auto loss = [&](GradBuffer* g) { return batch_objective<double>(model, store, cfg, batch, 0, g, oo).total; };
  auto loss_float = [&](GradBuffer* g) { return batch_objective<float>(model, store, cfg, batch, 0, g, oo).total; };
  return gradcheck(store, loss, loss_float, opt);
}

}  // namespace bridgepath

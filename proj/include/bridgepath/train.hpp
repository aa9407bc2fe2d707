// Optimization loop: mini-batches in a per-epoch seeded order, Adam with
// inverse square-root schedule, periodic checkpoints, early stopping on
// validation perplexity.
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "bridgepath/checkpoint.hpp"
#include "bridgepath/corpus.hpp"
#include "bridgepath/distill.hpp"
#include "bridgepath/metrics.hpp"
#include "bridgepath/rng.hpp"

namespace bridgepath {

struct StepLog {
  long long step = 0;
  double l_beta = 0.0;
  double nll = 0.0;
  double kl = 0.0;
  double lr = 0.0;
};

struct TrainOptions {
  std::optional<std::string> checkpoint_dir;
  std::optional<std::string> metrics_csv;
  // Stop after this many steps in this call (resume tests); the state's
  // max_steps still bounds the run.
  std::optional<long long> stop_after;
  std::function<void(const TrainState&, const StepLog&)> on_step;
};

struct TrainResult {
  std::vector<StepLog> log;
  std::optional<double> valid_ppl;
  bool stopped_early = false;
};

inline std::vector<std::size_t> epoch_order(std::uint64_t seed, long long epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, Stream::kDataOrder, {static_cast<std::uint64_t>(epoch)});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline std::string csv_line(const StepLog& s) {
  std::ostringstream os;
  os << std::setprecision(10) << s.step << ',' << s.l_beta << ',' << s.nll << ',' << s.kl << ',' << s.lr;
  return os.str();
}

// `train_set` holds windowed dialogues. Validation runs at each epoch end.
inline TrainResult train(TrainState& st, const std::vector<Dialogue>& train_set,
                         const std::vector<Dialogue>* valid_set = nullptr, const TrainOptions& opt = {}) {
  if (train_set.empty()) throw std::invalid_argument("train: empty corpus");
  const TrainConfig& cfg = st.config;
  cfg.validate();
  TrainResult res;
  std::ofstream csv;
  if (opt.metrics_csv && st.step < cfg.max_steps) {
    const bool fresh = !std::filesystem::exists(*opt.metrics_csv) || st.step == 0;
    csv.open(*opt.metrics_csv, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw std::runtime_error("train: cannot open metrics log " + *opt.metrics_csv);
    if (fresh) csv << "step,l_beta,nll,kl,lr\n";
  }
  const AdamConfig adam{cfg.beta1, cfg.beta2, 1e-8};
  const std::size_t n = train_set.size();
  auto order = epoch_order(cfg.seed, st.epoch, n);
  long long steps_this_call = 0;

  auto end_of_epoch = [&]() -> bool {
    bool stop = false;
    if (valid_set && !valid_set->empty()) {
      const double ppl = perplexity(st.model, st.store, *valid_set, cfg.mixup);
      res.valid_ppl = ppl;
      if (ppl < st.best_valid_ppl) {
        st.best_valid_ppl = ppl;
        st.bad_epochs = 0;
        st.best_params.clear();
        for (const auto& p : st.store) st.best_params.push_back(p.value);
      } else if (++st.bad_epochs >= cfg.patience) {
        stop = true;
      }
    }
    ++st.epoch;
    st.epoch_pos = 0;
    order = epoch_order(cfg.seed, st.epoch, n);
    return stop;
  };

  GradBuffer grads(st.store.size());
  while (st.step < cfg.max_steps) {
    if (opt.stop_after && steps_this_call >= *opt.stop_after) break;
    if (static_cast<std::size_t>(st.epoch_pos) >= n && end_of_epoch()) {
      res.stopped_early = true;
      break;
    }
    std::vector<const Dialogue*> batch;
    const auto begin = static_cast<std::size_t>(st.epoch_pos);
    const auto end = std::min(n, begin + static_cast<std::size_t>(cfg.batch_size));
    for (std::size_t i = begin; i < end; ++i) batch.push_back(&train_set[order[i]]);

    grads.clear();
    const auto loss = batch_objective<double>(st.model, st.store, cfg, batch, st.step, &grads);
    const double lr = inverse_sqrt_lr(cfg.learning_rate, st.step + 1, cfg.warmup);
    adam_step(st.store, st.adam, grads, lr, adam);
    ++st.step;
    ++steps_this_call;
    st.epoch_pos = static_cast<long long>(end);

    StepLog row{st.step, loss.l_beta, loss.nll, loss.kl, lr};
    res.log.push_back(row);
    if (csv.is_open()) csv << csv_line(row) << '\n';
    if (opt.on_step) opt.on_step(st, row);
    if (opt.checkpoint_dir && cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0) {
      save_checkpoint(st, *opt.checkpoint_dir);
    }
  }
  const bool finished = st.step >= cfg.max_steps || res.stopped_early;
  if (finished && !st.best_params.empty()) {
    for (std::size_t i = 0; i < st.best_params.size(); ++i) st.store.value(static_cast<ParamId>(i)) = st.best_params[i];
  }
  if (finished && valid_set && !valid_set->empty()) res.valid_ppl = perplexity(st.model, st.store, *valid_set, cfg.mixup);
  if (opt.checkpoint_dir) save_checkpoint(st, *opt.checkpoint_dir);
  return res;
}

}  // namespace bridgepath

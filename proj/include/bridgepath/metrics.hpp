// Corpus BLEU, Distinct-n, Entropy-n and perplexity.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bridgepath/corpus.hpp"
#include "bridgepath/distill.hpp"
#include "bridgepath/model.hpp"
#include "bridgepath/seq2seq.hpp"
#include "json.hpp"

namespace bridgepath {

using Sentence = std::vector<std::string>;
using NGramCounts = std::map<Sentence, int>;

inline NGramCounts ngram_counts(const Sentence& s, int n) {
  NGramCounts c;
  if (n < 1) throw std::invalid_argument("ngram order must be >= 1");
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i) {
    ++c[Sentence(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  }
  return c;
}

inline constexpr double kBleuEpsilon = 1e-9;

// Corpus BLEU-n in percent. Counts are clipped against the maximum count of
// each n-gram over that hypothesis's references; the brevity penalty uses
// the reference length closest to each hypothesis (shorter on ties).
inline double bleu_n(const std::vector<Sentence>& hyps, const std::vector<std::vector<Sentence>>& refs, int n) {
  if (hyps.empty()) throw std::invalid_argument("bleu: empty hypothesis list");
  if (hyps.size() != refs.size()) throw std::invalid_argument("bleu: hypothesis/reference count mismatch");
  if (n < 1) throw std::invalid_argument("bleu: n must be >= 1");
  std::vector<double> matched(static_cast<std::size_t>(n), 0.0);
  std::vector<double> total(static_cast<std::size_t>(n), 0.0);
  double hyp_len = 0.0;
  double ref_len = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto& h = hyps[i];
    const auto& rs = refs[i];
    if (rs.empty()) throw std::invalid_argument("bleu: empty reference set");
    for (int k = 1; k <= n; ++k) {
      std::map<Sentence, int> max_ref;
      for (const auto& r : rs) {
        for (const auto& [g, c] : ngram_counts(r, k)) max_ref[g] = std::max(max_ref[g], c);
      }
      for (const auto& [g, c] : ngram_counts(h, k)) {
        const auto it = max_ref.find(g);
        matched[static_cast<std::size_t>(k - 1)] += std::min(c, it == max_ref.end() ? 0 : it->second);
        total[static_cast<std::size_t>(k - 1)] += c;
      }
    }
    hyp_len += static_cast<double>(h.size());
    std::size_t best = rs.front().size();
    for (const auto& r : rs) {
      const auto d = [&](std::size_t len) { return std::abs(static_cast<long>(len) - static_cast<long>(h.size())); };
      if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
  }
  double log_p = 0.0;
  for (int k = 0; k < n; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    const double p = total[ku] > 0.0 ? matched[ku] / total[ku] : 0.0;
    log_p += std::log(p > 0.0 ? p : kBleuEpsilon);
  }
  double bp = 0.0;
  if (hyp_len > 0.0) bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return 100.0 * bp * std::exp(log_p / n);
}

// 100 * unique n-grams / total n-grams, pooled over all hypotheses.
inline double distinct_n(const std::vector<Sentence>& hyps, int n, std::string* warning = nullptr) {
  if (hyps.empty()) throw std::invalid_argument("distinct: empty hypothesis list");
  NGramCounts all;
  double total = 0.0;
  for (const auto& h : hyps) {
    for (const auto& [g, c] : ngram_counts(h, n)) {
      all[g] += c;
      total += c;
    }
  }
  if (total == 0.0) {
    if (warning) *warning = "distinct-" + std::to_string(n) + ": no hypothesis has " + std::to_string(n) + " tokens";
    return 0.0;
  }
  return 100.0 * static_cast<double>(all.size()) / total;
}

// Shannon entropy (nats) of the pooled n-gram distribution.
inline double entropy_n(const std::vector<Sentence>& hyps, int n = 4, std::string* warning = nullptr) {
  if (hyps.empty()) throw std::invalid_argument("entropy: empty hypothesis list");
  NGramCounts all;
  double total = 0.0;
  for (const auto& h : hyps) {
    for (const auto& [g, c] : ngram_counts(h, n)) {
      all[g] += c;
      total += c;
    }
  }
  if (total == 0.0) {
    if (warning) *warning = "entropy-" + std::to_string(n) + ": no n-grams";
    return 0.0;
  }
  double h = 0.0;
  for (const auto& [g, c] : all) {
    const double p = c / total;
    h -= p * std::log(p);
  }
  return h;
}

// exp of the token-weighted mean NLL.
inline double perplexity_from_nll(double total_nll, double tokens) {
  if (!(tokens > 0.0)) throw std::invalid_argument("perplexity: no tokens");
  return std::exp(total_nll / tokens);
}

// Teacher-forced perplexity with expectation mixup over every target token
// (response tokens and the closing eos).
inline double perplexity(const DialogueModel& m, const ParameterStore& store, const std::vector<Dialogue>& corpus,
                         bool mixup = true) {
  if (corpus.empty()) throw std::invalid_argument("perplexity: empty corpus");
  double nll = 0.0;
  double tokens = 0.0;
  for (const auto& d : corpus) {
    const auto tf = teacher_forward(d, m, store, mixup);
    const auto target = decoder_target(d.response().tokens);
    const double n = static_cast<double>(target.size());
    nll += nll_loss(tf.log_probs, target) * n;
    tokens += n;
  }
  return perplexity_from_nll(nll, tokens);
}

struct EvalReport {
  std::array<double, 4> bleu{};
  std::array<double, 2> distinct{};
  double entropy4 = 0.0;
  std::optional<double> ppl;
  std::size_t hypotheses = 0;
  std::size_t references = 0;
  std::vector<std::string> warnings;
};

inline EvalReport evaluate(const std::vector<Sentence>& hyps, const std::vector<std::vector<Sentence>>& refs) {
  EvalReport r;
  for (int n = 1; n <= 4; ++n) r.bleu[static_cast<std::size_t>(n - 1)] = bleu_n(hyps, refs, n);
  for (int n = 1; n <= 2; ++n) {
    std::string w;
    r.distinct[static_cast<std::size_t>(n - 1)] = distinct_n(hyps, n, &w);
    if (!w.empty()) r.warnings.push_back(w);
  }
  std::string w;
  r.entropy4 = entropy_n(hyps, 4, &w);
  if (!w.empty()) r.warnings.push_back(w);
  r.hypotheses = hyps.size();
  for (const auto& rs : refs) r.references += rs.size();
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  for (int n = 1; n <= 4; ++n) j["bleu" + std::to_string(n)] = r.bleu[static_cast<std::size_t>(n - 1)];
  for (int n = 1; n <= 2; ++n) j["distinct" + std::to_string(n)] = r.distinct[static_cast<std::size_t>(n - 1)];
  j["entropy4"] = r.entropy4;
  j["ppl"] = r.ppl ? nlohmann::json(*r.ppl) : nlohmann::json(nullptr);
  j["hypotheses"] = r.hypotheses;
  j["references"] = r.references;
  j["warnings"] = r.warnings;
  return j;
}

inline std::string csv_header(const EvalReport&) { return "bleu1,bleu2,bleu3,bleu4,distinct1,distinct2,entropy4,ppl,hypotheses,references"; }

inline std::string csv_row(const EvalReport& r) {
  std::string s;
  auto put = [&](const std::string& v) { s += (s.empty() ? "" : ",") + v; };
  for (const double b : r.bleu) put(std::to_string(b));
  for (const double d : r.distinct) put(std::to_string(d));
  put(std::to_string(r.entropy4));
  put(r.ppl ? std::to_string(*r.ppl) : "");
  put(std::to_string(r.hypotheses));
  put(std::to_string(r.references));
  return s;
}

}  // namespace bridgepath

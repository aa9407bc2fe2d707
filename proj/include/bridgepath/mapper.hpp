// Utterance -> bridge expectation mapping and its contrastive objective.
//
// An utterance is embedded as the mean of its token embeddings (no position
// information) and pushed through a 4-layer ReLU MLP. The contrastive loss
// scores ordered triplets by how close the middle expectation lies to the
// bridge interpolant of its neighbours.
#pragma once

#include <array>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "bridgepath/autograd.hpp"
#include "bridgepath/corpus.hpp"
#include "bridgepath/params.hpp"
#include "bridgepath/rng.hpp"

namespace bridgepath {

struct MapperNet {
  static constexpr int kLayers = 4;
  std::array<ParamId, kLayers> weights{};
  std::array<ParamId, kLayers> biases{};
  int input_dim = 0;
  int hidden_dim = 0;
  int output_dim = 0;
};

inline Matrix xavier_uniform(int fan_in, int fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Matrix w(fan_in, fan_out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  return w;
}

inline MapperNet create_mapper(ParameterStore& store, int input_dim, int hidden_dim, int output_dim, Rng& rng) {
  if (input_dim < 1 || hidden_dim < 1 || output_dim < 1) throw std::invalid_argument("mapper: dimensions must be positive");
  MapperNet net;
  net.input_dim = input_dim;
  net.hidden_dim = hidden_dim;
  net.output_dim = output_dim;
  const std::array<int, 5> dims{input_dim, hidden_dim, hidden_dim, hidden_dim, output_dim};
  for (int l = 0; l < MapperNet::kLayers; ++l) {
    const auto in = dims[static_cast<std::size_t>(l)];
    const auto out = dims[static_cast<std::size_t>(l + 1)];
    const std::string base = "mapper.fc" + std::to_string(l);
    net.weights[static_cast<std::size_t>(l)] = store.add(base + ".weight", group::kMapper, xavier_uniform(in, out, rng));
    net.biases[static_cast<std::size_t>(l)] = store.add(base + ".bias", group::kMapper, Matrix::Zero(1, out));
  }
  return net;
}

// Mean token embedding of one utterance.
inline Vector embed_utterance(const Utterance& u, const Matrix& table) {
  if (u.tokens.empty()) throw std::invalid_argument("embed_utterance: empty utterance");
  Vector acc = Vector::Zero(table.cols());
  for (const int t : u.tokens) acc += table.row(t).transpose();
  return acc / static_cast<double>(u.tokens.size());
}

inline Vector map_to_mu(const Vector& u, const ParameterStore& store, const MapperNet& net) {
  if (u.size() != net.input_dim) throw std::invalid_argument("map_to_mu: input dimension mismatch");
  Eigen::RowVectorXd h = u.transpose();
  for (int l = 0; l < MapperNet::kLayers; ++l) {
    h = h * store.value(net.weights[static_cast<std::size_t>(l)]) + store.value(net.biases[static_cast<std::size_t>(l)]);
    if (l + 1 < MapperNet::kLayers) h = h.cwiseMax(0.0);
  }
  return h.transpose();
}

namespace ag {

template <class S>
Var<S> embed_utterance(Var<S> table, const std::vector<int>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("embed_utterance: empty utterance");
  return mean_rows(gather_rows(table, tokens));
}

// Row-batched forward pass: each row of `u` maps to one expectation.
template <class S>
Var<S> map_to_mu(Tape<S>& tape, const ParameterStore& store, const MapperNet& net, Var<S> u) {
  if (u.cols() != net.input_dim) throw std::invalid_argument("map_to_mu: input dimension mismatch");
  Var<S> h = u;
  for (int l = 0; l < MapperNet::kLayers; ++l) {
    h = add_rowvec(matmul(h, tape.param(store, net.weights[static_cast<std::size_t>(l)])),
                   tape.param(store, net.biases[static_cast<std::size_t>(l)]));
    if (l + 1 < MapperNet::kLayers) h = relu(h);
  }
  return h;
}

}  // namespace ag

// Variance attached to the middle of a triplet: the bridge variance at t1
// of a bridge pinned at times 0 and t2. Times are absolute utterance indices.
inline double triplet_variance(int /*t0*/, int t1, int t2) {
  return static_cast<double>(t1) * static_cast<double>(t2 - t1) / static_cast<double>(t2);
}

// Interpolation weight t1 / t2 of the right endpoint.
inline double triplet_weight(int /*t0*/, int t1, int t2) {
  return static_cast<double>(t1) / static_cast<double>(t2);
}

inline void check_triplet_order(int t0, int t1, int t2) {
  if (!(t0 < t1 && t1 < t2)) throw std::invalid_argument("triplet: times must satisfy t0 < t1 < t2");
}

// d = -||mu1 - (1 - w) mu0 - w mu2||^2 / (2 sigma^2); always <= 0.
inline double triplet_distance(const Vector& mu0, const Vector& mu1, const Vector& mu2, int t0, int t1, int t2) {
  check_triplet_order(t0, t1, t2);
  const double w = triplet_weight(t0, t1, t2);
  const double var = triplet_variance(t0, t1, t2);
  return -(mu1 - (1.0 - w) * mu0 - w * mu2).squaredNorm() / (2.0 * var);
}

// log(1 + sum_neg exp(d_neg) / exp(d_pos)), computed stably.
inline double contrastive_term(double d_pos, const std::vector<double>& d_negs) {
  if (d_negs.empty()) throw std::invalid_argument("contrastive_term: need at least one negative");
  double m = 0.0;
  for (const double d : d_negs) m = std::max(m, d - d_pos);
  double acc = std::exp(-m);
  for (const double d : d_negs) acc += std::exp(d - d_pos - m);
  return m + std::log(acc);
}

// A triplet over rows of a batch expectation matrix. Negatives are rows whose
// expectation replaces the middle.
struct Triplet {
  int t0 = 0, t1 = 0, t2 = 0;
  int row0 = 0, row1 = 0, row2 = 0;
  std::vector<int> negatives;
};

struct TripletScore {
  double d_pos = 0.0;
  std::vector<double> d_negs;
};

inline TripletScore score_triplet(const Matrix& mus, const Triplet& tr) {
  auto row = [&](int r) -> Vector { return mus.row(r).transpose(); };
  TripletScore s;
  s.d_pos = triplet_distance(row(tr.row0), row(tr.row1), row(tr.row2), tr.t0, tr.t1, tr.t2);
  for (const int n : tr.negatives) s.d_negs.push_back(triplet_distance(row(tr.row0), row(n), row(tr.row2), tr.t0, tr.t1, tr.t2));
  return s;
}

// Mean contrastive term over the triplets.
inline double contrastive_loss(const Matrix& mus, const std::vector<Triplet>& triplets) {
  if (triplets.empty()) return 0.0;
  double total = 0.0;
  for (const auto& tr : triplets) {
    const auto s = score_triplet(mus, tr);
    total += contrastive_term(s.d_pos, s.d_negs);
  }
  return total / static_cast<double>(triplets.size());
}

// Euclidean distance of the positive middle from its interpolant.
inline double triplet_residual(const Matrix& mus, const Triplet& tr) {
  const double w = triplet_weight(tr.t0, tr.t1, tr.t2);
  return (mus.row(tr.row1) - (1.0 - w) * mus.row(tr.row0) - w * mus.row(tr.row2)).norm();
}

namespace ag {

template <class S>
Var<S> contrastive_loss(Var<S> mus, const std::vector<Triplet>& triplets) {
  auto& tape = *mus.tape;
  if (triplets.empty()) return tape.constant(Mat<S>::Zero(1, 1));
  std::vector<Var<S>> terms;
  terms.reserve(triplets.size());
  for (const auto& tr : triplets) {
    if (tr.negatives.empty()) throw std::invalid_argument("contrastive_loss: triplet without negatives");
    check_triplet_order(tr.t0, tr.t1, tr.t2);
    const S w = static_cast<S>(triplet_weight(tr.t0, tr.t1, tr.t2));
    const S var = static_cast<S>(triplet_variance(tr.t0, tr.t1, tr.t2));
    Var<S> ends = gather_rows(mus, {tr.row0, tr.row2});
    Mat<S> coeff(1, 2);
    coeff << S(1) - w, w;
    Var<S> interp = matmul(tape.constant(coeff), ends);  // 1 x d
    std::vector<int> middles{tr.row1};
    middles.insert(middles.end(), tr.negatives.begin(), tr.negatives.end());
    Var<S> cand = gather_rows(mus, middles);
    Var<S> resid = sub(cand, gather_rows(interp, std::vector<int>(middles.size(), 0)));
    Var<S> d = scale(row_squared_norm(resid), S(-1) / (S(2) * var));
    terms.push_back(sub(logsumexp(d), slice_rows(d, 0, 1)));
  }
  return scale(sum(concat_rows(terms)), S(1) / static_cast<S>(terms.size()));
}

}  // namespace ag

// Ordered triplets (t0 < t1 < t2) of one dialogue. All of them when the
// dialogue has at most `exhaustive_limit` utterances, else `sample_count`
// drawn without replacement.
inline std::vector<std::array<int, 3>> dialogue_triplets(int n_utterances, Rng& rng, int exhaustive_limit = 5,
                                                         int sample_count = 4) {
  std::vector<std::array<int, 3>> all;
  for (int a = 0; a < n_utterances; ++a) {
    for (int b = a + 1; b < n_utterances; ++b) {
      for (int c = b + 1; c < n_utterances; ++c) all.push_back({a, b, c});
    }
  }
  if (n_utterances <= exhaustive_limit || static_cast<int>(all.size()) <= sample_count) return all;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(sample_count));
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace bridgepath

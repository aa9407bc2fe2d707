// The extended Brownian bridge over a dialogue's latent expectations.
//
// Interior times 0 < t < T follow the classical bridge pinned at mu_0 and
// mu_T. The endpoints are themselves Gaussian with variance
// 2 delta (T - delta) / T so that the first utterance and the response can
// be sampled as well.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "bridgepath/params.hpp"
#include "bridgepath/rng.hpp"

namespace bridgepath {

struct BridgeParams {
  std::vector<Vector> mus;  // T + 1 expectations
  int T = 0;
  double delta = 0.5;

  BridgeParams() = default;
  BridgeParams(std::vector<Vector> m, double d) : mus(std::move(m)), T(static_cast<int>(mus.size()) - 1), delta(d) {
    validate();
  }

  Eigen::Index dim() const { return mus.empty() ? 0 : mus.front().size(); }

  void validate() const {
    if (T < 1 || static_cast<int>(mus.size()) != T + 1) throw std::invalid_argument("bridge: need T >= 1 and T + 1 expectations");
    if (!(delta > 0.0 && delta < static_cast<double>(T))) throw std::invalid_argument("bridge: delta must lie in (0, T)");
    for (const auto& m : mus) {
      if (m.size() != mus.front().size()) throw std::invalid_argument("bridge: expectation dimensions differ");
      if (!m.allFinite()) throw std::invalid_argument("bridge: non-finite expectation");
    }
  }
};

struct IsotropicGaussian {
  Vector mean;
  double variance = 0.0;  // per dimension
};

struct LatentPath {
  std::vector<Vector> zs;
  int path_index = 0;
};

// Variance of the extended endpoints z_0 and z_T.
inline double endpoint_variance(int T, double delta) {
  return 2.0 * delta * (static_cast<double>(T) - delta) / static_cast<double>(T);
}

// Classical bridge variance t (T - t) / T; also valid for non-integer t.
inline double interior_variance(double t, int T) {
  return t * (static_cast<double>(T) - t) / static_cast<double>(T);
}

inline IsotropicGaussian marginal(int t, const BridgeParams& p) {
  if (t < 0 || t > p.T) throw std::invalid_argument("marginal: t outside [0, T]");
  if (t == 0) return {p.mus.front(), endpoint_variance(p.T, p.delta)};
  if (t == p.T) return {p.mus.back(), endpoint_variance(p.T, p.delta)};
  const double w = static_cast<double>(t) / static_cast<double>(p.T);
  return {p.mus.front() + w * (p.mus.back() - p.mus.front()), interior_variance(t, p.T)};
}

// Per-dimension covariance of the classical bridge between two interior times.
inline double interior_covariance(int t1, int t2, int T) {
  if (!(0 < t1 && t1 < t2 && t2 < T)) throw std::invalid_argument("interior_covariance: need 0 < t1 < t2 < T");
  return static_cast<double>(t1) * static_cast<double>(T - t2) / static_cast<double>(T);
}

// Standard-normal noise for one path, laid out as T + 1 vectors of size d.
inline std::vector<Vector> standard_noise(int T, Eigen::Index d, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Vector> eps(static_cast<std::size_t>(T + 1), Vector(d));
  for (auto& e : eps) {
    for (Eigen::Index i = 0; i < d; ++i) e(i) = normal(rng);
  }
  return eps;
}

// z_t = mean_t + sqrt(var_t) * eps_t, each time drawn from its own marginal.
// `variance_scale` multiplies every variance (1 = the bridge law; 0 collapses
// the path onto its means).
inline LatentPath path_from_noise(const BridgeParams& p, const std::vector<Vector>& eps, int index = 0,
                                  double variance_scale = 1.0) {
  if (static_cast<int>(eps.size()) != p.T + 1) throw std::invalid_argument("path_from_noise: noise length mismatch");
  LatentPath path;
  path.path_index = index;
  path.zs.reserve(eps.size());
  for (int t = 0; t <= p.T; ++t) {
    const auto g = marginal(t, p);
    path.zs.push_back(g.mean + std::sqrt(g.variance * variance_scale) * eps[static_cast<std::size_t>(t)]);
  }
  return path;
}

inline LatentPath sample_path(const BridgeParams& p, Rng& rng, int index = 0, double variance_scale = 1.0) {
  p.validate();
  return path_from_noise(p, standard_noise(p.T, p.dim(), rng), index, variance_scale);
}

// K paths; path k draws from its own stream seeded by seed + k.
inline std::vector<LatentPath> sample_paths(const BridgeParams& p, int K, std::uint64_t seed) {
  std::vector<LatentPath> out;
  out.reserve(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    Rng rng(seed + static_cast<std::uint64_t>(k));
    out.push_back(sample_path(p, rng, k));
  }
  return out;
}

// mu_T from mu_0 and mu_{T-1} by collinear extrapolation. Returns nullopt
// when T < 2 (the caller decides the fallback).
inline std::optional<Vector> infer_mu_T(const Vector& mu0, const Vector& mu_prev, int T) {
  if (mu0.size() != mu_prev.size()) throw std::invalid_argument("infer_mu_T: dimension mismatch");
  if (T < 2) return std::nullopt;
  const double Td = static_cast<double>(T);
  return Vector(Td / (Td - 1.0) * mu_prev - 1.0 / (Td - 1.0) * mu0);
}

}  // namespace bridgepath

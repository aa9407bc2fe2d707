// Parameter storage, gradient buffers and the Adam optimizer.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace bridgepath {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

using ParamId = int;

// Named parameter groups used for reporting and gradient checks.
namespace group {
inline constexpr const char* kEmbedding = "embedding";
inline constexpr const char* kAttention = "attention";
inline constexpr const char* kFeedForward = "feed_forward";
inline constexpr const char* kLayerNorm = "layer_norm";
inline constexpr const char* kMixEncX = "mix_enc_x";
inline constexpr const char* kMixEncZ = "mix_enc_z";
inline constexpr const char* kMixDecX = "mix_dec_x";
inline constexpr const char* kMixDecZ = "mix_dec_z";
inline constexpr const char* kMapper = "mapper";
}  // namespace group

struct Parameter {
  std::string name;
  std::string group;
  Matrix value;
  bool trainable = true;
};

class ParameterStore {
 public:
  ParamId add(std::string name, std::string grp, Matrix init) {
    params_.push_back(Parameter{std::move(name), std::move(grp), std::move(init), true});
    return static_cast<ParamId>(params_.size() - 1);
  }

  std::size_t size() const { return params_.size(); }
  const Matrix& value(ParamId id) const { return at(id).value; }
  Matrix& value(ParamId id) { return params_.at(static_cast<std::size_t>(id)).value; }
  const Parameter& at(ParamId id) const { return params_.at(static_cast<std::size_t>(id)); }
  Parameter& at(ParamId id) { return params_.at(static_cast<std::size_t>(id)); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

// Per-parameter gradient accumulator; entries stay empty until touched.
class GradBuffer {
 public:
  GradBuffer() = default;
  explicit GradBuffer(std::size_t n) : grads_(n) {}

  void resize(std::size_t n) { grads_.resize(n); }
  std::size_t size() const { return grads_.size(); }

  void add(ParamId id, const Matrix& g, double weight = 1.0) {
    auto& slot = grads_.at(static_cast<std::size_t>(id));
    if (slot.size() == 0) {
      slot = g * weight;
    } else {
      slot += g * weight;
    }
  }

  void add(const GradBuffer& other, double weight = 1.0) {
    if (other.size() > size()) resize(other.size());
    for (std::size_t i = 0; i < other.grads_.size(); ++i) {
      if (other.grads_[i].size() != 0) add(static_cast<ParamId>(i), other.grads_[i], weight);
    }
  }

  // Zero-filled when the parameter received no gradient.
  Matrix get(ParamId id, const ParameterStore& store) const {
    const auto i = static_cast<std::size_t>(id);
    if (i < grads_.size() && grads_[i].size() != 0) return grads_[i];
    return Matrix::Zero(store.value(id).rows(), store.value(id).cols());
  }

  bool touched(ParamId id) const {
    const auto i = static_cast<std::size_t>(id);
    return i < grads_.size() && grads_[i].size() != 0;
  }

  Matrix& raw(ParamId id) { return grads_.at(static_cast<std::size_t>(id)); }

  void clear() {
    for (auto& g : grads_) g.resize(0, 0);
  }

 private:
  std::vector<Matrix> grads_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

// First/second moments aligned with a ParameterStore.
struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long long steps = 0;

  void init(const ParameterStore& store) {
    m.clear();
    v.clear();
    for (const auto& p : store) {
      m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
    steps = 0;
  }
};

inline void adam_step(ParameterStore& store, AdamState& state, const GradBuffer& grads, double lr,
                      const AdamConfig& cfg) {
  if (state.m.size() != store.size()) throw std::logic_error("adam_step: optimizer state not initialized");
  ++state.steps;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.steps));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.steps));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto id = static_cast<ParamId>(i);
    Parameter& p = store.at(id);
    if (!p.trainable || !grads.touched(id)) continue;
    const Matrix g = grads.get(id, store);
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    p.value.array() -= lr * (state.m[i].array() / bc1) / ((state.v[i].array() / bc2).sqrt() + cfg.eps);
  }
}

// Linear warmup followed by inverse square-root decay.
inline double inverse_sqrt_lr(double base_lr, long long step, long long warmup) {
  if (step < 1) step = 1;
  if (warmup <= 0) return base_lr;
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return base_lr * std::min(s / w, std::sqrt(w / s));
}

}  // namespace bridgepath

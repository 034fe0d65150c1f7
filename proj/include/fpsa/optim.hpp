#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fpsa/autodiff.hpp"

namespace fpsa {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Var<T>>>;

template <typename T>
void zero_grads(const NamedParams<T>& params) {
  for (auto& [name, p] : params) p->zero_grad();
}

// Global L2 norm over all parameter gradients. If the norm is below the
// threshold gradients pass through unchanged; otherwise all are scaled by
// threshold / norm. Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(const NamedParams<T>& params, double threshold) {
  if (threshold <= 0) throw ConfigError("gradient clip threshold must be positive");
  double sq = 0;
  for (auto& [name, p] : params) sq += p->grad.sq_norm();
  double norm = std::sqrt(sq);
  if (norm >= threshold && norm > 0) {
    const double s = threshold / norm;
    for (auto& [name, p] : params)
      for (auto& g : p->grad.data) g = static_cast<T>(static_cast<double>(g) * s);
  }
  return norm;
}

struct AdamWParams {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct AdamWState {
  std::vector<Tensor<T>> m;  // first moments, aligned with the param list
  std::vector<Tensor<T>> v;  // second moments
  int64_t t = 0;

  static AdamWState init(const NamedParams<T>& params) {
    AdamWState s;
    for (auto& [name, p] : params) {
      s.m.push_back(Tensor<T>::zeros(p->value.shape));
      s.v.push_back(Tensor<T>::zeros(p->value.shape));
    }
    return s;
  }
};

// Decoupled weight decay Adam with bias correction. Parameters with empty
// gradients (disconnected from the loss) are treated as zero-gradient.
template <typename T>
void adamw_step(const NamedParams<T>& params, AdamWState<T>& state, const AdamWParams& hp) {
  if (state.m.size() != params.size())
    throw ConfigError("optimizer state does not match parameter list");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second;
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    const bool has_grad = !p->grad.data.empty();
    for (int64_t j = 0; j < p->value.numel(); ++j) {
      const double g = has_grad ? static_cast<double>(p->grad[j]) : 0.0;
      double mj = hp.beta1 * static_cast<double>(m[j]) + (1.0 - hp.beta1) * g;
      double vj = hp.beta2 * static_cast<double>(v[j]) + (1.0 - hp.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      double w = static_cast<double>(p->value[j]);
      w *= 1.0 - hp.lr * hp.weight_decay;
      w -= hp.lr * (mj / bc1) / (std::sqrt(vj / bc2) + hp.eps);
      p->value[j] = static_cast<T>(w);
    }
  }
}

}  // namespace fpsa

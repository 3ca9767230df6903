// wsasr: AdaDelta with fixed learning rate, plus gradient hygiene (batch
// scaling and global-norm clipping).
#pragma once

#include <cmath>
#include <map>
#include <string>

#include "wsasr/common.hpp"
#include "wsasr/tensor.hpp"

namespace wsasr {

template <typename T>
using NamedTensors = std::map<std::string, Tensor<T>>;

template <typename T>
struct AdaDeltaState {
  NamedTensors<T> accum_grad_sq;
  NamedTensors<T> accum_update_sq;
  T rho = T(0.95);
  T epsilon = T(1e-6);

  void reset() {
    accum_grad_sq.clear();
    accum_update_sq.clear();
  }
};

// Divides every gradient by the number of utterances in the batch, then
// rescales the whole set if its global L2 norm exceeds `clip`. Returns the
// post-scaling, pre-clip global norm.
template <typename T>
double scale_and_clip(NamedTensors<T>& grads, int64_t num_utterances, double clip = 10.0) {
  require(num_utterances >= 1, "scale_and_clip: num_utterances must be >= 1");
  double inv = 1.0 / double(num_utterances);
  double sq = 0;
  for (auto& [name, g] : grads) {
    for (T& v : g.data) {
      v = T(double(v) * inv);
      sq += double(v) * double(v);
    }
  }
  double norm = std::sqrt(sq);
  if (clip > 0 && norm > clip) {
    double s = clip / norm;
    for (auto& [name, g] : grads)
      for (T& v : g.data) v = T(double(v) * s);
  }
  return norm;
}

// E[g2] <- rho E[g2] + (1-rho) g2
// delta  = -sqrt(E[dx2]+eps) / sqrt(E[g2]+eps) * g
// E[dx2] <- rho E[dx2] + (1-rho) delta2
// param += lr * delta
template <typename T>
void adadelta_step(NamedTensors<T>& params, const NamedTensors<T>& grads,
                   AdaDeltaState<T>& state, T lr = T(1)) {
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor<T>& g = git->second;
    require(g.same_shape(p), "adadelta: gradient shape mismatch for " + name);
    Tensor<T>& eg2 = state.accum_grad_sq.try_emplace(name, Tensor<T>::zeros(p.shape)).first->second;
    Tensor<T>& ed2 = state.accum_update_sq.try_emplace(name, Tensor<T>::zeros(p.shape)).first->second;
    require(eg2.same_shape(p) && ed2.same_shape(p), "adadelta: state shape mismatch for " + name);
    for (size_t i = 0; i < p.data.size(); ++i) {
      T gv = g.data[i];
      eg2.data[i] = state.rho * eg2.data[i] + (T(1) - state.rho) * gv * gv;
      T delta = -std::sqrt(ed2.data[i] + state.epsilon) / std::sqrt(eg2.data[i] + state.epsilon) * gv;
      ed2.data[i] = state.rho * ed2.data[i] + (T(1) - state.rho) * delta * delta;
      p.data[i] += lr * delta;
    }
  }
}

template <typename T>
double global_grad_norm(const NamedTensors<T>& grads) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (T v : g.data) sq += double(v) * double(v);
  return std::sqrt(sq);
}

}  // namespace wsasr

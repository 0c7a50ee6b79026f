#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "trigact/errors.hpp"
#include "trigact/models.hpp"

namespace trigact {

/// Cosine annealing from lr_initial towards 0 over `epochs`; `epoch` counts from 0.
inline double cosine_lr(double lr_initial, std::size_t epoch, std::size_t epochs) {
  if (epochs == 0) return lr_initial;
  return 0.5 * lr_initial * (1.0 + std::cos(std::numbers::pi * double(epoch) / double(epochs)));
}

/// SGD with heavy-ball momentum and coupled L2 weight decay:
///   g <- g + wd * p;  b <- mu * b + g (b = g on the first step);  p <- p - lr * b
template <typename T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(Classifier<T>& model, const std::vector<Tensor<T>>& grads, double lr) {
    auto params = model.parameters();
    if (grads.size() != params.size()) throw ContractError("sgd: gradient count mismatch");
    if (buf_.empty()) {
      for (const auto* p : params) buf_.emplace_back(p->value.shape());
    }
    const T mu = T(momentum_), wd = T(weight_decay_), eta = T(lr);
    for (std::size_t k = 0; k < params.size(); ++k) {
      T* p = params[k]->value.data();
      const T* g = grads[k].data();
      T* b = buf_[k].data();
      for (std::size_t i = 0; i < grads[k].size(); ++i) {
        const T d = g[i] + wd * p[i];
        b[i] = started_ ? mu * b[i] + d : d;
        p[i] -= eta * b[i];
      }
    }
    started_ = true;
  }

 private:
  double momentum_;
  double weight_decay_;
  bool started_ = false;
  std::vector<Tensor<T>> buf_;
};

}  // namespace trigact

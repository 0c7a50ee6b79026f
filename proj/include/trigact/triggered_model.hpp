#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "trigact/models.hpp"
#include "trigact/trigger.hpp"

namespace trigact {

/// The deployed unit f_t(x) = f(x + tau).
template <typename T>
struct TriggeredModel {
  Classifier<T> model;
  Trigger<T> trig;
  bool clip_triggered = false;

  Tensor<T> logits(const Tensor<T>& images) const {
    return model.forward_logits(apply_trigger(images, trig, clip_triggered));
  }

  std::vector<std::int32_t> predict(const Tensor<T>& images, std::size_t batch_size = 500) const {
    return trigact::predict(model, apply_trigger(images, trig, clip_triggered), batch_size);
  }

  /// Gradient of the mean CE of f(x + tau) with respect to x; tau is constant.
  GradientBundle<T> grad(const Tensor<T>& images, std::span<const std::int32_t> labels, LossId loss = LossId::kCrossEntropy,
                         Wrt wrt = Wrt::kInput) const {
    return model.grad(apply_trigger(images, trig, clip_triggered), labels, loss, wrt);
  }
};

// Uniform access for code that takes either a bare classifier or a triggered one.

template <typename T>
Tensor<T> input_gradient(const Classifier<T>& m, const Tensor<T>& x, std::span<const std::int32_t> y) {
  return *m.grad(x, y, LossId::kCrossEntropy, Wrt::kInput).input_grad;
}

template <typename T>
Tensor<T> input_gradient(const TriggeredModel<T>& m, const Tensor<T>& x, std::span<const std::int32_t> y) {
  return *m.grad(x, y).input_grad;
}

template <typename T>
std::vector<std::int32_t> predict_labels(const Classifier<T>& m, const Tensor<T>& x) {
  return predict(m, x);
}

template <typename T>
std::vector<std::int32_t> predict_labels(const TriggeredModel<T>& m, const Tensor<T>& x) {
  return m.predict(x);
}

inline double accuracy(std::span<const std::int32_t> pred, std::span<const std::int32_t> labels) {
  if (pred.size() != labels.size() || labels.empty()) throw ContractError("accuracy: size mismatch or empty");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return double(hit) / double(labels.size());
}

}  // namespace trigact

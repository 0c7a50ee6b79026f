#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "trigact/errors.hpp"
#include "trigact/tensor.hpp"

namespace trigact {

enum class LossId { kCrossEntropy, kKldToUniform, kTotalTriggerLoss };

inline LossId parse_loss_id(const std::string& s) {
  if (s == "cross_entropy") return LossId::kCrossEntropy;
  if (s == "kld_to_uniform") return LossId::kKldToUniform;
  if (s == "total_trigger_loss") return LossId::kTotalTriggerLoss;
  throw ConfigError("unknown loss id '" + s + "'");
}

/// Mean batch loss and its gradient with respect to the logits.
template <typename T>
struct LossResult {
  double value = 0;
  Tensor<T> dlogits;
};

/// Row-wise softmax of (B, C) logits.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  const std::size_t b = logits.shape().n, c = logits.shape().per_sample();
  Tensor<T> p(logits.shape());
  for (std::size_t i = 0; i < b; ++i) {
    const T* z = logits.data() + i * c;
    T* out = p.data() + i * c;
    T mx = z[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += (out[j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[j] /= sum;
  }
  return p;
}

/// Argmax per row; ties go to the lowest class index.
template <typename T>
std::vector<std::int32_t> argmax_rows(const Tensor<T>& logits) {
  const std::size_t b = logits.shape().n, c = logits.shape().per_sample();
  std::vector<std::int32_t> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const T* z = logits.data() + i * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (z[j] > z[best]) best = j;
    out[i] = static_cast<std::int32_t>(best);
  }
  return out;
}

namespace detail {

template <typename T>
void check_logits(const Tensor<T>& logits, const char* who) {
  if (logits.shape().n == 0) throw ContractError(std::string(who) + ": empty batch");
  if (!logits.all_finite()) throw NumericError(std::string(who) + ": non-finite logits");
}

// log-softmax of one row, computed in double.
template <typename T>
std::vector<double> log_softmax_row(const T* z, std::size_t c) {
  double mx = z[0];
  for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, double(z[j]));
  double sum = 0;
  for (std::size_t j = 0; j < c; ++j) sum += std::exp(double(z[j]) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(c);
  for (std::size_t j = 0; j < c; ++j) out[j] = double(z[j]) - lse;
  return out;
}

}  // namespace detail

/// Mean cross-entropy of softmax(logits) against integer labels.
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  detail::check_logits(logits, "cross_entropy");
  const std::size_t b = logits.shape().n, c = logits.shape().per_sample();
  if (labels.size() != b) throw ContractError("cross_entropy: label count does not match batch");
  LossResult<T> r{0, Tensor<T>(logits.shape())};
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || std::size_t(labels[i]) >= c) throw ContractError("cross_entropy: label out of range");
    const auto lp = detail::log_softmax_row(logits.data() + i * c, c);
    r.value -= lp[labels[i]];
    T* g = r.dlogits.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) g[j] = T(std::exp(lp[j]) / double(b));
    g[labels[i]] -= T(1.0 / double(b));
  }
  r.value /= double(b);
  return r;
}

/// Per-sample cross-entropy values.
template <typename T>
std::vector<double> cross_entropy_per_sample(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  const std::size_t b = logits.shape().n, c = logits.shape().per_sample();
  std::vector<double> out(b);
  for (std::size_t i = 0; i < b; ++i) out[i] = -detail::log_softmax_row(logits.data() + i * c, c)[labels[i]];
  return out;
}

/// Mean KL(softmax(logits) || uniform) = log C - H(p). Zero exactly at uniform output.
template <typename T>
LossResult<T> kld_to_uniform(const Tensor<T>& logits) {
  detail::check_logits(logits, "kld_to_uniform");
  const std::size_t b = logits.shape().n, c = logits.shape().per_sample();
  const double log_c = std::log(double(c));
  LossResult<T> r{0, Tensor<T>(logits.shape())};
  for (std::size_t i = 0; i < b; ++i) {
    const auto lp = detail::log_softmax_row(logits.data() + i * c, c);
    double neg_entropy = 0;
    for (std::size_t j = 0; j < c; ++j) neg_entropy += std::exp(lp[j]) * lp[j];
    r.value += neg_entropy + log_c;
    // d/dz_j [sum_i p_i log p_i] = p_j (log p_j - sum_i p_i log p_i)
    T* g = r.dlogits.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) g[j] = T(std::exp(lp[j]) * (lp[j] - neg_entropy) / double(b));
  }
  r.value /= double(b);
  return r;
}

/// CE(z_pos, y) + KL(softmax(z_neg) || uniform), both batch means.
template <typename T>
struct TriggerLoss {
  double total = 0;
  double ce = 0;
  double kld = 0;
  Tensor<T> dpos;
  Tensor<T> dneg;
};

template <typename T>
TriggerLoss<T> total_trigger_loss(const Tensor<T>& z_pos, const Tensor<T>& z_neg,
                                  std::span<const std::int32_t> labels, std::size_t class_count) {
  if (!(z_pos.shape() == z_neg.shape()) || z_pos.shape().per_sample() != class_count)
    throw ContractError("total_trigger_loss: logits must both be (B, C)");
  auto ce = cross_entropy(z_pos, labels);
  auto kl = kld_to_uniform(z_neg);
  return {ce.value + kl.value, ce.value, kl.value, std::move(ce.dlogits), std::move(kl.dlogits)};
}

}  // namespace trigact

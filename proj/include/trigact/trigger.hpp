#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "trigact/errors.hpp"
#include "trigact/rng.hpp"
#include "trigact/tensor.hpp"

namespace trigact {

enum class TriggerMode { kFixed, kLearnable };

inline const char* trigger_mode_name(TriggerMode m) { return m == TriggerMode::kFixed ? "fixed" : "learnable"; }

inline TriggerMode parse_trigger_mode(const std::string& s) {
  if (s == "fixed") return TriggerMode::kFixed;
  if (s == "learnable") return TriggerMode::kLearnable;
  throw ConfigError("unknown trigger mode '" + s + "'");
}

/// Constant input-shaped shift tau. `values` has shape (1, channels, H, W).
template <typename T>
struct Trigger {
  Tensor<T> values;
  TriggerMode mode = TriggerMode::kFixed;
  double eps_t = 0;       // fixed mode: every entry is +-eps_t
  double step_alpha = 0;  // learnable mode: init bound and update step
  std::uint64_t seed = 0;
  std::size_t update_count = 0;

  const Shape& shape() const { return values.shape(); }

  template <typename U>
  Trigger<U> cast() const {
    return {values.template cast<U>(), mode, eps_t, step_alpha, seed, update_count};
  }

  friend bool operator==(const Trigger& a, const Trigger& b) {
    return a.values == b.values && a.mode == b.mode && a.eps_t == b.eps_t && a.step_alpha == b.step_alpha &&
           a.seed == b.seed && a.update_count == b.update_count;
  }
};

/// tau = eps_t * (2 * Bernoulli(1/2) - 1), entry-wise.
template <typename T>
Trigger<T> init_fixed_trigger(Shape shape, double eps_t, std::uint64_t seed) {
  if (!(eps_t > 0) || !std::isfinite(eps_t)) throw ConfigError("eps_t must be positive");
  Trigger<T> t{Tensor<T>(shape.with_batch(1)), TriggerMode::kFixed, eps_t, 0, seed, 0};
  Rng rng = Rng::derive(seed, 0x7a11);
  for (auto& v : t.values.values()) v = rng.bernoulli(0.5) ? T(eps_t) : T(-eps_t);
  return t;
}

/// tau ~ U(-alpha, alpha), entry-wise.
template <typename T>
Trigger<T> init_learnable_trigger(Shape shape, double step_alpha, std::uint64_t seed) {
  if (!(step_alpha > 0) || !std::isfinite(step_alpha)) throw ConfigError("step_alpha must be positive");
  Trigger<T> t{Tensor<T>(shape.with_batch(1)), TriggerMode::kLearnable, 0, step_alpha, seed, 0};
  Rng rng = Rng::derive(seed, 0x7a12);
  for (auto& v : t.values.values()) v = T(rng.uniform(-step_alpha, step_alpha));
  return t;
}

/// x + tau broadcast over the batch. No clipping unless `clip` is set.
template <typename T>
Tensor<T> apply_trigger(const Tensor<T>& images, const Trigger<T>& trig, bool clip = false) {
  if (!images.shape().same_sample_shape(trig.shape()))
    throw ContractError("apply_trigger: images " + images.shape().str() + " vs trigger " + trig.shape().str());
  Tensor<T> out = images;
  const std::size_t ps = images.shape().per_sample();
  for (std::size_t n = 0; n < images.shape().n; ++n) {
    T* row = out.data() + n * ps;
    for (std::size_t i = 0; i < ps; ++i) {
      row[i] += trig.values[i];
      if (clip) row[i] = std::clamp(row[i], T(0), T(1));
    }
  }
  return out;
}

/// tau <- tau - alpha * sgn(g), with sgn(0) = 0.
template <typename T>
Trigger<T> update_learnable_trigger(const Trigger<T>& trig, const Tensor<T>& accumulated_grad) {
  if (trig.mode != TriggerMode::kLearnable) throw ContractError("update_learnable_trigger: trigger is fixed");
  if (accumulated_grad.size() != trig.values.size())
    throw ContractError("update_learnable_trigger: gradient shape mismatch");
  if (!accumulated_grad.all_finite()) throw NumericError("update_learnable_trigger: non-finite trigger gradient");
  Trigger<T> out = trig;
  for (std::size_t i = 0; i < out.values.size(); ++i)
    out.values[i] -= T(trig.step_alpha) * sign(accumulated_grad[i]);
  ++out.update_count;
  return out;
}

/// mean(tau^2).
template <typename T>
double trigger_mse(const Trigger<T>& trig) {
  double s = 0;
  for (T v : trig.values.values()) s += double(v) * double(v);
  return trig.values.empty() ? 0.0 : s / double(trig.values.size());
}

}  // namespace trigact

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "trigact/data.hpp"
#include "trigact/errors.hpp"
#include "trigact/losses.hpp"
#include "trigact/models.hpp"
#include "trigact/rng.hpp"
#include "trigact/trigger.hpp"
#include "trigact/triggered_model.hpp"

namespace trigact {

// A loss probe exposes, for a batch (x, y):
//   losses(x, y) -> per-sample loss l(x_i, y_i)
//   grads(x, y)  -> per-sample input gradients, shaped like x
//   predict(x)   -> labels
// The theory checks below work on any probe; `ClassifierProbe` uses the
// cross-entropy of a classifier, `LinearLossOracle` is an exactly linear loss.

template <typename T>
class ClassifierProbe {
 public:
  explicit ClassifierProbe(const Classifier<T>& model, std::size_t batch_size = 250)
      : model_(&model), batch_(batch_size) {}

  std::size_t class_count() const { return model_->class_count(); }

  std::vector<double> losses(const Tensor<T>& x, std::span<const std::int32_t> y) const {
    std::vector<double> out;
    for (std::size_t b = 0; b < x.shape().n; b += batch_) {
      const std::size_t n = std::min(batch_, x.shape().n - b);
      auto l = cross_entropy_per_sample(model_->forward_logits(slice_batch(x, b, n)), y.subspan(b, n));
      out.insert(out.end(), l.begin(), l.end());
    }
    return out;
  }

  Tensor<T> grads(const Tensor<T>& x, std::span<const std::int32_t> y) const {
    Tensor<T> out(x.shape());
    const std::size_t ps = x.shape().per_sample();
    for (std::size_t b = 0; b < x.shape().n; b += batch_) {
      const std::size_t n = std::min(batch_, x.shape().n - b);
      auto g = *model_->grad(slice_batch(x, b, n), y.subspan(b, n), LossId::kCrossEntropy, Wrt::kInput).input_grad;
      for (std::size_t i = 0; i < g.size(); ++i) out[b * ps + i] = g[i] * T(n);  // undo the batch mean
    }
    return out;
  }

  std::vector<std::int32_t> predict(const Tensor<T>& x) const { return trigact::predict(*model_, x, batch_); }

 private:
  const Classifier<T>* model_;
  std::size_t batch_;
};

/// l(x, y) = offset + g^T x for every label; predictions are always class 0.
template <typename T>
class LinearLossOracle {
 public:
  LinearLossOracle(Tensor<T> g, double offset, std::size_t class_count)
      : g_(std::move(g)), offset_(offset), classes_(class_count) {}

  std::size_t class_count() const { return classes_; }
  const Tensor<T>& gradient() const { return g_; }

  std::vector<double> losses(const Tensor<T>& x, std::span<const std::int32_t>) const {
    const std::size_t ps = x.shape().per_sample();
    std::vector<double> out(x.shape().n, offset_);
    for (std::size_t n = 0; n < out.size(); ++n)
      for (std::size_t i = 0; i < ps; ++i) out[n] += double(g_[i]) * double(x[n * ps + i]);
    return out;
  }

  Tensor<T> grads(const Tensor<T>& x, std::span<const std::int32_t>) const {
    Tensor<T> out(x.shape());
    const std::size_t ps = x.shape().per_sample();
    for (std::size_t n = 0; n < x.shape().n; ++n) std::copy(g_.data(), g_.data() + ps, out.data() + n * ps);
    return out;
  }

  std::vector<std::int32_t> predict(const Tensor<T>& x) const { return std::vector<std::int32_t>(x.shape().n, 0); }

 private:
  Tensor<T> g_;
  double offset_;
  std::size_t classes_;
};

/// Linear oracle with exact gradient-trigger alignment for trigger `tau`: a gradient g
/// with sgn(g) = -sgn(tau) entry-wise and eps_t ||g||_1 = log C, built from
/// random positive magnitudes.
template <typename T>
LinearLossOracle<T> make_theorem_oracle(const Trigger<T>& trig, std::size_t class_count, double offset,
                                        std::uint64_t seed) {
  Rng rng = Rng::derive(seed, 0x0ac1e);
  const double eps_t = double(linf_norm<T>(trig.values.values()));
  if (!(eps_t > 0)) throw ContractError("theorem oracle needs a nonzero trigger");
  Tensor<T> g(trig.shape());
  double dot = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = T(-double(sign(trig.values[i])) * rng.uniform(0.5, 1.5));
    dot += double(g[i]) * double(trig.values[i]);
  }
  const double scale = -std::log(double(class_count)) / dot;
  for (auto& v : g.values()) v = T(double(v) * scale);
  return LinearLossOracle<T>(std::move(g), offset, class_count);
}

namespace detail {

template <typename T>
Tensor<T> shifted(const Tensor<T>& x, const Tensor<T>& shift) {
  Tensor<T> out = x;
  Classifier<T>::add_broadcast(out, shift);
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

}  // namespace detail

struct SummaryStats {
  double mean = 0;
  double median = 0;
  double max = 0;
  std::size_t count = 0;
};

inline SummaryStats summarize(std::vector<double> v) {
  SummaryStats s;
  s.count = v.size();
  if (v.empty()) return s;
  s.mean = detail::mean_of(v);
  std::sort(v.begin(), v.end());
  s.median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  s.max = v.back();
  return s;
}

template <typename T>
struct AlignmentReport {
  Tensor<T> mean_grad;
  double sign_agreement = 0;  // fraction of coordinates with sgn(mean_grad) = -sgn(tau)
  double dot_product = 0;     // mean_grad^T tau
  double log_c = 0;
  double ratio = 0;  // |dot_product| / log C
};

/// Alignment check: mean clean-input gradient of the loss versus tau.
template <typename T, typename Probe>
AlignmentReport<T> gradient_alignment(const Probe& probe, const Trigger<T>& trig, const Tensor<T>& x,
                                      std::span<const std::int32_t> y) {
  if (!x.shape().same_sample_shape(trig.shape())) throw ContractError("gradient_alignment: shape mismatch");
  const std::size_t ps = trig.values.size(), n = x.shape().n;
  Tensor<T> g = probe.grads(x, y);
  std::vector<double> mean(ps, 0.0);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < ps; ++i) mean[i] += double(g[k * ps + i]);
  AlignmentReport<T> r{Tensor<T>(trig.shape()), 0, 0, std::log(double(probe.class_count())), 0};
  std::size_t agree = 0;
  for (std::size_t i = 0; i < ps; ++i) {
    mean[i] /= double(n);
    r.mean_grad[i] = T(mean[i]);
    r.dot_product += mean[i] * double(trig.values[i]);
    agree += sign(mean[i]) != 0 && sign(mean[i]) == -double(sign(trig.values[i]));
  }
  r.sign_agreement = double(agree) / double(ps);
  r.ratio = std::abs(r.dot_product) / r.log_c;
  return r;
}

template <typename T>
struct Theorem2Report {
  double eps = 0;
  double eps_t = 0;
  bool eps_t_substituted = false;  // learnable trigger: eps_t taken as ||tau||_inf
  double log_c = 0;
  double bound = 0;        // (eps / eps_t) log C
  double loss_zero = 0;    // mean l(x + tau)
  double loss_star = 0;    // mean l(x + tau + delta*), delta* = -(eps / eps_t) tau
  std::vector<double> loss_random;  // delta ~ U(-eps, eps)^D
  double fraction_star_beats_random = 0;
  double max_random_gain = 0;  // max over draws of loss_random - loss_zero
  Tensor<T> delta_star;
};

/// Bound check: first-order maximizer against random in-budget shifts.
template <typename T, typename Probe>
Theorem2Report<T> theorem2_check(const Probe& probe, const Trigger<T>& trig, double eps, const Tensor<T>& x,
                                 std::span<const std::int32_t> y, std::size_t random_draws, std::uint64_t seed) {
  if (!(eps >= 0)) throw ContractError("theorem2_check: eps must be >= 0");
  Theorem2Report<T> r;
  r.eps = eps;
  r.log_c = std::log(double(probe.class_count()));
  r.eps_t = trig.mode == TriggerMode::kFixed ? trig.eps_t : double(linf_norm<T>(trig.values.values()));
  r.eps_t_substituted = trig.mode != TriggerMode::kFixed;
  if (!(r.eps_t > 0)) throw ContractError("theorem2_check: zero trigger");
  r.bound = eps / r.eps_t * r.log_c;
  const double k = eps / r.eps_t;
  r.delta_star = Tensor<T>(trig.shape());
  Tensor<T> star_shift(trig.shape());
  for (std::size_t i = 0; i < trig.values.size(); ++i) {
    r.delta_star[i] = T(-k * double(trig.values[i]));
    star_shift[i] = trig.values[i] + r.delta_star[i];
  }
  r.loss_zero = detail::mean_of(probe.losses(detail::shifted(x, trig.values), y));
  r.loss_star = detail::mean_of(probe.losses(detail::shifted(x, star_shift), y));
  Rng rng = Rng::derive(seed, 0x7e02);
  std::size_t beats = 0;
  r.max_random_gain = -std::numeric_limits<double>::infinity();
  for (std::size_t d = 0; d < random_draws; ++d) {
    Tensor<T> shift(trig.shape());
    for (std::size_t i = 0; i < shift.size(); ++i) shift[i] = trig.values[i] + T(rng.uniform(-eps, eps));
    const double l = detail::mean_of(probe.losses(detail::shifted(x, shift), y));
    r.loss_random.push_back(l);
    beats += r.loss_star >= l;
    r.max_random_gain = std::max(r.max_random_gain, l - r.loss_zero);
  }
  r.fraction_star_beats_random = random_draws ? double(beats) / double(random_draws) : 1.0;
  return r;
}

struct FlipCurve {
  std::vector<double> proportions;
  std::vector<double> losses;
  std::vector<double> accuracies;
};

/// For each p: delta = -tau with a uniformly random fraction p of its
/// coordinates sign-flipped (independent draw per p); evaluate on x + tau + delta.
template <typename T, typename Probe>
FlipCurve flip_experiment(const Probe& probe, const Trigger<T>& trig, const std::vector<double>& proportions,
                          const Tensor<T>& x, std::span<const std::int32_t> y, std::uint64_t seed) {
  FlipCurve c;
  const std::size_t d = trig.values.size();
  for (std::size_t j = 0; j < proportions.size(); ++j) {
    const double p = proportions[j];
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("flip proportion outside [0, 1]");
    Rng rng = Rng::derive(seed, 0xf11b + j);
    const auto order = rng.permutation(d);
    const std::size_t k = std::size_t(std::llround(p * double(d)));
    Tensor<T> shift(trig.shape());  // tau + delta: 0 where unflipped, 2 tau where flipped
    for (std::size_t i = 0; i < k; ++i) shift[order[i]] = trig.values[order[i]] + trig.values[order[i]];
    const Tensor<T> input = detail::shifted(x, shift);
    c.proportions.push_back(p);
    c.losses.push_back(detail::mean_of(probe.losses(input, y)));
    c.accuracies.push_back(accuracy(probe.predict(input), y));
  }
  return c;
}

/// |l(x + tau) - l(x) - grad l(x)^T tau| over `sample_count` samples drawn
/// without replacement (all samples if sample_count is 0 or too large).
template <typename T, typename Probe>
SummaryStats linearization_error(const Probe& probe, const Trigger<T>& trig, const Tensor<T>& x,
                                 std::span<const std::int32_t> y, std::size_t sample_count, std::uint64_t seed) {
  std::vector<std::size_t> idx(x.shape().n);
  std::iota(idx.begin(), idx.end(), 0);
  if (sample_count && sample_count < idx.size()) {
    Rng rng = Rng::derive(seed, 0x11e);
    rng.shuffle(std::span<std::size_t>(idx));
    idx.resize(sample_count);
    std::sort(idx.begin(), idx.end());
  }
  const Tensor<T> xs = gather_rows(x, idx);
  std::vector<std::int32_t> ys;
  for (auto i : idx) ys.push_back(y[i]);
  const auto l0 = probe.losses(xs, ys);
  const auto l1 = probe.losses(detail::shifted(xs, trig.values), ys);
  const Tensor<T> g = probe.grads(xs, ys);
  const std::size_t ps = trig.values.size();
  std::vector<double> res(idx.size());
  for (std::size_t n = 0; n < idx.size(); ++n) {
    double dot = 0;
    for (std::size_t i = 0; i < ps; ++i) dot += double(g[n * ps + i]) * double(trig.values[i]);
    res[n] = std::abs(l1[n] - l0[n] - dot);
  }
  return summarize(std::move(res));
}

/// mean(tau^2) x 100, the scale used for trigger-magnitude tables.
template <typename T>
double trigger_magnitude(const Trigger<T>& trig) {
  return trigger_mse(trig) * 100.0;
}

}  // namespace trigact

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>

#include "trigact/errors.hpp"
#include "trigact/image_ops.hpp"
#include "trigact/rng.hpp"
#include "trigact/tensor.hpp"
#include "trigact/triggered_model.hpp"

namespace trigact {

enum class AttackMethod { kFgsm, kIfgsm, kPgd, kMifgsm, kDifgsm };

inline const char* attack_method_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::kFgsm: return "fgsm";
    case AttackMethod::kIfgsm: return "ifgsm";
    case AttackMethod::kPgd: return "pgd";
    case AttackMethod::kMifgsm: return "mifgsm";
    case AttackMethod::kDifgsm: return "difgsm";
  }
  return "?";
}

inline AttackMethod parse_attack_method(const std::string& s) {
  for (auto m : {AttackMethod::kFgsm, AttackMethod::kIfgsm, AttackMethod::kPgd, AttackMethod::kMifgsm,
                 AttackMethod::kDifgsm})
    if (s == attack_method_name(m)) return m;
  throw ConfigError("unknown attack method '" + s + "'");
}

struct AttackConfig {
  AttackMethod method = AttackMethod::kPgd;
  double eps = 8.0 / 255.0;
  double attack_step = 2.0 / 255.0;
  std::size_t iterations = 20;
  double momentum_mu = 1.0;
  double di_probability = 0.5;
  std::size_t di_resize_max = 0;  // 0: round(1.1 * H)
  std::optional<bool> random_start;  // default: true for pgd only
  std::uint64_t seed = 0;

  bool uses_random_start() const { return random_start.value_or(method == AttackMethod::kPgd); }

  void validate() const {
    if (!(eps >= 0) || !std::isfinite(eps)) throw ConfigError("attack eps must be >= 0");
    if (iterations < 1) throw ConfigError("attack iterations must be >= 1");
    if (!(attack_step > 0)) throw ConfigError("attack_step must be > 0");
    if (!(di_probability >= 0 && di_probability <= 1)) throw ConfigError("di_probability must be in [0, 1]");
  }

  /// Canonical text used for fingerprints and result tables.
  std::string describe() const {
    std::ostringstream os;
    os.precision(17);
    os << attack_method_name(method) << " eps=" << eps << " step=" << attack_step << " iters=" << iterations;
    if (method == AttackMethod::kMifgsm) os << " mu=" << momentum_mu;
    if (method == AttackMethod::kDifgsm) os << " p=" << di_probability << " resize_max=" << di_resize_max;
    os << " random_start=" << uses_random_start() << " seed=" << seed;
    return os.str();
  }
};

/// Project onto [-x, 1-x] and [-eps, eps] elementwise, so that
/// |delta| <= eps and x + delta stays in [0, 1] in floating point.
template <typename T>
void clip_perturbation_inplace(Tensor<T>& delta, const Tensor<T>& x, double eps) {
  if (!(delta.shape() == x.shape())) throw ContractError("clip_perturbation: shape mismatch");
  const T e = T(eps);
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const T xi = x[i];
    const T lo = std::max(-e, -xi);
    T hi = std::min(e, T(1) - xi);
    while (xi + hi > T(1)) hi = std::nextafter(hi, -std::numeric_limits<T>::infinity());
    delta[i] = std::clamp(delta[i], lo, std::max(lo, hi));
  }
}

template <typename T>
Tensor<T> clip_perturbation(Tensor<T> delta, const Tensor<T>& x, double eps) {
  clip_perturbation_inplace(delta, x, eps);
  return delta;
}

inline std::size_t default_di_resize_max(std::size_t h) { return std::size_t(std::lround(1.1 * double(h))); }

/// Draw one diversity transform: with probability p a resize to
/// r in [H, resize_max] placed at a random offset of a resize_max canvas and
/// resized back; otherwise nothing (empty optional means identity).
inline std::optional<SeparableMap> sample_di_map(std::size_t h, std::size_t w, double p, std::size_t resize_max,
                                                 Rng& rng) {
  if (resize_max < h || resize_max < w) throw ConfigError("di_resize_max must be at least the image size");
  if (!rng.bernoulli(p)) return std::nullopt;
  const std::size_t r = std::size_t(rng.between(std::int64_t(std::max(h, w)), std::int64_t(resize_max)));
  const std::size_t top = std::size_t(rng.between(0, std::int64_t(resize_max - r)));
  const std::size_t left = std::size_t(rng.between(0, std::int64_t(resize_max - r)));
  return resize_pad_map(h, w, r, r, resize_max, resize_max, top, left);
}

template <typename T>
Tensor<T> di_transform(const Tensor<T>& images, double p, std::size_t resize_max, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, 0xd1);
  auto m = sample_di_map(images.shape().h, images.shape().w, p, resize_max, rng);
  return m ? apply_separable(images, *m) : images;
}

/// Per-iterate observer: (iteration index starting at 1, current delta).
template <typename T>
using AttackObserver = std::function<void(std::size_t, const Tensor<T>&)>;

/// Untargeted l_inf attack on `surrogate` (a Classifier or TriggeredModel).
/// Every iterate is clipped; the returned delta satisfies |delta| <= eps and
/// x + delta in [0, 1].
template <typename T, typename Model>
Tensor<T> run_attack(const Model& surrogate, const Tensor<T>& images, std::span<const std::int32_t> labels,
                     const AttackConfig& cfg, const AttackObserver<T>* observer = nullptr) {
  cfg.validate();
  const Shape& s = images.shape();
  Tensor<T> delta(s);
  if (cfg.eps == 0) return delta;
  Rng rng = Rng::derive(cfg.seed, 0xa77ac);
  if (cfg.uses_random_start()) {
    for (auto& v : delta.values()) v = T(rng.uniform(-cfg.eps, cfg.eps));
    clip_perturbation_inplace(delta, images, cfg.eps);
  }
  const bool fgsm = cfg.method == AttackMethod::kFgsm;
  const std::size_t iters = fgsm ? 1 : cfg.iterations;
  const T step = T(fgsm ? cfg.eps : cfg.attack_step);
  const std::size_t resize_max = cfg.di_resize_max ? cfg.di_resize_max : default_di_resize_max(s.h);
  const std::size_t ps = s.per_sample();
  Tensor<T> momentum(s);

  for (std::size_t t = 1; t <= iters; ++t) {
    Tensor<T> adv = images + delta;
    Tensor<T> g;
    if (cfg.method == AttackMethod::kDifgsm) {
      auto m = sample_di_map(s.h, s.w, cfg.di_probability, resize_max, rng);
      if (m) g = apply_separable(input_gradient(surrogate, apply_separable(adv, *m), labels), *m, true);
      else g = input_gradient(surrogate, adv, labels);
    } else {
      g = input_gradient(surrogate, adv, labels);
    }
    if (!g.all_finite()) throw NumericError("run_attack: non-finite gradient at iteration " + std::to_string(t));
    if (cfg.method == AttackMethod::kMifgsm) {
      const T mu = T(cfg.momentum_mu);
      for (std::size_t n = 0; n < s.n; ++n) {
        double l1 = 0;
        for (std::size_t i = 0; i < ps; ++i) l1 += std::abs(double(g[n * ps + i]));
        const T inv = l1 > 0 ? T(1.0 / l1) : T(0);
        for (std::size_t i = 0; i < ps; ++i) momentum[n * ps + i] = mu * momentum[n * ps + i] + g[n * ps + i] * inv;
      }
      g = momentum;
    }
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += step * sign(g[i]);
    clip_perturbation_inplace(delta, images, cfg.eps);
    if (observer && *observer) (*observer)(t, delta);
  }
  return delta;
}

/// Attack a large set in chunks. Chunk k uses seed derive(cfg.seed, k) so the
/// result does not depend on anything but (surrogate, data, cfg, chunk size).
template <typename T, typename Model>
Tensor<T> run_attack_chunked(const Model& surrogate, const Tensor<T>& images, std::span<const std::int32_t> labels,
                             const AttackConfig& cfg, std::size_t chunk = 250) {
  Tensor<T> out(images.shape());
  const std::size_t ps = images.shape().per_sample();
  for (std::size_t b = 0, k = 0; b < images.shape().n; b += chunk, ++k) {
    const std::size_t cnt = std::min(chunk, images.shape().n - b);
    AttackConfig c = cfg;
    c.seed = Rng::derive(cfg.seed, k).next_u64();
    Tensor<T> d = run_attack(surrogate, slice_batch(images, b, cnt), labels.subspan(b, cnt), c);
    std::copy(d.values().begin(), d.values().end(), out.data() + b * ps);
  }
  return out;
}

/// Fraction of samples whose surrogate prediction on x + delta differs from y.
template <typename T, typename Model>
double attack_success_rate(const Model& surrogate, const Tensor<T>& images, std::span<const std::int32_t> labels,
                           const Tensor<T>& delta) {
  return 1.0 - accuracy(predict_labels(surrogate, images + delta), labels);
}

}  // namespace trigact

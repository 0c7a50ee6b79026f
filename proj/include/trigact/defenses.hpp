#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "trigact/errors.hpp"
#include "trigact/image_ops.hpp"
#include "trigact/rng.hpp"
#include "trigact/tensor.hpp"
#include "trigact/triggered_model.hpp"

namespace trigact {

enum class DefenseKind { kNone, kBdr, kGaussian, kRp };

inline const char* defense_kind_name(DefenseKind k) {
  switch (k) {
    case DefenseKind::kNone: return "none";
    case DefenseKind::kBdr: return "bdr";
    case DefenseKind::kGaussian: return "gaussian";
    case DefenseKind::kRp: return "rp";
  }
  return "?";
}

inline DefenseKind parse_defense_kind(const std::string& s) {
  for (auto k : {DefenseKind::kNone, DefenseKind::kBdr, DefenseKind::kGaussian, DefenseKind::kRp})
    if (s == defense_kind_name(k)) return k;
  throw ConfigError("unknown defense kind '" + s + "'");
}

struct PreprocessorConfig {
  DefenseKind kind = DefenseKind::kNone;
  int bit_depth = 2;
  double sigma = 1.0;
  double scale_max = 1.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (kind == DefenseKind::kBdr && bit_depth < 1) throw ConfigError("bdr bit_depth must be >= 1");
    if (kind == DefenseKind::kGaussian && !(sigma > 0)) throw ConfigError("gaussian sigma must be > 0");
    if (kind == DefenseKind::kRp && !(scale_max >= 1)) throw ConfigError("rp scale_max must be >= 1");
  }

  std::string describe() const {
    std::ostringstream os;
    os.precision(17);
    os << defense_kind_name(kind);
    if (kind == DefenseKind::kBdr) os << " d=" << bit_depth;
    if (kind == DefenseKind::kGaussian) os << " sigma=" << sigma;
    if (kind == DefenseKind::kRp) os << " s=" << scale_max << " seed=" << seed;
    return os.str();
  }
};

/// Quantize every pixel to round(x (2^d - 1)) / (2^d - 1).
template <typename T>
Tensor<T> bit_depth_reduce(const Tensor<T>& images, int d) {
  if (d < 1) throw ConfigError("bit depth must be >= 1");
  const double levels = std::ldexp(1.0, d) - 1.0;
  Tensor<T> out(images.shape());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const double v = std::clamp(double(images[i]), 0.0, 1.0);
    out[i] = T(std::nearbyint(v * levels) / levels);
  }
  return out;
}

/// Normalized 1-D Gaussian taps on [-ceil(3 sigma), ceil(3 sigma)].
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0)) throw ConfigError("gaussian sigma must be > 0");
  const long radius = long(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (long i = -radius; i <= radius; ++i) sum += (k[i + radius] = std::exp(-0.5 * double(i * i) / (sigma * sigma)));
  for (auto& v : k) v /= sum;
  return k;
}

/// Separable per-channel Gaussian blur with reflect padding.
template <typename T>
Tensor<T> gaussian_filter(const Tensor<T>& images, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const long r = long(k.size() / 2);
  const Shape& s = images.shape();
  Tensor<T> out(s);
  std::vector<double> tmp(s.h * s.w);
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const T* src = images.data() + p * s.h * s.w;
    T* dst = out.data() + p * s.h * s.w;
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        double acc = 0;
        for (long t = -r; t <= r; ++t) acc += k[t + r] * double(src[y * s.w + reflect_index(long(x) + t, s.w)]);
        tmp[y * s.w + x] = acc;
      }
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        double acc = 0;
        for (long t = -r; t <= r; ++t) acc += k[t + r] * tmp[reflect_index(long(y) + t, s.h) * s.w + x];
        dst[y * s.w + x] = T(std::clamp(acc, 0.0, 1.0));
      }
  }
  return out;
}

/// Random resize to r in [H, ceil(s H)], random zero padding to ceil(s H),
/// bilinear resize back to H. One geometry per call.
template <typename T>
Tensor<T> resize_and_pad(const Tensor<T>& images, double scale_max, std::uint64_t seed) {
  if (!(scale_max >= 1)) throw ConfigError("rp scale_max must be >= 1");
  const Shape& s = images.shape();
  const std::size_t canvas = std::size_t(std::ceil(scale_max * double(s.h) - 1e-9));
  if (canvas <= s.h) return images;
  Rng rng = Rng::derive(seed, 0x4e5);
  const std::size_t r = std::size_t(rng.between(std::int64_t(s.h), std::int64_t(canvas)));
  const std::size_t top = std::size_t(rng.between(0, std::int64_t(canvas - r)));
  const std::size_t left = std::size_t(rng.between(0, std::int64_t(canvas - r)));
  const std::size_t rw = std::size_t(std::lround(double(r) * double(s.w) / double(s.h)));
  const std::size_t canvas_w = std::max(rw, std::size_t(std::ceil(scale_max * double(s.w) - 1e-9)));
  const std::size_t left_w = std::min(left, canvas_w - rw);
  Tensor<T> out = apply_separable(images, resize_pad_map(s.h, s.w, r, rw, canvas, canvas_w, top, left_w));
  for (auto& v : out.values()) v = std::clamp(v, T(0), T(1));
  return out;
}

template <typename T>
Tensor<T> preprocess(const Tensor<T>& images, const PreprocessorConfig& cfg) {
  cfg.validate();
  switch (cfg.kind) {
    case DefenseKind::kNone: return images;
    case DefenseKind::kBdr: return bit_depth_reduce(images, cfg.bit_depth);
    case DefenseKind::kGaussian: return gaussian_filter(images, cfg.sigma);
    case DefenseKind::kRp: return resize_and_pad(images, cfg.scale_max, cfg.seed);
  }
  return images;
}

/// Predictions of `model` on preprocessed images. R&P draws a fresh geometry
/// per chunk of `batch_size` images, seeded from (cfg.seed, chunk index).
template <typename T, typename Model>
std::vector<std::int32_t> defend_then_predict(const Model& model, const PreprocessorConfig& cfg,
                                              const Tensor<T>& images, std::size_t batch_size = 500) {
  std::vector<std::int32_t> out;
  out.reserve(images.shape().n);
  for (std::size_t b = 0, k = 0; b < images.shape().n; b += batch_size, ++k) {
    const std::size_t cnt = std::min(batch_size, images.shape().n - b);
    PreprocessorConfig c = cfg;
    c.seed = Rng::derive(cfg.seed, k).next_u64();
    auto p = predict_labels(model, preprocess(slice_batch(images, b, cnt), c));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

}  // namespace trigact

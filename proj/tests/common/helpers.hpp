#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "trigact/data.hpp"
#include "trigact/rng.hpp"
#include "trigact/tensor.hpp"

namespace trigact::testing {

template <typename T>
Tensor<T> random_images(Shape s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Tensor<T> t(s);
  Rng rng(seed);
  for (auto& v : t.values()) v = T(rng.uniform(lo, hi));
  return t;
}

inline std::vector<std::int32_t> random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::int32_t> y(n);
  for (auto& v : y) v = std::int32_t(rng.below(classes));
  return y;
}

inline LabeledImageSet small_synthetic(std::size_t train, std::size_t test, Split split = Split::kTrain) {
  SyntheticSpec s;
  s.train_size = train;
  s.test_size = test;
  return generate_synthetic(s, split, "synthetic10");
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("trigact_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// |a - b| / max(|a|, |b|, floor)
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace trigact::testing

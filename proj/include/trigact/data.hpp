#pragma once

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "trigact/errors.hpp"
#include "trigact/io.hpp"
#include "trigact/rng.hpp"
#include "trigact/tensor.hpp"

namespace trigact {

enum class Split { kTrain, kTest };

inline const char* split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + s + "'");
}

/// Images in [0, 1] (N, channels, H, W) with labels in [0, class_count).
struct LabeledImageSet {
  Tensor<float> images;
  std::vector<std::int32_t> labels;
  std::size_t class_count = 0;
  std::string name;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return images.shape().with_batch(1); }

  void validate() const {
    if (labels.empty()) throw IngestionError("dataset '" + name + "' is empty");
    if (images.shape().n != labels.size()) throw IngestionError("dataset '" + name + "': image/label count mismatch");
    for (auto y : labels)
      if (y < 0 || std::size_t(y) >= class_count)
        throw IngestionError("dataset '" + name + "': label " + std::to_string(y) + " out of range");
    for (float v : images.values())
      if (!(v >= 0.f && v <= 1.f)) throw IngestionError("dataset '" + name + "': pixel outside [0,1]");
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> out(class_count, 0);
    for (auto y : labels) ++out[y];
    return out;
  }
};

struct Batch {
  Tensor<float> images;
  std::vector<std::int32_t> labels;
  std::vector<std::size_t> indices;  // positions in the parent set
};

inline Batch make_batch(const LabeledImageSet& set, std::span<const std::size_t> indices) {
  Batch b{gather_rows(set.images, indices), {}, {indices.begin(), indices.end()}};
  b.labels.reserve(indices.size());
  for (auto i : indices) b.labels.push_back(set.labels[i]);
  return b;
}

/// Rows of `set` at `indices`, in that order.
inline LabeledImageSet subset(const LabeledImageSet& set, std::span<const std::size_t> indices) {
  Batch b = make_batch(set, indices);
  return {std::move(b.images), std::move(b.labels), set.class_count, set.name};
}

/// Per-class proportional subset. Each class keeps round(fraction * n_c)
/// samples (at least one) chosen by a seeded shuffle; the survivors keep
/// their original relative order, so fraction 1 returns the set unchanged.
inline LabeledImageSet stratified_subset(const LabeledImageSet& set, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("subset_fraction must be in (0, 1]");
  if (fraction == 1.0) return set;
  std::vector<std::vector<std::size_t>> by_class(set.class_count);
  for (std::size_t i = 0; i < set.size(); ++i) by_class[set.labels[i]].push_back(i);
  Rng rng = Rng::derive(seed, 0x5b5e7);
  std::vector<std::size_t> keep;
  for (auto& members : by_class) {
    if (members.empty()) continue;
    const auto k = std::max<std::size_t>(1, std::size_t(std::llround(fraction * double(members.size()))));
    rng.shuffle(std::span<std::size_t>(members));
    keep.insert(keep.end(), members.begin(), members.begin() + std::min(k, members.size()));
  }
  std::sort(keep.begin(), keep.end());
  return subset(set, keep);
}

/// Batch index lists covering every sample exactly once. Without a seed the
/// original order is kept; the last batch may be short.
inline std::vector<std::vector<std::size_t>> batch_iterator(std::size_t n, std::size_t batch_size,
                                                           std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (batch_size > n) {
    spdlog::warn("batch_size {} exceeds dataset size {}; using a single batch", batch_size, n);
    batch_size = n;
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle_seed) Rng::derive(*shuffle_seed, 0xba7c4).shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch_size)
    out.emplace_back(order.begin() + b, order.begin() + std::min(n, b + batch_size));
  return out;
}

inline std::vector<std::vector<std::size_t>> batch_iterator(const LabeledImageSet& set, std::size_t batch_size,
                                                           std::optional<std::uint64_t> shuffle_seed) {
  return batch_iterator(set.size(), batch_size, shuffle_seed);
}

// ---------------------------------------------------------------------------
// Synthetic CIFAR-shaped data

/// Parameters of the procedural stand-in for natural-image datasets: smooth
/// random backgrounds plus a randomly shifted per-class colour-grating
/// template, quantized to 8 bits.
struct SyntheticSpec {
  std::size_t class_count = 10;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t train_size = 10000;
  std::size_t test_size = 2000;
  double template_amplitude = 0.1;
  double background_amplitude = 0.15;
  double noise_std = 0.0;
  int max_shift = 2;
  std::uint64_t template_seed = 1;
};

namespace detail {

inline void add_grating(std::vector<double>& img, std::size_t h, std::size_t w, double freq, double theta,
                        double phase, std::span<const double> colour, double amp) {
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t c = 0; c < colour.size(); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        img[(c * h + y) * w + x] +=
            amp * colour[c] *
            std::cos(two_pi * freq * (std::cos(theta) * double(x) + std::sin(theta) * double(y)) / double(h) + phase);
}

inline std::vector<std::vector<double>> class_templates(const SyntheticSpec& spec) {
  Rng rng = Rng::derive(spec.template_seed, 0x7e3);
  const std::size_t d = spec.channels * spec.height * spec.width;
  std::vector<std::vector<double>> out;
  for (std::size_t k = 0; k < spec.class_count; ++k) {
    std::vector<double> t(d, 0.0);
    for (int g = 0; g < 3; ++g) {
      const double f = rng.uniform(0.5, 3.0), th = rng.uniform(0, std::numbers::pi),
                   ph = rng.uniform(0, 2 * std::numbers::pi);
      std::vector<double> col(spec.channels);
      double mx = 0;
      for (auto& c : col) mx = std::max(mx, std::abs(c = rng.normal()));
      for (auto& c : col) c /= mx;
      add_grating(t, spec.height, spec.width, f, th, ph, col, 1.0);
    }
    double mx = 0;
    for (double v : t) mx = std::max(mx, std::abs(v));
    for (double& v : t) v *= spec.template_amplitude / mx;
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace detail

/// Deterministic synthetic split. Labels are balanced (i mod C, shuffled).
inline LabeledImageSet generate_synthetic(const SyntheticSpec& spec, Split split, const std::string& name) {
  const std::size_t n = split == Split::kTrain ? spec.train_size : spec.test_size;
  const std::size_t h = spec.height, w = spec.width, ch = spec.channels, d = ch * h * w;
  const auto templates = detail::class_templates(spec);
  Rng rng = Rng::derive(spec.template_seed, split == Split::kTrain ? 0x7a1 : 0x7e5);
  std::vector<std::int32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = std::int32_t(i % spec.class_count);
  rng.shuffle(std::span<std::int32_t>(labels));
  Tensor<float> images({n, ch, h, w});
  std::vector<double> img(d), col(ch);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < ch; ++c) {
      const double base = 0.5 + rng.uniform(-0.1, 0.1);
      std::fill(img.begin() + c * h * w, img.begin() + (c + 1) * h * w, base);
    }
    for (int g = 0; g < 4; ++g) {
      const double f = rng.uniform(0.2, 2.0), th = rng.uniform(0, std::numbers::pi),
                   ph = rng.uniform(0, 2 * std::numbers::pi);
      const double a = spec.background_amplitude * rng.uniform01();
      for (auto& c : col) c = rng.normal();
      detail::add_grating(img, h, w, f, th, ph, col, a);
    }
    const long dy = rng.between(-spec.max_shift, spec.max_shift), dx = rng.between(-spec.max_shift, spec.max_shift);
    const double scale = rng.uniform(0.7, 1.3);
    const auto& t = templates[labels[i]];
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t sy = std::size_t((long(y) - dy + long(h)) % long(h));
          const std::size_t sx = std::size_t((long(x) - dx + long(w)) % long(w));
          img[(c * h + y) * w + x] += scale * t[(c * h + sy) * w + sx];
        }
    for (std::size_t j = 0; j < d; ++j) {
      double v = img[j] + (spec.noise_std > 0 ? spec.noise_std * rng.normal() : 0.0);
      v = std::clamp(v, 0.0, 1.0);
      images[i * d + j] = float(std::nearbyint(v * 255.0) / 255.0);
    }
  }
  LabeledImageSet set{std::move(images), std::move(labels), spec.class_count, name};
  set.validate();
  return set;
}

// ---------------------------------------------------------------------------
// Ingestion

/// Directory holding dataset files: explicit value, else $TRIGACT_DATA_DIR,
/// else ./data.
inline std::filesystem::path resolve_data_dir(const std::string& configured = {}) {
  if (!configured.empty()) return configured;
  if (const char* env = std::getenv("TRIGACT_DATA_DIR"); env && *env) return env;
  return "data";
}

inline void save_dataset_cache(const LabeledImageSet& set, const std::filesystem::path& path) {
  Container c;
  c.put_tensor("images", set.images);
  c.put_vector("labels", set.labels);
  c.put_vector("class_count", std::vector<std::int32_t>{std::int32_t(set.class_count)});
  c.put_text("name", set.name);
  c.save(path);
}

inline LabeledImageSet load_dataset_cache(const std::filesystem::path& path) {
  Container c = Container::load(path);
  LabeledImageSet set{c.get_tensor<float>("images"), c.get_vector<std::int32_t>("labels"),
                      std::size_t(c.get_vector<std::int32_t>("class_count").at(0)), c.get_text("name")};
  set.validate();
  return set;
}

/// CIFAR-10 binary distribution (cifar-10-batches-bin/*.bin): records of one
/// label byte followed by 3072 channel-major pixel bytes.
inline LabeledImageSet read_cifar10_binary(const std::filesystem::path& dir, Split split) {
  std::vector<std::filesystem::path> files;
  if (split == Split::kTrain)
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  else
    files.push_back(dir / "test_batch.bin");
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  std::vector<std::uint8_t> raw;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw IngestionError("missing CIFAR-10 file " + f.string());
    raw.insert(raw.end(), std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  if (raw.empty() || raw.size() % kRecord) throw IngestionError("malformed CIFAR-10 files in " + dir.string());
  const std::size_t n = raw.size() / kRecord;
  LabeledImageSet set{Tensor<float>({n, 3, 32, 32}), std::vector<std::int32_t>(n), 10, "cifar10"};
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = raw.data() + i * kRecord;
    set.labels[i] = rec[0];
    for (std::size_t j = 0; j < kRecord - 1; ++j) set.images[i * (kRecord - 1) + j] = float(rec[1 + j]) / 255.f;
  }
  set.validate();
  return set;
}

/// Registered dataset ids: "cifar10" (real data, read from the binary
/// distribution or a canonical cache) and "synthetic10" (procedural,
/// CIFAR-shaped at 16x16).
inline const std::vector<std::string>& registered_datasets() {
  static const std::vector<std::string> ids = {"cifar10", "synthetic10"};
  return ids;
}

/// Load `split` of dataset `name`, then take a stratified subset.
///
/// cifar10 reads the canonical cache `<dir>/cifar10_<split>.tac` if present,
/// else the binary distribution. synthetic10 is regenerated from its spec
/// (generation is deterministic and cheap).
inline LabeledImageSet load_dataset(const std::string& name, Split split, double subset_fraction,
                                    std::uint64_t seed, const std::string& data_dir = {},
                                    const SyntheticSpec& synthetic = {}) {
  if (std::find(registered_datasets().begin(), registered_datasets().end(), name) == registered_datasets().end())
    throw ConfigError("unknown dataset '" + name + "'");
  if (!(subset_fraction > 0.0 && subset_fraction <= 1.0)) throw ConfigError("subset_fraction must be in (0, 1]");
  const auto dir = resolve_data_dir(data_dir);
  const auto cache = dir / (name + "_" + split_name(split) + ".tac");
  LabeledImageSet full;
  if (name == "cifar10") {
    if (std::filesystem::exists(cache)) full = load_dataset_cache(cache);
    else full = read_cifar10_binary(dir / "cifar-10-batches-bin", split);
  } else {
    full = generate_synthetic(synthetic, split, name);
  }
  return stratified_subset(full, subset_fraction, seed);
}

}  // namespace trigact

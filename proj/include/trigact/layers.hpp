#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "trigact/errors.hpp"
#include "trigact/rng.hpp"
#include "trigact/tensor.hpp"

namespace trigact {

enum class Mode { kInference, kTrain };

/// Per-call state a layer needs for its backward pass. Owned by the caller so
/// that forward/backward are const on the model.
template <typename T>
struct LayerCache {
  Tensor<T> input;
  Shape in_shape;
  bool batch_stats = false;        // batch-norm ran with batch statistics
  std::size_t reduce_count = 0;    // elements per batch-norm channel
  std::vector<std::size_t> index;  // max-pool winners
  std::vector<T> mean;             // batch-norm batch statistics
  std::vector<T> var;
  Tensor<T> normalized;
  std::vector<LayerCache> children;
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// A differentiable stage of a classifier.
///
/// Parameters live in `params_` (learned) and `buffers_` (running state such
/// as batch-norm statistics). Composite layers hold `children_`; the flattened
/// parameter order is own parameters first, then each child's, recursively.
/// `backward` receives a span over exactly that many gradient slots; an empty
/// span means parameter gradients are not wanted.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string kind() const = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode, LayerCache<T>* cache) const = 0;
  virtual Tensor<T> backward(const Tensor<T>& dy, const LayerCache<T>& cache,
                             std::span<Tensor<T>> grads) const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  /// Fold train-mode batch statistics recorded in `cache` into running state.
  virtual void update_running_stats(const LayerCache<T>& cache, double momentum) {
    for (std::size_t i = 0; i < children_.size(); ++i)
      children_[i]->update_running_stats(cache.children[i], momentum);
  }

  /// Random initialization; default leaves parameters as constructed.
  virtual void initialize(Rng& rng) {
    for (auto& c : children_) c->initialize(rng);
  }

  std::size_t param_count() const {
    std::size_t n = params_.size();
    for (const auto& c : children_) n += c->param_count();
    return n;
  }

  void collect_params(const std::string& prefix, std::vector<NamedTensor<T>*>& out) {
    for (auto& p : params_) {
      p.name = prefix + p.name.substr(p.name.rfind('.') + 1);
      out.push_back(&p);
    }
    for (std::size_t i = 0; i < children_.size(); ++i)
      children_[i]->collect_params(prefix + std::to_string(i) + ".", out);
  }

  void collect_buffers(const std::string& prefix, std::vector<NamedTensor<T>*>& out) {
    for (auto& p : buffers_) {
      p.name = prefix + p.name.substr(p.name.rfind('.') + 1);
      out.push_back(&p);
    }
    for (std::size_t i = 0; i < children_.size(); ++i)
      children_[i]->collect_buffers(prefix + std::to_string(i) + ".", out);
  }

 protected:
  Layer() = default;
  Layer(const Layer& o) : params_(o.params_), buffers_(o.buffers_) {
    children_.reserve(o.children_.size());
    for (const auto& c : o.children_) children_.push_back(c->clone());
  }
  Layer& operator=(const Layer&) = delete;

  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  std::vector<std::unique_ptr<Layer>> children_;
};

namespace detail {

template <typename T>
void check_input(const Tensor<T>& x, std::size_t c, const char* who) {
  if (x.shape().n == 0) throw ContractError(std::string(who) + ": empty batch");
  if (x.shape().c != c)
    throw ContractError(std::string(who) + ": expected " + std::to_string(c) + " channels, got " +
                        x.shape().str());
}

template <typename T>
void uniform_fill(Tensor<T>& t, Rng& rng, double bound) {
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace detail

/// Fixed per-channel (x - mean) / std; the model-internal normalization stage.
template <typename T>
class Normalize final : public Layer<T> {
 public:
  Normalize(std::vector<T> mean, std::vector<T> stddev)
      : mean_(std::move(mean)), std_(std::move(stddev)) {}

  std::string kind() const override { return "normalize"; }
  Shape output_shape(const Shape& in) const override { return in; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Normalize>(*this); }

  Tensor<T> forward(const Tensor<T>& x, Mode, LayerCache<T>*) const override {
    detail::check_input(x, mean_.size(), "normalize");
    Tensor<T> y(x.shape());
    const auto& s = x.shape();
    const std::size_t hw = s.h * s.w;
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        const T* in = x.data() + (n * s.c + c) * hw;
        T* out = y.data() + (n * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) out[i] = (in[i] - mean_[c]) / std_[c];
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerCache<T>&, std::span<Tensor<T>>) const override {
    Tensor<T> dx(dy.shape());
    const auto& s = dy.shape();
    const std::size_t hw = s.h * s.w;
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        const T* g = dy.data() + (n * s.c + c) * hw;
        T* out = dx.data() + (n * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) out[i] = g[i] / std_[c];
      }
    return dx;
  }

 private:
  std::vector<T> mean_;
  std::vector<T> std_;
};

/// 2-D convolution, square kernel, zero padding, via batched im2col + GEMM.
template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         std::size_t stride = 1, std::size_t padding = std::size_t(-1))
      : cin_(in_channels),
        cout_(out_channels),
        k_(kernel),
        stride_(stride),
        pad_(padding == std::size_t(-1) ? kernel / 2 : padding) {
    this->params_.push_back({"weight", Tensor<T>({cout_, cin_, k_, k_})});
    this->params_.push_back({"bias", Tensor<T>({cout_, 1, 1, 1})});
  }

  std::string kind() const override { return "conv2d"; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }

  Shape output_shape(const Shape& in) const override {
    return {in.n, cout_, (in.h + 2 * pad_ - k_) / stride_ + 1, (in.w + 2 * pad_ - k_) / stride_ + 1};
  }

  void initialize(Rng& rng) override {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin_ * k_ * k_));
    detail::uniform_fill(this->params_[0].value, rng, bound);
    detail::uniform_fill(this->params_[1].value, rng, bound);
  }

  Tensor<T> forward(const Tensor<T>& x, Mode, LayerCache<T>* cache) const override {
    detail::check_input(x, cin_, "conv2d");
    const Shape os = output_shape(x.shape());
    const std::size_t ohw = os.h * os.w;
    const std::size_t kdim = cin_ * k_ * k_;
    Tensor<T> y(os);
    Eigen::Map<const RowMatrix<T>> w(this->params_[0].value.data(), cout_, kdim);
    const T* b = this->params_[1].value.data();
    for (auto [begin, count] : chunks(x.shape().n, kdim * ohw)) {
      RowMatrix<T> col = im2col(x, begin, count, os);
      RowMatrix<T> out = w * col;  // cout x (count * ohw)
      for (std::size_t n = 0; n < count; ++n)
        for (std::size_t co = 0; co < cout_; ++co) {
          T* dst = y.data() + ((begin + n) * cout_ + co) * ohw;
          const T* src = out.data() + co * count * ohw + n * ohw;
          for (std::size_t i = 0; i < ohw; ++i) dst[i] = src[i] + b[co];
        }
    }
    if (cache) cache->input = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerCache<T>& cache,
                     std::span<Tensor<T>> grads) const override {
    const Tensor<T>& x = cache.input;
    const Shape os = dy.shape();
    const std::size_t ohw = os.h * os.w;
    const std::size_t kdim = cin_ * k_ * k_;
    Tensor<T> dx(x.shape());
    Eigen::Map<const RowMatrix<T>> w(this->params_[0].value.data(), cout_, kdim);
    for (auto [begin, count] : chunks(x.shape().n, kdim * ohw)) {
      RowMatrix<T> g(cout_, count * ohw);
      for (std::size_t n = 0; n < count; ++n)
        for (std::size_t co = 0; co < cout_; ++co) {
          const T* src = dy.data() + ((begin + n) * cout_ + co) * ohw;
          std::copy(src, src + ohw, g.data() + co * count * ohw + n * ohw);
        }
      if (!grads.empty()) {
        RowMatrix<T> col = im2col(x, begin, count, os);
        Eigen::Map<RowMatrix<T>> dw(grads[0].data(), cout_, kdim);
        dw.noalias() += g * col.transpose();
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(grads[1].data(), cout_);
        db += g.rowwise().sum();
      }
      RowMatrix<T> dcol = w.transpose() * g;
      col2im(dcol, dx, begin, count, os);
    }
    return dx;
  }

 private:
  // Sample ranges keeping the column buffer under ~4M entries.
  static std::vector<std::pair<std::size_t, std::size_t>> chunks(std::size_t n, std::size_t per) {
    const std::size_t cap = std::max<std::size_t>(1, (std::size_t(1) << 22) / std::max<std::size_t>(per, 1));
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t b = 0; b < n; b += cap) out.emplace_back(b, std::min(cap, n - b));
    return out;
  }

  RowMatrix<T> im2col(const Tensor<T>& x, std::size_t begin, std::size_t count, const Shape& os) const {
    const auto& s = x.shape();
    const std::size_t ohw = os.h * os.w;
    RowMatrix<T> col(cin_ * k_ * k_, count * ohw);
    for (std::size_t c = 0; c < cin_; ++c)
      for (std::size_t ky = 0; ky < k_; ++ky)
        for (std::size_t kx = 0; kx < k_; ++kx) {
          T* row = col.data() + ((c * k_ + ky) * k_ + kx) * count * ohw;
          for (std::size_t n = 0; n < count; ++n) {
            const T* img = x.data() + ((begin + n) * s.c + c) * s.h * s.w;
            T* dst = row + n * ohw;
            for (std::size_t oy = 0; oy < os.h; ++oy) {
              const long iy = static_cast<long>(oy * stride_ + ky) - static_cast<long>(pad_);
              for (std::size_t ox = 0; ox < os.w; ++ox) {
                const long ix = static_cast<long>(ox * stride_ + kx) - static_cast<long>(pad_);
                dst[oy * os.w + ox] = (iy < 0 || ix < 0 || iy >= long(s.h) || ix >= long(s.w))
                                          ? T(0)
                                          : img[iy * s.w + ix];
              }
            }
          }
        }
    return col;
  }

  void col2im(const RowMatrix<T>& col, Tensor<T>& dx, std::size_t begin, std::size_t count,
              const Shape& os) const {
    const auto& s = dx.shape();
    const std::size_t ohw = os.h * os.w;
    for (std::size_t c = 0; c < cin_; ++c)
      for (std::size_t ky = 0; ky < k_; ++ky)
        for (std::size_t kx = 0; kx < k_; ++kx) {
          const T* row = col.data() + ((c * k_ + ky) * k_ + kx) * count * ohw;
          for (std::size_t n = 0; n < count; ++n) {
            T* img = dx.data() + ((begin + n) * s.c + c) * s.h * s.w;
            const T* src = row + n * ohw;
            for (std::size_t oy = 0; oy < os.h; ++oy) {
              const long iy = static_cast<long>(oy * stride_ + ky) - static_cast<long>(pad_);
              if (iy < 0 || iy >= long(s.h)) continue;
              for (std::size_t ox = 0; ox < os.w; ++ox) {
                const long ix = static_cast<long>(ox * stride_ + kx) - static_cast<long>(pad_);
                if (ix < 0 || ix >= long(s.w)) continue;
                img[iy * s.w + ix] += src[oy * os.w + ox];
              }
            }
          }
        }
  }

  std::size_t cin_, cout_, k_, stride_, pad_;
};

/// Fully connected layer over (n, features, 1, 1).
template <typename T>
class Linear final : public Layer<T> {
 public:
  Linear(std::size_t in_features, std::size_t out_features) : in_(in_features), out_(out_features) {
    this->params_.push_back({"weight", Tensor<T>({out_, in_, 1, 1})});
    this->params_.push_back({"bias", Tensor<T>({out_, 1, 1, 1})});
  }

  std::string kind() const override { return "linear"; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Linear>(*this); }
  Shape output_shape(const Shape& in) const override { return {in.n, out_, 1, 1}; }

  void initialize(Rng& rng) override {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    detail::uniform_fill(this->params_[0].value, rng, bound);
    detail::uniform_fill(this->params_[1].value, rng, bound);
  }

  Tensor<T>& weight() { return this->params_[0].value; }
  Tensor<T>& bias() { return this->params_[1].value; }

  Tensor<T> forward(const Tensor<T>& x, Mode, LayerCache<T>* cache) const override {
    if (x.shape().n == 0) throw ContractError("linear: empty batch");
    if (x.shape().per_sample() != in_)
      throw ContractError("linear: expected " + std::to_string(in_) + " features, got " + x.shape().str());
    const std::size_t n = x.shape().n;
    Tensor<T> y({n, out_, 1, 1});
    Eigen::Map<const RowMatrix<T>> xm(x.data(), n, in_);
    Eigen::Map<const RowMatrix<T>> w(this->params_[0].value.data(), out_, in_);
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(this->params_[1].value.data(), out_);
    Eigen::Map<RowMatrix<T>> ym(y.data(), n, out_);
    ym.noalias() = xm * w.transpose();
    ym.rowwise() += b;
    if (cache) cache->input = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerCache<T>& cache,
                     std::span<Tensor<T>> grads) const override {
    const Tensor<T>& x = cache.input;
    const std::size_t n = x.shape().n;
    Eigen::Map<const RowMatrix<T>> g(dy.data(), n, out_);
    Eigen::Map<const RowMatrix<T>> w(this->params_[0].value.data(), out_, in_);
    if (!grads.empty()) {
      Eigen::Map<const RowMatrix<T>> xm(x.data(), n, in_);
      Eigen::Map<RowMatrix<T>> dw(grads[0].data(), out_, in_);
      dw.noalias() += g.transpose() * xm;
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(grads[1].data(), out_);
      db += g.colwise().sum();
    }
    Tensor<T> dx(x.shape());
    Eigen::Map<RowMatrix<T>> dxm(dx.data(), n, in_);
    dxm.noalias() = g * w;
    return dx;
  }

 private:
  std::size_t in_, out_;
};

enum class Activation { kRelu, kSoftplus };

template <typename T>
class Act final : public Layer<T> {
 public:
  explicit Act(Activation a) : act_(a) {}

  std::string kind() const override { return act_ == Activation::kRelu ? "relu" : "softplus"; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Act>(*this); }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> forward(const Tensor<T>& x, Mode, LayerCache<T>* cache) const override {
    Tensor<T> y(x.shape());
    const T* in = x.data();
    T* out = y.data();
    if (act_ == Activation::kRelu) {
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
    } else {
      for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = std::max(in[i], T(0)) + std::log1p(std::exp(-std::abs(in[i])));
    }
    if (cache) cache->input = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerCache<T>& cache, std::span<Tensor<T>>) const override {
    Tensor<T> dx(dy.shape());
    const T* in = cache.input.data();
    const T* g = dy.data();
    T* out = dx.data();
    if (act_ == Activation::kRelu) {
      for (std::size_t i = 0; i < dy.size(); ++i) out[i] = in[i] > T(0) ? g[i] : T(0);
    } else {
      for (std::size_t i = 0; i < dy.size(); ++i) out[i] = g[i] / (T(1) + std::exp(-in[i]));
    }
    return dx;
  }

 private:
  Activation act_;
};

/// 2x2, stride-2 pooling. Max pooling ties resolve to the first element in
/// row-major window order.
template <typename T>
class Pool2 final : public Layer<T> {
 public:
  explicit Pool2(bool max) : max_(max) {}

  std::string kind() const override { return max_ ? "maxpool2" : "avgpool2"; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Pool2>(*this); }
  Shape output_shape(const Shape& in) const override { return {in.n, in.c, in.h / 2, in.w / 2}; }

  Tensor<T> forward(const Tensor<T>& x, Mode, LayerCache<T>* cache) const override {
    const Shape s = x.shape();
    const Shape os = output_shape(s);
    Tensor<T> y(os);
    std::vector<std::size_t> idx(max_ && cache ? os.size() : 0);
    for (std::size_t p = 0; p < s.n * s.c; ++p) {
      const T* in = x.data() + p * s.h * s.w;
      T* out = y.data() + p * os.h * os.w;
      for (std::size_t oy = 0; oy < os.h; ++oy)
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          const std::size_t base = 2 * oy * s.w + 2 * ox;
          const std::size_t cand[4] = {base, base + 1, base + s.w, base + s.w + 1};
          if (max_) {
            std::size_t best = cand[0];
            for (std::size_t k = 1; k < 4; ++k)
              if (in[cand[k]] > in[best]) best = cand[k];
            out[oy * os.w + ox] = in[best];
            if (!idx.empty()) idx[p * os.h * os.w + oy * os.w + ox] = p * s.h * s.w + best;
          } else {
            out[oy * os.w + ox] = (in[cand[0]] + in[cand[1]] + in[cand[2]] + in[cand[3]]) * T(0.25);
          }
        }
    }
    if (cache) {
      cache->in_shape = s;
      cache->index = std::move(idx);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerCache<T>& cache, std::span<Tensor<T>>) const override {
    const Shape s = cache.in_shape;
    Tensor<T> dx(s);
    if (max_) {
      for (std::size_t i = 0; i < dy.size(); ++i) dx[cache.index[i]] += dy[i];
      return dx;
    }
    const Shape os = dy.shape();
    for (std::size_t p = 0; p < s.n * s.c; ++p) {
      const T* g = dy.data() + p * os.h * os.w;
      T* out = dx.data() + p * s.h * s.w;
      for (std::size_t oy = 0; oy < os.h; ++oy)
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          const T v = g[oy * os.w + ox] * T(0.25);
          const std::size_t base = 2 * oy * s.w + 2 * ox;
          out[base] += v;
          out[base + 1] += v;
          out[base + s.w] += v;
          out[base + s.w + 1] += v;
        }
    }
    return dx;
  }

 private:
  bool max_;
};

template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  std::string kind() const override { return "global_avgpool"; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }
  Shape output_shape(const Shape& in) const override { return {in.n, in.c, 1, 1}; }

  Tensor<T> forward(const Tensor<T>& x, Mode, LayerCache<T>* cache) const override {
    const Shape s = x.shape();
    const std::size_t hw = s.h * s.w;
    Tensor<T> y(output_shape(s));
    for (std::size_t p = 0; p < s.n * s.c; ++p) {
      T acc = 0;
      for (std::size_t i = 0; i < hw; ++i) acc += x[p * hw + i];
      y[p] = acc / T(hw);
    }
    if (cache) cache->in_shape = s;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerCache<T>& cache, std::span<Tensor<T>>) const override {
    const Shape s = cache.in_shape;
    const std::size_t hw = s.h * s.w;
    Tensor<T> dx(s);
    for (std::size_t p = 0; p < s.n * s.c; ++p)
      for (std::size_t i = 0; i < hw; ++i) dx[p * hw + i] = dy[p] / T(hw);
    return dx;
  }
};

template <typename T>
class Flatten final : public Layer<T> {
 public:
  std::string kind() const override { return "flatten"; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Flatten>(*this); }
  Shape output_shape(const Shape& in) const override { return {in.n, in.per_sample(), 1, 1}; }

  Tensor<T> forward(const Tensor<T>& x, Mode, LayerCache<T>* cache) const override {
    if (cache) cache->in_shape = x.shape();
    return x.reshaped(output_shape(x.shape()));
  }
  Tensor<T> backward(const Tensor<T>& dy, const LayerCache<T>& cache, std::span<Tensor<T>>) const override {
    return dy.reshaped(cache.in_shape.with_batch(dy.shape().n));
  }
};

/// Per-channel batch normalization. Train mode normalizes with batch
/// statistics (biased variance) and records them for
/// `update_running_stats`; inference mode uses the running statistics.
template <typename T>
class BatchNorm final : public Layer<T> {
 public:
  explicit BatchNorm(std::size_t channels, T eps = T(1e-5)) : c_(channels), eps_(eps) {
    this->params_.push_back({"gamma", Tensor<T>({c_, 1, 1, 1}, T(1))});
    this->params_.push_back({"beta", Tensor<T>({c_, 1, 1, 1}, T(0))});
    this->buffers_.push_back({"running_mean", Tensor<T>({c_, 1, 1, 1}, T(0))});
    this->buffers_.push_back({"running_var", Tensor<T>({c_, 1, 1, 1}, T(1))});
  }

  std::string kind() const override { return "batchnorm"; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm>(*this); }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, LayerCache<T>* cache) const override {
    detail::check_input(x, c_, "batchnorm");
    const Shape s = x.shape();
    const std::size_t hw = s.h * s.w;
    const T* gamma = this->params_[0].value.data();
    const T* beta = this->params_[1].value.data();
    std::vector<T> mean(c_), var(c_);
    if (mode == Mode::kTrain) {
      const double m = double(s.n * hw);
      for (std::size_t c = 0; c < c_; ++c) {
        double sum = 0, sq = 0;
        for (std::size_t n = 0; n < s.n; ++n) {
          const T* p = x.data() + (n * s.c + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) sum += p[i];
        }
        const double mu = sum / m;
        for (std::size_t n = 0; n < s.n; ++n) {
          const T* p = x.data() + (n * s.c + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) sq += (p[i] - mu) * (p[i] - mu);
        }
        mean[c] = T(mu);
        var[c] = T(sq / m);
      }
    } else {
      std::copy_n(this->buffers_[0].value.data(), c_, mean.begin());
      std::copy_n(this->buffers_[1].value.data(), c_, var.begin());
    }
    Tensor<T> xhat(s), y(s);
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < c_; ++c) {
        const T inv = T(1) / std::sqrt(var[c] + eps_);
        const std::size_t off = (n * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          xhat[off + i] = (x[off + i] - mean[c]) * inv;
          y[off + i] = gamma[c] * xhat[off + i] + beta[c];
        }
      }
    if (cache) {
      cache->mean = std::move(mean);
      cache->var = std::move(var);
      cache->normalized = std::move(xhat);
      cache->batch_stats = mode == Mode::kTrain;
      cache->reduce_count = s.n * hw;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerCache<T>& cache,
                     std::span<Tensor<T>> grads) const override {
    const Shape s = dy.shape();
    const std::size_t hw = s.h * s.w;
    const bool train = cache.batch_stats;
    const T m = T(cache.reduce_count);
    const T* gamma = this->params_[0].value.data();
    const Tensor<T>& xhat = cache.normalized;
    Tensor<T> dx(s);
    for (std::size_t c = 0; c < c_; ++c) {
      T sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const std::size_t off = (n * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_dy += dy[off + i];
          sum_dy_xhat += dy[off + i] * xhat[off + i];
        }
      }
      if (!grads.empty()) {
        grads[0][c] += sum_dy_xhat;
        grads[1][c] += sum_dy;
      }
      const T inv = T(1) / std::sqrt(cache.var[c] + eps_);
      for (std::size_t n = 0; n < s.n; ++n) {
        const std::size_t off = (n * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          dx[off + i] = train ? gamma[c] * inv * (dy[off + i] - sum_dy / m - xhat[off + i] * sum_dy_xhat / m)
                              : gamma[c] * inv * dy[off + i];
        }
      }
    }
    return dx;
  }

  void update_running_stats(const LayerCache<T>& cache, double momentum) override {
    if (!cache.batch_stats) return;
    const double m = double(cache.reduce_count);
    const double unbias = m > 1 ? m / (m - 1) : 1.0;
    T* rm = this->buffers_[0].value.data();
    T* rv = this->buffers_[1].value.data();
    for (std::size_t c = 0; c < c_; ++c) {
      rm[c] = T((1 - momentum) * rm[c] + momentum * cache.mean[c]);
      rv[c] = T((1 - momentum) * rv[c] + momentum * cache.var[c] * unbias);
    }
  }

 private:
  std::size_t c_;
  T eps_;
};

/// y = main(x) + shortcut(x); an empty shortcut is the identity.
template <typename T>
class Residual final : public Layer<T> {
 public:
  Residual(std::vector<std::unique_ptr<Layer<T>>> main, std::vector<std::unique_ptr<Layer<T>>> shortcut)
      : main_count_(main.size()) {
    for (auto& l : main) this->children_.push_back(std::move(l));
    for (auto& l : shortcut) this->children_.push_back(std::move(l));
  }

  std::string kind() const override { return "residual"; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Residual>(*this); }

  Shape output_shape(const Shape& in) const override {
    Shape s = in;
    for (std::size_t i = 0; i < main_count_; ++i) s = this->children_[i]->output_shape(s);
    return s;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, LayerCache<T>* cache) const override {
    const auto& ch = this->children_;
    if (cache) cache->children.assign(ch.size(), LayerCache<T>{});
    Tensor<T> a = x;
    for (std::size_t i = 0; i < main_count_; ++i)
      a = ch[i]->forward(a, mode, cache ? &cache->children[i] : nullptr);
    Tensor<T> b = x;
    for (std::size_t i = main_count_; i < ch.size(); ++i)
      b = ch[i]->forward(b, mode, cache ? &cache->children[i] : nullptr);
    a += b;
    return a;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerCache<T>& cache,
                     std::span<Tensor<T>> grads) const override {
    const auto& ch = this->children_;
    std::vector<std::size_t> offset(ch.size() + 1, 0);
    for (std::size_t i = 0; i < ch.size(); ++i) offset[i + 1] = offset[i] + ch[i]->param_count();
    auto slot = [&](std::size_t i) {
      return grads.empty() ? std::span<Tensor<T>>{} : grads.subspan(offset[i], offset[i + 1] - offset[i]);
    };
    Tensor<T> ga = dy;
    for (std::size_t i = main_count_; i-- > 0;) ga = ch[i]->backward(ga, cache.children[i], slot(i));
    Tensor<T> gb = dy;
    for (std::size_t i = ch.size(); i-- > main_count_;) gb = ch[i]->backward(gb, cache.children[i], slot(i));
    ga += gb;
    return ga;
  }

 private:
  std::size_t main_count_;
};

}  // namespace trigact

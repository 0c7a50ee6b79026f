#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trigact/errors.hpp"
#include "trigact/layers.hpp"
#include "trigact/losses.hpp"
#include "trigact/rng.hpp"
#include "trigact/tensor.hpp"

namespace trigact {

enum class Wrt { kParams, kInput, kBoth };

template <typename T>
struct GradientBundle {
  double loss_value = 0;
  double ce_term = 0;   // total_trigger_loss only
  double kld_term = 0;  // total_trigger_loss only
  std::optional<std::vector<Tensor<T>>> param_grads;
  std::optional<Tensor<T>> input_grad;
};

/// Saved per-layer state of one forward pass.
template <typename T>
using Tape = std::vector<LayerCache<T>>;

/// Sequential C-class classifier over NCHW images in pixel space [0, 1].
template <typename T>
class Classifier {
 public:
  Classifier(std::string arch_id, std::size_t class_count, Shape input_shape,
             std::vector<std::unique_ptr<Layer<T>>> layers)
      : arch_id_(std::move(arch_id)),
        class_count_(class_count),
        input_shape_(input_shape.with_batch(1)),
        layers_(std::move(layers)) {
    Shape s = input_shape_;
    for (const auto& l : layers_) s = l->output_shape(s);
    if (s.per_sample() != class_count_)
      throw ConfigError("architecture " + arch_id_ + " emits " + std::to_string(s.per_sample()) +
                        " outputs for " + std::to_string(class_count_) + " classes");
  }

  Classifier(const Classifier& o)
      : arch_id_(o.arch_id_), class_count_(o.class_count_), input_shape_(o.input_shape_) {
    layers_.reserve(o.layers_.size());
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  Classifier& operator=(const Classifier& o) {
    if (this != &o) *this = Classifier(o);
    return *this;
  }
  Classifier(Classifier&&) noexcept = default;
  Classifier& operator=(Classifier&&) noexcept = default;

  const std::string& arch_id() const { return arch_id_; }
  std::size_t class_count() const { return class_count_; }
  /// (1, channels, H, W)
  const Shape& input_shape() const { return input_shape_; }

  void initialize(Rng& rng) {
    for (auto& l : layers_) l->initialize(rng);
  }

  /// Learned parameters in a stable order with dotted names ("3.weight").
  std::vector<NamedTensor<T>*> parameters() {
    std::vector<NamedTensor<T>*> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect_params(std::to_string(i) + ".", out);
    return out;
  }
  std::vector<const NamedTensor<T>*> parameters() const {
    auto p = const_cast<Classifier*>(this)->parameters();
    return {p.begin(), p.end()};
  }

  /// Running statistics (batch-norm) in a stable order.
  std::vector<NamedTensor<T>*> buffers() {
    std::vector<NamedTensor<T>*> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect_buffers(std::to_string(i) + ".", out);
    return out;
  }
  std::vector<const NamedTensor<T>*> buffers() const {
    auto p = const_cast<Classifier*>(this)->buffers();
    return {p.begin(), p.end()};
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l->param_count();
    return n;
  }

  void check_input(const Tensor<T>& images) const {
    if (images.shape().n == 0) throw ContractError("classifier " + arch_id_ + ": empty batch");
    if (!images.shape().same_sample_shape(input_shape_))
      throw ContractError("classifier " + arch_id_ + ": input " + images.shape().str() + " does not match " +
                          input_shape_.str());
  }

  /// Logits (B, C). With a tape, records what `backward` needs.
  Tensor<T> forward(const Tensor<T>& images, Mode mode, Tape<T>* tape) const {
    check_input(images);
    if (tape) tape->assign(layers_.size(), LayerCache<T>{});
    Tensor<T> a = images;
    for (std::size_t i = 0; i < layers_.size(); ++i) a = layers_[i]->forward(a, mode, tape ? &(*tape)[i] : nullptr);
    return a;
  }

  /// Inference-mode logits.
  Tensor<T> forward_logits(const Tensor<T>& images) const {
    Tensor<T> z = forward(images, Mode::kInference, nullptr);
    if (!z.all_finite()) throw NumericError("classifier " + arch_id_ + ": non-finite logits");
    return z;
  }

  /// Backpropagate dlogits through a recorded tape. When `param_grads` is
  /// non-null it is resized to match `parameters()` and accumulated into.
  Tensor<T> backward(const Tape<T>& tape, const Tensor<T>& dlogits, std::vector<Tensor<T>>* param_grads) const {
    std::vector<std::size_t> offset(layers_.size() + 1, 0);
    for (std::size_t i = 0; i < layers_.size(); ++i) offset[i + 1] = offset[i] + layers_[i]->param_count();
    if (param_grads && param_grads->empty()) *param_grads = zero_param_grads();
    Tensor<T> g = dlogits;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      std::span<Tensor<T>> slot;
      if (param_grads) slot = std::span<Tensor<T>>(*param_grads).subspan(offset[i], offset[i + 1] - offset[i]);
      g = layers_[i]->backward(g, tape[i], slot);
    }
    return g;
  }

  std::vector<Tensor<T>> zero_param_grads() const {
    std::vector<Tensor<T>> out;
    for (const auto* p : parameters()) out.emplace_back(p->value.shape());
    return out;
  }

  /// Fold train-mode batch statistics into running statistics.
  void update_running_stats(const Tape<T>& tape, double momentum = 0.1) {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->update_running_stats(tape[i], momentum);
  }

  /// Exact gradients of the mean batch loss. For total_trigger_loss `images`
  /// are the clean inputs and `trigger` is required; the forward pass runs on
  /// the concatenation (x, x + trigger) and the input gradient is with
  /// respect to the clean x.
  GradientBundle<T> grad(const Tensor<T>& images, std::span<const std::int32_t> labels, LossId loss, Wrt wrt,
                         Mode mode = Mode::kInference, const Tensor<T>* trigger = nullptr) const {
    GradientBundle<T> out;
    Tape<T> tape;
    const bool want_params = wrt != Wrt::kInput;
    std::vector<Tensor<T>> pg;
    Tensor<T> dinput;
    if (loss == LossId::kTotalTriggerLoss) {
      if (!trigger) throw ContractError("total_trigger_loss needs a trigger");
      const std::size_t b = images.shape().n;
      Tensor<T> shifted = images;
      add_broadcast(shifted, *trigger);
      Tensor<T> z = forward(concat_batch(images, shifted), mode, &tape);
      auto tl = total_trigger_loss(slice_batch(z, b, b), slice_batch(z, 0, b), labels, class_count_);
      check_finite_loss(tl.total);
      out.loss_value = tl.total;
      out.ce_term = tl.ce;
      out.kld_term = tl.kld;
      Tensor<T> dz = concat_batch(tl.dneg, tl.dpos);
      Tensor<T> dx = backward(tape, dz, want_params ? &pg : nullptr);
      dinput = slice_batch(dx, 0, b);
      dinput += slice_batch(dx, b, b);
    } else {
      Tensor<T> z = forward(images, mode, &tape);
      auto r = loss == LossId::kCrossEntropy ? cross_entropy(z, labels) : kld_to_uniform(z);
      check_finite_loss(r.value);
      out.loss_value = r.value;
      dinput = backward(tape, r.dlogits, want_params ? &pg : nullptr);
    }
    if (want_params) {
      for (const auto& g : pg)
        if (!g.all_finite()) throw NumericError("classifier " + arch_id_ + ": non-finite parameter gradient");
      out.param_grads = std::move(pg);
    }
    if (wrt != Wrt::kParams) {
      if (!dinput.all_finite()) throw NumericError("classifier " + arch_id_ + ": non-finite input gradient");
      out.input_grad = std::move(dinput);
    }
    return out;
  }

  /// Same architecture and weights in another scalar type.
  template <typename U>
  Classifier<U> cast() const;

  /// Broadcast-add a single-sample tensor to every row.
  static void add_broadcast(Tensor<T>& batch, const Tensor<T>& row) {
    const std::size_t ps = batch.shape().per_sample();
    if (row.size() != ps) throw ContractError("broadcast shape mismatch");
    for (std::size_t n = 0; n < batch.shape().n; ++n) {
      T* dst = batch.data() + n * ps;
      for (std::size_t i = 0; i < ps; ++i) dst[i] += row[i];
    }
  }

 private:
  void check_finite_loss(double v) const {
    if (!std::isfinite(v)) throw NumericError("classifier " + arch_id_ + ": non-finite loss " + std::to_string(v));
  }

  std::string arch_id_;
  std::size_t class_count_;
  Shape input_shape_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// ---------------------------------------------------------------------------
// Architecture zoo

/// Registered small architectures. Each exists in a piecewise-linear (ReLU,
/// max-pool) form and a smooth form (softplus, average pooling) used for
/// tight gradient checks.
inline const std::vector<std::string>& registered_architectures() {
  static const std::vector<std::string> ids = {"tiny_conv", "mid_conv", "mlp", "vgg_like", "res_like"};
  return ids;
}

inline bool is_registered_architecture(const std::string& id) {
  for (const auto& a : registered_architectures())
    if (a == id || a + "_smooth" == id) return true;
  return false;
}

namespace detail {

template <typename T>
using LayerList = std::vector<std::unique_ptr<Layer<T>>>;

template <typename T>
struct ZooBuilder {
  Activation act;
  LayerList<T> layers;

  ZooBuilder& add(std::unique_ptr<Layer<T>> l) {
    layers.push_back(std::move(l));
    return *this;
  }
  ZooBuilder& conv_bn_act(std::size_t cin, std::size_t cout) {
    add(std::make_unique<Conv2d<T>>(cin, cout, 3));
    add(std::make_unique<BatchNorm<T>>(cout));
    return add(std::make_unique<Act<T>>(act));
  }
  ZooBuilder& pool() { return add(std::make_unique<Pool2<T>>(act == Activation::kRelu)); }
};

template <typename T>
std::unique_ptr<Layer<T>> residual_block(std::size_t cin, std::size_t cout, Activation act) {
  LayerList<T> main, shortcut;
  main.push_back(std::make_unique<Conv2d<T>>(cin, cout, 3));
  main.push_back(std::make_unique<BatchNorm<T>>(cout));
  main.push_back(std::make_unique<Act<T>>(act));
  main.push_back(std::make_unique<Conv2d<T>>(cout, cout, 3));
  main.push_back(std::make_unique<BatchNorm<T>>(cout));
  if (cin != cout) {
    shortcut.push_back(std::make_unique<Conv2d<T>>(cin, cout, 1));
    shortcut.push_back(std::make_unique<BatchNorm<T>>(cout));
  }
  return std::make_unique<Residual<T>>(std::move(main), std::move(shortcut));
}

}  // namespace detail

/// Build and initialize a registered architecture. Appending "_smooth" to any
/// id selects its smooth-activation variant. Spatial size must be a multiple
/// of 4.
template <typename T>
Classifier<T> build_model(const std::string& arch_id, std::size_t class_count, std::uint64_t init_seed,
                          Shape input_shape = {1, 3, 16, 16}) {
  if (!is_registered_architecture(arch_id)) throw ConfigError("unknown architecture '" + arch_id + "'");
  if (class_count < 2) throw ConfigError("class_count must be at least 2");
  const bool smooth = arch_id.ends_with("_smooth");
  const std::string base = smooth ? arch_id.substr(0, arch_id.size() - 7) : arch_id;
  const std::size_t ch = input_shape.c, h = input_shape.h, w = input_shape.w;
  if (h % 4 || w % 4) throw ConfigError("input height and width must be multiples of 4");

  detail::ZooBuilder<T> z{smooth ? Activation::kSoftplus : Activation::kRelu, {}};
  z.add(std::make_unique<Normalize<T>>(std::vector<T>(ch, T(0.5)), std::vector<T>(ch, T(0.25))));
  if (base == "tiny_conv") {
    z.conv_bn_act(ch, 16).pool().conv_bn_act(16, 32).pool();
    z.add(std::make_unique<Flatten<T>>()).add(std::make_unique<Linear<T>>(32 * (h / 4) * (w / 4), class_count));
  } else if (base == "mid_conv") {
    z.conv_bn_act(ch, 32).conv_bn_act(32, 32).pool().conv_bn_act(32, 64);
    z.add(std::make_unique<GlobalAvgPool<T>>()).add(std::make_unique<Flatten<T>>());
    z.add(std::make_unique<Linear<T>>(64, class_count));
  } else if (base == "mlp") {
    z.add(std::make_unique<Flatten<T>>());
    z.add(std::make_unique<Linear<T>>(ch * h * w, 256)).add(std::make_unique<BatchNorm<T>>(256));
    z.add(std::make_unique<Act<T>>(z.act));
    z.add(std::make_unique<Linear<T>>(256, 128)).add(std::make_unique<BatchNorm<T>>(128));
    z.add(std::make_unique<Act<T>>(z.act));
    z.add(std::make_unique<Linear<T>>(128, class_count));
  } else if (base == "vgg_like") {
    z.conv_bn_act(ch, 16).conv_bn_act(16, 16).pool().conv_bn_act(16, 32).conv_bn_act(32, 32).pool();
    z.add(std::make_unique<Flatten<T>>()).add(std::make_unique<Linear<T>>(32 * (h / 4) * (w / 4), 64));
    z.add(std::make_unique<Act<T>>(z.act)).add(std::make_unique<Linear<T>>(64, class_count));
  } else {  // res_like
    z.conv_bn_act(ch, 16);
    z.add(detail::residual_block<T>(16, 16, z.act)).add(std::make_unique<Act<T>>(z.act)).pool();
    z.add(detail::residual_block<T>(16, 32, z.act)).add(std::make_unique<Act<T>>(z.act)).pool();
    z.add(std::make_unique<GlobalAvgPool<T>>()).add(std::make_unique<Flatten<T>>());
    z.add(std::make_unique<Linear<T>>(32, class_count));
  }
  Classifier<T> model(arch_id, class_count, input_shape, std::move(z.layers));
  Rng rng = Rng::derive(init_seed, 0x1417);
  model.initialize(rng);
  return model;
}

template <typename T>
template <typename U>
Classifier<U> Classifier<T>::cast() const {
  Classifier<U> out = build_model<U>(arch_id_, class_count_, 0, input_shape_);
  auto dst = out.parameters();
  auto src = parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<U>();
  auto dbuf = out.buffers();
  auto sbuf = buffers();
  for (std::size_t i = 0; i < sbuf.size(); ++i) dbuf[i]->value = sbuf[i]->value.template cast<U>();
  return out;
}

/// Inference-mode predictions, lowest-index tie-break.
template <typename T>
std::vector<std::int32_t> predict(const Classifier<T>& model, const Tensor<T>& images,
                                  std::size_t batch_size = 500) {
  std::vector<std::int32_t> out;
  out.reserve(images.shape().n);
  for (std::size_t b = 0; b < images.shape().n; b += batch_size) {
    const std::size_t cnt = std::min(batch_size, images.shape().n - b);
    auto p = argmax_rows(model.forward_logits(slice_batch(images, b, cnt)));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

}  // namespace trigact

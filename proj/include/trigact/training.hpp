#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "trigact/attacks.hpp"
#include "trigact/data.hpp"
#include "trigact/losses.hpp"
#include "trigact/models.hpp"
#include "trigact/optim.hpp"
#include "trigact/trigger.hpp"
#include "trigact/triggered_model.hpp"

namespace trigact {

struct TrainSchedule {
  std::size_t epochs = 60;
  double lr_initial = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  double bn_momentum = 0.1;

  void validate() const {
    if (!(lr_initial > 0)) throw ConfigError("lr_initial must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (momentum < 0 || weight_decay < 0) throw ConfigError("momentum and weight_decay must be >= 0");
  }

  std::string describe() const {
    std::ostringstream os;
    os.precision(17);
    os << "epochs=" << epochs << " lr=" << lr_initial << " cosine momentum=" << momentum << " wd=" << weight_decay
       << " batch=" << batch_size << " seed=" << seed << " bn_momentum=" << bn_momentum;
    return os.str();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0;
  double loss_total = 0;
  double ce = 0;
  double kld = 0;
  double clean_acc = 0;      // train batches, clean inputs
  double triggered_acc = 0;  // train batches, x + tau (trigger runs only)
  bool trigger_updated = false;
  double seconds = 0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},         {"lr", r.lr},
          {"loss_total", r.loss_total}, {"ce", r.ce},
          {"kld", r.kld},             {"clean_acc", r.clean_acc},
          {"triggered_acc", r.triggered_acc}, {"trigger_updated", r.trigger_updated},
          {"seconds", r.seconds}};
}

struct TrainLog {
  std::string procedure;
  std::vector<EpochRecord> epochs;

  /// One JSON object per line.
  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : epochs) out += to_json(r).dump() + "\n";
    return out;
  }
};

template <typename T>
struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Receives the last finite state when training diverges.
  std::function<void(const Classifier<T>&, const Trigger<T>*)> on_abort;
};

template <typename T>
struct TrainedClassifier {
  Classifier<T> model;
  TrainLog log;
};

template <typename T>
struct TrainedTriggered {
  TriggeredModel<T> tm;
  TrainLog log;
};

namespace detail {

inline double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
std::size_t count_hits(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  auto p = argmax_rows(logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < p.size(); ++i) hits += p[i] == labels[i];
  return hits;
}

template <typename T>
void check_data(const Classifier<T>& model, const LabeledImageSet& data) {
  if (data.class_count != model.class_count())
    throw ConfigError("dataset has " + std::to_string(data.class_count) + " classes, model " +
                      std::to_string(model.class_count()));
  if (!data.images.shape().same_sample_shape(model.input_shape()))
    throw ContractError("dataset images " + data.images.shape().str() + " do not fit model input " +
                        model.input_shape().str());
}

template <typename T>
[[noreturn]] void abort_training(const std::string& what, const Classifier<T>& last_good, const Trigger<T>* trig,
                                 const TrainHooks<T>& hooks) {
  spdlog::error("training diverged: {}", what);
  if (hooks.on_abort) hooks.on_abort(last_good, trig);
  throw NumericError("training diverged: " + what);
}

// One pass over the data with a loss on (x, optional x + tau). Mutates model
// and optimizer state; returns the epoch record without timing.
template <typename T>
EpochRecord model_epoch(Classifier<T>& model, Sgd<T>& opt, const LabeledImageSet& data, const TrainSchedule& sched,
                        std::size_t epoch, const Trigger<T>* trig, bool clip_triggered,
                        const std::function<Tensor<T>(const Tensor<T>&, std::span<const std::int32_t>)>& perturb) {
  EpochRecord rec;
  rec.epoch = epoch + 1;
  rec.lr = cosine_lr(sched.lr_initial, epoch, sched.epochs);
  const auto batches = batch_iterator(data, sched.batch_size, Rng::derive(sched.seed, 0xe0 + epoch).next_u64());
  std::size_t seen = 0, clean_hits = 0, trig_hits = 0;
  for (const auto& idx : batches) {
    Batch b = make_batch(data, idx);
    Tensor<T> x = b.images.template cast<T>();
    const std::size_t n = x.shape().n;
    Tape<T> tape;
    std::vector<Tensor<T>> grads;
    double total = 0, ce = 0, kld = 0;
    if (trig) {
      Tensor<T> z = model.forward(concat_batch(x, apply_trigger(x, *trig, clip_triggered)), Mode::kTrain, &tape);
      Tensor<T> z_neg = slice_batch(z, 0, n), z_pos = slice_batch(z, n, n);
      auto tl = total_trigger_loss(z_pos, z_neg, b.labels, model.class_count());
      total = tl.total, ce = tl.ce, kld = tl.kld;
      if (!std::isfinite(total)) throw NumericError("non-finite loss");
      model.backward(tape, concat_batch(tl.dneg, tl.dpos), &grads);
      clean_hits += count_hits(z_neg, b.labels);
      trig_hits += count_hits(z_pos, b.labels);
    } else {
      if (perturb) x = perturb(x, b.labels);
      Tensor<T> z = model.forward(x, Mode::kTrain, &tape);
      auto r = cross_entropy(z, b.labels);
      total = ce = r.value;
      if (!std::isfinite(total)) throw NumericError("non-finite loss");
      model.backward(tape, r.dlogits, &grads);
      clean_hits += count_hits(z, b.labels);
    }
    for (const auto& g : grads)
      if (!g.all_finite()) throw NumericError("non-finite parameter gradient");
    model.update_running_stats(tape, sched.bn_momentum);
    opt.step(model, grads, rec.lr);
    rec.loss_total += total * double(n);
    rec.ce += ce * double(n);
    rec.kld += kld * double(n);
    seen += n;
  }
  rec.loss_total /= double(seen);
  rec.ce /= double(seen);
  rec.kld /= double(seen);
  rec.clean_acc = double(clean_hits) / double(seen);
  rec.triggered_acc = trig ? double(trig_hits) / double(seen) : 0.0;
  return rec;
}

template <typename T>
using Perturb = std::function<Tensor<T>(const Tensor<T>&, std::span<const std::int32_t>)>;

// Shared epoch loop; `after_model_pass` may update the trigger.
template <typename T>
TrainLog run_epochs(Classifier<T>& model, Trigger<T>* trig, const LabeledImageSet& data, const TrainSchedule& sched,
                    const TrainHooks<T>& hooks, const std::string& procedure, bool clip_triggered,
                    const Perturb<T>& perturb, const std::function<bool(std::size_t)>& after_model_pass = {}) {
  sched.validate();
  check_data(model, data);
  if (trig && !trig->shape().same_sample_shape(model.input_shape()))
    throw ContractError("trigger shape does not match model");
  Sgd<T> opt(sched.momentum, sched.weight_decay);
  TrainLog log{procedure, {}};
  for (std::size_t e = 0; e < sched.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    Classifier<T> last_good = model;
    EpochRecord rec;
    try {
      rec = model_epoch<T>(model, opt, data, sched, e, trig, clip_triggered, perturb);
      if (after_model_pass) rec.trigger_updated = after_model_pass(e);
    } catch (const NumericError& err) {
      abort_training<T>(procedure + " epoch " + std::to_string(e + 1) + ": " + err.what(), last_good, trig, hooks);
    }
    rec.seconds = elapsed(t0);
    log.epochs.push_back(rec);
    spdlog::debug("{} epoch {} loss {:.4f} ce {:.4f} kld {:.4f} clean {:.3f} trig {:.3f} {:.1f}s", procedure, rec.epoch,
                  rec.loss_total, rec.ce, rec.kld, rec.clean_acc, rec.triggered_acc, rec.seconds);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  return log;
}

}  // namespace detail

/// Mini-batch SGD on cross-entropy.
template <typename T>
TrainedClassifier<T> train_standard(Classifier<T> model, const LabeledImageSet& data, const TrainSchedule& sched,
                                    const TrainHooks<T>& hooks = {}) {
  TrainLog log = detail::run_epochs<T>(model, nullptr, data, sched, hooks, "standard", false, {});
  return {std::move(model), std::move(log)};
}

/// Model with fixed trigger activation: each step forwards the concatenation
/// (x, x + tau) and minimizes CE(z_pos, y) + KL(softmax(z_neg) || uniform).
template <typename T>
TrainedTriggered<T> train_fixed_trigger(Classifier<T> model, Trigger<T> trig, const LabeledImageSet& data,
                                        const TrainSchedule& sched, const TrainHooks<T>& hooks = {},
                                        bool clip_triggered = false) {
  if (trig.mode != TriggerMode::kFixed) throw ContractError("train_fixed_trigger: trigger must be fixed");
  if (!(trig.eps_t > 0)) throw ConfigError("train_fixed_trigger: eps_t must be positive");
  TrainLog log = detail::run_epochs<T>(model, &trig, data, sched, hooks, "fixed_trigger", clip_triggered, {});
  return {TriggeredModel<T>{std::move(model), std::move(trig), clip_triggered}, std::move(log)};
}

/// Sum over batches of d CE(f(x + tau), y) / d tau with the model frozen
/// (inference mode), batches in dataset order.
template <typename T>
Tensor<T> accumulate_trigger_gradient(const Classifier<T>& model, const Trigger<T>& trig, const LabeledImageSet& data,
                                      std::size_t batch_size, bool clip_triggered = false) {
  Tensor<T> g(trig.shape());
  const std::size_t ps = g.size();
  for (const auto& idx : batch_iterator(data, batch_size, std::nullopt)) {
    Batch b = make_batch(data, idx);
    auto bundle = model.grad(apply_trigger(b.images.template cast<T>(), trig, clip_triggered), b.labels,
                             LossId::kCrossEntropy, Wrt::kInput);
    const Tensor<T>& gi = *bundle.input_grad;
    for (std::size_t n = 0; n < gi.shape().n; ++n)
      for (std::size_t i = 0; i < ps; ++i) g[i] += gi[n * ps + i];
  }
  return g;
}

/// Model with learnable trigger activation: per epoch a model pass as in the
/// fixed variant, then, for epochs 1..floor(0.6 T), one frozen-model pass that
/// accumulates the trigger gradient and takes a signed step of size alpha.
template <typename T>
TrainedTriggered<T> train_learnable_trigger(Classifier<T> model, Trigger<T> trig, const LabeledImageSet& data,
                                            const TrainSchedule& sched, const TrainHooks<T>& hooks = {},
                                            bool clip_triggered = false) {
  if (trig.mode != TriggerMode::kLearnable) throw ContractError("train_learnable_trigger: trigger must be learnable");
  if (!(trig.step_alpha > 0)) throw ConfigError("train_learnable_trigger: step_alpha must be positive");
  const std::size_t update_epochs = std::size_t(std::floor(0.6 * double(sched.epochs)));
  auto update = [&](std::size_t e) {
    if (e + 1 > update_epochs) return false;
    trig = update_learnable_trigger(trig, accumulate_trigger_gradient(model, trig, data, sched.batch_size, clip_triggered));
    return true;
  };
  TrainLog log = detail::run_epochs<T>(model, &trig, data, sched, hooks, "learnable_trigger", clip_triggered, {}, update);
  return {TriggeredModel<T>{std::move(model), std::move(trig), clip_triggered}, std::move(log)};
}

/// PGD adversarial training: every batch is replaced by PGD examples crafted
/// against the current model (inference mode) before the CE step.
template <typename T>
TrainedClassifier<T> train_adversarial_pgd(Classifier<T> model, const LabeledImageSet& data,
                                           const TrainSchedule& sched, double eps, std::size_t attack_steps,
                                           double attack_step = 2.0 / 255.0, const TrainHooks<T>& hooks = {}) {
  if (!(eps >= 0)) throw ConfigError("adversarial training eps must be >= 0");
  AttackConfig cfg;
  cfg.method = AttackMethod::kPgd;
  cfg.eps = eps;
  cfg.attack_step = attack_step;
  cfg.iterations = std::max<std::size_t>(1, attack_steps);
  std::uint64_t batch_counter = 0;
  detail::Perturb<T> perturb = [&](const Tensor<T>& x, std::span<const std::int32_t> y) {
    AttackConfig c = cfg;
    c.seed = Rng::derive(sched.seed, 0xa700 + batch_counter++).next_u64();
    return x + run_attack(model, x, y, c);
  };
  TrainLog log = detail::run_epochs<T>(model, nullptr, data, sched, hooks, "adversarial_pgd", false, perturb);
  return {std::move(model), std::move(log)};
}

}  // namespace trigact

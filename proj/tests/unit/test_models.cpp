#include <gtest/gtest.h>

#include "helpers.hpp"
#include "trigact/models.hpp"
#include "trigact/optim.hpp"

using namespace trigact;
using trigact::testing::random_images;
using trigact::testing::random_labels;
using trigact::testing::rel_err;

namespace {

struct GradCase {
  std::string arch;
  LossId loss;
  Mode mode;
};

std::vector<GradCase> all_cases() {
  std::vector<GradCase> out;
  for (const auto& base : registered_architectures())
    for (const std::string& arch : {base, base + "_smooth"})
      for (LossId loss : {LossId::kCrossEntropy, LossId::kKldToUniform, LossId::kTotalTriggerLoss})
        for (Mode mode : {Mode::kInference, Mode::kTrain}) out.push_back({arch, loss, mode});
  return out;
}

std::string case_name(const ::testing::TestParamInfo<GradCase>& info) {
  const char* loss = info.param.loss == LossId::kCrossEntropy   ? "ce"
                     : info.param.loss == LossId::kKldToUniform ? "kl"
                                                                : "trigger";
  return info.param.arch + "_" + loss + (info.param.mode == Mode::kTrain ? "_train" : "_eval");
}

class GradientCheck : public ::testing::TestWithParam<GradCase> {};

// Analytic gradients against finite differences of the forward pass: a
// fourth-order stencil for smooth nets, a small central step for
// piecewise-linear ones, which may still straddle a kink.
TEST_P(GradientCheck, MatchesFiniteDifferences) {
  const auto& c = GetParam();
  const bool smooth = c.arch.ends_with("_smooth");
  const double tol = smooth ? 1e-5 : 1e-3;
  const double h = smooth ? 1e-3 : 1e-6;
  auto model = build_model<double>(c.arch, 10, 7);
  auto ref = model;
  const Shape s{3, 3, 16, 16};
  const Tensor<double> x = random_images<double>(s, 1);
  const auto y = random_labels(3, 10, 2);
  const Tensor<double> trig = random_images<double>({1, 3, 16, 16}, 3, -0.03, 0.03);
  const bool with_trigger = c.loss == LossId::kTotalTriggerLoss;

  const auto g = model.grad(x, y, c.loss, Wrt::kBoth, c.mode, with_trigger ? &trig : nullptr);
  auto loss_at = [&](const Tensor<double>& xi) {
    return ref.grad(xi, y, c.loss, Wrt::kInput, c.mode, with_trigger ? &trig : nullptr).loss_value;
  };
  // f is evaluated at v + k h for the stencil offsets k.
  auto derivative = [&](auto&& f) {
    if (!smooth) return (f(h) - f(-h)) / (2 * h);
    return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
  };

  Rng rng(11);
  std::size_t bad = 0;
  for (int k = 0; k < 20; ++k) {
    const std::size_t i = rng.below(x.size());
    const double fd = derivative([&](double d) {
      Tensor<double> xi = x;
      xi[i] += d;
      return loss_at(xi);
    });
    const double err = rel_err((*g.input_grad)[i], fd, 1e-6);
    bad += err > tol;
    EXPECT_LE(err, smooth ? tol : 1.0) << "input coord " << i << " analytic " << (*g.input_grad)[i] << " fd " << fd;
  }
  auto params = ref.parameters();
  for (int k = 0; k < 20; ++k) {
    const std::size_t p = rng.below(params.size());
    const std::size_t i = rng.below(params[p]->value.size());
    const double orig = params[p]->value[i];
    const double fd = derivative([&](double d) {
      params[p]->value[i] = orig + d;
      const double v = loss_at(x);
      params[p]->value[i] = orig;
      return v;
    });
    const double an = (*g.param_grads)[p][i];
    const double err = rel_err(an, fd, 1e-6);
    bad += err > tol;
    EXPECT_LE(err, smooth ? tol : 1.0) << params[p]->name << "[" << i << "] analytic " << an << " fd " << fd;
  }
  // ReLU/max-pool: allow at most one coordinate on a kink out of 40.
  EXPECT_LE(bad, smooth ? 0u : 1u);
}

INSTANTIATE_TEST_SUITE_P(AllArchitectures, GradientCheck, ::testing::ValuesIn(all_cases()), case_name);

}  // namespace

TEST(Models, UnknownArchitectureIsConfigError) {
  EXPECT_THROW(build_model<float>("resnet152", 10, 0), ConfigError);
  EXPECT_THROW(build_model<float>("tiny_conv", 1, 0), ConfigError);
  EXPECT_THROW(build_model<float>("tiny_conv", 10, 0, {1, 3, 15, 15}), ConfigError);
}

TEST(Models, ShapeMismatchIsContractError) {
  auto m = build_model<float>("tiny_conv", 10, 0);
  EXPECT_THROW(m.forward_logits(Tensor<float>({2, 1, 16, 16})), ContractError);
  EXPECT_THROW(m.forward_logits(Tensor<float>({0, 3, 16, 16})), ContractError);
}

TEST(Models, InitializationIsSeeded) {
  auto a = build_model<float>("mid_conv", 10, 5), b = build_model<float>("mid_conv", 10, 5),
       c = build_model<float>("mid_conv", 10, 6);
  const auto x = random_images<float>({4, 3, 16, 16}, 9);
  EXPECT_EQ(a.forward_logits(x), b.forward_logits(x));
  EXPECT_FALSE(a.forward_logits(x) == c.forward_logits(x));
}

TEST(Models, CastPreservesFunction) {
  for (const auto& arch : registered_architectures()) {
    auto m = build_model<float>(arch, 10, 3);
    auto md = m.cast<double>();
    const auto x = random_images<float>({2, 3, 16, 16}, 4);
    const auto zf = m.forward_logits(x);
    const auto zd = md.forward_logits(x.cast<double>());
    for (std::size_t i = 0; i < zf.size(); ++i) EXPECT_NEAR(zf[i], zd[i], 1e-4) << arch;
  }
}

TEST(Models, InferenceIsBatchInvariant) {
  auto m = build_model<float>("res_like", 10, 1);
  const auto x = random_images<float>({7, 3, 16, 16}, 2);
  const auto full = m.forward_logits(x);
  for (std::size_t i = 0; i < 7; ++i) {
    const auto one = m.forward_logits(slice_batch(x, i, 1));
    for (std::size_t j = 0; j < 10; ++j) EXPECT_NEAR(one[j], full[i * 10 + j], 1e-5);
  }
  EXPECT_EQ(predict(m, x, 3), predict(m, x, 500));
}

TEST(Models, TriggerLossInputGradientIsSumOfBothBranches) {
  auto m = build_model<double>("tiny_conv_smooth", 10, 2);
  const auto x = random_images<double>({2, 3, 16, 16}, 5);
  const auto y = random_labels(2, 10, 6);
  auto trig = random_images<double>({1, 3, 16, 16}, 7, -0.03, 0.03);
  // Inference mode: the two branches are independent, so the concatenated
  // gradient equals CE(x+tau) + KL(x) gradients computed separately.
  auto joint = m.grad(x, y, LossId::kTotalTriggerLoss, Wrt::kInput, Mode::kInference, &trig);
  Tensor<double> xt = x;
  Classifier<double>::add_broadcast(xt, trig);
  auto ce = m.grad(xt, y, LossId::kCrossEntropy, Wrt::kInput);
  auto kl = m.grad(x, y, LossId::kKldToUniform, Wrt::kInput);
  EXPECT_NEAR(joint.loss_value, ce.loss_value + kl.loss_value, 1e-12);
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_NEAR((*joint.input_grad)[i], (*ce.input_grad)[i] + (*kl.input_grad)[i], 1e-12);
}

TEST(Optim, CosineScheduleValues) {
  EXPECT_DOUBLE_EQ(cosine_lr(0.1, 0, 60), 0.1);
  EXPECT_NEAR(cosine_lr(0.1, 30, 60), 0.05, 1e-15);
  EXPECT_NEAR(cosine_lr(0.1, 60, 60), 0.0, 1e-15);
  for (std::size_t e = 1; e < 60; ++e) EXPECT_LT(cosine_lr(0.1, e, 60), cosine_lr(0.1, e - 1, 60));
}

TEST(Optim, SgdMatchesHandComputation) {
  auto m = build_model<double>("mlp", 10, 1);
  auto params = m.parameters();
  std::vector<Tensor<double>> g;
  for (auto* p : params) g.emplace_back(p->value.shape(), 0.5);
  const double p0 = params[0]->value[0];
  Sgd<double> opt(0.9, 0.01);
  opt.step(m, g, 0.1);
  const double b1 = 0.5 + 0.01 * p0, p1 = p0 - 0.1 * b1;
  EXPECT_NEAR(params[0]->value[0], p1, 1e-15);
  opt.step(m, g, 0.05);
  const double b2 = 0.9 * b1 + 0.5 + 0.01 * p1;
  EXPECT_NEAR(params[0]->value[0], p1 - 0.05 * b2, 1e-15);
}

#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "linear_oracle.hpp"
#include "trigact/attacks.hpp"
#include "trigact/defenses.hpp"
#include "trigact/models.hpp"

using namespace trigact;
using trigact::testing::random_images;
using trigact::testing::random_labels;

namespace {

namespace linear_oracle = trigact::testing::linear_oracle;
using linear_oracle::LinearBinary;

struct LinearFixture {
  LinearBinary model;
  Tensor<double> x;
  std::vector<std::int32_t> y;
};

LinearFixture linear_fixture() {
  LinearFixture f{{}, random_images<double>({6, 1, 4, 4}, 3), random_labels(6, 2, 4)};
  Rng r(9);
  for (int i = 0; i < 16; ++i) f.model.w.push_back(r.uniform(-1, 1));
  return f;
}

void expect_in_box(const Tensor<double>& d, const Tensor<double>& x, double eps) {
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_LE(std::abs(d[i]), eps + 1e-15);
    EXPECT_GE(x[i] + d[i], 0.0);
    EXPECT_LE(x[i] + d[i], 1.0);
  }
}

}  // namespace

TEST(Attacks, IterativeMethodsReachLinearOptimum) {
  auto f = linear_fixture();
  const double eps = 8.0 / 255.0;
  const auto want = linear_oracle::optimal_delta(f.model, f.x, f.y, eps);
  for (auto method : {AttackMethod::kFgsm, AttackMethod::kIfgsm, AttackMethod::kPgd, AttackMethod::kMifgsm}) {
    AttackConfig cfg;
    cfg.method = method;
    cfg.eps = eps;
    cfg.attack_step = 2.0 / 255.0;
    cfg.iterations = 10;
    cfg.seed = 5;
    const auto d = run_attack(f.model, f.x, f.y, cfg);
    for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(d[i], want[i], 1e-12) << attack_method_name(method);
  }
}

TEST(Attacks, LinearOptimumLowersAccuracy) {
  auto f = linear_fixture();
  AttackConfig cfg;
  cfg.eps = 0.3;
  cfg.iterations = 20;
  cfg.attack_step = 0.05;
  const auto d = run_attack(f.model, f.x, f.y, cfg);
  const double before = accuracy(predict_labels(f.model, f.x), f.y);
  EXPECT_LE(1.0 - attack_success_rate(f.model, f.x, f.y, d), before);
}

TEST(Attacks, EveryIterateIsFeasible) {
  auto f = linear_fixture();
  for (auto method : {AttackMethod::kIfgsm, AttackMethod::kPgd, AttackMethod::kMifgsm, AttackMethod::kDifgsm}) {
    AttackConfig cfg;
    cfg.method = method;
    cfg.eps = 0.2;
    cfg.attack_step = 0.07;
    cfg.iterations = 8;
    cfg.seed = 11;
    std::size_t seen = 0;
    AttackObserver<double> obs = [&](std::size_t t, const Tensor<double>& d) {
      EXPECT_EQ(t, ++seen);
      expect_in_box(d, f.x, 0.2);
    };
    run_attack(f.model, f.x, f.y, cfg, &obs);
    EXPECT_EQ(seen, 8u);
  }
}

TEST(Attacks, ClipKeepsFloatSumsInsideRange) {
  Tensor<float> x({1, 1, 1, 4});
  x[0] = 0.99999994f;
  x[1] = 1e-8f;
  x[2] = 0.5f;
  x[3] = 0.7f;
  Tensor<float> d({1, 1, 1, 4}, 0.3f);
  d[1] = -0.3f;
  clip_perturbation_inplace(d, x, 0.1);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_LE(x[i] + d[i], 1.0f);
    EXPECT_GE(x[i] + d[i], 0.0f);
    EXPECT_LE(std::abs(d[i]), 0.1f);
  }
  EXPECT_FLOAT_EQ(d[2], 0.1f);
}

TEST(Attacks, MomentumZeroEqualsIfgsm) {
  auto f = linear_fixture();
  AttackConfig a;
  a.method = AttackMethod::kIfgsm;
  a.eps = 0.1;
  a.attack_step = 0.013;
  a.iterations = 5;
  AttackConfig b = a;
  b.method = AttackMethod::kMifgsm;
  b.momentum_mu = 0.0;
  EXPECT_EQ(run_attack(f.model, f.x, f.y, a), run_attack(f.model, f.x, f.y, b));
}

TEST(Attacks, DiversityWithZeroProbabilityEqualsIfgsm) {
  const auto m = build_model<double>("tiny_conv", 10, 1);
  const auto x = random_images<double>({3, 3, 16, 16}, 2);
  const auto y = random_labels(3, 10, 3);
  AttackConfig a;
  a.method = AttackMethod::kIfgsm;
  a.iterations = 3;
  AttackConfig b = a;
  b.method = AttackMethod::kDifgsm;
  b.di_probability = 0.0;
  EXPECT_EQ(run_attack(m, x, y, a), run_attack(m, x, y, b));
}

TEST(Attacks, ZeroBudgetIsZeroPerturbation) {
  auto f = linear_fixture();
  AttackConfig cfg;
  cfg.eps = 0;
  const auto d = run_attack(f.model, f.x, f.y, cfg);
  for (double v : d.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(f.model.gradient_calls, 0u);
}

TEST(Attacks, PgdRandomStartIsSeeded) {
  const auto m = build_model<double>("tiny_conv", 10, 1);
  const auto x = random_images<double>({2, 3, 16, 16}, 2);
  const auto y = random_labels(2, 10, 3);
  AttackConfig cfg;
  cfg.iterations = 1;
  cfg.seed = 1;
  const auto a = run_attack(m, x, y, cfg), b = run_attack(m, x, y, cfg);
  cfg.seed = 2;
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == run_attack(m, x, y, cfg));
}

TEST(Attacks, ChunkingIsDeterministic) {
  auto f = linear_fixture();
  AttackConfig cfg;
  cfg.seed = 4;
  EXPECT_EQ(run_attack_chunked(f.model, f.x, f.y, cfg, 4), run_attack_chunked(f.model, f.x, f.y, cfg, 4));
}

TEST(Attacks, DiversityGradientUsesAdjoint) {
  // <A x, v> = <x, A^T v> for the resize-and-pad map.
  const auto m = resize_pad_map(16, 16, 17, 17, 18, 18, 1, 0);
  const auto x = random_images<double>({1, 1, 16, 16}, 1), v = random_images<double>({1, 1, 16, 16}, 2);
  const auto ax = apply_separable(x, m), atv = apply_separable(v, m, true);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    lhs += ax[i] * v[i];
    rhs += x[i] * atv[i];
  }
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Attacks, InvalidConfigIsRejected) {
  AttackConfig cfg;
  cfg.iterations = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.eps = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.di_probability = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_attack_method("cw"), ConfigError);
}

namespace {

// 6x6 image with pixel (r, c) = ((6 r + c) * 7 mod 11) / 10.
Tensor<double> pattern6() {
  Tensor<double> x({1, 1, 6, 6});
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 6; ++c) x[r * 6 + c] = double(((6 * r + c) * 7) % 11) / 10.0;
  return x;
}

}  // namespace

TEST(Defenses, GaussianMatchesScipyReflect) {
  // scipy.ndimage.gaussian_filter(img, sigma=1, mode="reflect", truncate=3)
  const double want[36] = {
      0.4010958671753796,  0.46008865296002005, 0.5301992853895201,  0.6036615601812079,  0.5016046275198184,
      0.32501067883951984, 0.5329197450919805,  0.5094823543296008,  0.5310617360627135,  0.5571035834054114,
      0.4668660819413396,  0.3669522317606332,  0.5562893430036011,  0.5299070392758433,  0.5536076467746497,
      0.5203182924540293,  0.4573283172245198,  0.48046750495218843, 0.49052385848646307, 0.5223102458043156,
      0.5450939494960925,  0.4811713727104024,  0.46090169884467524, 0.5329218841030268,  0.4396450965857559,
      0.5297636826269969,  0.5118717647539139,  0.4415665021420153,  0.47332805779108333, 0.5137931703101734,
      0.389087286101478,   0.5093410863752121,  0.4629965140106373,  0.39218894574921404, 0.45343216210819254,
      0.46609817365837325};
  const auto out = gaussian_filter(pattern6(), 1.0);
  for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(out[i], want[i], 1e-12) << i;
}

TEST(Defenses, GaussianKernelIsNormalizedAndConstantsAreFixed) {
  for (double s : {0.3, 1.0, 2.5}) {
    const auto k = gaussian_kernel(s);
    EXPECT_EQ(k.size(), 2 * std::size_t(std::ceil(3 * s)) + 1);
    double sum = 0;
    for (double v : k) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-15);
  }
  Tensor<double> c({2, 3, 16, 16}, 0.37);
  const auto blurred = gaussian_filter(c, 2.0);
  for (double v : blurred.values()) EXPECT_NEAR(v, 0.37, 1e-14);
}

TEST(Defenses, BilinearMatchesTorchInterpolate) {
  // torch.nn.functional.interpolate(x, size, mode="bilinear", align_corners=False)
  const double up[64] = {0.0,    0.4375,    0.55,      0.3875,    0.9125,    0.75,     0.45,      0.2,
                         0.5625, 0.5703125, 0.425,     0.2625,    0.7875,    0.625,    0.325,     0.075,
                         0.825,  0.575,     0.4296875, 0.4734375, 0.6890625, 0.475,    0.3296875, 0.3375,
                         0.675,  0.425,     0.5375,    0.925,     0.625,     0.325,    0.4375,    0.875,
                         0.525,  0.275,     0.3875,    0.775,     0.475,     0.175,    0.2875,    0.725,
                         0.375,  0.5546875, 0.6671875, 0.625,     0.325,     0.4546875, 0.5671875, 0.575,
                         0.225,  0.6625,    0.775,     0.475,     0.175,     0.5625,   0.675,     0.425,
                         0.1,    0.5375,    0.65,      0.35,      0.05,      0.4375,   0.55,      0.3};
  const double down[16] = {0.33125, 0.35,    0.85,    0.25,    0.65,  0.66875, 0.55,  0.56875,
                           0.41875, 0.64375, 0.31875, 0.54375, 0.325, 0.55,    0.225, 0.45};
  const auto x = pattern6();
  const auto u = apply_separable(x, SeparableMap{bilinear_matrix(6, 8), bilinear_matrix(6, 8)});
  for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(u[i], up[i], 1e-12) << i;
  const auto d = apply_separable(x, SeparableMap{bilinear_matrix(6, 4), bilinear_matrix(6, 4)});
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(d[i], down[i], 1e-12) << i;
}

TEST(Defenses, BitDepthReductionLevels) {
  Tensor<double> x({1, 1, 1, 6});
  const double in[6] = {0.0, 0.16, 0.17, 0.5, 0.8, 1.0};
  std::copy(in, in + 6, x.data());
  const auto y = bit_depth_reduce(x, 2);
  const double want[6] = {0.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(y[i], want[i], 1e-15) << i;
  // Idempotent, and d = 8 keeps 8-bit images unchanged.
  EXPECT_EQ(bit_depth_reduce(y, 2), y);
  auto q = random_images<double>({1, 3, 4, 4}, 1);
  for (auto& v : q.values()) v = std::round(v * 255) / 255;
  const auto q8 = bit_depth_reduce(q, 8);
  for (std::size_t i = 0; i < q.size(); ++i) EXPECT_NEAR(q8[i], q[i], 1e-15);
  EXPECT_THROW(bit_depth_reduce(q, 0), ConfigError);
}

TEST(Defenses, ResizeAndPadIsSeededAndIdentityAtScaleOne) {
  const auto x = random_images<double>({2, 3, 16, 16}, 1);
  EXPECT_EQ(resize_and_pad(x, 1.0, 3), x);
  const auto a = resize_and_pad(x, 1.3, 3), b = resize_and_pad(x, 1.3, 3);
  EXPECT_EQ(a, b);
  for (double v : a.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  bool differs = false;
  for (std::uint64_t s = 0; s < 8 && !differs; ++s) differs = !(resize_and_pad(x, 1.3, s) == a);
  EXPECT_TRUE(differs);
  EXPECT_THROW(resize_and_pad(x, 0.9, 1), ConfigError);
}

TEST(Defenses, NoneIsIdentityAndKindsParse) {
  const auto x = random_images<double>({1, 3, 16, 16}, 1);
  EXPECT_EQ(preprocess(x, PreprocessorConfig{}), x);
  for (const char* k : {"none", "bdr", "gaussian", "rp"}) EXPECT_STREQ(defense_kind_name(parse_defense_kind(k)), k);
  EXPECT_THROW(parse_defense_kind("jpeg"), ConfigError);
}

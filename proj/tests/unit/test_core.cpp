#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "trigact/io.hpp"
#include "trigact/losses.hpp"
#include "trigact/rng.hpp"
#include "trigact/tensor.hpp"

using namespace trigact;
using trigact::testing::random_images;
using trigact::testing::scratch_dir;

TEST(Tensor, GatherConcatSliceRoundTrip) {
  const auto x = random_images<float>({5, 2, 3, 3}, 1);
  const std::vector<std::size_t> idx = {4, 0, 2};
  const auto g = gather_rows(x, idx);
  ASSERT_EQ(g.shape().n, 3u);
  for (std::size_t k = 0; k < idx.size(); ++k)
    for (std::size_t i = 0; i < 18; ++i) EXPECT_EQ(g[k * 18 + i], x[idx[k] * 18 + i]);
  const auto c = concat_batch(slice_batch(x, 0, 2), slice_batch(x, 2, 3));
  EXPECT_EQ(c, x);
  EXPECT_THROW(slice_batch(x, 4, 2), ContractError);
  EXPECT_THROW(concat_batch(x, Tensor<float>({1, 1, 3, 3})), ContractError);
}

TEST(Tensor, SignAndNorm) {
  EXPECT_EQ(sign(0.0), 0.0);
  EXPECT_EQ(sign(-3.0f), -1.0f);
  EXPECT_EQ(sign(2.0), 1.0);
  const std::vector<double> v = {0.1, -0.7, 0.3};
  EXPECT_DOUBLE_EQ(linf_norm<double>(v), 0.7);
}

TEST(Rng, DerivedStreamsAreReproducibleAndDistinct) {
  Rng a = Rng::derive(5, 1), b = Rng::derive(5, 1), c = Rng::derive(5, 2);
  const auto xa = a.next_u64(), xb = b.next_u64(), xc = c.next_u64();
  EXPECT_EQ(xa, xb);
  EXPECT_NE(xa, xc);
}

TEST(Rng, PermutationIsAPermutation) {
  Rng r(3);
  auto p = r.permutation(100);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(p[i], i);
}

TEST(Rng, UniformAndBelowStayInRange) {
  Rng r(4);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform(-0.5, 0.25);
    EXPECT_GE(u, -0.5);
    EXPECT_LT(u, 0.25);
    EXPECT_LT(r.below(7), 7u);
    const auto b = r.between(3, 5);
    EXPECT_GE(b, 3);
    EXPECT_LE(b, 5);
  }
}

TEST(Losses, CrossEntropyOfEqualLogitsIsLogC) {
  Tensor<double> z({4, 10, 1, 1}, 0.3);
  const std::vector<std::int32_t> y = {0, 3, 9, 5};
  auto r = cross_entropy(z, y);
  EXPECT_NEAR(r.value, std::log(10.0), 1e-15);
  for (std::size_t i = 0; i < 4; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < 10; ++j) row += r.dlogits[i * 10 + j];
    EXPECT_NEAR(row, 0.0, 1e-16);
  }
}

TEST(Losses, KlToUniformIsZeroOnlyAtUniform) {
  Tensor<double> z({2, 10, 1, 1}, 1.5);
  EXPECT_NEAR(kld_to_uniform(z).value, 0.0, 1e-15);
  z[3] = 4.0;
  EXPECT_GT(kld_to_uniform(z).value, 0.0);
}

TEST(Losses, LossGradientsMatchFiniteDifferences) {
  const auto z = random_images<double>({3, 10, 1, 1}, 8, -2, 2);
  const std::vector<std::int32_t> y = {1, 7, 4};
  const auto ce = cross_entropy(z, y);
  const auto kl = kld_to_uniform(z);
  const double h = 1e-6;
  for (std::size_t i = 0; i < z.size(); ++i) {
    auto zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    EXPECT_NEAR(ce.dlogits[i], (cross_entropy(zp, y).value - cross_entropy(zm, y).value) / (2 * h), 1e-8);
    EXPECT_NEAR(kl.dlogits[i], (kld_to_uniform(zp).value - kld_to_uniform(zm).value) / (2 * h), 1e-8);
  }
}

TEST(Losses, PerSampleCrossEntropyAveragesToBatchLoss) {
  const auto z = random_images<double>({5, 10, 1, 1}, 9, -3, 3);
  const std::vector<std::int32_t> y = {0, 1, 2, 3, 4};
  const auto per = cross_entropy_per_sample(z, y);
  EXPECT_NEAR(std::accumulate(per.begin(), per.end(), 0.0) / 5.0, cross_entropy(z, y).value, 1e-14);
}

TEST(Losses, TriggerLossIsSumOfTerms) {
  const auto pos = random_images<double>({2, 10, 1, 1}, 1, -1, 1);
  const auto neg = random_images<double>({2, 10, 1, 1}, 2, -1, 1);
  const std::vector<std::int32_t> y = {3, 6};
  const auto t = total_trigger_loss(pos, neg, y, 10);
  EXPECT_NEAR(t.total, cross_entropy(pos, y).value + kld_to_uniform(neg).value, 1e-15);
  EXPECT_THROW(total_trigger_loss(pos, neg, y, 9), ContractError);
}

TEST(Losses, RejectsBadInput) {
  Tensor<double> z({1, 3, 1, 1});
  EXPECT_THROW(cross_entropy(z, std::vector<std::int32_t>{3}), ContractError);
  z[0] = std::nan("");
  EXPECT_THROW(cross_entropy(z, std::vector<std::int32_t>{0}), NumericError);
  EXPECT_THROW(parse_loss_id("hinge"), ConfigError);
}

TEST(Io, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex(std::string("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Io, ContainerRoundTripIsBitwise) {
  const auto dir = scratch_dir("container");
  Container c;
  const auto t = random_images<float>({2, 3, 4, 4}, 5);
  c.put_tensor("t", t);
  c.put_vector("v", std::vector<std::int32_t>{1, -2, 3});
  c.put_text("s", "hello");
  c.save(dir / "a.tac");
  const auto d = Container::load(dir / "a.tac");
  EXPECT_EQ(d.get_tensor<float>("t"), t);
  EXPECT_EQ(d.get_vector<std::int32_t>("v"), (std::vector<std::int32_t>{1, -2, 3}));
  EXPECT_EQ(d.get_text("s"), "hello");
  EXPECT_EQ(d.content_hash(), c.content_hash());
  d.save(dir / "b.tac");
  EXPECT_EQ(sha256_file(dir / "a.tac"), sha256_file(dir / "b.tac"));
  EXPECT_THROW(d.get_tensor<double>("t"), IngestionError);
  EXPECT_THROW(d.get_text("missing"), IngestionError);
}

TEST(Io, TruncatedContainerIsRejected) {
  const auto dir = scratch_dir("container_trunc");
  Container c;
  c.put_tensor("t", random_images<float>({2, 3, 4, 4}, 5));
  c.save(dir / "a.tac");
  std::filesystem::resize_file(dir / "a.tac", std::filesystem::file_size(dir / "a.tac") - 7);
  EXPECT_THROW(Container::load(dir / "a.tac"), IngestionError);
}

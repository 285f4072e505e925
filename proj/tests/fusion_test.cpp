// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "adafuse/autodiff/grad_check.hpp"
#include "adafuse/error.hpp"
#include "adafuse/fusion.hpp"

using namespace adafuse;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

BackboneConfig small_backbone(std::size_t d = 8, std::size_t layers = 2) {
  BackboneConfig c;
  c.vocab_size = 16;
  c.max_seq_len = 8;
  c.hidden_dim = d;
  c.num_layers = layers;
  c.num_heads = 2;
  c.ffn_dim = 2 * d;
  return c;
}

Tensor random_input(ad::Shape shape, std::uint64_t seed, double scale = 1.0) {
  Tensor x = Tensor::zeros(std::move(shape));
  Rng rng(seed);
  for (double& v : x.mutable_data()) v = rng.uniform(-scale, scale);
  return x;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

void perturb(const ad::ParamSet& ps, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto t : ps)
    for (double& v : t.mutable_data()) v += rng.uniform(-scale, scale);
}

std::vector<AdapterParams> members(const BackboneConfig& b, std::size_t n, AdapterConfig c,
                                   bool randomize = true) {
  std::vector<AdapterParams> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(make_adapter(b, c, 100 + i, "task" + std::to_string(i)));
    if (randomize) perturb(out.back().params(), 7 + i, 0.4);
  }
  return out;
}

void set_identity(Tensor v) {
  const std::size_t d = v.shape()[0];
  auto data = v.mutable_data();
  for (std::size_t i = 0; i < d * d; ++i) data[i] = (i % (d + 1) == 0) ? 1.0 : 0.0;
}

}  // namespace

TEST(FusionInit, ValueStartsNearIdentity) {
  BackboneConfig b = small_backbone(64, 2);
  auto ms = members(b, 2, AdapterConfig::pfeiffer(16), false);
  FusionParams psi = fusion_init(b, ms, 3, "task0");
  EXPECT_EQ(psi.params().scalar_count(), 3u * 2 * 64 * 64);
  for (const auto& v : psi.value) {
    double sq = 0.0;
    for (std::size_t i = 0; i < 64; ++i)
      for (std::size_t j = 0; j < 64; ++j) {
        const double e = v[i * 64 + j] - (i == j ? 1.0 : 0.0);
        sq += e * e;
        if (i == j) EXPECT_NEAR(v[i * 64 + j], 1.0, 1e-6);
      }
    EXPECT_NEAR(std::sqrt(sq), 1e-6, 1e-12);
  }
  double qsq = 0.0;
  for (double x : psi.query[0].data()) qsq += x * x;
  EXPECT_NEAR(std::sqrt(qsq / 4096.0), 0.02, 0.002);
}

TEST(FusionInit, SameSeedBitIdentical) {
  BackboneConfig b = small_backbone();
  auto ms = members(b, 3, AdapterConfig::pfeiffer(2), false);
  FusionParams a = fusion_init(b, ms, 5), c = fusion_init(b, ms, 5);
  for (std::size_t i = 0; i < a.params().size(); ++i)
    EXPECT_TRUE(bit_equal(a.params().tensors()[i], c.params().tensors()[i]));
  EXPECT_EQ(a.members, (std::vector<std::string>{"task0", "task1", "task2"}));
}

TEST(FusionInit, RejectsIncompatibleMembers) {
  BackboneConfig b = small_backbone();
  std::vector<AdapterParams> none;
  EXPECT_THROW(fusion_init(b, none, 1), UsageError);
  auto ms = members(b, 1, AdapterConfig::pfeiffer(2), false);
  ms.push_back(make_adapter(small_backbone(8, 3), AdapterConfig::pfeiffer(2), 1, "other"));
  EXPECT_THROW(fusion_init(b, ms, 1), CompatibilityError);
  auto mixed = members(b, 1, AdapterConfig::pfeiffer(2), false);
  mixed.push_back(make_adapter(b, AdapterConfig::houlsby(2), 1, "h"));
  EXPECT_THROW(fusion_init(b, mixed, 1), CompatibilityError);
}

TEST(FusionForward, HandComputedTwoMemberCase) {
  BackboneConfig b = small_backbone(2, 1);
  b.num_heads = 1;
  auto ms = members(b, 2, AdapterConfig::pfeiffer(2), false);
  FusionParams psi = fusion_init(b, ms, 1);
  // q = h Q = [1, 0]; K = I so keys equal z: k1 = z1 K, k2 = z2 K.
  // Choose z1 = [1, 1], z2 = [3, 1] with K mapping them to [1, 0] and [0, 1].
  auto Q = psi.query[0].mutable_data();
  Q[0] = 1, Q[1] = 0, Q[2] = 0, Q[3] = 0;
  // Solve [1 1; 3 1] K = I: K = [-0.5 0.5; 1.5 -0.5].
  auto K = psi.key[0].mutable_data();
  K[0] = -0.5, K[1] = 0.5, K[2] = 1.5, K[3] = -0.5;
  set_identity(psi.value[0]);
  Tensor h = Tensor::from({1, 1, 2}, {1.0, 0.0});
  std::vector<Tensor> z{Tensor::from({1, 1, 2}, {1.0, 1.0}), Tensor::from({1, 1, 2}, {3.0, 1.0})};
  FusionOutput out = fusion_forward(psi, h, z, 0);
  // Scalar oracle.
  const double e1 = std::exp(1.0), e0 = 1.0;
  const double s1 = e1 / (e1 + e0), s2 = e0 / (e1 + e0);
  EXPECT_NEAR(out.weights[0], s1, 1e-12);
  EXPECT_NEAR(out.weights[1], s2, 1e-12);
  EXPECT_NEAR(out.weights[0], 0.73106, 5e-6);
  EXPECT_NEAR(out.output[0], s1 * 1.0 + s2 * 3.0, 1e-12);
  EXPECT_NEAR(out.output[0], 1.53788, 5e-6);
  EXPECT_NEAR(out.output[1], 1.0, 1e-12);
}

TEST(FusionForward, SingleMemberIdentityValueIsExact) {
  BackboneConfig b = small_backbone();
  auto ms = members(b, 1, AdapterConfig::pfeiffer(2));
  FusionParams psi = fusion_init(b, ms, 1);
  perturb(psi.params(), 3, 1.0);
  set_identity(psi.value[1]);
  Tensor h = random_input({2, 3, 8}, 1), z = random_input({2, 3, 8}, 2);
  std::vector<Tensor> zs{z};
  FusionOutput out = fusion_forward(psi, h, zs, 1);
  for (double s : out.weights.data()) EXPECT_EQ(s, 1.0);
  EXPECT_TRUE(bit_equal(out.output, z));
}

TEST(FusionForward, IdenticalMembersGiveValueProjection) {
  BackboneConfig b = small_backbone();
  auto ms = members(b, 3, AdapterConfig::pfeiffer(2));
  FusionParams psi = fusion_init(b, ms, 1);
  perturb(psi.params(), 4, 1.0);
  Tensor h = random_input({1, 4, 8}, 1), z = random_input({1, 4, 8}, 2);
  std::vector<Tensor> zs{z, z, z};
  FusionOutput out = fusion_forward(psi, h, zs, 0);
  Tensor zv = ad::matmul(z, psi.value[0]);
  for (std::size_t i = 0; i < zv.numel(); ++i) EXPECT_NEAR(out.output[i], zv[i], 1e-12);
}

TEST(FusionForward, ConvexHullWhenValueIsIdentity) {
  BackboneConfig b = small_backbone();
  auto ms = members(b, 3, AdapterConfig::pfeiffer(2));
  FusionParams psi = fusion_init(b, ms, 1);
  perturb(psi.params(), 5, 2.0);
  set_identity(psi.value[0]);
  Tensor h = random_input({2, 5, 8}, 1);
  std::vector<Tensor> zs{random_input({2, 5, 8}, 2), random_input({2, 5, 8}, 3),
                         random_input({2, 5, 8}, 4)};
  FusionOutput out = fusion_forward(psi, h, zs, 0);
  for (std::size_t i = 0; i < out.output.numel(); ++i) {
    const double lo = std::min({zs[0][i], zs[1][i], zs[2][i]});
    const double hi = std::max({zs[0][i], zs[1][i], zs[2][i]});
    EXPECT_GE(out.output[i], lo - 1e-12);
    EXPECT_LE(out.output[i], hi + 1e-12);
  }
  for (std::size_t p = 0; p < 10; ++p) {
    const double s = out.weights[3 * p] + out.weights[3 * p + 1] + out.weights[3 * p + 2];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(FusionForward, ErrorCases) {
  BackboneConfig b = small_backbone();
  auto ms = members(b, 2, AdapterConfig::pfeiffer(2));
  FusionParams psi = fusion_init(b, ms, 1);
  Tensor h = random_input({1, 2, 8}, 1);
  std::vector<Tensor> empty;
  EXPECT_THROW(fusion_forward(psi, h, empty, 0), UsageError);
  std::vector<Tensor> bad{h, random_input({1, 3, 8}, 2)};
  EXPECT_THROW(fusion_forward(psi, h, bad, 0), DimensionError);
  std::vector<Tensor> ok{h, h};
  EXPECT_THROW(fusion_forward(psi, h, ok, 2), UsageError);
}

TEST(FusionRegularizer, Values) {
  BackboneConfig b = small_backbone(4, 1);
  auto ms = members(b, 1, AdapterConfig::pfeiffer(2), false);
  FusionParams psi = fusion_init(b, ms, 1);
  set_identity(psi.value[0]);
  EXPECT_EQ(fusion_regularizer(psi, 0.01).item(), 0.0);
  // E with Frobenius norm 2.
  psi.value[0].mutable_data()[1] += 2.0;
  EXPECT_NEAR(fusion_regularizer(psi, 0.01).item(), 0.04, 1e-15);
  FusionParams plain = psi;
  plain.config.regularizer = FusionRegularizer::plain;
  EXPECT_NEAR(fusion_regularizer(plain, 0.5).item(), 0.5 * (4.0 + 4.0), 1e-15);
  EXPECT_THROW(fusion_regularizer(psi, -1.0), ConfigError);
}

TEST(FusionRegularizer, GradientIsTwoLambdaDeviation) {
  BackboneConfig b = small_backbone(4, 2);
  auto ms = members(b, 1, AdapterConfig::pfeiffer(2), false);
  FusionParams psi = fusion_init(b, ms, 1);
  perturb(psi.params(), 2, 0.5);
  ad::ParamSet vs;
  for (const auto& v : psi.value) vs.add(v);
  const double lambda = 0.3;
  auto report = ad::grad_check([&] { return fusion_regularizer(psi, lambda); }, vs,
                               {.tol = 1e-6});
  EXPECT_TRUE(report.passed) << report.summary();
  ad::backward(fusion_regularizer(psi, lambda));
  for (const auto& v : psi.value) {
    for (std::size_t i = 0; i < 16; ++i) {
      const double dev = v[i] - (i % 5 == 0 ? 1.0 : 0.0);
      EXPECT_NEAR(v.grad()[i], 2 * lambda * dev, 1e-12);
    }
  }
  for (const auto& q : psi.query) EXPECT_FALSE(q.has_grad());
}

TEST(FusionModel, GradientCheckAllTrainableTensors) {
  BackboneConfig b = small_backbone(8, 2);
  auto theta = BackboneParams::init(b, 1);
  perturb(theta.params(), 9, 0.3);
  auto ms = members(b, 3, AdapterConfig::pfeiffer(2));
  FusionParams psi = fusion_init(b, ms, 2);
  perturb(psi.params(), 10, 0.5);
  TokenBatch batch = TokenBatch::pack(std::vector<std::vector<int>>{{2, 5, 6, 7}, {2, 9, 4}});
  HookSet hooks(2);
  install_fusion(hooks, psi, ms);
  Tensor w = random_input({2, 4, 8}, 3);
  auto report = ad::grad_check(
      [&] { return ad::add(ad::sum(ad::mul(encoder_forward(theta, batch, &hooks).hidden, w)),
                           fusion_regularizer(psi, 0.1)); },
      psi.params());
  EXPECT_TRUE(report.passed) << report.summary();
}

TEST(FusionModel, SingleMemberWithIdentityValueEqualsAdapterModel) {
  BackboneConfig b = small_backbone(8, 2);
  auto theta = BackboneParams::init(b, 1);
  for (AdapterConfig c : {AdapterConfig::pfeiffer(2), AdapterConfig::houlsby(4)}) {
    auto ms = members(b, 1, c);
    FusionParams psi = fusion_init(b, ms, 2);
    for (const auto& v : psi.value) set_identity(v);
    HookSet fused(2), plain(2);
    install_fusion(fused, psi, ms);
    install_adapter(plain, ms[0]);
    TokenBatch batch = TokenBatch::pack(std::vector<std::vector<int>>{{2, 5, 6, 7}, {2, 9, 4}});
    ad::NoGradGuard g;
    EXPECT_TRUE(bit_equal(encoder_forward(theta, batch, &fused).hidden,
                          encoder_forward(theta, batch, &plain).hidden));
  }
}

TEST(FusionModel, DropLastLayerKeepsDefaultWiringThere) {
  BackboneConfig b = small_backbone(8, 2);
  auto ms = members(b, 2, AdapterConfig::pfeiffer(2));
  FusionConfig fc;
  fc.drop_last_layer = true;
  FusionParams psi = fusion_init(b, ms, 2, "t", fc);
  EXPECT_EQ(psi.active_layers(), 1u);
  HookSet hooks(2);
  install_fusion(hooks, psi, ms);
  EXPECT_NE(hooks.at(0, Tap::top), nullptr);
  EXPECT_EQ(hooks.at(1, Tap::top), nullptr);
}

TEST(FusionModel, MemberOrderMustMatch) {
  BackboneConfig b = small_backbone();
  auto ms = members(b, 2, AdapterConfig::pfeiffer(2));
  FusionParams psi = fusion_init(b, ms, 2);
  std::swap(ms[0], ms[1]);
  HookSet hooks(2);
  EXPECT_THROW(install_fusion(hooks, psi, ms), UsageError);
}

TEST(Trace, SingleMemberIsAllOnes) {
  BackboneConfig b = small_backbone();
  auto theta = BackboneParams::init(b, 1);
  auto ms = members(b, 1, AdapterConfig::pfeiffer(2));
  FusionParams psi = fusion_init(b, ms, 2);
  std::vector<std::vector<int>> seqs{{2, 5, 6}, {2, 7}, {2, 3, 4, 5, 6}};
  auto t = trace_activations(psi, theta, ms, seqs, 2);
  EXPECT_EQ(t.instance_count, 3u);
  for (const auto& row : t.layers) {
    ASSERT_EQ(row.size(), 1u);
    EXPECT_EQ(row[0], 1.0);
  }
}

TEST(Trace, RowsSumToOneAndPaddingIsIgnored) {
  BackboneConfig b = small_backbone();
  auto theta = BackboneParams::init(b, 1);
  auto ms = members(b, 3, AdapterConfig::houlsby(2));
  FusionParams psi = fusion_init(b, ms, 2);
  perturb(psi.params(), 1, 3.0);
  std::vector<std::vector<int>> seqs{{2, 5, 6}, {2, 7}, {2, 3, 4, 5, 6, 7, 8}};
  auto together = trace_activations(psi, theta, ms, seqs, 3);
  EXPECT_LT(together.max_row_sum_error, 1e-12);
  for (const auto& row : together.layers) {
    double s = 0;
    for (double v : row) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  // Batch size 1 means no padding at all; pooled means must agree.
  auto single = trace_activations(psi, theta, ms, seqs, 1);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t n = 0; n < 3; ++n) EXPECT_NEAR(together.layers[l][n], single.layers[l][n], 1e-12);
  EXPECT_THROW(trace_activations(psi, theta, ms, {}, 1), DataError);
}

TEST(Trace, FreshFusionOverIdenticalMembersIsUniform) {
  BackboneConfig b = small_backbone(64, 2);
  b.num_heads = 4;
  b.ffn_dim = 64;
  auto theta = BackboneParams::init(b, 1);
  AdapterParams one = make_adapter(b, AdapterConfig::pfeiffer(16), 3, "a");
  std::vector<AdapterParams> ms;
  for (const char* name : {"a", "b", "c"}) {
    AdapterParams copy = one.clone();
    copy.task = name;
    ms.push_back(copy);
  }
  FusionParams psi = fusion_init(b, ms, 4);
  std::vector<std::vector<int>> seqs;
  Rng rng(2);
  for (int i = 0; i < 64; ++i) {
    std::vector<int> s{kClsToken};
    for (int j = 0; j < 5; ++j) s.push_back(3 + static_cast<int>(rng.below(13)));
    seqs.push_back(s);
  }
  auto t = trace_activations(psi, theta, ms, seqs);
  for (const auto& row : t.layers)
    for (double v : row) EXPECT_NEAR(v, 1.0 / 3.0, 0.02);
}

TEST(Checkpoint, FusionRoundTrip) {
  BackboneConfig b = small_backbone();
  auto ms = members(b, 3, AdapterConfig::pfeiffer(2));
  FusionParams psi = fusion_init(b, ms, 2, "task1");
  perturb(psi.params(), 1, 0.1);
  fs::path path = fs::temp_directory_path() / "adafuse_fusion_test" / "psi.adpt";
  serialize_fusion(psi, Json{{"seed", 2}}, path);
  Json meta;
  FusionParams back = deserialize_fusion(path, b, &meta);
  EXPECT_EQ(back.members, psi.members);
  EXPECT_EQ(back.target, "task1");
  EXPECT_EQ(meta["seed"], 2);
  for (std::size_t i = 0; i < psi.params().size(); ++i)
    EXPECT_TRUE(bit_equal(back.params().tensors()[i], psi.params().tensors()[i]));
  EXPECT_THROW(deserialize_fusion(path, small_backbone(8, 3)), CompatibilityError);
}

// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <map>

#include "adafuse/autodiff/grad_check.hpp"
#include "adafuse/autodiff/optim.hpp"
#include "adafuse/backbone.hpp"
#include "adafuse/error.hpp"

using namespace adafuse;
using ad::Tensor;

namespace {

BackboneConfig tiny_config(std::size_t layers = 2, std::size_t d = 8, std::size_t heads = 2) {
  BackboneConfig c;
  c.vocab_size = 12;
  c.max_seq_len = 6;
  c.hidden_dim = d;
  c.num_layers = layers;
  c.num_heads = heads;
  c.ffn_dim = 2 * d;
  return c;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

bool params_bit_equal(const BackboneParams& a, const BackboneParams& b) {
  auto pa = a.params(), pb = b.params();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa.tensors()[i].name() != pb.tensors()[i].name()) return false;
    if (!bit_equal(pa.tensors()[i], pb.tensors()[i])) return false;
  }
  return true;
}

// Counts the hook calls and otherwise keeps the default wiring.
class CountingHook : public TapHook {
 public:
  explicit CountingHook(std::size_t d) : d_(d) {}
  std::size_t hidden_dim() const override { return d_; }
  Tensor apply(const TapContext& ctx) const override {
    ++calls;
    return add_and_norm(ctx);
  }
  mutable int calls = 0;

 private:
  std::size_t d_;
};

}  // namespace

TEST(BackboneConfig, RejectsIndivisibleHeads) {
  BackboneConfig c = tiny_config();
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(BackboneConfig, FingerprintTracksStructure) {
  BackboneConfig a = tiny_config(), b = tiny_config();
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  b.num_layers = 3;
  EXPECT_NE(a.fingerprint(), b.fingerprint());
  b = tiny_config();
  b.dropout_rate = 0.1;  // not structural
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
}

TEST(BackboneConfig, JsonRoundTripAndUnknownKey) {
  BackboneConfig c = tiny_config();
  EXPECT_EQ(BackboneConfig::from_json(c.to_json()).fingerprint(), c.fingerprint());
  Json j = c.to_json();
  j["hiden_dim"] = 3;
  try {
    BackboneConfig::from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("$.backbone.hiden_dim"), std::string::npos);
  }
}

TEST(BackboneParams, StableDocumentedOrder) {
  auto p = BackboneParams::init(tiny_config(1), 3);
  auto names = p.params().names();
  const std::vector<std::string> expect{
      "embed.token",           "embed.position",        "embed.norm.gain",
      "embed.norm.bias",       "layer.0.attn.q.weight", "layer.0.attn.q.bias",
      "layer.0.attn.k.weight", "layer.0.attn.k.bias",   "layer.0.attn.v.weight",
      "layer.0.attn.v.bias",   "layer.0.attn.o.weight", "layer.0.attn.o.bias",
      "layer.0.attn_norm.gain", "layer.0.attn_norm.bias", "layer.0.ffn.in.weight",
      "layer.0.ffn.in.bias",   "layer.0.ffn.out.weight", "layer.0.ffn.out.bias",
      "layer.0.ffn_norm.gain", "layer.0.ffn_norm.bias"};
  EXPECT_EQ(names, expect);
}

TEST(BackboneParams, CloneIsDeepAndSameSeedIsIdentical) {
  auto a = BackboneParams::init(tiny_config(), 5);
  auto b = BackboneParams::init(tiny_config(), 5);
  EXPECT_TRUE(params_bit_equal(a, b));
  auto c = a.clone();
  c.layers[0].wq.mutable_data()[0] += 1.0;
  EXPECT_FALSE(params_bit_equal(a, c));
  EXPECT_TRUE(params_bit_equal(a, b));
}

TEST(Encoder, DuplicatedRowsGiveIdenticalOutputs) {
  auto p = BackboneParams::init(tiny_config(), 1);
  TokenBatch batch = TokenBatch::pack(std::vector<std::vector<int>>{{2, 5, 6, 7}, {2, 5, 6, 7}});
  ad::NoGradGuard g;
  Tensor h = encoder_forward(p, batch).hidden;
  const std::size_t n = 4 * 8;
  for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(h[i], h[n + i]);
}

TEST(Encoder, IdentityHooksReproduceHookFreeOutput) {
  auto p = BackboneParams::init(tiny_config(), 2);
  TokenBatch batch = TokenBatch::pack(std::vector<std::vector<int>>{{2, 5, 6, 7}, {2, 9, 3}});
  ad::NoGradGuard g;
  Tensor plain = encoder_forward(p, batch).hidden;
  HookSet hooks(2);
  auto identity = std::make_shared<IdentityHook>(8);
  auto counting = std::make_shared<CountingHook>(8);
  hooks.set(0, Tap::bottom, identity);
  hooks.set(0, Tap::top, counting);
  hooks.set(1, Tap::bottom, counting);
  hooks.set(1, Tap::top, identity);
  Tensor hooked = encoder_forward(p, batch, &hooks).hidden;
  EXPECT_TRUE(bit_equal(plain, hooked));
  EXPECT_EQ(counting->calls, 2);
}

TEST(Encoder, MismatchedHookDimIsConfigError) {
  auto p = BackboneParams::init(tiny_config(), 2);
  TokenBatch batch = TokenBatch::pack(std::vector<std::vector<int>>{{2, 5}});
  HookSet hooks(2);
  hooks.set(1, Tap::top, std::make_shared<IdentityHook>(16));
  EXPECT_THROW(encoder_forward(p, batch, &hooks), ConfigError);
}

TEST(Encoder, RejectsOutOfVocabularyAndOverlongInput) {
  auto p = BackboneParams::init(tiny_config(), 2);
  EXPECT_THROW(encoder_forward(p, TokenBatch::pack(std::vector<std::vector<int>>{{2, 12}})),
               DataError);
  EXPECT_THROW(
      encoder_forward(p, TokenBatch::pack(std::vector<std::vector<int>>{{2, 3, 3, 3, 3, 3, 3}})),
      DataError);
}

TEST(Encoder, TapsHaveBatchSeqHiddenShape) {
  auto p = BackboneParams::init(tiny_config(), 2);
  TokenBatch batch = TokenBatch::pack(std::vector<std::vector<int>>{{2, 5, 6}, {2, 9}});
  ad::NoGradGuard g;
  auto out = encoder_forward(p, batch);
  ASSERT_EQ(out.taps.size(), 2u);
  for (const auto& t : out.taps) {
    EXPECT_EQ(t.bottom.shape(), (ad::Shape{2, 3, 8}));
    EXPECT_EQ(t.top.shape(), (ad::Shape{2, 3, 8}));
  }
  EXPECT_TRUE(bit_equal(out.taps.back().top, out.hidden));
}

TEST(Encoder, PaddingDoesNotChangeValidPositions) {
  auto p = BackboneParams::init(tiny_config(), 4);
  ad::NoGradGuard g;
  Tensor alone = encoder_forward(p, TokenBatch::pack(std::vector<std::vector<int>>{{2, 5, 6}})).hidden;
  Tensor padded =
      encoder_forward(p, TokenBatch::pack(std::vector<std::vector<int>>{{2, 5, 6}, {2, 3, 4, 5, 6, 7}}))
          .hidden;
  // Row 0 is padded from 3 to 6 positions in the second batch.
  for (std::size_t pos = 0; pos < 3; ++pos)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(alone[pos * 8 + j], padded[pos * 8 + j]);
}

TEST(Encoder, EmbeddingGradientMatchesFiniteDifferences) {
  auto p = BackboneParams::init(tiny_config(2, 8, 2), 6);
  // Larger weights than the 0.02 init so every path carries signal.
  Rng rng(31);
  for (auto t : p.params()) {
    if (t.name().find("norm") == std::string::npos)
      for (double& v : t.mutable_data()) v = rng.uniform(-0.5, 0.5);
  }
  p.params().set_trainable(false);
  p.token_embedding.set_trainable(true);
  TokenBatch batch = TokenBatch::pack(std::vector<std::vector<int>>{{2, 5, 6, 7}, {2, 9, 4}});
  ad::ParamSet ps;
  ps.add(p.token_embedding);
  // One logit: coordinate 3 of position 1 of row 1.
  auto report = ad::grad_check(
      [&] {
        Tensor h = encoder_forward(p, batch).hidden;
        std::vector<std::size_t> row{1 * 4 + 1};
        return ad::select_last(ad::gather_rows(h, row), 3);
      },
      ps);
  EXPECT_TRUE(report.passed) << report.summary();
}

TEST(Mha, SinglePositionAttendsToItself) {
  auto p = BackboneParams::init(tiny_config(1), 7);
  TokenBatch batch = TokenBatch::pack(std::vector<std::vector<int>>{{4}});
  Tensor x = Tensor::zeros({1, 1, 8});
  Rng rng(1);
  for (double& v : x.mutable_data()) v = rng.uniform(-1, 1);
  Tensor probs;
  ad::NoGradGuard g;
  Tensor y = mha_forward(p.layers[0], x, batch, 2, 1e-5, &probs);
  for (double v : probs.data()) EXPECT_EQ(v, 1.0);
  const auto& L = p.layers[0];
  Tensor path = ad::linear(ad::linear(x, L.wv, L.bv), L.wo, L.bo);
  Tensor expect = ad::layer_norm(ad::add(path, x), L.attn_norm.gain, L.attn_norm.bias, 1e-5);
  EXPECT_TRUE(bit_equal(y, expect));
}

TEST(Mha, EqualKeysGiveUniformAttention) {
  auto p = BackboneParams::init(tiny_config(1), 7);
  // Zero key projection: every key equals the key bias.
  for (double& v : p.layers[0].wk.mutable_data()) v = 0.0;
  TokenBatch batch = TokenBatch::pack(std::vector<std::vector<int>>{{2, 5, 6, 7, 8}});
  Tensor x = Tensor::zeros({1, 5, 8});
  Rng rng(2);
  for (double& v : x.mutable_data()) v = rng.uniform(-1, 1);
  Tensor probs;
  ad::NoGradGuard g;
  mha_forward(p.layers[0], x, batch, 2, 1e-5, &probs);
  for (double v : probs.data()) EXPECT_NEAR(v, 0.2, 1e-12);
}

TEST(Mha, AttentionParamsPassGradientCheck) {
  auto p = BackboneParams::init(tiny_config(1, 8, 2), 8);
  Rng rng(3);
  const auto& L = p.layers[0];
  ad::ParamSet ps;
  for (auto t : {L.wq, L.bq, L.wk, L.bk, L.wv, L.bv, L.wo, L.bo, L.attn_norm.gain, L.attn_norm.bias}) {
    for (double& v : t.mutable_data()) v = rng.uniform(-1, 1);
    ps.add(t);
  }
  TokenBatch batch = TokenBatch::pack(std::vector<std::vector<int>>{{2, 5, 6}});
  Tensor x = Tensor::zeros({1, 3, 8}), w = Tensor::zeros({1, 3, 8});
  for (double& v : x.mutable_data()) v = rng.uniform(-1, 1);
  for (double& v : w.mutable_data()) v = rng.uniform(-1, 1);
  auto report = ad::grad_check(
      [&] { return ad::sum(ad::mul(mha_forward(L, x, batch, 2, 1e-5), w)); }, ps);
  EXPECT_TRUE(report.passed) << report.summary();
}

TEST(SetTrainable, FreezeAllLeavesParamsBitIdentical) {
  auto p = BackboneParams::init(tiny_config(), 9);
  auto before = p.clone();
  auto ps = p.params();
  ps.set_trainable(false);
  for (auto t : ps)
    for (double& g : t.mutable_grad()) g = 0.5;
  ad::AdamW opt({.lr = 0.1});
  opt.step(ps);
  EXPECT_TRUE(params_bit_equal(p, before));
}

TEST(SetTrainable, OnlyUnfrozenTensorsChange) {
  auto p = BackboneParams::init(tiny_config(), 9);
  auto before = p.clone();
  auto ps = p.params();
  ps.set_trainable(false);
  ps.set_trainable_if([](const std::string& n) { return n.rfind("layer.0.ffn.", 0) == 0; }, true);
  for (auto t : ps)
    for (double& g : t.mutable_grad()) g = 0.5;
  ad::AdamW opt({.lr = 0.1});
  opt.step(ps);
  auto bps = before.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const bool changed = !bit_equal(ps.tensors()[i], bps.tensors()[i]);
    EXPECT_EQ(changed, ps.tensors()[i].name().rfind("layer.0.ffn.", 0) == 0)
        << ps.tensors()[i].name();
  }
}

TEST(SetTrainable, UnknownNameIsUsageError) {
  auto p = BackboneParams::init(tiny_config(), 9);
  p.params().set_trainable(false);
  EXPECT_THROW(p.params().set_trainable({"layer.0.ffn.in.weight", "layer.7.nope"}, true), UsageError);
  EXPECT_FALSE(p.layers[0].ffn_in_w.trainable());
}

namespace {

// Deterministic bigram chain over tokens [3, 3 + k): next = 3 + (5 * (cur - 3) + 1) mod k.
std::vector<std::vector<int>> bigram_corpus(std::size_t n, std::size_t k, std::size_t len, Rng& rng) {
  std::vector<std::vector<int>> corpus;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> s{kClsToken};
    int cur = 3 + static_cast<int>(rng.below(k));
    for (std::size_t j = 1; j < len; ++j) {
      s.push_back(cur);
      cur = 3 + static_cast<int>((5 * (cur - 3) + 1) % k);
    }
    corpus.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace

TEST(Pretrain, BeatsUnigramBaselineOnBigramCorpus) {
  BackboneConfig c;
  c.vocab_size = 16;
  c.max_seq_len = 8;
  c.hidden_dim = 16;
  c.num_layers = 1;
  c.num_heads = 2;
  c.ffn_dim = 32;
  Rng rng(12);
  auto corpus = bigram_corpus(400, 12, 8, rng);
  // Unigram oracle: always predict the most frequent non-CLS token.
  std::map<int, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& s : corpus)
    for (std::size_t j = 1; j < s.size(); ++j) ++counts[s[j]], ++total;
  std::size_t best = 0;
  for (auto& [tok, n] : counts) best = std::max(best, n);
  const double unigram = static_cast<double>(best) / static_cast<double>(total);

  PretrainConfig pc;
  pc.steps = 1500;
  pc.batch_size = 16;
  pc.lr = 3e-3;
  pc.seed = 1;
  auto result = pretrain_mlm(c, corpus, pc);
  const double acc = masked_token_accuracy(result.params, result.mlm_bias, corpus, 0.15, 99);
  EXPECT_GT(acc, unigram + 0.2) << "acc " << acc << " unigram " << unigram;
  EXPECT_LT(result.final_loss, result.loss_history.front());
  EXPECT_TRUE(result.params.pretrained);
}

TEST(Pretrain, ZeroStepsReturnsInitialization) {
  BackboneConfig c = tiny_config();
  std::vector<std::vector<int>> corpus{{2, 3, 4, 5}};
  PretrainConfig pc;
  pc.steps = 0;
  pc.seed = 77;
  auto result = pretrain_mlm(c, corpus, pc);
  EXPECT_TRUE(params_bit_equal(result.params, BackboneParams::init(c, 77)));
}

TEST(Pretrain, SameSeedIsBitIdentical) {
  BackboneConfig c = tiny_config();
  Rng rng(3);
  auto corpus = bigram_corpus(50, 8, 6, rng);
  PretrainConfig pc;
  pc.steps = 20;
  pc.batch_size = 8;
  pc.seed = 5;
  auto a = pretrain_mlm(c, corpus, pc);
  auto b = pretrain_mlm(c, corpus, pc);
  EXPECT_TRUE(params_bit_equal(a.params, b.params));
  EXPECT_EQ(a.final_loss, b.final_loss);
}

TEST(Pretrain, EmptyCorpusIsDataError) {
  EXPECT_THROW(pretrain_mlm(tiny_config(), {}, PretrainConfig{}), DataError);
}

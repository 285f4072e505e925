// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/checks.hpp"

#include "adafuse/fusion.hpp"
#include "adafuse/rng.hpp"
#include "adafuse/training.hpp"

namespace adafuse {

namespace {

void perturb(const ad::ParamSet& ps, Rng& rng, double scale) {
  for (auto t : ps) {
    for (double& v : t.mutable_data()) v += rng.uniform(-scale, scale);
  }
}

}  // namespace

std::vector<GroupGradCheck> check_fused_model_gradients(const AdapterConfig& wiring, std::uint64_t seed,
                                                        double h, double tol) {
  BackboneConfig b;
  b.vocab_size = 16;
  b.max_seq_len = 8;
  b.hidden_dim = 8;
  b.num_layers = 2;
  b.num_heads = 2;
  b.ffn_dim = 16;
  Rng rng(derive_seed(seed, "grad-check"));
  BackboneParams theta = BackboneParams::init(b, seed);
  perturb(theta.params(), rng, 0.1);
  std::vector<AdapterParams> members;
  for (std::size_t i = 0; i < 3; ++i) {
    members.push_back(make_adapter(b, wiring, derive_seed(seed, "member/" + std::to_string(i)),
                                   "task" + std::to_string(i)));
    perturb(members.back().params(), rng, 0.3);
  }
  FusionParams psi = fusion_init(b, members, seed, "task0");
  perturb(psi.params(), rng, 0.3);
  ClassifierHead head = ClassifierHead::init("task0", b.hidden_dim, 3, seed);
  perturb(head.params(), rng, 0.3);

  HookSet hooks(b.num_layers);
  install_fusion(hooks, psi, members);
  const TokenBatch batch =
      TokenBatch::pack(std::vector<std::vector<int>>{{2, 5, 6, 7, 9}, {2, 9, 4}, {2, 11, 3, 14}});
  const std::vector<int> labels{0, 2, 1};
  auto program = [&] {
    ad::Tensor logits = model_logits({&theta, &hooks, &head}, batch);
    return ad::add(ad::cross_entropy(logits, labels), fusion_regularizer(psi, 0.1));
  };

  std::vector<std::pair<std::string, ad::ParamSet>> groups{{"theta", theta.params()}};
  for (const auto& m : members) groups.push_back({"adapter:" + m.task, m.params()});
  groups.push_back({"fusion", psi.params()});
  groups.push_back({"head", head.params()});
  std::vector<GroupGradCheck> out;
  for (auto& [name, ps] : groups) {
    ps.set_trainable(true);
    out.push_back({name, ad::grad_check(program, ps, {.h = h, .tol = tol})});
  }
  return out;
}

}  // namespace adafuse

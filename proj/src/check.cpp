/**
 * Copyright 2026 The xlkv Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "xlkv/check.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <numeric>
#include <random>

#include "xlkv/budget.hpp"
#include "xlkv/corpus.hpp"
#include "xlkv/errors.hpp"
#include "xlkv/eval.hpp"
#include "xlkv/factorization.hpp"
#include "xlkv/latent_cache.hpp"
#include "xlkv/model.hpp"

namespace xlkv {

namespace {

std::vector<Sequence> probe_sequences(std::uint64_t seed, std::size_t count, std::size_t len) {
  const auto bytes = generate_markov_bytes(seed, count * len);
  return split_sequences(bytes, len, count);
}

nlohmann::json check_full_rank(std::uint64_t seed) {
  const ModelWeights w = gen_toy_model(ModelConfig::toy(), seed);
  const RopeTable rope(w.config.d_head, w.config.max_seq, w.config.rope_theta);
  const auto probe = probe_sequences(seed + 1, 3, 32);
  nlohmann::json cases = nlohmann::json::array();
  bool ok = true;
  for (std::size_t m : {1, 2, 4}) {
    const auto f = transform_model_rank(w, m, max_rank(w.config, m));
    double worst = 0.0;
    for (const auto& seq : probe) {
      KvCache cache(w.config);
      const Mat ref = forward_baseline(w, rope, seq, ForwardMode::Prefill, cache);
      LatentSession s(w, f, rope);
      worst = std::max(worst, max_abs_diff(ref, s.prefill(seq)));
    }
    ok = ok && worst <= 1e-4;
    cases.push_back({{"group_size", m}, {"rank", f.rank}, {"max_abs_logit_diff", worst}});
  }
  return {{"passed", ok}, {"tolerance", 1e-4}, {"cases", cases}};
}

nlohmann::json check_fused(std::uint64_t seed) {
  const ModelWeights w = gen_toy_model(ModelConfig::toy(), seed);
  const auto& cfg = w.config;
  const RopeTable rope(cfg.d_head, cfg.max_seq, cfg.rope_theta);
  const auto f = transform_model(w, 4, 0.7);
  const auto probe = probe_sequences(seed + 2, 1, 24);
  const auto& seq = probe.front();
  std::vector<int> pos(seq.size());
  std::iota(pos.begin(), pos.end(), 0);
  double worst = 0.0;
  KvCache cache(cfg);
  forward_baseline(w, rope, seq, ForwardMode::Prefill, cache, [&](std::size_t l, const Mat&, const Mat& normed) {
    const Mat h = compute_latent(normed, f.a_for_layer(l));
    Mat q = matmul(normed, w.layers[l].wq);
    apply_rope(q, pos, rope);
    const Mat fused = attend_latent(cfg, q, pos, h, pos, f.layers[l], rope);
    const Mat plain = attend_latent_unfused(cfg, q, pos, h, pos, f.layers[l], w.layers[l].wo, rope);
    worst = std::max(worst, max_abs_diff(fused, plain));
  });
  return {{"passed", worst <= 1e-5}, {"tolerance", 1e-5}, {"max_abs_diff", worst}};
}

nlohmann::json check_eckart_young(std::uint64_t seed) {
  const ModelWeights w = gen_toy_model(ModelConfig::toy(), seed);
  const GroupLayout layout(w.config.n_layers, 4);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  nlohmann::json cases = nlohmann::json::array();
  bool ok = true;
  for (std::size_t g = 0; g < layout.n_groups(); ++g) {
    const Mat wg = concat_group_weights(w, layout, g);
    for (std::size_t r : {2, 4, 8}) {
      const GroupFactors gf = factorize_group(wg, r);
      const double err = svd_factorization_error(wg, r);
      const double tail = std::sqrt(gf.singular_values.tail(gf.singular_values.size() - static_cast<Eigen::Index>(r))
                                        .squaredNorm());
      double best_random = std::numeric_limits<double>::infinity();
      for (int t = 0; t < 20; ++t) best_random = std::min(best_random, random_factorization_error(wg, r, rng));
      const bool pass = err <= best_random && std::abs(err - tail) <= 1e-6 * std::max(1.0, tail);
      ok = ok && pass;
      cases.push_back({{"group", g}, {"rank", r}, {"svd_error", err}, {"tail", tail},
                       {"best_random_error", best_random}, {"passed", pass}});
    }
  }
  return {{"passed", ok}, {"cases", cases}};
}

nlohmann::json check_budget(std::uint64_t seed) {
  const ModelWeights w = gen_toy_model(ModelConfig::toy(), seed);
  const RopeTable rope(w.config.d_head, w.config.max_seq, w.config.rope_theta);
  const auto f = transform_model(w, 4, 0.7);
  const auto seq = probe_sequences(seed + 3, 1, 48).front();
  nlohmann::json cases = nlohmann::json::array();
  bool ok = true;
  for (int i = 1; i <= 6; ++i) {
    const double target = 0.1 * i;
    LatentSession s(w, f, rope);
    s.prefill(seq);
    const auto scores = score_groups(s.store(), ScoreVariant::Shortcut);
    nlohmann::json c = {{"target_ratio", target}};
    try {
      const BudgetPlan plan = compress_session(s, target, MergeStrategy::Mean, ScoreVariant::Shortcut, nullptr);
      const auto audited = cache_bytes(s.store()).total();
      const auto predicted = plan.predicted_elements_per_prefill_token * seq.size();
      const double achieved =
          1.0 - static_cast<double>(audited) / static_cast<double>(baseline_kv_elements(w.config, seq.size()));
      auto top = top_k_groups(scores, plan.merged.size());
      std::sort(top.begin(), top.end());
      const bool pass = audited == predicted && achieved >= target - 1e-12 && top == plan.merged;
      ok = ok && pass;
      c.update({{"merged", plan.merged}, {"audited_elements", audited}, {"predicted_elements", predicted},
                {"achieved_ratio", achieved}, {"passed", pass}});
    } catch (const UnreachableRatioError& e) {
      c.update({{"reachable", false}, {"max_ratio", e.max_ratio}, {"passed", true}});
    }
    cases.push_back(std::move(c));
  }
  return {{"passed", ok}, {"cases", cases}};
}

nlohmann::json check_gradients(std::uint64_t seed) {
  const ModelWeightsF64 w = gen_toy_model(ModelConfig::micro(), seed).cast<double>();
  const auto batch = probe_sequences(seed + 4, 2, 12);
  const LossAndGrads g = loss_and_grads(w, batch);
  std::mt19937_64 rng(seed + 5);
  constexpr double h = 1e-5;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    for (int which = 0; which < 2; ++which) {
      const MatD& grad = which == 0 ? g.d_wk[l] : g.d_wv[l];
      std::uniform_int_distribution<Eigen::Index> pick(0, grad.size() - 1);
      for (int s = 0; s < 5; ++s) {
        const Eigen::Index idx = pick(rng);
        ModelWeightsF64 plus = w, minus = w;
        (which == 0 ? plus.layers[l].wk : plus.layers[l].wv).data()[idx] += h;
        (which == 0 ? minus.layers[l].wk : minus.layers[l].wv).data()[idx] -= h;
        const double fd = (teacher_forced_loss(plus, batch) - teacher_forced_loss(minus, batch)) / (2 * h);
        const double an = grad.data()[idx];
        const double rel = std::abs(fd - an) / std::max(std::max(std::abs(fd), std::abs(an)), 1e-8);
        worst = std::max(worst, rel);
        ++checked;
      }
    }
  }
  return {{"passed", worst < 1e-3}, {"tolerance", 1e-3}, {"entries", checked}, {"max_relative_error", worst},
          {"loss", g.loss}};
}

}  // namespace

nlohmann::json run_self_check(std::uint64_t seed) {
  nlohmann::json report = {{"seed", seed}};
  report["full_rank_exactness"] = check_full_rank(seed);
  report["fused_equality"] = check_fused(seed);
  report["eckart_young"] = check_eckart_young(seed);
  report["budget_audit"] = check_budget(seed);
  report["fd_gradients"] = check_gradients(seed);
  bool ok = true;
  for (const char* k : {"full_rank_exactness", "fused_equality", "eckart_young", "budget_audit", "fd_gradients"})
    ok = ok && report[k]["passed"].get<bool>();
  report["passed"] = ok;
  return report;
}

}  // namespace xlkv

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
#include <Eigen/Eigenvalues>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>

#include "xlkv/budget.hpp"
#include "xlkv/container.hpp"
#include "xlkv/corpus.hpp"
#include "xlkv/errors.hpp"
#include "xlkv/eval.hpp"
#include "xlkv/factorization.hpp"
#include "xlkv/latent_cache.hpp"
#include "xlkv/model.hpp"

#ifndef XLKV_CLI_PATH
#define XLKV_CLI_PATH "xlkv"
#endif

using namespace xlkv;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::vector<Sequence> sequences(std::uint64_t seed, std::size_t count, std::size_t len) {
  const auto bytes = generate_markov_bytes(seed, count * len);
  return split_sequences(bytes, len, count);
}

RopeTable rope_for(const ModelConfig& c) { return RopeTable(c.d_head, c.max_seq, c.rope_theta); }

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

Outcome full_rank_identity() {
  ModelConfig cfg = ModelConfig::toy();
  cfg.n_layers = 12;
  double worst = 0.0;
  for (std::size_t m = 1; m <= 4; ++m) {
    const ModelWeights w = gen_toy_model(cfg, 100 + m);
    const RopeTable rope = rope_for(cfg);
    const auto f = transform_model_rank(w, m, max_rank(cfg, m));
    for (const auto& seq : sequences(m, 20, 64)) {
      KvCache cache(cfg);
      const Mat ref = forward_baseline(w, rope, seq, ForwardMode::Prefill, cache);
      LatentSession s(w, f, rope);
      worst = std::max(worst, max_abs_diff(s.prefill(std::span(seq).first(32)), ref.topRows(32)));
      for (std::size_t t = 32; t < 64; ++t)
        worst = std::max(worst, max_abs_diff(s.decode(seq[t]), ref.row(static_cast<Eigen::Index>(t))));
    }
  }
  return {worst <= 1e-4, fmt("max |logit diff| %.3g over group sizes 1-4, 20 sequences each", worst)};
}

Outcome fused_equality() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ModelWeights w = gen_toy_model(ModelConfig::toy(), seed);
    const auto& cfg = w.config;
    const RopeTable rope = rope_for(cfg);
    const auto f = transform_model(w, 4, 0.7);
    const Sequence seq = sequences(seed + 50, 1, 64).front();
    std::vector<int> pos(seq.size());
    std::iota(pos.begin(), pos.end(), 0);
    KvCache cache(cfg);
    forward_baseline(w, rope, seq, ForwardMode::Prefill, cache, [&](std::size_t l, const Mat&, const Mat& normed) {
      const Mat h = compute_latent(normed, f.a_for_layer(l));
      Mat q = matmul(normed, w.layers[l].wq);
      apply_rope(q, pos, rope);
      worst = std::max(worst, max_abs_diff(attend_latent(cfg, q, pos, h, pos, f.layers[l], rope),
                                           attend_latent_unfused(cfg, q, pos, h, pos, f.layers[l], w.layers[l].wo,
                                                                 rope)));
    });
  }
  return {worst <= 1e-5, fmt("max |fused - unfused| %.3g across 8 layers x 10 seeds", worst)};
}

Outcome eckart_young() {
  bool ok = true;
  double tail_gap = 0.0, margin = 1e300;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ModelWeights w = gen_toy_model(ModelConfig::toy(), 200 + seed);
    const Mat wg = concat_group_weights(w, GroupLayout(8, 4), seed % 2);
    const Eigen::MatrixXd gram = wg.cast<double>() * wg.cast<double>().transpose();
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram).eigenvalues();
    std::mt19937_64 rng(seed);
    for (std::size_t r : {2, 4, 8}) {
      const double err = svd_factorization_error(wg, r);
      double tail = 0.0;
      for (Eigen::Index i = 0; i < ev.size() - static_cast<Eigen::Index>(r); ++i) tail += std::max(ev(i), 0.0);
      tail = std::sqrt(tail);
      tail_gap = std::max(tail_gap, std::abs(err - tail));
      ok = ok && std::abs(err - tail) <= 1e-6 * std::max(1.0, tail);
      for (int t = 0; t < 100; ++t) {
        const double rnd = random_factorization_error(wg, r, rng);
        margin = std::min(margin, rnd - err);
        ok = ok && err <= rnd;
      }
    }
  }
  return {ok, fmt("max |svd error - tail| %.3g, min random margin %.4g", tail_gap, margin)};
}

Outcome budget_audit() {
  const ModelWeights w = gen_toy_model(ModelConfig::toy(), 7);
  const auto& cfg = w.config;
  const RopeTable rope = rope_for(cfg);
  const auto f = transform_model(w, 4, 0.7);
  const Sequence seq = sequences(70, 1, 96).front();
  const std::size_t P = 64, D = 32;
  bool ok = true;
  int reachable = 0;
  for (int i = 1; i <= 6; ++i) {
    const double target = i / 10.0;
    LatentSession s(w, f, rope);
    s.prefill(std::span(seq).first(P));
    const auto scores = score_groups(s.store(), ScoreVariant::Shortcut);
    BudgetPlan plan;
    try {
      plan = compress_session(s, target, MergeStrategy::Mean, ScoreVariant::Shortcut, nullptr, D);
    } catch (const UnreachableRatioError&) {
      continue;
    }
    ++reachable;
    for (std::size_t t = P; t < P + D; ++t) s.decode(seq[t]);
    const std::size_t k = plan.merged.size();
    const std::size_t G = 2, m = 4, r = f.rank;
    const std::size_t cost = k * r + (G - k) * m * r;
    const std::size_t audited = cache_bytes(s.store()).total();
    const double achieved =
        1.0 - static_cast<double>(audited) / static_cast<double>(cfg.n_layers * 2 * cfg.d_kv() * (P + D));
    std::vector<std::size_t> order(G);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    std::vector<std::size_t> top(order.begin(), order.begin() + static_cast<long>(k));
    std::sort(top.begin(), top.end());
    ok = ok && plan.predicted_elements_per_prefill_token == cost && audited == cost * P + cfg.n_layers * r * D &&
         achieved >= target && top == plan.merged && std::abs(achieved - plan.predicted_ratio) <= 1e-9;
  }
  return {ok && reachable > 0, fmt("%g of 6 targets reachable, all audits exact", reachable)};
}

Outcome fisher_correctness() {
  const ModelWeightsF64 w = gen_toy_model(ModelConfig::micro(), 31).cast<double>();
  const auto batch = sequences(32, 4, 16);
  const LossAndGrads g = loss_and_grads(w, batch);
  std::mt19937_64 rng(33);
  double worst = 0.0;
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    for (bool key : {true, false}) {
      const MatD& grad = key ? g.d_wk[l] : g.d_wv[l];
      std::uniform_int_distribution<Eigen::Index> pick(0, grad.size() - 1);
      for (int s = 0; s < 20; ++s) {
        const auto idx = pick(rng);
        ModelWeightsF64 up = w, down = w;
        (key ? up.layers[l].wk : up.layers[l].wv).data()[idx] += 1e-5;
        (key ? down.layers[l].wk : down.layers[l].wv).data()[idx] -= 1e-5;
        const double fd = (teacher_forced_loss(up, batch) - teacher_forced_loss(down, batch)) / 2e-5;
        const double an = grad.data()[idx];
        worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}));
      }
    }
  }
  std::mt19937_64 mrng(34);
  std::normal_distribution<double> nd;
  std::vector<Mat> prefixes(4, Mat(16, 12));
  for (auto& p : prefixes)
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = static_cast<float>(nd(mrng));
  const std::vector<double> uniform(4, 0.37);
  const double merge_gap = max_abs_diff(merge_group(prefixes, MergeStrategy::Fisher, uniform).merged,
                                        merge_group(prefixes, MergeStrategy::Mean).merged);
  return {worst < 1e-3 && merge_gap <= 1e-7,
          fmt("max relative gradient error %.3g on 80 entries, uniform fisher vs mean %.3g", worst, merge_gap)};
}

Outcome observation() {
  int wins = 0;
  double lat = 0.0, key = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SyntheticObservation o = synthetic_observation_trial(seed);
    if (o.min_adjacent_hidden_cosine < 0.95) return {false, "construction violated the cosine floor"};
    wins += o.latent > o.key ? 1 : 0;
    lat += o.latent / 20.0;
    key += o.key / 20.0;
  }
  return {wins >= 18, fmt("latent > key in %g/20 trials (mean latent %.3f, mean key %.3f)", wins, lat, key)};
}

Outcome lossless_merge() {
  const ModelWeights w = gen_toy_model(ModelConfig::toy(), 41);
  const RopeTable rope = rope_for(w.config);
  const auto f = transform_model(w, 4, 0.7);
  const Sequence seq = sequences(42, 1, 48).front();
  const FisherWeights fisher = estimate_fisher(w, sequences(43, 2, 16), 43);
  const auto& layout = f.layout;

  auto prepare = [&](LatentSession& s) {
    s.prefill(std::span(seq).first(32));
    for (std::size_t g = 0; g < layout.n_groups(); ++g) {
      const Mat first = s.store().prefix(layout.first_layer(g));
      for (std::size_t l = layout.first_layer(g) + 1; l <= layout.last_layer(g); ++l) s.store().set_layer_prefix(l, first);
    }
  };
  auto decode_all = [&](LatentSession& s) {
    Mat out(16, 256);
    for (std::size_t t = 32; t < 48; ++t) out.row(static_cast<Eigen::Index>(t - 32)) = s.decode(seq[t]);
    return out;
  };
  LatentSession ref_session(w, f, rope);
  prepare(ref_session);
  const Mat ref = decode_all(ref_session);
  double worst = 0.0;
  for (auto strategy : {MergeStrategy::Mean, MergeStrategy::Fisher, MergeStrategy::Shallow, MergeStrategy::Deep}) {
    LatentSession s(w, f, rope);
    prepare(s);
    BudgetPlan plan;
    plan.strategy = strategy;
    plan.merged = {0, 1};
    apply_plan(s.store(), plan, &fisher);
    if (s.store().merged_count() != 2) return {false, "groups were not merged"};
    worst = std::max(worst, max_abs_diff(decode_all(s), ref));
  }
  return {worst < 1e-6, fmt("max decode logit change %.3g over mean/fisher/shallow/deep", worst)};
}

Outcome gqa_arithmetic() {
  const BudgetGeometry geo{32, 4, 1024, 2867};
  const BudgetPlan plan = allocate_budget(std::vector<double>(8, 0.9), 0.6, geo);
  double reported = 0.0;
  try {
    allocate_budget(std::vector<double>(8, 0.9), 0.66, geo);
  } catch (const UnreachableRatioError& e) {
    reported = e.max_ratio;
  }
  const bool ok = std::abs(plan.max_ratio - 0.650) <= 1e-3 && reported == plan.max_ratio && plan.predicted_ratio >= 0.6;
  return {ok, fmt("max ratio %.5f, ratio 0.6 reached with %g merged groups", plan.max_ratio,
                  static_cast<double>(plan.merged.size()))};
}

Outcome determinism() {
  const auto dir = std::filesystem::temp_directory_path() / "xlkv_acceptance";
  std::filesystem::create_directories(dir);
  const auto a = dir / "check_a.json", b = dir / "check_b.json";
  for (const auto& p : {a, b}) {
    const std::string cmd = std::string("\"") + XLKV_CLI_PATH + "\" check --seed 1234 --out \"" + p.string() + "\"";
    if (std::system(cmd.c_str()) != 0) return {false, "check command failed"};
  }
  const auto ba = read_file_bytes(a), bb = read_file_bytes(b);
  std::filesystem::remove_all(dir);
  return {!ba.empty() && ba == bb, fmt("two reports of %g bytes, identical", static_cast<double>(ba.size()))};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "full-rank identity", 60, full_rank_identity},
      {2, "fused-path equality", 10, fused_equality},
      {3, "Eckart-Young optimality", 30, eckart_young},
      {4, "budget audit", 30, budget_audit},
      {5, "Fisher correctness", 60, fisher_correctness},
      {6, "observation reproduction", 30, observation},
      {7, "lossless-merge boundary", 10, lossless_merge},
      {8, "GQA arithmetic", 10, gqa_arithmetic},
      {9, "determinism", 60, determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool pass = o.pass && secs < c.limit_s;
    failures += pass ? 0 : 1;
    std::printf("%s criterion %d (%s): %s [%.2fs, limit %.0fs]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.limit_s);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}

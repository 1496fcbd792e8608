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
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>

#include "helpers.hpp"
#include "xlkv/budget.hpp"
#include "xlkv/errors.hpp"

using namespace xlkv;
using namespace xlkv::test;

namespace {

// Counts stored latent rows layer by layer for a given merged set.
double brute_ratio(std::size_t L, std::size_t m, std::size_t dkv, std::size_t r, const std::vector<bool>& merged) {
  double kept = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t g = l / m;
    const bool first_in_group = l % m == 0;
    if (!merged[g] || first_in_group) kept += static_cast<double>(r);
  }
  return 1.0 - kept / static_cast<double>(L * 2 * dkv);
}

}  // namespace

TEST_CASE("allocation matches an exhaustive oracle") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> coarse(0, 4);
  const std::size_t L = 16, m = 2, dkv = 32, r = 24;
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> scores(L / m);
    for (auto& s : scores) s = coarse(rng) / 4.0;  // plenty of ties
    for (double target : {0.0, 0.2, 0.4, 0.55, 0.6}) {
      // Oracle: order by (score desc, index asc), take the first k reaching target.
      std::vector<std::size_t> order(scores.size());
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](auto a, auto b) {
        return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
      });
      std::optional<std::vector<std::size_t>> expect;
      for (std::size_t k = 0; k <= scores.size() && !expect; ++k) {
        std::vector<bool> mask(scores.size(), false);
        for (std::size_t i = 0; i < k; ++i) mask[order[i]] = true;
        if (brute_ratio(L, m, dkv, r, mask) >= target) {
          std::vector<std::size_t> set(order.begin(), order.begin() + static_cast<long>(k));
          std::sort(set.begin(), set.end());
          expect = set;
        }
      }
      const BudgetGeometry geo{L, m, dkv, r};
      if (!expect) {
        CHECK_THROWS_AS(allocate_budget(scores, target, geo), UnreachableRatioError);
        continue;
      }
      const BudgetPlan plan = allocate_budget(scores, target, geo, MergeStrategy::Mean);
      CHECK(plan.merged == *expect);
      CHECK(plan.predicted_ratio >= target);
    }
  }
}

TEST_CASE("storage arithmetic for a Llama-shaped model") {
  const BudgetGeometry geo{32, 4, 1024, 2867};
  CHECK(geo.max_ratio() == doctest::Approx(1.0 - 8.0 * 2867.0 / (32.0 * 2048.0)).epsilon(1e-12));
  CHECK(std::abs(geo.max_ratio() - 0.650) <= 1e-3);
  try {
    allocate_budget(std::vector<double>(8, 0.5), 0.7, geo);
    FAIL("expected an unreachable ratio");
  } catch (const UnreachableRatioError& e) {
    CHECK(e.max_ratio == doctest::Approx(geo.max_ratio()));
  }
}

TEST_CASE("ratio with decode tokens") {
  BudgetGeometry geo{8, 4, 32, 45, 96, 32};
  // merged 2: prefill 2*45*96, decode 8*45*32 vs 8*64*128
  CHECK(geo.ratio(2) == doctest::Approx(1.0 - (90.0 * 96 + 360.0 * 32) / (512.0 * 128)).epsilon(1e-12));
  geo.prefill_tokens = 0;
  geo.decode_tokens = 0;
  CHECK_THROWS_AS(geo.ratio(0), ConfigError);
}

TEST_CASE("allocation input validation") {
  const BudgetGeometry geo{8, 4, 32, 45};
  CHECK_THROWS_AS(allocate_budget(std::vector<double>{1.0}, 0.3, geo), InputError);
  CHECK_THROWS_AS(allocate_budget(std::vector<double>{1.0, 1.0}, 1.0, geo), ConfigError);
  CHECK_THROWS_AS(allocate_budget(std::vector<double>{1.0, std::nan("")}, 0.3, geo), NumericError);
  CHECK(top_k_groups(std::vector<double>{0.5, 0.9, 0.9, 0.1}, 2) == std::vector<std::size_t>{1, 2});
}

TEST_CASE("group scores") {
  Mat a(2, 2), b(2, 2);
  a << 1, 0, 0, 0;
  b << 1, 1, 3, 4;
  // Row 0: cos 1/sqrt2; row 1 has a zero row and counts 0.
  CHECK(group_score(a, b) == doctest::Approx(0.5 / std::sqrt(2.0)));
  const std::vector<Mat> one{a};
  CHECK(group_score_full(one) == 1.0);
  Mat c = b;
  c.row(1) << -3, -4;
  const std::vector<Mat> three{a, b, c};
  CHECK(group_score_full(three) == doctest::Approx((0.5 / std::sqrt(2.0) + 0.0) / 2.0));
  CHECK_THROWS_AS(group_score(a, Mat::Zero(3, 2)), InputError);
}

TEST_CASE("merge strategies") {
  std::mt19937_64 rng(9);
  const std::vector<Mat> p{random_mat(rng, 4, 3), random_mat(rng, 4, 3), random_mat(rng, 4, 3)};
  const MergeResult mean = merge_group(p, MergeStrategy::Mean);
  CHECK(max_abs_diff(mean.merged, ((p[0] + p[1] + p[2]).cast<double>() / 3.0).cast<float>()) < 1e-6);
  const std::vector<double> uniform{2.0, 2.0, 2.0};
  CHECK(max_abs_diff(merge_group(p, MergeStrategy::Fisher, uniform).merged, mean.merged) < 1e-7);
  const std::vector<double> skew{1.0, 0.0, 3.0};
  const MergeResult f = merge_group(p, MergeStrategy::Fisher, skew);
  CHECK(max_abs_diff(f.merged, ((p[0].cast<double>() + 3.0 * p[2].cast<double>()) / 4.0).cast<float>()) < 1e-6);
  CHECK(f.weights[2] == doctest::Approx(0.75));
  const std::vector<double> zero{0.0, 0.0, 0.0};
  const MergeResult fb = merge_group(p, MergeStrategy::Fisher, zero);
  CHECK(fb.fell_back_to_mean);
  CHECK(fb.merged == mean.merged);
  CHECK(merge_group(p, MergeStrategy::Shallow).merged == p[0]);
  CHECK(merge_group(p, MergeStrategy::Deep).merged == p[2]);
  const std::vector<double> neg{1.0, -1.0, 1.0};
  CHECK_THROWS_AS(merge_group(p, MergeStrategy::Fisher, neg), NumericError);
  const std::vector<Mat> same{p[1], p[1], p[1]};
  for (auto s : {MergeStrategy::Mean, MergeStrategy::Fisher, MergeStrategy::Shallow, MergeStrategy::Deep})
    CHECK(merge_group(same, s, skew).merged == p[1]);
}

TEST_CASE("strategy names") {
  for (auto s : {MergeStrategy::Mean, MergeStrategy::Fisher, MergeStrategy::Shallow, MergeStrategy::Deep})
    CHECK(parse_merge_strategy(to_string(s)) == s);
  CHECK(parse_score_variant("full") == ScoreVariant::Full);
  CHECK_THROWS_AS(parse_merge_strategy("median"), ConfigError);
  CHECK_THROWS_AS(parse_score_variant("x"), ConfigError);
}

TEST_CASE("fisher estimation") {
  const ModelWeights w = gen_toy_model(ModelConfig::micro(), 3);
  const auto corpus = markov_sequences(5, 4, 12);
  const FisherWeights f = estimate_fisher(w, corpus, 5, "abc");
  REQUIRE(f.k.size() == 2);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(f.k[l] >= 0.0);
    CHECK(f.v[l] > 0.0);
  }
  // Oracle: per-sequence squared gradient norms averaged by hand.
  double k0 = 0.0;
  for (const auto& s : corpus) {
    const std::vector<Sequence> one{s};
    k0 += loss_and_grads(w.cast<double>(), one).d_wk[0].squaredNorm();
  }
  CHECK(f.k[0] == doctest::Approx(k0 / 4.0).epsilon(1e-9));
  CHECK(f.corpus_hash == "abc");

  const auto path = std::filesystem::temp_directory_path() / "xlkv_fisher_test.json";
  f.save(path);
  const FisherWeights back = FisherWeights::load(path);
  CHECK(back.k == f.k);
  CHECK(back.seed == 5);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(estimate_fisher(w, std::vector<Sequence>{}, 0), InputError);
}

TEST_CASE("compress_session merges the planned groups") {
  const ModelWeights w = gen_toy_model(ModelConfig::toy(), 12);
  const RopeTable rope = rope_for(w.config);
  const auto f = transform_model(w, 2, 0.7);
  const Sequence seq = markov_sequences(1, 1, 32).front();
  LatentSession s(w, f, rope);
  s.prefill(seq);
  const auto scores = score_groups(s.store(), ScoreVariant::Full);
  const BudgetPlan plan = compress_session(s, 0.5, MergeStrategy::Mean, ScoreVariant::Full, nullptr);
  CHECK(plan.scores == scores);
  for (std::size_t g = 0; g < 4; ++g) CHECK(s.store().is_merged(g) == plan.is_merged(g));
  CHECK(cache_bytes(s.store()).total() == plan.predicted_elements_per_prefill_token * seq.size());
  LatentSession t(w, f, rope);
  t.prefill(seq);
  CHECK_THROWS_AS(compress_session(t, 0.5, MergeStrategy::Fisher, ScoreVariant::Full, nullptr), ConfigError);
}

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
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xlkv/latent_cache.hpp"
#include "xlkv/model.hpp"

namespace xlkv {

enum class MergeStrategy { Mean, Fisher, Shallow, Deep };
enum class ScoreVariant { Shortcut, Full };

std::string to_string(MergeStrategy s);
std::string to_string(ScoreVariant s);
MergeStrategy parse_merge_strategy(const std::string& s);
ScoreVariant parse_score_variant(const std::string& s);

// --- scoring -------------------------------------------------------------

/// Mean over tokens of cos(first_t, last_t); zero-norm rows count as 0.
double group_score(const Mat& first, const Mat& last);

/// Mean over adjacent layer pairs inside the group of the mean token cosine.
/// A single-layer group scores 1.
double group_score_full(std::span<const Mat> prefixes);

/// One score per group from the (unmerged) prefill latents in the store.
std::vector<double> score_groups(const LatentCacheStore& store, ScoreVariant variant);

// --- allocation ----------------------------------------------------------

struct BudgetGeometry {
  std::size_t n_layers = 0;
  std::size_t group_size = 0;
  std::size_t d_kv = 0;
  std::size_t rank = 0;
  // Token counts weight the prefill (mergeable) and decode (latent only)
  // parts of the cache. The default evaluates the prefill part alone.
  std::size_t prefill_tokens = 1;
  std::size_t decode_tokens = 0;

  std::size_t n_groups() const { return n_layers / group_size; }
  /// Per-prefill-token latent elements with k merged groups: k r + (G - k) m r.
  std::size_t prefill_cost(std::size_t merged) const;
  /// 1 - compressed / original over the configured token counts.
  double ratio(std::size_t merged) const;
  double max_ratio() const { return ratio(n_groups()); }
};

struct BudgetPlan {
  std::vector<double> scores;
  std::vector<std::size_t> merged;  // ascending group ids
  double target_ratio = 0.0;
  double predicted_ratio = 0.0;
  double max_ratio = 0.0;
  std::size_t predicted_elements_per_prefill_token = 0;
  MergeStrategy strategy = MergeStrategy::Fisher;
  std::vector<std::vector<double>> merge_weights;  // per merged group, in `merged` order
  std::vector<std::string> warnings;

  bool is_merged(std::size_t group) const;
  nlohmann::json to_json() const;
};

/// Ranks groups by score (descending, ties to the lower index) and merges the
/// smallest number k whose ratio reaches `target_ratio`. Throws
/// UnreachableRatioError when even k = G falls short.
BudgetPlan allocate_budget(std::span<const double> scores, double target_ratio, const BudgetGeometry& geometry,
                           MergeStrategy strategy = MergeStrategy::Fisher);

/// Group ids of the top-k scores under the same ordering allocate_budget uses.
std::vector<std::size_t> top_k_groups(std::span<const double> scores, std::size_t k);

// --- Fisher information --------------------------------------------------

struct FisherWeights {
  std::vector<double> k;  // F(W_k^l)
  std::vector<double> v;  // F(W_v^l)
  std::string corpus_hash;
  std::uint64_t seed = 0;
  std::size_t n_sequences = 0;

  double layer(std::size_t l) const { return k[l] + v[l]; }
  nlohmann::json to_json() const;
  static FisherWeights from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static FisherWeights load(const std::filesystem::path& path);
};

/// Per layer, the mean over calibration sequences of the summed squared
/// gradient of each sequence's mean loss with respect to W_k and W_v.
FisherWeights estimate_fisher(const ModelWeights& w, std::span<const Sequence> corpus, std::uint64_t seed,
                              const std::string& corpus_hash = "");

// --- merging -------------------------------------------------------------

struct MergeResult {
  Mat merged;
  std::vector<double> weights;  // per layer, nonnegative, sum 1 for mean/fisher
  bool fell_back_to_mean = false;
};

/// fisher: H = sum_l f_l H^l / sum_l f_l; mean: equal weights;
/// shallow/deep: first/last layer. Zero total Fisher falls back to mean.
MergeResult merge_group(std::span<const Mat> prefixes, MergeStrategy strategy,
                        std::span<const double> layer_fisher = {});

/// Scores the session's groups, allocates the budget and merges in place.
BudgetPlan compress_session(LatentSession& session, double target_ratio, MergeStrategy strategy,
                            ScoreVariant variant, const FisherWeights* fisher, std::size_t expected_decode_tokens = 0);

/// Merges exactly the groups listed in `plan.merged`; fills merge weights and warnings.
void apply_plan(LatentCacheStore& store, BudgetPlan& plan, const FisherWeights* fisher);

}  // namespace xlkv

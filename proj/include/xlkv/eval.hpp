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

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "xlkv/budget.hpp"
#include "xlkv/factorization.hpp"
#include "xlkv/latent_cache.hpp"
#include "xlkv/model.hpp"

namespace xlkv {

// --- similarity profiling ------------------------------------------------

struct LayerPairSimilarity {
  std::size_t layer = 0;  // pair (layer, layer + 1)
  double key = 0.0;
  double value = 0.0;
  double hidden = 0.0;
  double latent = 0.0;
};

struct SimilarityReport {
  std::vector<LayerPairSimilarity> pairs;
  double mean_key = 0.0;
  double mean_value = 0.0;
  double mean_hidden = 0.0;
  double mean_latent = 0.0;
  double hidden_self = 0.0;  // cos(x^l, x^l) averaged, always 1
  std::string corpus_hash;
  std::size_t tokens = 0;

  nlohmann::json to_json() const;
};

/// Runs a baseline prefill over each probe sequence and averages, per
/// adjacent layer pair, the token cosine of keys, values, layer inputs and
/// latents h = norm(x) * A.
SimilarityReport profile_similarity(const ModelWeights& w, const SharedFactorization& f,
                                    std::span<const Sequence> probe, const std::string& corpus_hash = "");

struct SyntheticObservation {
  double hidden = 0.0;
  double key = 0.0;
  double latent = 0.0;
  double min_adjacent_hidden_cosine = 0.0;
};

struct SyntheticObservationParams {
  std::size_t n_layers = 4;
  std::size_t d_hidden = 64;
  std::size_t d_kv = 32;
  std::size_t tokens = 32;
  double rank_fraction = 0.7;
  double min_cosine = 0.95;
};

/// Hidden states drift slowly across layers (adjacent token cosine >= min_cosine)
/// while each layer has an independent random W_k/W_v. Measures adjacent-layer
/// similarity of keys x W_k^l against latents x A with A shared by all layers.
SyntheticObservation synthetic_observation_trial(std::uint64_t seed, const SyntheticObservationParams& p = {});

// --- cache modes, perplexity ---------------------------------------------

enum class CacheMode { Baseline, CommonKV, LowRankPerLayer, RawKvMeanMerge };
std::string to_string(CacheMode m);
CacheMode parse_cache_mode(const std::string& s);

struct EvalOptions {
  CacheMode mode = CacheMode::Baseline;
  double target_ratio = 0.0;
  MergeStrategy strategy = MergeStrategy::Fisher;
  ScoreVariant score = ScoreVariant::Shortcut;
  // Tokens processed as the prompt; 0 picks half the text. The rest is
  // teacher-forced one token at a time.
  std::size_t prefill_tokens = 0;
  const SharedFactorization* factors = nullptr;         // commonkv
  const SharedFactorization* lowrank_factors = nullptr;  // lowrank_perlayer; built on demand if null
  const FisherWeights* fisher = nullptr;
};

struct NllResult {
  double nll = 0.0;
  std::size_t prefill_tokens = 0;
  std::size_t decode_tokens = 0;
  std::size_t cache_elements = 0;     // audited
  std::size_t predicted_elements = 0;
  std::size_t baseline_elements = 0;
  double achieved_ratio = 0.0;
  std::optional<BudgetPlan> plan;
  std::size_t merged_groups = 0;
};

/// Teacher-forced NLL under a cache mode. The reported ratio comes from the
/// audited cache; a mismatch with the predicted element count throws NumericError.
NllResult perplexity(const ModelWeights& w, const RopeTable& rope, std::span<const TokenId> text,
                     const EvalOptions& options);

/// Rank used by lowrank_perlayer for a target ratio: floor((1 - ratio) * 2 d_kv), at least 1.
std::size_t lowrank_rank_for_ratio(const ModelConfig& cfg, double target_ratio);

// --- sweeps --------------------------------------------------------------

struct BenchRecord {
  CacheMode mode = CacheMode::Baseline;
  double target_ratio = 0.0;
  double achieved_ratio = 0.0;
  double nll = 0.0;
  std::size_t cache_elements = 0;
  double wall_ms = 0.0;
  std::uint64_t seed = 0;
  bool reachable = true;
  std::size_t merged_groups = 0;
  std::string note;
};

struct BenchInputs {
  const ModelWeights* weights = nullptr;
  const SharedFactorization* factors = nullptr;
  const FisherWeights* fisher = nullptr;
  MergeStrategy strategy = MergeStrategy::Fisher;
  ScoreVariant score = ScoreVariant::Shortcut;
  std::vector<double> ratios;
  std::vector<CacheMode> modes;
  std::vector<std::uint64_t> seeds;
  std::size_t text_tokens = 128;
  std::size_t prefill_tokens = 96;
  std::size_t workers = 1;
};

/// One record per (mode, ratio, seed), in that nesting order. Each record runs
/// in its own session on a Markov text generated from its seed.
std::vector<BenchRecord> bench_sweep(const BenchInputs& in);

/// Columns: mode,target_ratio,achieved_ratio,nll,cache_elements,wall_ms,seed
std::string bench_csv(std::span<const BenchRecord> records);
nlohmann::json bench_summary(const BenchInputs& in, std::span<const BenchRecord> records);

// --- optimality diagnostics ----------------------------------------------

/// Frobenius error of a Gaussian rank-r left factor with least-squares right factor.
double random_factorization_error(const Mat& w, std::size_t rank, std::mt19937_64& rng);
double svd_factorization_error(const Mat& w, std::size_t rank);

}  // namespace xlkv

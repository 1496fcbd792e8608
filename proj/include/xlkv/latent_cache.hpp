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
#include <span>
#include <vector>

#include "xlkv/factorization.hpp"
#include "xlkv/model.hpp"
#include "xlkv/rope.hpp"

namespace xlkv {

/// h = x * A. Carries no positional information.
Mat compute_latent(const Mat& x, const Mat& a);

/// K = RoPE(H * B_k, positions).
Mat restore_keys(const Mat& h, const Mat& bk, std::span<const int> positions, const RopeTable& rope);

/// Attention output of one layer computed from latents:
///   sum_q softmax(Q_q K_kv(q)^T / sqrt(d_head)) * H * M_q
/// where K is restored from H with B_k. `h` holds every visible token
/// (prefix then suffix) with positions `key_pos`. The result already includes W_o.
Mat attend_latent(const ModelConfig& cfg, const Mat& q_rope, std::span<const int> query_pos, const Mat& h,
                  std::span<const int> key_pos, const LayerFactors& factors, const RopeTable& rope);

/// Reference value path: restores V = H * B_v, runs per-head attention and
/// applies W_o. Same result as attend_latent up to rounding.
Mat attend_latent_unfused(const ModelConfig& cfg, const Mat& q_rope, std::span<const int> query_pos, const Mat& h,
                          std::span<const int> key_pos, const LayerFactors& factors, const Mat& wo,
                          const RopeTable& rope);

/// Prefill latents (per layer, or one per merged group) plus per-layer decode suffixes.
class LatentCacheStore {
 public:
  LatentCacheStore(const GroupLayout& layout, std::size_t rank);

  const GroupLayout& layout() const { return layout_; }
  std::size_t rank() const { return rank_; }
  std::size_t prefill_length() const { return prefix_positions_.size(); }
  std::size_t decode_length() const { return suffix_positions_.size(); }
  bool prefill_done() const { return prefill_done_; }
  bool is_merged(std::size_t group) const { return groups_[group].merged; }
  std::size_t merged_count() const;

  const Mat& prefix(std::size_t layer) const;
  const Mat& suffix(std::size_t layer) const { return suffix_[layer]; }
  /// Prefix rows followed by suffix rows.
  Mat visible(std::size_t layer) const;
  std::vector<int> visible_positions() const;
  std::span<const int> prefix_positions() const { return prefix_positions_; }
  std::span<const int> suffix_positions() const { return suffix_positions_; }
  const std::vector<double>& merge_weights(std::size_t group) const { return groups_[group].weights; }

  void begin_prefill(std::span<const int> positions);
  void set_layer_prefix(std::size_t layer, Mat h);
  void end_prefill();
  /// Replaces a group's per-layer prefixes with one shared prefix. Only valid
  /// after prefill and before any decode step.
  void merge_group(std::size_t group, Mat shared, std::vector<double> weights);

  void begin_decode_step(int position);
  void append_decode_latent(std::size_t layer, const Mat& h_new);

  /// FNV-1a over all prefix bytes.
  std::string prefix_checksum() const;

  /// Debug dump; payload holds exactly the stored latents.
  TensorContainer dump() const;

 private:
  struct Group {
    bool merged = false;
    std::vector<Mat> per_layer;
    Mat shared;
    std::vector<double> weights;
  };
  GroupLayout layout_;
  std::size_t rank_;
  std::vector<Group> groups_;
  std::vector<Mat> suffix_;
  std::vector<int> prefix_positions_;
  std::vector<int> suffix_positions_;
  bool prefill_done_ = false;
  bool decode_started_ = false;
};

struct CacheAudit {
  std::size_t prefix_elements = 0;
  std::size_t suffix_elements = 0;
  std::size_t total() const { return prefix_elements + suffix_elements; }
};

/// Counts the elements actually held by the store.
CacheAudit cache_bytes(const LatentCacheStore& store);

/// Closed form: merged groups r*T_pre, unmerged m*r*T_pre, suffixes L*r*T_dec.
CacheAudit predicted_latent_elements(const GroupLayout& layout, std::size_t rank, std::size_t merged_groups,
                                     std::size_t prefill_tokens, std::size_t decode_tokens);

/// Elements a full K/V cache would hold for the same token counts.
std::size_t baseline_kv_elements(const ModelConfig& cfg, std::size_t tokens);

/// Inference session that keeps latents instead of keys and values.
class LatentSession {
 public:
  LatentSession(const ModelWeights& weights, const SharedFactorization& factors, const RopeTable& rope);

  /// Processes the prompt; every layer keeps its own prefix until merged.
  Mat prefill(std::span<const TokenId> tokens);
  Mat decode(TokenId token);

  const LatentCacheStore& store() const { return store_; }
  LatentCacheStore& store() { return store_; }
  const ModelWeights& weights() const { return weights_; }
  const SharedFactorization& factors() const { return factors_; }
  const RopeTable& rope() const { return rope_; }

  /// When enabled, records the cos/sin rows every layer used in the last step.
  void record_rope_usage(bool on) { record_rope_ = on; }
  const std::vector<MatD>& rope_rows_used() const { return rope_rows_; }

 private:
  Mat run(std::span<const TokenId> tokens, std::span<const int> positions, bool prefill);

  const ModelWeights& weights_;
  const SharedFactorization& factors_;
  const RopeTable& rope_;
  LatentCacheStore store_;
  bool record_rope_ = false;
  std::vector<MatD> rope_rows_;
};

}  // namespace xlkv

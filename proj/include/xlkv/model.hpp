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
#include <functional>
#include <span>
#include <vector>

#include "xlkv/container.hpp"
#include "xlkv/rope.hpp"
#include "xlkv/tensor.hpp"

namespace xlkv {

using TokenId = std::int32_t;
using Sequence = std::vector<TokenId>;

inline constexpr std::size_t kVocabSize = 256;
inline constexpr double kRmsEps = 1e-5;

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t d_hidden = 64;
  std::size_t n_q_heads = 4;
  std::size_t n_kv_heads = 2;
  std::size_t d_head = 16;
  std::size_t d_mlp = 128;
  std::size_t vocab_size = kVocabSize;
  double rope_theta = 10000.0;
  std::size_t max_seq = 256;

  std::size_t d_kv() const { return n_kv_heads * d_head; }
  std::size_t q_per_kv() const { return n_q_heads / n_kv_heads; }
  std::size_t kv_head_of(std::size_t q_head) const { return q_head / q_per_kv(); }

  // Throws ConfigError on any violated invariant.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  static ModelConfig toy() { return {}; }
  // Two-layer, d_hidden = 8 model used for finite-difference checks.
  static ModelConfig micro();
};

template <typename T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct BasicLayerWeights {
  VecT<T> attn_norm;  // d_hidden
  MatT<T> wq;         // d_hidden x d_hidden
  MatT<T> wk;         // d_hidden x d_kv
  MatT<T> wv;         // d_hidden x d_kv
  MatT<T> wo;         // d_hidden x d_hidden, row block q*d_head.. belongs to query head q
  VecT<T> mlp_norm;   // d_hidden
  MatT<T> w_up;       // d_hidden x d_mlp
  MatT<T> w_down;     // d_mlp x d_hidden

  template <typename U>
  BasicLayerWeights<U> cast() const {
    return {attn_norm.template cast<U>(), wq.template cast<U>(),       wk.template cast<U>(),
            wv.template cast<U>(),        wo.template cast<U>(),       mlp_norm.template cast<U>(),
            w_up.template cast<U>(),      w_down.template cast<U>()};
  }
};

template <typename T>
struct BasicModelWeights {
  ModelConfig config;
  MatT<T> embed;  // vocab x d_hidden
  std::vector<BasicLayerWeights<T>> layers;
  VecT<T> final_norm;
  MatT<T> head;  // d_hidden x vocab

  template <typename U>
  BasicModelWeights<U> cast() const {
    BasicModelWeights<U> out{config, embed.template cast<U>(), {}, final_norm.template cast<U>(),
                             head.template cast<U>()};
    for (const auto& l : layers) out.layers.push_back(l.template cast<U>());
    return out;
  }
};

using LayerWeights = BasicLayerWeights<float>;
using ModelWeights = BasicModelWeights<float>;
using ModelWeightsF64 = BasicModelWeights<double>;

/// Seeded Gaussian weights scaled by 1/sqrt(fan_in); norm gains start at 1.
ModelWeights gen_toy_model(const ModelConfig& config, std::uint64_t seed);

void validate_weights(const ModelWeights& w);

// Tensor names: "embed", "final_norm", "head", "layers.{l}.{attn_norm,wq,wk,wv,wo,mlp_norm,w_up,w_down}".
void write_weights(TensorContainer& c, const ModelWeights& w);
ModelWeights read_weights(const TensorContainer& c);

// --- building blocks shared by every cache mode ---------------------------

Mat rms_norm(const Mat& x, const Vec& gain);
Mat embed_tokens(const ModelWeights& w, std::span<const TokenId> tokens);
Mat mlp_forward(const LayerWeights& layer, const Mat& normed);
Mat output_logits(const ModelWeights& w, const Mat& x);

/// Causal softmax probabilities for one head: key j is visible to query i iff
/// key_pos[j] <= query_pos[i]. Rows with no visible key are all zero.
MatD attention_probs(const Mat& q_head, const Mat& k_head, std::span<const int> query_pos,
                     std::span<const int> key_pos, double scale);

/// Standard GQA attention over already-rotated queries/keys. Returns the
/// concatenated per-head outputs (tokens x d_hidden), before W_o.
Mat gqa_attention(const ModelConfig& cfg, const Mat& q_rope, const Mat& k_rope, const Mat& v,
                  std::span<const int> query_pos, std::span<const int> key_pos);

/// Produces the post-W_o attention output for `layer` given the normalized
/// hidden state of the new tokens and their positions.
using AttentionFn = std::function<Mat(std::size_t layer, const Mat& normed, std::span<const int> positions)>;
/// Sees each layer's residual-stream input and its normalized form.
using LayerObserver = std::function<void(std::size_t layer, const Mat& input, const Mat& normed)>;

Mat run_decoder(const ModelWeights& w, std::span<const TokenId> tokens, std::span<const int> positions,
                const AttentionFn& attention, const LayerObserver& observer = {});

// --- baseline full-KV engine ---------------------------------------------

/// Rotated keys and raw values per layer, token-major (tokens x d_kv).
struct KvCache {
  std::vector<Mat> k;
  std::vector<Mat> v;
  std::vector<int> positions;

  explicit KvCache(const ModelConfig& cfg);
  std::size_t length() const { return positions.size(); }
  std::size_t elements() const;
};

enum class ForwardMode { Prefill, Decode };

/// Appends the tokens to the cache and returns their logits (tokens x vocab).
/// Decode mode requires exactly one token.
Mat forward_baseline(const ModelWeights& w, const RopeTable& rope, std::span<const TokenId> tokens,
                     ForwardMode mode, KvCache& cache, const LayerObserver& observer = {});

/// Teacher-forced mean next-token NLL of one sequence computed from the
/// baseline engine's f32 logits.
double sequence_nll(const ModelWeights& w, const RopeTable& rope, std::span<const TokenId> tokens);

/// Mean NLL of `logits` rows 0..n-2 predicting tokens 1..n-1, accumulated in f64.
double mean_next_token_nll(const Mat& logits, std::span<const TokenId> tokens);

// --- reverse mode --------------------------------------------------------

struct LossAndGrads {
  double loss = 0.0;
  std::vector<MatD> d_wk;
  std::vector<MatD> d_wv;
};

/// Mean next-token cross-entropy over every prediction in the batch (f64 path).
double teacher_forced_loss(const ModelWeightsF64& w, std::span<const Sequence> batch);
LossAndGrads loss_and_grads(const ModelWeightsF64& w, std::span<const Sequence> batch);
LossAndGrads loss_and_grads(const ModelWeights& w, std::span<const Sequence> batch);

}  // namespace xlkv

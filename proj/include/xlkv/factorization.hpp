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

#include <vector>

#include "xlkv/container.hpp"
#include "xlkv/model.hpp"

namespace xlkv {

/// Consecutive, equally sized runs of layers that share one left factor.
class GroupLayout {
 public:
  GroupLayout(std::size_t n_layers, std::size_t group_size);

  std::size_t group_size() const { return group_size_; }
  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_groups() const { return n_layers_ / group_size_; }
  std::size_t group_of(std::size_t layer) const { return layer / group_size_; }
  std::size_t first_layer(std::size_t group) const { return group * group_size_; }
  std::size_t last_layer(std::size_t group) const { return first_layer(group) + group_size_ - 1; }

 private:
  std::size_t n_layers_;
  std::size_t group_size_;
};

/// Result of a truncated SVD split W_g ~= A * R with A = U_r sqrt(S_r) and
/// R = sqrt(S_r) V_r^T.
struct GroupFactors {
  Mat a;      // d_hidden x r
  Mat right;  // r x (2 m d_kv), column blocks [K_0 | V_0 | K_1 | V_1 | ...]
  VecD singular_values;  // all of them, descending
};

struct LayerFactors {
  Mat bk;                  // r x d_kv
  Mat bv;                  // r x d_kv
  std::vector<Mat> fused;  // per query head: r x d_hidden
  double rel_error_k = 0.0;
  double rel_error_v = 0.0;
};

struct SharedFactorization {
  GroupLayout layout{1, 1};
  std::size_t rank = 0;
  double rank_fraction = 0.0;
  std::vector<Mat> a;  // per group
  std::vector<LayerFactors> layers;

  const Mat& a_for_layer(std::size_t layer) const { return a[layout.group_of(layer)]; }
};

/// Column-concatenates [W_k^l, W_v^l, ..., W_k^{l+m-1}, W_v^{l+m-1}] for one group.
Mat concat_group_weights(const ModelWeights& w, const GroupLayout& layout, std::size_t group);

/// Rank-r SVD split of W_g. The largest-magnitude entry of each left singular
/// vector is made positive so the output is reproducible.
GroupFactors factorize_group(const Mat& wg, std::size_t rank);

/// Splits the right factor into 2m blocks of width d_kv, alternating K and V.
std::vector<Mat> slice_right_factor(const Mat& right, std::size_t group_size, std::size_t d_kv);

/// M_q = B_v[:, cols(kv(q))] * W_o[rows(q), :] for each query head q.
std::vector<Mat> fuse_value_output(const Mat& bv, const Mat& wo, const ModelConfig& cfg);

/// round(fraction * d_hidden) clamped to [1, min(d_hidden, 2 m d_kv)].
std::size_t rank_for_fraction(const ModelConfig& cfg, std::size_t group_size, double rank_fraction);
std::size_t max_rank(const ModelConfig& cfg, std::size_t group_size);

SharedFactorization transform_model(const ModelWeights& w, std::size_t group_size, double rank_fraction);
/// Same transform with an explicit rank instead of a fraction.
SharedFactorization transform_model_rank(const ModelWeights& w, std::size_t group_size, std::size_t rank);

double relative_frobenius_error(const Mat& approx_left, const Mat& approx_right, const Mat& target);

/// Per-layer relative errors, chosen rank and the group layout.
nlohmann::json reconstruction_report(const SharedFactorization& f);

/// Writes the model weights plus every factor; W_v and W_o stay in the file.
TensorContainer factorized_container(const ModelWeights& w, const SharedFactorization& f);

struct FactorizedModel {
  ModelWeights weights;
  SharedFactorization factors;
};
FactorizedModel read_factorized(const TensorContainer& c);

}  // namespace xlkv

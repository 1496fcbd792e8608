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

#include <random>
#include <vector>

#include "xlkv/corpus.hpp"
#include "xlkv/model.hpp"

namespace xlkv::test {

inline Mat random_mat(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(d(rng));
  return m;
}

inline std::vector<Sequence> markov_sequences(std::uint64_t seed, std::size_t count, std::size_t len) {
  const auto bytes = generate_markov_bytes(seed, count * len);
  return split_sequences(bytes, len, count);
}

inline RopeTable rope_for(const ModelConfig& c) { return RopeTable(c.d_head, c.max_seq, c.rope_theta); }

// Straightforward per-element attention used as an oracle: loops over heads,
// queries and keys with an explicit causal mask and max-shifted softmax.
inline Mat naive_gqa(const ModelConfig& c, const Mat& q, const Mat& k, const Mat& v, const std::vector<int>& qpos,
                     const std::vector<int>& kpos) {
  const auto dh = static_cast<Eigen::Index>(c.d_head);
  Mat out = Mat::Zero(q.rows(), static_cast<Eigen::Index>(c.d_hidden));
  for (std::size_t h = 0; h < c.n_q_heads; ++h) {
    const auto kvh = static_cast<Eigen::Index>(h / (c.n_q_heads / c.n_kv_heads));
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      std::vector<double> s(static_cast<std::size_t>(k.rows()), -1e300);
      double mx = -1e300;
      for (Eigen::Index j = 0; j < k.rows(); ++j) {
        if (kpos[static_cast<std::size_t>(j)] > qpos[static_cast<std::size_t>(i)]) continue;
        double dot = 0.0;
        for (Eigen::Index d = 0; d < dh; ++d)
          dot += static_cast<double>(q(i, static_cast<Eigen::Index>(h) * dh + d)) * k(j, kvh * dh + d);
        s[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[static_cast<std::size_t>(j)]);
      }
      double z = 0.0;
      for (auto& x : s) z += (x = x <= -1e299 ? 0.0 : std::exp(x - mx));
      for (Eigen::Index j = 0; j < k.rows(); ++j) {
        const double p = s[static_cast<std::size_t>(j)] / z;
        for (Eigen::Index d = 0; d < dh; ++d)
          out(i, static_cast<Eigen::Index>(h) * dh + d) += static_cast<float>(p * v(j, kvh * dh + d));
      }
    }
  }
  return out;
}

}  // namespace xlkv::test

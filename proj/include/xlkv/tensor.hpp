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

#include <Eigen/Dense>

#include <cstdint>
#include <span>

namespace xlkv {

// Row-major so that one token is one contiguous row.
using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXf;
using VecD = Eigen::VectorXd;

// f32 storage, f64 accumulation.
inline Mat matmul(const Mat& a, const Mat& b) {
  return (a.cast<double>() * b.cast<double>()).cast<float>();
}

inline Mat matmul_nt(const Mat& a, const Mat& b) {
  return (a.cast<double>() * b.cast<double>().transpose()).cast<float>();
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline double max_abs_diff(const Mat& a, const Mat& b) {
  if (a.size() == 0) return 0.0;
  return (a.cast<double>() - b.cast<double>()).cwiseAbs().maxCoeff();
}

// Cosine of two rows; zero-norm rows contribute 0.
template <typename A, typename B>
double cosine(const A& x, const B& y) {
  const double nx = x.template cast<double>().norm();
  const double ny = y.template cast<double>().norm();
  if (nx == 0.0 || ny == 0.0) return 0.0;
  return x.template cast<double>().dot(y.template cast<double>()) / (nx * ny);
}

// Mean token cosine between two equally shaped token-major matrices.
template <typename M>
double mean_row_cosine(const M& a, const M& b) {
  if (a.rows() == 0) return 0.0;
  double acc = 0.0;
  for (Eigen::Index t = 0; t < a.rows(); ++t) acc += cosine(a.row(t), b.row(t));
  return acc / static_cast<double>(a.rows());
}

}  // namespace xlkv

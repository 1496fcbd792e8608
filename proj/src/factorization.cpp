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
#include "xlkv/factorization.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <string>

#include "xlkv/errors.hpp"

namespace xlkv {

GroupLayout::GroupLayout(std::size_t n_layers, std::size_t group_size) : n_layers_(n_layers), group_size_(group_size) {
  if (group_size == 0 || n_layers == 0) throw ConfigError("group size and layer count must be positive");
  if (n_layers % group_size != 0)
    throw ConfigError("n_layers (" + std::to_string(n_layers) + ") is not divisible by group size (" +
                      std::to_string(group_size) + ")");
}

Mat concat_group_weights(const ModelWeights& w, const GroupLayout& layout, std::size_t group) {
  if (layout.n_layers() != w.config.n_layers || group >= layout.n_groups())
    throw ConfigError("group layout does not match the model");
  const auto dkv = static_cast<Eigen::Index>(w.config.d_kv());
  const auto m = static_cast<Eigen::Index>(layout.group_size());
  Mat wg(static_cast<Eigen::Index>(w.config.d_hidden), 2 * m * dkv);
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& L = w.layers[layout.first_layer(group) + static_cast<std::size_t>(j)];
    wg.middleCols(2 * j * dkv, dkv) = L.wk;
    wg.middleCols((2 * j + 1) * dkv, dkv) = L.wv;
  }
  return wg;
}

GroupFactors factorize_group(const Mat& wg, std::size_t rank) {
  const auto max_r = static_cast<std::size_t>(std::min(wg.rows(), wg.cols()));
  if (rank < 1 || rank > max_r)
    throw ConfigError("rank " + std::to_string(rank) + " outside [1, " + std::to_string(max_r) + "]");
  if (!wg.allFinite()) throw NumericError("cannot factorize a matrix with non-finite entries");

  const Eigen::MatrixXd src = wg.cast<double>();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(src, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw NumericError("SVD did not converge");

  Eigen::MatrixXd u = svd.matrixU();
  Eigen::MatrixXd v = svd.matrixV();
  for (Eigen::Index i = 0; i < u.cols(); ++i) {
    Eigen::Index arg = 0;
    u.col(i).cwiseAbs().maxCoeff(&arg);
    if (u(arg, i) < 0.0) {
      u.col(i) = -u.col(i);
      v.col(i) = -v.col(i);
    }
  }

  const auto r = static_cast<Eigen::Index>(rank);
  const VecD root = svd.singularValues().head(r).cwiseSqrt();
  GroupFactors out;
  out.singular_values = svd.singularValues();
  out.a = (u.leftCols(r) * root.asDiagonal()).cast<float>();
  out.right = (root.asDiagonal() * v.leftCols(r).transpose()).cast<float>();
  return out;
}

std::vector<Mat> slice_right_factor(const Mat& right, std::size_t group_size, std::size_t d_kv) {
  const auto w = static_cast<Eigen::Index>(d_kv);
  if (right.cols() != static_cast<Eigen::Index>(2 * group_size * d_kv))
    throw ConfigError("right factor width does not match 2 * group_size * d_kv");
  std::vector<Mat> blocks;
  for (std::size_t b = 0; b < 2 * group_size; ++b) blocks.emplace_back(right.middleCols(static_cast<Eigen::Index>(b) * w, w));
  return blocks;
}

std::vector<Mat> fuse_value_output(const Mat& bv, const Mat& wo, const ModelConfig& cfg) {
  const auto dh = static_cast<Eigen::Index>(cfg.d_head);
  if (bv.cols() != static_cast<Eigen::Index>(cfg.d_kv()) || wo.rows() != static_cast<Eigen::Index>(cfg.d_hidden))
    throw ConfigError("fuse_value_output: factor shapes inconsistent with config");
  std::vector<Mat> fused;
  for (std::size_t q = 0; q < cfg.n_q_heads; ++q) {
    const auto kv = static_cast<Eigen::Index>(cfg.kv_head_of(q));
    fused.push_back(matmul(bv.middleCols(kv * dh, dh), wo.middleRows(static_cast<Eigen::Index>(q) * dh, dh)));
  }
  return fused;
}

std::size_t max_rank(const ModelConfig& cfg, std::size_t group_size) {
  return std::min(cfg.d_hidden, 2 * group_size * cfg.d_kv());
}

std::size_t rank_for_fraction(const ModelConfig& cfg, std::size_t group_size, double rank_fraction) {
  if (!(rank_fraction > 0.0 && rank_fraction <= 1.0)) throw ConfigError("rank fraction must lie in (0, 1]");
  const auto raw = static_cast<long long>(std::llround(rank_fraction * static_cast<double>(cfg.d_hidden)));
  return static_cast<std::size_t>(std::clamp<long long>(raw, 1, static_cast<long long>(max_rank(cfg, group_size))));
}

double relative_frobenius_error(const Mat& approx_left, const Mat& approx_right, const Mat& target) {
  const Eigen::MatrixXd diff =
      approx_left.cast<double>() * approx_right.cast<double>() - target.cast<double>();
  const double denom = target.cast<double>().norm();
  return denom == 0.0 ? diff.norm() : diff.norm() / denom;
}

SharedFactorization transform_model_rank(const ModelWeights& w, std::size_t group_size, std::size_t rank) {
  const auto& cfg = w.config;
  SharedFactorization f;
  f.layout = GroupLayout(cfg.n_layers, group_size);
  f.rank = rank;
  f.layers.resize(cfg.n_layers);
  for (std::size_t g = 0; g < f.layout.n_groups(); ++g) {
    GroupFactors gf = factorize_group(concat_group_weights(w, f.layout, g), rank);
    const auto blocks = slice_right_factor(gf.right, group_size, cfg.d_kv());
    for (std::size_t j = 0; j < group_size; ++j) {
      const auto l = f.layout.first_layer(g) + j;
      auto& lf = f.layers[l];
      lf.bk = blocks[2 * j];
      lf.bv = blocks[2 * j + 1];
      lf.fused = fuse_value_output(lf.bv, w.layers[l].wo, cfg);
      lf.rel_error_k = relative_frobenius_error(gf.a, lf.bk, w.layers[l].wk);
      lf.rel_error_v = relative_frobenius_error(gf.a, lf.bv, w.layers[l].wv);
    }
    f.a.push_back(std::move(gf.a));
  }
  return f;
}

SharedFactorization transform_model(const ModelWeights& w, std::size_t group_size, double rank_fraction) {
  GroupLayout(w.config.n_layers, group_size);
  auto f = transform_model_rank(w, group_size, rank_for_fraction(w.config, group_size, rank_fraction));
  f.rank_fraction = rank_fraction;
  return f;
}

nlohmann::json reconstruction_report(const SharedFactorization& f) {
  nlohmann::json layers = nlohmann::json::array();
  double worst = 0.0;
  for (std::size_t l = 0; l < f.layers.size(); ++l) {
    layers.push_back({{"layer", l},
                      {"group", f.layout.group_of(l)},
                      {"rel_error_k", f.layers[l].rel_error_k},
                      {"rel_error_v", f.layers[l].rel_error_v}});
    worst = std::max({worst, f.layers[l].rel_error_k, f.layers[l].rel_error_v});
  }
  nlohmann::json groups = nlohmann::json::array();
  for (std::size_t g = 0; g < f.layout.n_groups(); ++g) groups.push_back({f.layout.first_layer(g), f.layout.last_layer(g)});
  return {{"rank", f.rank},
          {"rank_fraction", f.rank_fraction},
          {"group_size", f.layout.group_size()},
          {"groups", groups},
          {"layers", layers},
          {"max_rel_error", worst}};
}

TensorContainer factorized_container(const ModelWeights& w, const SharedFactorization& f) {
  TensorContainer c;
  write_weights(c, w);
  c.metadata["factorization"] = {{"rank", f.rank}, {"rank_fraction", f.rank_fraction}, {"group_size", f.layout.group_size()}};
  for (std::size_t g = 0; g < f.a.size(); ++g) c.put("groups." + std::to_string(g) + ".a", f.a[g]);
  for (std::size_t l = 0; l < f.layers.size(); ++l) {
    const auto p = "layers." + std::to_string(l) + ".";
    c.put(p + "bk", f.layers[l].bk);
    c.put(p + "bv", f.layers[l].bv);
    for (std::size_t q = 0; q < f.layers[l].fused.size(); ++q) c.put(p + "fused." + std::to_string(q), f.layers[l].fused[q]);
  }
  return c;
}

FactorizedModel read_factorized(const TensorContainer& c) {
  FactorizedModel out{read_weights(c), {}};
  if (!c.metadata.contains("factorization")) throw IoError("container holds no factorization");
  const auto& meta = c.metadata.at("factorization");
  const auto& cfg = out.weights.config;
  auto& f = out.factors;
  f.layout = GroupLayout(cfg.n_layers, meta.at("group_size").get<std::size_t>());
  f.rank = meta.at("rank").get<std::size_t>();
  f.rank_fraction = meta.at("rank_fraction").get<double>();
  for (std::size_t g = 0; g < f.layout.n_groups(); ++g) f.a.push_back(c.matrix("groups." + std::to_string(g) + ".a"));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto p = "layers." + std::to_string(l) + ".";
    LayerFactors lf;
    lf.bk = c.matrix(p + "bk");
    lf.bv = c.matrix(p + "bv");
    for (std::size_t q = 0; q < cfg.n_q_heads; ++q) lf.fused.push_back(c.matrix(p + "fused." + std::to_string(q)));
    const Mat& a = f.a[f.layout.group_of(l)];
    if (a.cols() != static_cast<Eigen::Index>(f.rank) || lf.bk.rows() != a.cols())
      throw IoError("factor shapes do not match the recorded rank");
    lf.rel_error_k = relative_frobenius_error(a, lf.bk, out.weights.layers[l].wk);
    lf.rel_error_v = relative_frobenius_error(a, lf.bv, out.weights.layers[l].wv);
    f.layers.push_back(std::move(lf));
  }
  return out;
}

}  // namespace xlkv

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
#include "xlkv/model.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "xlkv/errors.hpp"

namespace xlkv {

void ModelConfig::validate() const {
  if (n_layers == 0 || d_hidden == 0 || n_q_heads == 0 || n_kv_heads == 0 || d_head == 0 || d_mlp == 0 ||
      max_seq == 0)
    throw ConfigError("model dimensions must be positive");
  if (vocab_size != kVocabSize) throw ConfigError("vocabulary is fixed at 256 byte tokens");
  if (d_hidden != n_q_heads * d_head)
    throw ConfigError("d_hidden (" + std::to_string(d_hidden) + ") must equal n_q_heads * d_head (" +
                      std::to_string(n_q_heads * d_head) + ")");
  if (n_q_heads % n_kv_heads != 0)
    throw ConfigError("n_q_heads (" + std::to_string(n_q_heads) + ") must be a multiple of n_kv_heads (" +
                      std::to_string(n_kv_heads) + ")");
  if (d_head % 2 != 0) throw ConfigError("d_head must be even for rotary embeddings");
  if (d_kv() > d_hidden) throw ConfigError("d_kv must not exceed d_hidden");
  if (!(rope_theta > 0.0) || !std::isfinite(rope_theta)) throw ConfigError("rope_theta must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers}, {"d_hidden", d_hidden},     {"n_q_heads", n_q_heads},
          {"n_kv_heads", n_kv_heads}, {"d_head", d_head},     {"d_mlp", d_mlp},
          {"vocab_size", vocab_size}, {"rope_theta", rope_theta}, {"max_seq", max_seq}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_hidden = j.at("d_hidden").get<std::size_t>();
    c.n_q_heads = j.at("n_q_heads").get<std::size_t>();
    c.n_kv_heads = j.at("n_kv_heads").get<std::size_t>();
    c.d_head = j.at("d_head").get<std::size_t>();
    c.d_mlp = j.at("d_mlp").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.rope_theta = j.at("rope_theta").get<double>();
    c.max_seq = j.at("max_seq").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_hidden = 8;
  c.n_q_heads = 2;
  c.n_kv_heads = 1;
  c.d_head = 4;
  c.d_mlp = 16;
  c.max_seq = 64;
  return c;
}

namespace {

Mat gaussian(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double scale) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(dist(rng) * scale);
  return m;
}

double fan_in_scale(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

void check_shape(const Mat& m, std::size_t rows, std::size_t cols, const std::string& what) {
  if (static_cast<std::size_t>(m.rows()) != rows || static_cast<std::size_t>(m.cols()) != cols)
    throw ConfigError(what + " has shape " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                      ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  if (!m.allFinite()) throw NumericError(what + " has non-finite entries");
}

void check_shape(const Vec& v, std::size_t n, const std::string& what) {
  if (static_cast<std::size_t>(v.size()) != n) throw ConfigError(what + " has wrong length");
  if (!v.allFinite()) throw NumericError(what + " has non-finite entries");
}

}  // namespace

ModelWeights gen_toy_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const auto d = config.d_hidden;
  ModelWeights w;
  w.config = config;
  // Embedding rows are unit-variance so the residual stream starts O(1).
  w.embed = gaussian(rng, config.vocab_size, d, 1.0);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights layer;
    layer.attn_norm = Vec::Ones(d);
    layer.wq = gaussian(rng, d, d, fan_in_scale(d));
    layer.wk = gaussian(rng, d, config.d_kv(), fan_in_scale(d));
    layer.wv = gaussian(rng, d, config.d_kv(), fan_in_scale(d));
    layer.wo = gaussian(rng, d, d, fan_in_scale(d));
    layer.mlp_norm = Vec::Ones(d);
    layer.w_up = gaussian(rng, d, config.d_mlp, fan_in_scale(d));
    layer.w_down = gaussian(rng, config.d_mlp, d, fan_in_scale(config.d_mlp));
    w.layers.push_back(std::move(layer));
  }
  w.final_norm = Vec::Ones(d);
  w.head = gaussian(rng, d, config.vocab_size, fan_in_scale(d));
  return w;
}

void validate_weights(const ModelWeights& w) {
  const auto& c = w.config;
  c.validate();
  check_shape(w.embed, c.vocab_size, c.d_hidden, "embed");
  if (w.layers.size() != c.n_layers) throw ConfigError("layer count does not match config");
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = w.layers[l];
    const auto p = "layers." + std::to_string(l) + ".";
    check_shape(L.attn_norm, c.d_hidden, p + "attn_norm");
    check_shape(L.wq, c.d_hidden, c.d_hidden, p + "wq");
    check_shape(L.wk, c.d_hidden, c.d_kv(), p + "wk");
    check_shape(L.wv, c.d_hidden, c.d_kv(), p + "wv");
    check_shape(L.wo, c.d_hidden, c.d_hidden, p + "wo");
    check_shape(L.mlp_norm, c.d_hidden, p + "mlp_norm");
    check_shape(L.w_up, c.d_hidden, c.d_mlp, p + "w_up");
    check_shape(L.w_down, c.d_mlp, c.d_hidden, p + "w_down");
  }
  check_shape(w.final_norm, c.d_hidden, "final_norm");
  check_shape(w.head, c.d_hidden, c.vocab_size, "head");
}

void write_weights(TensorContainer& c, const ModelWeights& w) {
  c.metadata["model"] = w.config.to_json();
  c.put("embed", w.embed);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& L = w.layers[l];
    const auto p = "layers." + std::to_string(l) + ".";
    c.put_vector(p + "attn_norm", L.attn_norm);
    c.put(p + "wq", L.wq);
    c.put(p + "wk", L.wk);
    c.put(p + "wv", L.wv);
    c.put(p + "wo", L.wo);
    c.put_vector(p + "mlp_norm", L.mlp_norm);
    c.put(p + "w_up", L.w_up);
    c.put(p + "w_down", L.w_down);
  }
  c.put_vector("final_norm", w.final_norm);
  c.put("head", w.head);
}

ModelWeights read_weights(const TensorContainer& c) {
  if (!c.metadata.contains("model")) throw IoError("container has no model config");
  ModelWeights w;
  w.config = ModelConfig::from_json(c.metadata.at("model"));
  w.embed = c.matrix("embed");
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    const auto p = "layers." + std::to_string(l) + ".";
    LayerWeights L;
    L.attn_norm = c.vector(p + "attn_norm");
    L.wq = c.matrix(p + "wq");
    L.wk = c.matrix(p + "wk");
    L.wv = c.matrix(p + "wv");
    L.wo = c.matrix(p + "wo");
    L.mlp_norm = c.vector(p + "mlp_norm");
    L.w_up = c.matrix(p + "w_up");
    L.w_down = c.matrix(p + "w_down");
    w.layers.push_back(std::move(L));
  }
  w.final_norm = c.vector("final_norm");
  w.head = c.matrix("head");
  validate_weights(w);
  return w;
}

Mat rms_norm(const Mat& x, const Vec& gain) {
  Mat y(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double ms = x.row(t).cast<double>().squaredNorm() / static_cast<double>(x.cols());
    const double inv = 1.0 / std::sqrt(ms + kRmsEps);
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      y(t, j) = static_cast<float>(static_cast<double>(x(t, j)) * inv * static_cast<double>(gain(j)));
  }
  return y;
}

Mat embed_tokens(const ModelWeights& w, std::span<const TokenId> tokens) {
  Mat x(static_cast<Eigen::Index>(tokens.size()), w.embed.cols());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto id = tokens[t];
    if (id < 0 || static_cast<std::size_t>(id) >= w.config.vocab_size)
      throw InputError("token id " + std::to_string(id) + " outside vocabulary");
    x.row(static_cast<Eigen::Index>(t)) = w.embed.row(id);
  }
  return x;
}

Mat mlp_forward(const LayerWeights& layer, const Mat& normed) {
  MatD u = normed.cast<double>() * layer.w_up.cast<double>();
  // SiLU
  u = u.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
  const Mat g = u.cast<float>();
  return matmul(g, layer.w_down);
}

Mat output_logits(const ModelWeights& w, const Mat& x) { return matmul(rms_norm(x, w.final_norm), w.head); }

MatD attention_probs(const Mat& q_head, const Mat& k_head, std::span<const int> query_pos,
                     std::span<const int> key_pos, double scale) {
  MatD s = (q_head.cast<double>() * k_head.cast<double>().transpose()) * scale;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      if (key_pos[static_cast<std::size_t>(j)] > query_pos[static_cast<std::size_t>(i)])
        s(i, j) = -std::numeric_limits<double>::infinity();
      else
        mx = std::max(mx, s(i, j));
    }
    if (!std::isfinite(mx)) {
      s.row(i).setZero();
      continue;
    }
    double sum = 0.0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      s(i, j) = std::isinf(s(i, j)) ? 0.0 : std::exp(s(i, j) - mx);
      sum += s(i, j);
    }
    s.row(i) /= sum;
  }
  return s;
}

Mat gqa_attention(const ModelConfig& cfg, const Mat& q_rope, const Mat& k_rope, const Mat& v,
                  std::span<const int> query_pos, std::span<const int> key_pos) {
  const auto dh = static_cast<Eigen::Index>(cfg.d_head);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  Mat out(q_rope.rows(), static_cast<Eigen::Index>(cfg.d_hidden));
  for (std::size_t q = 0; q < cfg.n_q_heads; ++q) {
    const auto kv = static_cast<Eigen::Index>(cfg.kv_head_of(q));
    const Mat qh = q_rope.middleCols(static_cast<Eigen::Index>(q) * dh, dh);
    const Mat kh = k_rope.middleCols(kv * dh, dh);
    const MatD p = attention_probs(qh, kh, query_pos, key_pos, scale);
    out.middleCols(static_cast<Eigen::Index>(q) * dh, dh) =
        (p * v.middleCols(kv * dh, dh).cast<double>()).cast<float>();
  }
  return out;
}

Mat run_decoder(const ModelWeights& w, std::span<const TokenId> tokens, std::span<const int> positions,
                const AttentionFn& attention, const LayerObserver& observer) {
  Mat x = embed_tokens(w, tokens);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& layer = w.layers[l];
    const Mat normed = rms_norm(x, layer.attn_norm);
    if (observer) observer(l, x, normed);
    x += attention(l, normed, positions);
    x += mlp_forward(layer, rms_norm(x, layer.mlp_norm));
  }
  return output_logits(w, x);
}

KvCache::KvCache(const ModelConfig& cfg) : k(cfg.n_layers), v(cfg.n_layers) {
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    k[l].resize(0, static_cast<Eigen::Index>(cfg.d_kv()));
    v[l].resize(0, static_cast<Eigen::Index>(cfg.d_kv()));
  }
}

std::size_t KvCache::elements() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < k.size(); ++l) n += static_cast<std::size_t>(k[l].size() + v[l].size());
  return n;
}

namespace {

Mat append_rows(const Mat& a, const Mat& b) {
  Mat out(a.rows() + b.rows(), b.cols());
  out.topRows(a.rows()) = a;
  out.bottomRows(b.rows()) = b;
  return out;
}

}  // namespace

Mat forward_baseline(const ModelWeights& w, const RopeTable& rope, std::span<const TokenId> tokens,
                     ForwardMode mode, KvCache& cache, const LayerObserver& observer) {
  const auto& cfg = w.config;
  if (mode == ForwardMode::Decode && tokens.size() != 1) throw InputError("decode takes exactly one token");
  if (tokens.empty()) throw InputError("no tokens to process");
  if (cache.length() + tokens.size() > cfg.max_seq)
    throw CapacityError("sequence of " + std::to_string(cache.length() + tokens.size()) +
                        " tokens exceeds max_seq " + std::to_string(cfg.max_seq));

  std::vector<int> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), static_cast<int>(cache.length()));
  std::vector<int> key_pos = cache.positions;
  key_pos.insert(key_pos.end(), positions.begin(), positions.end());

  auto attention = [&](std::size_t l, const Mat& normed, std::span<const int> pos) {
    const auto& layer = w.layers[l];
    Mat q = matmul(normed, layer.wq);
    Mat k = matmul(normed, layer.wk);
    apply_rope(q, pos, rope);
    apply_rope(k, pos, rope);
    cache.k[l] = append_rows(cache.k[l], k);
    cache.v[l] = append_rows(cache.v[l], matmul(normed, layer.wv));
    return matmul(gqa_attention(cfg, q, cache.k[l], cache.v[l], pos, key_pos), layer.wo);
  };
  Mat logits = run_decoder(w, tokens, positions, attention, observer);
  cache.positions = std::move(key_pos);
  return logits;
}

double mean_next_token_nll(const Mat& logits, std::span<const TokenId> tokens) {
  if (tokens.size() < 2) throw InputError("need at least two tokens for next-token loss");
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const auto row = logits.row(static_cast<Eigen::Index>(t)).cast<double>();
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    total += lse - row(tokens[t + 1]);
  }
  return total / static_cast<double>(tokens.size() - 1);
}

double sequence_nll(const ModelWeights& w, const RopeTable& rope, std::span<const TokenId> tokens) {
  KvCache cache(w.config);
  return mean_next_token_nll(forward_baseline(w, rope, tokens, ForwardMode::Prefill, cache), tokens);
}

}  // namespace xlkv

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
#include "xlkv/latent_cache.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "xlkv/errors.hpp"

namespace xlkv {

Mat compute_latent(const Mat& x, const Mat& a) {
  if (x.cols() != a.rows()) throw InputError("compute_latent: hidden width does not match A");
  return matmul(x, a);
}

Mat restore_keys(const Mat& h, const Mat& bk, std::span<const int> positions, const RopeTable& rope) {
  Mat k = matmul(h, bk);
  apply_rope(k, positions, rope);
  return k;
}

Mat attend_latent(const ModelConfig& cfg, const Mat& q_rope, std::span<const int> query_pos, const Mat& h,
                  std::span<const int> key_pos, const LayerFactors& factors, const RopeTable& rope) {
  const auto dh = static_cast<Eigen::Index>(cfg.d_head);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  const Mat k = restore_keys(h, factors.bk, key_pos, rope);
  const MatD hd = h.cast<double>();
  MatD out = MatD::Zero(q_rope.rows(), static_cast<Eigen::Index>(cfg.d_hidden));
  for (std::size_t q = 0; q < cfg.n_q_heads; ++q) {
    const auto kv = static_cast<Eigen::Index>(cfg.kv_head_of(q));
    const MatD p = attention_probs(q_rope.middleCols(static_cast<Eigen::Index>(q) * dh, dh), k.middleCols(kv * dh, dh),
                                   query_pos, key_pos, scale);
    out += (p * hd) * factors.fused[q].cast<double>();
  }
  return out.cast<float>();
}

Mat attend_latent_unfused(const ModelConfig& cfg, const Mat& q_rope, std::span<const int> query_pos, const Mat& h,
                          std::span<const int> key_pos, const LayerFactors& factors, const Mat& wo,
                          const RopeTable& rope) {
  const Mat k = restore_keys(h, factors.bk, key_pos, rope);
  const Mat v = matmul(h, factors.bv);
  return matmul(gqa_attention(cfg, q_rope, k, v, query_pos, key_pos), wo);
}

LatentCacheStore::LatentCacheStore(const GroupLayout& layout, std::size_t rank)
    : layout_(layout), rank_(rank), groups_(layout.n_groups()), suffix_(layout.n_layers()) {
  const auto r = static_cast<Eigen::Index>(rank);
  for (auto& g : groups_) g.per_layer.assign(layout.group_size(), Mat(0, r));
  for (auto& s : suffix_) s.resize(0, r);
}

std::size_t LatentCacheStore::merged_count() const {
  std::size_t n = 0;
  for (const auto& g : groups_) n += g.merged ? 1 : 0;
  return n;
}

const Mat& LatentCacheStore::prefix(std::size_t layer) const {
  const auto& g = groups_[layout_.group_of(layer)];
  return g.merged ? g.shared : g.per_layer[layer - layout_.first_layer(layout_.group_of(layer))];
}

Mat LatentCacheStore::visible(std::size_t layer) const {
  const Mat& p = prefix(layer);
  const Mat& s = suffix_[layer];
  Mat out(p.rows() + s.rows(), static_cast<Eigen::Index>(rank_));
  out.topRows(p.rows()) = p;
  out.bottomRows(s.rows()) = s;
  return out;
}

std::vector<int> LatentCacheStore::visible_positions() const {
  std::vector<int> pos(prefix_positions_);
  pos.insert(pos.end(), suffix_positions_.begin(), suffix_positions_.end());
  return pos;
}

void LatentCacheStore::begin_prefill(std::span<const int> positions) {
  if (prefill_done_ || decode_started_) throw InputError("prefill must run once, before any decode step");
  prefix_positions_.assign(positions.begin(), positions.end());
}

void LatentCacheStore::set_layer_prefix(std::size_t layer, Mat h) {
  auto& g = groups_[layout_.group_of(layer)];
  if (g.merged) throw InputError("cannot overwrite the prefix of a merged group");
  if (h.rows() != static_cast<Eigen::Index>(prefix_positions_.size()) || h.cols() != static_cast<Eigen::Index>(rank_))
    throw InputError("prefix shape does not match prefill length and rank");
  if (!h.allFinite()) throw NumericError("non-finite latent");
  g.per_layer[layer - layout_.first_layer(layout_.group_of(layer))] = std::move(h);
}

void LatentCacheStore::end_prefill() { prefill_done_ = true; }

void LatentCacheStore::merge_group(std::size_t group, Mat shared, std::vector<double> weights) {
  if (!prefill_done_ || decode_started_) throw InputError("groups merge after prefill and before decoding");
  auto& g = groups_.at(group);
  if (g.merged) throw InputError("group " + std::to_string(group) + " already merged");
  if (shared.rows() != static_cast<Eigen::Index>(prefill_length()) || shared.cols() != static_cast<Eigen::Index>(rank_))
    throw InputError("merged prefix shape mismatch");
  g.merged = true;
  g.shared = std::move(shared);
  g.weights = std::move(weights);
  g.per_layer.clear();
  g.per_layer.shrink_to_fit();
}

void LatentCacheStore::begin_decode_step(int position) {
  decode_started_ = true;
  suffix_positions_.push_back(position);
}

void LatentCacheStore::append_decode_latent(std::size_t layer, const Mat& h_new) {
  auto& s = suffix_.at(layer);
  if (h_new.cols() != static_cast<Eigen::Index>(rank_)) throw InputError("decode latent width mismatch");
  if (s.rows() + h_new.rows() > static_cast<Eigen::Index>(suffix_positions_.size()))
    throw InputError("append_decode_latent without a matching decode step");
  Mat grown(s.rows() + h_new.rows(), s.cols());
  grown.topRows(s.rows()) = s;
  grown.bottomRows(h_new.rows()) = h_new;
  s = std::move(grown);
}

std::string LatentCacheStore::prefix_checksum() const {
  std::vector<std::uint8_t> bytes;
  auto add = [&](const Mat& m) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
    bytes.insert(bytes.end(), p, p + m.size() * static_cast<Eigen::Index>(sizeof(float)));
  };
  for (const auto& g : groups_) {
    if (g.merged)
      add(g.shared);
    else
      for (const auto& m : g.per_layer) add(m);
  }
  return fnv1a_hex(bytes);
}

TensorContainer LatentCacheStore::dump() const {
  TensorContainer c;
  c.metadata["latent_store"] = {{"rank", rank_},
                                {"group_size", layout_.group_size()},
                                {"prefix_positions", prefix_positions_},
                                {"suffix_positions", suffix_positions_}};
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    const auto p = "groups." + std::to_string(g) + ".";
    if (groups_[g].merged) {
      c.put(p + "shared", groups_[g].shared);
    } else {
      for (std::size_t j = 0; j < groups_[g].per_layer.size(); ++j)
        c.put(p + "layer." + std::to_string(layout_.first_layer(g) + j), groups_[g].per_layer[j]);
    }
  }
  for (std::size_t l = 0; l < suffix_.size(); ++l)
    if (suffix_[l].size() > 0) c.put("suffix." + std::to_string(l), suffix_[l]);
  return c;
}

CacheAudit cache_bytes(const LatentCacheStore& store) {
  CacheAudit a;
  const auto& layout = store.layout();
  for (std::size_t g = 0; g < layout.n_groups(); ++g) {
    if (store.is_merged(g)) {
      a.prefix_elements += static_cast<std::size_t>(store.prefix(layout.first_layer(g)).size());
    } else {
      for (std::size_t l = layout.first_layer(g); l <= layout.last_layer(g); ++l)
        a.prefix_elements += static_cast<std::size_t>(store.prefix(l).size());
    }
  }
  for (std::size_t l = 0; l < layout.n_layers(); ++l) a.suffix_elements += static_cast<std::size_t>(store.suffix(l).size());
  return a;
}

CacheAudit predicted_latent_elements(const GroupLayout& layout, std::size_t rank, std::size_t merged_groups,
                                     std::size_t prefill_tokens, std::size_t decode_tokens) {
  const std::size_t unmerged = layout.n_groups() - merged_groups;
  return {(merged_groups * rank + unmerged * layout.group_size() * rank) * prefill_tokens,
          layout.n_layers() * rank * decode_tokens};
}

std::size_t baseline_kv_elements(const ModelConfig& cfg, std::size_t tokens) {
  return cfg.n_layers * 2 * cfg.d_kv() * tokens;
}

LatentSession::LatentSession(const ModelWeights& weights, const SharedFactorization& factors, const RopeTable& rope)
    : weights_(weights), factors_(factors), rope_(rope), store_(factors.layout, factors.rank) {
  if (factors.layout.n_layers() != weights.config.n_layers || factors.layers.size() != weights.config.n_layers)
    throw ConfigError("factorization does not match the model");
  if (rope.d_head() != weights.config.d_head) throw ConfigError("rope table head size mismatch");
}

Mat LatentSession::prefill(std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("empty prompt");
  if (tokens.size() > weights_.config.max_seq) throw CapacityError("prompt exceeds max_seq");
  std::vector<int> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), 0);
  store_.begin_prefill(positions);
  Mat logits = run(tokens, positions, true);
  store_.end_prefill();
  return logits;
}

Mat LatentSession::decode(TokenId token) {
  const int pos = static_cast<int>(store_.prefill_length() + store_.decode_length());
  if (static_cast<std::size_t>(pos) >= weights_.config.max_seq)
    throw CapacityError("decode position " + std::to_string(pos) + " exceeds max_seq");
  store_.begin_decode_step(pos);
  const int positions[1] = {pos};
  const TokenId tokens[1] = {token};
  return run(tokens, positions, false);
}

Mat LatentSession::run(std::span<const TokenId> tokens, std::span<const int> positions, bool prefill) {
  const auto& cfg = weights_.config;
  if (record_rope_) rope_rows_.assign(cfg.n_layers, MatD());

  auto attention = [&](std::size_t l, const Mat& normed, std::span<const int> pos) {
    const auto& lf = factors_.layers[l];
    const Mat h = compute_latent(normed, factors_.a_for_layer(l));
    if (prefill)
      store_.set_layer_prefix(l, h);
    else
      store_.append_decode_latent(l, h);

    Mat q = matmul(normed, weights_.layers[l].wq);
    apply_rope(q, pos, rope_);
    if (record_rope_) {
      MatD rows(static_cast<Eigen::Index>(pos.size()), rope_.cos().cols() * 2);
      for (std::size_t t = 0; t < pos.size(); ++t)
        rows.row(static_cast<Eigen::Index>(t)) << rope_.cos().row(pos[t]), rope_.sin().row(pos[t]);
      rope_rows_[l] = std::move(rows);
    }
    return attend_latent(cfg, q, pos, store_.visible(l), store_.visible_positions(), lf, rope_);
  };
  return run_decoder(weights_, tokens, positions, attention);
}

}  // namespace xlkv

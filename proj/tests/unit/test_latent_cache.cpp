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
#include <doctest.h>

#include <Eigen/QR>
#include <numeric>

#include "helpers.hpp"
#include "xlkv/budget.hpp"
#include "xlkv/errors.hpp"
#include "xlkv/latent_cache.hpp"

using namespace xlkv;
using namespace xlkv::test;

TEST_CASE("latent of an orthogonal factor keeps row norms") {
  std::mt19937_64 rng(1);
  const Mat g = random_mat(rng, 16, 16);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g.cast<double>()).householderQ();
  const Mat a = q.cast<float>();
  const Mat x = random_mat(rng, 5, 16);
  const Mat h = compute_latent(x, a);
  for (Eigen::Index t = 0; t < 5; ++t) CHECK(h.row(t).norm() == doctest::Approx(x.row(t).norm()).epsilon(1e-5));
  CHECK_THROWS_AS(compute_latent(x, Mat::Ones(4, 4)), InputError);
}

TEST_CASE("restored keys are rotated products") {
  std::mt19937_64 rng(2);
  const RopeTable rope(4, 32, 10000.0);
  const Mat h = random_mat(rng, 3, 6), bk = random_mat(rng, 6, 8);
  const std::vector<int> pos{4, 9, 17};
  Mat ref = (h.cast<double>() * bk.cast<double>()).cast<float>();
  apply_rope(ref, pos, rope);
  CHECK(max_abs_diff(restore_keys(h, bk, pos, rope), ref) < 1e-6);
}

TEST_CASE("latent session at full rank reproduces baseline decoding") {
  const ModelWeights w = gen_toy_model(ModelConfig::toy(), 6);
  const RopeTable rope = rope_for(w.config);
  const auto f = transform_model_rank(w, 4, 64);
  const Sequence seq = markov_sequences(3, 1, 30).front();
  KvCache cache(w.config);
  const Mat ref = forward_baseline(w, rope, seq, ForwardMode::Prefill, cache);
  LatentSession s(w, f, rope);
  CHECK(max_abs_diff(s.prefill(std::span(seq).first(20)), ref.topRows(20)) < 1e-4);
  for (std::size_t t = 20; t < seq.size(); ++t)
    CHECK(max_abs_diff(s.decode(seq[t]), ref.row(static_cast<Eigen::Index>(t))) < 1e-4);
}

TEST_CASE("decode recomputes rotations from position ids") {
  const ModelWeights w = gen_toy_model(ModelConfig::micro(), 6);
  const RopeTable rope = rope_for(w.config);
  const auto f = transform_model(w, 2, 0.5);
  LatentSession s(w, f, rope);
  s.record_rope_usage(true);
  const Sequence prompt{10, 20, 30, 40};
  s.prefill(prompt);
  s.decode(50);
  const auto& rows = s.rope_rows_used();
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) {
    REQUIRE(r.rows() == 1);
    const auto half = rope.cos().cols();
    CHECK(r.row(0).head(half) == rope.cos().row(4));
    CHECK(r.row(0).tail(half) == rope.sin().row(4));
  }
}

TEST_CASE("store lifecycle and accounting") {
  const GroupLayout layout(4, 2);
  LatentCacheStore store(layout, 3);
  CHECK_THROWS_AS(store.merge_group(0, Mat::Zero(2, 3), {}), InputError);
  const std::vector<int> pos{0, 1};
  store.begin_prefill(pos);
  for (std::size_t l = 0; l < 4; ++l) store.set_layer_prefix(l, Mat::Constant(2, 3, static_cast<float>(l)));
  CHECK_THROWS_AS(store.set_layer_prefix(0, Mat::Zero(3, 3)), InputError);
  store.end_prefill();
  const auto before = store.prefix_checksum();
  store.merge_group(1, Mat::Constant(2, 3, 2.5f), {0.5, 0.5});
  CHECK(store.prefix_checksum() != before);
  CHECK(store.prefix(2) == store.prefix(3));
  CHECK_THROWS_AS(store.merge_group(1, Mat::Zero(2, 3), {}), InputError);
  store.begin_decode_step(2);
  for (std::size_t l = 0; l < 4; ++l) store.append_decode_latent(l, Mat::Ones(1, 3));
  CHECK_THROWS_AS(store.append_decode_latent(0, Mat::Ones(1, 3)), InputError);
  CHECK_THROWS_AS(store.merge_group(0, Mat::Zero(2, 3), {}), InputError);
  // Hand count: group 0 keeps two 2x3 prefixes, group 1 one, four 1x3 suffixes.
  CHECK(cache_bytes(store).total() == 12 + 6 + 12);
  CHECK(predicted_latent_elements(layout, 3, 1, 2, 1).total() == 30);
  CHECK(store.visible(3).rows() == 3);
  CHECK(store.visible_positions() == std::vector<int>{0, 1, 2});

  const TensorContainer dump = store.dump();
  std::size_t stored = 0;
  for (const auto& t : dump.tensors()) stored += t.data.size();
  CHECK(stored == 30);
  CHECK(dump.contains("groups.1.shared"));
  CHECK(!dump.contains("groups.1.layer.2"));
}

TEST_CASE("session rejects a mismatched factorization") {
  const ModelWeights w = gen_toy_model(ModelConfig::toy(), 1);
  const ModelWeights small = gen_toy_model(ModelConfig::micro(), 1);
  const auto f = transform_model(small, 1, 0.5);
  const RopeTable rope = rope_for(w.config);
  CHECK_THROWS_AS(LatentSession(w, f, rope), ConfigError);
}

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

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "xlkv/errors.hpp"
#include "xlkv/model.hpp"
#include "xlkv/rope.hpp"

using namespace xlkv;
using namespace xlkv::test;

TEST_CASE("rope matches direct trigonometry") {
  const RopeTable rope(4, 16, 10000.0);
  Mat x(1, 8);
  x << 1, 2, 3, 4, 5, 6, 7, 8;
  const Mat orig = x;
  const int pos[1] = {5};
  apply_rope(x, pos, rope);
  for (int head = 0; head < 2; ++head) {
    for (int i = 0; i < 2; ++i) {
      const double ang = 5.0 * std::pow(10000.0, -2.0 * i / 4.0);
      const double a = orig(0, head * 4 + 2 * i), b = orig(0, head * 4 + 2 * i + 1);
      CHECK(x(0, head * 4 + 2 * i) == doctest::Approx(a * std::cos(ang) - b * std::sin(ang)).epsilon(1e-6));
      CHECK(x(0, head * 4 + 2 * i + 1) == doctest::Approx(a * std::sin(ang) + b * std::cos(ang)).epsilon(1e-6));
    }
  }
  apply_rope(x, pos, rope.inverse());
  CHECK(max_abs_diff(x, orig) < 1e-5);
  CHECK(rope == RopeTable(4, 16, 10000.0));
}

TEST_CASE("rope scores depend on relative position only") {
  std::mt19937_64 rng(3);
  const RopeTable rope(8, 64, 10000.0);
  const Mat q = random_mat(rng, 1, 8), k = random_mat(rng, 1, 8);
  auto score = [&](int m, int n) {
    Mat a = q, b = k;
    const int pm[1] = {m}, pn[1] = {n};
    apply_rope(a, pm, rope);
    apply_rope(b, pn, rope);
    return static_cast<double>(a.row(0).dot(b.row(0)));
  };
  CHECK(score(10, 3) == doctest::Approx(score(40, 33)).epsilon(1e-5));
  Mat y = q;
  const int zero[1] = {0};
  apply_rope(y, zero, rope);
  CHECK(y == q);
}

TEST_CASE("rope rejects positions beyond the table and bad shapes") {
  const RopeTable rope(4, 8, 10000.0);
  Mat x = Mat::Ones(1, 4);
  const int far[1] = {8};
  CHECK_THROWS_AS(apply_rope(x, far, rope), CapacityError);
  const int two[2] = {0, 1};
  CHECK_THROWS_AS(apply_rope(x, two, rope), InputError);
  CHECK_THROWS_AS(RopeTable(3, 8, 1e4), ConfigError);
}

TEST_CASE("config validation") {
  ModelConfig c = ModelConfig::toy();
  CHECK_NOTHROW(c.validate());
  c.n_kv_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::toy();
  c.d_hidden = 60;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::toy();
  c.d_head = 15;
  c.d_hidden = 60;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(ModelConfig::from_json(ModelConfig::micro().to_json()).to_json() == ModelConfig::micro().to_json());
  CHECK(ModelConfig::toy().kv_head_of(3) == 1);
}

TEST_CASE("toy model generation is deterministic and round-trips") {
  const ModelWeights a = gen_toy_model(ModelConfig::toy(), 11);
  const ModelWeights b = gen_toy_model(ModelConfig::toy(), 11);
  const ModelWeights c = gen_toy_model(ModelConfig::toy(), 12);
  TensorContainer ca, cb, cc;
  write_weights(ca, a);
  write_weights(cb, b);
  write_weights(cc, c);
  CHECK(ca.serialize() == cb.serialize());
  CHECK(ca.serialize() != cc.serialize());
  const ModelWeights back = read_weights(TensorContainer::deserialize(ca.serialize()));
  CHECK(back.layers[3].wk == a.layers[3].wk);
  CHECK(back.head == a.head);
}

TEST_CASE("attention probabilities follow a naive softmax") {
  std::mt19937_64 rng(5);
  const Mat q = random_mat(rng, 3, 4), k = random_mat(rng, 5, 4);
  const std::vector<int> qpos{2, 3, 4}, kpos{0, 1, 2, 3, 4};
  const MatD p = attention_probs(q, k, qpos, kpos, 0.5);
  for (int i = 0; i < 3; ++i) {
    double z = 0.0;
    std::vector<double> e(5, 0.0);
    for (int j = 0; j <= qpos[static_cast<std::size_t>(i)]; ++j)
      z += e[static_cast<std::size_t>(j)] = std::exp(0.5 * q.row(i).cast<double>().dot(k.row(j).cast<double>()));
    for (int j = 0; j < 5; ++j) CHECK(p(i, j) == doctest::Approx(e[static_cast<std::size_t>(j)] / z).epsilon(1e-9));
  }
}

TEST_CASE("gqa attention equals a per-element oracle") {
  const ModelConfig c = ModelConfig::toy();
  std::mt19937_64 rng(6);
  const Mat q = random_mat(rng, 4, 64), k = random_mat(rng, 7, 32), v = random_mat(rng, 7, 32);
  const std::vector<int> qpos{3, 4, 5, 6}, kpos{0, 1, 2, 3, 4, 5, 6};
  CHECK(max_abs_diff(gqa_attention(c, q, k, v, qpos, kpos), naive_gqa(c, q, k, v, qpos, kpos)) < 1e-5);
}

TEST_CASE("incremental decoding reproduces the one-shot prefill") {
  const ModelWeights w = gen_toy_model(ModelConfig::toy(), 2);
  const RopeTable rope = rope_for(w.config);
  const Sequence seq = markov_sequences(4, 1, 40).front();
  KvCache full(w.config);
  const Mat ref = forward_baseline(w, rope, seq, ForwardMode::Prefill, full);
  KvCache inc(w.config);
  const Mat first = forward_baseline(w, rope, std::span(seq).first(10), ForwardMode::Prefill, inc);
  CHECK(max_abs_diff(first, ref.topRows(10)) < 1e-5);
  for (std::size_t t = 10; t < seq.size(); ++t) {
    const Mat step = forward_baseline(w, rope, std::span(seq).subspan(t, 1), ForwardMode::Decode, inc);
    CHECK(max_abs_diff(step, ref.row(static_cast<Eigen::Index>(t))) < 1e-4);
  }
  CHECK(inc.elements() == full.elements());
  CHECK(full.elements() == 8 * 2 * 32 * 40);
}

TEST_CASE("baseline engine errors") {
  ModelConfig cfg = ModelConfig::micro();
  const ModelWeights w = gen_toy_model(cfg, 1);
  const RopeTable rope = rope_for(cfg);
  KvCache cache(cfg);
  const Sequence too_long(cfg.max_seq + 1, 65);
  CHECK_THROWS_AS(forward_baseline(w, rope, too_long, ForwardMode::Prefill, cache), CapacityError);
  const Sequence two{1, 2};
  CHECK_THROWS_AS(forward_baseline(w, rope, two, ForwardMode::Decode, cache), InputError);
  const Sequence bad{300};
  CHECK_THROWS_AS(forward_baseline(w, rope, bad, ForwardMode::Prefill, cache), InputError);
  KvCache full(cfg);
  const Sequence fill(cfg.max_seq, 65);
  forward_baseline(w, rope, fill, ForwardMode::Prefill, full);
  const Sequence one{65};
  CHECK_THROWS_AS(forward_baseline(w, rope, one, ForwardMode::Decode, full), CapacityError);
}

TEST_CASE("uniform logits give ln 256") {
  ModelWeights w = gen_toy_model(ModelConfig::micro(), 1);
  w.head.setZero();
  const Sequence seq{1, 2, 3, 4, 5};
  CHECK(sequence_nll(w, rope_for(w.config), seq) == doctest::Approx(std::log(256.0)).epsilon(1e-9));
}

TEST_CASE("f32 and f64 losses agree") {
  const ModelWeights w = gen_toy_model(ModelConfig::toy(), 9);
  const auto seqs = markov_sequences(1, 1, 48);
  const double f32 = sequence_nll(w, rope_for(w.config), seqs[0]);
  const double f64 = teacher_forced_loss(w.cast<double>(), seqs);
  CHECK(f32 == doctest::Approx(f64).epsilon(1e-5));
}

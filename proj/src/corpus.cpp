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
#include "xlkv/corpus.hpp"

#include <array>
#include <random>

#include "xlkv/container.hpp"
#include "xlkv/errors.hpp"

namespace xlkv {

std::vector<std::uint8_t> generate_markov_bytes(std::uint64_t seed, std::size_t n_bytes) {
  constexpr int kLo = 32, kHi = 126;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> printable(kLo, kHi);
  std::array<std::array<std::uint8_t, 4>, 256> next{};
  for (auto& row : next)
    for (auto& b : row) b = static_cast<std::uint8_t>(printable(rng));
  std::discrete_distribution<int> pick({0.55, 0.25, 0.15, 0.05});

  std::vector<std::uint8_t> out;
  out.reserve(n_bytes);
  if (n_bytes == 0) return out;
  out.push_back(static_cast<std::uint8_t>(printable(rng)));
  while (out.size() < n_bytes) out.push_back(next[out.back()][static_cast<std::size_t>(pick(rng))]);
  return out;
}

Sequence to_tokens(std::span<const std::uint8_t> bytes) { return Sequence(bytes.begin(), bytes.end()); }

std::vector<Sequence> split_sequences(std::span<const std::uint8_t> bytes, std::size_t seq_len,
                                      std::size_t max_sequences) {
  if (seq_len < 2) throw InputError("sequence length must be at least 2");
  std::vector<Sequence> out;
  for (std::size_t off = 0; off + seq_len <= bytes.size(); off += seq_len) {
    if (max_sequences != 0 && out.size() == max_sequences) break;
    out.push_back(to_tokens(bytes.subspan(off, seq_len)));
  }
  if (out.empty()) throw InputError("corpus shorter than one sequence");
  return out;
}

std::string corpus_hash(std::span<const std::uint8_t> bytes) { return fnv1a_hex(bytes); }

}  // namespace xlkv

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
#include <span>
#include <vector>

#include "xlkv/model.hpp"

namespace xlkv {

/// Seeded first-order Markov chain over bytes. Every state has four
/// successors drawn from printable ASCII with probabilities
/// 0.55 / 0.25 / 0.15 / 0.05; the first byte is drawn uniformly from the
/// same printable range.
std::vector<std::uint8_t> generate_markov_bytes(std::uint64_t seed, std::size_t n_bytes);

/// Consecutive non-overlapping windows of `seq_len` bytes (tail dropped).
std::vector<Sequence> split_sequences(std::span<const std::uint8_t> bytes, std::size_t seq_len,
                                      std::size_t max_sequences = 0);

Sequence to_tokens(std::span<const std::uint8_t> bytes);

/// Hash of the bytes the sequences were cut from.
std::string corpus_hash(std::span<const std::uint8_t> bytes);

}  // namespace xlkv

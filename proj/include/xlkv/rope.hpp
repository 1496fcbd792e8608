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

#include <span>

#include "xlkv/tensor.hpp"

namespace xlkv {

/// Precomputed cos/sin per (position, pair) shared by every layer.
/// Pair i of a head covers dimensions (2i, 2i+1) and rotates by
/// pos * theta^(-2i / d_head).
class RopeTable {
 public:
  RopeTable(std::size_t d_head, std::size_t max_seq, double theta);

  std::size_t d_head() const { return d_head_; }
  std::size_t max_seq() const { return static_cast<std::size_t>(cos_.rows()); }

  /// Same table with every angle negated.
  RopeTable inverse() const;

  const MatD& cos() const { return cos_; }
  const MatD& sin() const { return sin_; }

  bool operator==(const RopeTable& other) const;

 private:
  RopeTable() = default;
  std::size_t d_head_ = 0;
  MatD cos_;
  MatD sin_;
};

/// Rotates every head of every row in place. `x` is tokens x (n_heads * d_head);
/// row t uses position positions[t]. Throws CapacityError past the table.
void apply_rope(Mat& x, std::span<const int> positions, const RopeTable& table);
void apply_rope(MatD& x, std::span<const int> positions, const RopeTable& table);

}  // namespace xlkv

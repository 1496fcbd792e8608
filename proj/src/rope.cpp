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
#include "xlkv/rope.hpp"

#include <cmath>
#include <string>

#include "xlkv/errors.hpp"

namespace xlkv {

RopeTable::RopeTable(std::size_t d_head, std::size_t max_seq, double theta) : d_head_(d_head) {
  if (d_head == 0 || d_head % 2 != 0) throw ConfigError("rope head dimension must be even and positive");
  const auto pairs = static_cast<Eigen::Index>(d_head / 2);
  cos_.resize(static_cast<Eigen::Index>(max_seq), pairs);
  sin_.resize(static_cast<Eigen::Index>(max_seq), pairs);
  for (Eigen::Index p = 0; p < cos_.rows(); ++p) {
    for (Eigen::Index i = 0; i < pairs; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
      const double angle = static_cast<double>(p) * freq;
      cos_(p, i) = std::cos(angle);
      sin_(p, i) = std::sin(angle);
    }
  }
}

RopeTable RopeTable::inverse() const {
  RopeTable inv;
  inv.d_head_ = d_head_;
  inv.cos_ = cos_;
  inv.sin_ = -sin_;
  return inv;
}

bool RopeTable::operator==(const RopeTable& other) const {
  return d_head_ == other.d_head_ && cos_ == other.cos_ && sin_ == other.sin_;
}

namespace {

template <typename M>
void rotate(M& x, std::span<const int> positions, const RopeTable& table) {
  const auto d_head = static_cast<Eigen::Index>(table.d_head());
  if (static_cast<std::size_t>(x.rows()) != positions.size())
    throw InputError("rope: one position id per row required");
  if (x.cols() % d_head != 0) throw InputError("rope: width is not a multiple of the head dimension");
  const auto heads = x.cols() / d_head;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const int pos = positions[static_cast<std::size_t>(t)];
    if (pos < 0 || static_cast<std::size_t>(pos) >= table.max_seq())
      throw CapacityError("rope: position " + std::to_string(pos) + " beyond table of " +
                          std::to_string(table.max_seq()));
    for (Eigen::Index h = 0; h < heads; ++h) {
      for (Eigen::Index i = 0; i < d_head / 2; ++i) {
        const double c = table.cos()(pos, i);
        const double s = table.sin()(pos, i);
        const auto col = h * d_head + 2 * i;
        const double a = x(t, col);
        const double b = x(t, col + 1);
        x(t, col) = static_cast<typename M::Scalar>(a * c - b * s);
        x(t, col + 1) = static_cast<typename M::Scalar>(a * s + b * c);
      }
    }
  }
}

}  // namespace

void apply_rope(Mat& x, std::span<const int> positions, const RopeTable& table) { rotate(x, positions, table); }
void apply_rope(MatD& x, std::span<const int> positions, const RopeTable& table) { rotate(x, positions, table); }

}  // namespace xlkv

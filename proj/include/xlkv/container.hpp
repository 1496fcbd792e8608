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
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "xlkv/tensor.hpp"

namespace xlkv {

/// A named f32 tensor of rank 1 or 2, stored row-major.
struct Tensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const;
};

/// Single-file tensor container.
///
/// Layout (all integers little-endian):
///   [0, 8)          magic "XLKVTNS1"
///   [8, 16)         u64 header length N
///   [16, 16 + N)    UTF-8 JSON header:
///                   {"metadata": {...},
///                    "tensors": [{"name", "dtype": "f32", "shape", "offset", "nbytes"}, ...]}
///   [16 + N, EOF)   payload; each tensor's bytes start at `offset` relative to the
///                   payload start, f32 little-endian, row-major, no padding
///
/// Tensors appear in insertion order, and the header is serialized with sorted
/// object keys, so identical contents produce identical bytes.
class TensorContainer {
 public:
  nlohmann::json metadata = nlohmann::json::object();

  void put(const std::string& name, const Mat& m);
  void put_vector(const std::string& name, const Vec& v);
  void put(Tensor t);

  bool contains(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
  Mat matrix(const std::string& name) const;
  Vec vector(const std::string& name) const;

  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::size_t payload_bytes() const;

  std::vector<std::uint8_t> serialize() const;
  static TensorContainer deserialize(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static TensorContainer load(const std::filesystem::path& path);

 private:
  std::vector<Tensor> tensors_;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

// FNV-1a 64-bit, hex encoded. Used to tag corpora in reports.
std::string fnv1a_hex(std::span<const std::uint8_t> bytes);

}  // namespace xlkv

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
#include "xlkv/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "xlkv/errors.hpp"

namespace xlkv {

namespace {

constexpr char kMagic[8] = {'X', 'L', 'K', 'V', 'T', 'N', 'S', '1'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

float get_f32(const std::uint8_t* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(u);
}

}  // namespace

std::int64_t Tensor::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void TensorContainer::put(Tensor t) {
  if (contains(t.name)) throw InputError("duplicate tensor name: " + t.name);
  if (t.shape.empty() || t.shape.size() > 2)
    throw InputError("tensor " + t.name + " must have rank 1 or 2");
  if (static_cast<std::size_t>(t.numel()) != t.data.size())
    throw InputError("tensor " + t.name + " data does not match its shape");
  tensors_.push_back(std::move(t));
}

void TensorContainer::put(const std::string& name, const Mat& m) {
  Tensor t{name, {m.rows(), m.cols()}, std::vector<float>(m.data(), m.data() + m.size())};
  put(std::move(t));
}

void TensorContainer::put_vector(const std::string& name, const Vec& v) {
  Tensor t{name, {v.size()}, std::vector<float>(v.data(), v.data() + v.size())};
  put(std::move(t));
}

bool TensorContainer::contains(const std::string& name) const {
  return std::any_of(tensors_.begin(), tensors_.end(),
                     [&](const Tensor& t) { return t.name == name; });
}

const Tensor& TensorContainer::at(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t;
  throw InputError("missing tensor: " + name);
}

Mat TensorContainer::matrix(const std::string& name) const {
  const auto& t = at(name);
  const auto rows = t.shape.size() == 2 ? t.shape[0] : 1;
  const auto cols = t.shape.back();
  return Eigen::Map<const Mat>(t.data.data(), rows, cols);
}

Vec TensorContainer::vector(const std::string& name) const {
  const auto& t = at(name);
  if (t.shape.size() != 1) throw InputError("tensor " + name + " is not rank 1");
  return Eigen::Map<const Vec>(t.data.data(), t.shape[0]);
}

std::size_t TensorContainer::payload_bytes() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.data.size() * sizeof(float);
  return n;
}

std::vector<std::uint8_t> TensorContainer::serialize() const {
  nlohmann::json header;
  header["metadata"] = metadata;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors_) {
    const std::uint64_t nbytes = t.data.size() * sizeof(float);
    header["tensors"].push_back(
        {{"name", t.name}, {"dtype", "f32"}, {"shape", t.shape}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(16 + text.size() + offset);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : tensors_)
    for (float f : t.data) put_f32(out, f);
  return out;
}

TensorContainer TensorContainer::deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    throw IoError("not a tensor container (bad magic)");
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw IoError("truncated tensor container header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed container header: ") + e.what());
  }

  TensorContainer c;
  c.metadata = header.value("metadata", nlohmann::json::object());
  const std::uint8_t* payload = bytes.data() + 16 + header_len;
  const std::uint64_t payload_len = bytes.size() - 16 - header_len;
  for (const auto& entry : header.at("tensors")) {
    if (entry.at("dtype") != "f32") throw IoError("unsupported dtype in container");
    Tensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(t.numel()) * sizeof(float) || offset + nbytes > payload_len)
      throw IoError("tensor " + t.name + " out of payload bounds");
    t.data.resize(static_cast<std::size_t>(t.numel()));
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = get_f32(payload + offset + 4 * i);
    c.put(std::move(t));
  }
  return c;
}

void TensorContainer::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

TensorContainer TensorContainer::load(const std::filesystem::path& path) {
  return deserialize(read_file_bytes(path));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

std::string fnv1a_hex(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace xlkv

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

#include <cstring>
#include <filesystem>

#include "xlkv/container.hpp"
#include "xlkv/errors.hpp"

using namespace xlkv;

namespace {

void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& b, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

}  // namespace

TEST_CASE("container reads a hand-assembled file") {
  const std::string header =
      R"({"metadata":{"k":1},"tensors":[{"dtype":"f32","name":"m","nbytes":24,"offset":0,"shape":[2,3]},)"
      R"({"dtype":"f32","name":"g","nbytes":8,"offset":24,"shape":[2]}]})";
  std::vector<std::uint8_t> bytes{'X', 'L', 'K', 'V', 'T', 'N', 'S', '1'};
  put_u64(bytes, header.size());
  bytes.insert(bytes.end(), header.begin(), header.end());
  for (float f : {1.f, 2.f, 3.f, 4.f, 5.f, -6.5f, 0.25f, 7.f}) put_f32(bytes, f);

  const TensorContainer c = TensorContainer::deserialize(bytes);
  CHECK(c.metadata.at("k") == 1);
  const Mat m = c.matrix("m");
  REQUIRE(m.rows() == 2);
  REQUIRE(m.cols() == 3);
  CHECK(m(0, 2) == 3.f);
  CHECK(m(1, 2) == -6.5f);
  CHECK(c.vector("g")(0) == 0.25f);
  CHECK(c.serialize() == bytes);
}

TEST_CASE("container round trip keeps order and bytes") {
  TensorContainer c;
  c.metadata["note"] = "x";
  Mat a(2, 2);
  a << 1, 2, 3, 4;
  c.put("z", a);
  c.put_vector("a", Vec::Constant(3, 1.5f));
  const auto bytes = c.serialize();
  const TensorContainer d = TensorContainer::deserialize(bytes);
  REQUIRE(d.tensors().size() == 2);
  CHECK(d.tensors()[0].name == "z");
  CHECK(d.matrix("z") == a);
  CHECK(d.serialize() == bytes);
  CHECK(c.payload_bytes() == 28);

  const auto path = std::filesystem::temp_directory_path() / "xlkv_container_test.bin";
  c.save(path);
  CHECK(TensorContainer::load(path).serialize() == bytes);
  std::filesystem::remove(path);
}

TEST_CASE("container rejects malformed input") {
  TensorContainer c;
  c.put("a", Mat::Ones(1, 1));
  CHECK_THROWS_AS(c.put("a", Mat::Ones(1, 1)), InputError);
  CHECK_THROWS_AS(c.matrix("missing"), InputError);

  auto bytes = c.serialize();
  auto bad = bytes;
  bad[0] = 'Y';
  CHECK_THROWS_AS(TensorContainer::deserialize(bad), IoError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 2);
  CHECK_THROWS_AS(TensorContainer::deserialize(truncated), IoError);
  CHECK_THROWS_AS(TensorContainer::deserialize({1, 2, 3}), IoError);
  CHECK_THROWS_AS(TensorContainer::load("/nonexistent/dir/file.bin"), IoError);
}

TEST_CASE("fnv1a matches published vectors") {
  const std::string a = "a";
  CHECK(fnv1a_hex({}) == "cbf29ce484222325");
  CHECK(fnv1a_hex(std::span(reinterpret_cast<const std::uint8_t*>(a.data()), 1)) == "af63dc4c8601ec8c");
}

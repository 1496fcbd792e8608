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

#include <stdexcept>
#include <string>

namespace xlkv {

// Exit codes of the CLI are derived from these kinds (see exit_code()).
enum class ErrorKind { Config, Io, Numeric, Capacity, Input };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};
struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};
struct CapacityError : Error {
  explicit CapacityError(const std::string& what) : Error(ErrorKind::Capacity, what) {}
};
struct InputError : Error {
  explicit InputError(const std::string& what) : Error(ErrorKind::Input, what) {}
};

// Raised by allocate_budget when no merge count reaches the requested ratio.
struct UnreachableRatioError : ConfigError {
  UnreachableRatioError(const std::string& what, double max_ratio)
      : ConfigError(what), max_ratio(max_ratio) {}
  double max_ratio;
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Io: return 3;
    case ErrorKind::Numeric: return 4;
    case ErrorKind::Capacity: return 5;
    case ErrorKind::Input: return 6;
  }
  return 1;
}

}  // namespace xlkv

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

#include <json.hpp>

namespace xlkv {

/// Runs the invariant suite on models generated from `seed`: full-rank
/// exactness, fused equality, Eckart-Young, budget audit and finite-difference
/// gradients. The report carries no timings, so equal seeds give equal bytes.
/// report["passed"] is the conjunction of every section's "passed".
nlohmann::json run_self_check(std::uint64_t seed);

}  // namespace xlkv

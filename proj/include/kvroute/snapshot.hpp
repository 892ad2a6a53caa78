/* Copyright 2026 The kvroute Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <cstdint>

#include "kvroute/common.hpp"

namespace kvroute {

/// Point-in-time load indicators of one instance.
struct IndicatorSnapshot {
  std::uint32_t r_bs = 0;  // decoding + prefill already started
  std::uint32_t q_bs = 0;  // admitted, not yet scheduled
  std::uint32_t bs = 0;    // r_bs + q_bs
  std::uint64_t pending_prefill_tokens = 0;
  std::uint64_t total_tokens = 0;  // input + generated over unfinished requests
  std::uint64_t dc_tokens = 0;     // context tokens of decode-phase requests
  Micros as_of = 0;

  bool operator==(const IndicatorSnapshot&) const = default;
};

}  // namespace kvroute

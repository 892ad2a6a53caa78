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

#include "kvroute/engine.hpp"
#include "kvroute/snapshot.hpp"
#include "kvroute/trace.hpp"

// The indicator factory: per-instance load snapshots plus the
// request-conditioned values (KV$ hit ratio, P-tokens) every policy scores on.

namespace kvroute {

inline IndicatorSnapshot snapshot(const InstanceSim& instance, Micros now, Micros staleness = 0) {
  return instance.snapshot(now, staleness);
}

/// Cached fraction of the request's input tokens on this instance. Pure read:
/// does not refresh LRU recency.
inline double kv_hit_ratio(const InstanceSim& instance, const TraceRecord& r) {
  const std::uint32_t hit =
      hit_tokens_for(instance.hit_blocks(r), instance.block_size(), r.input_tokens);
  return static_cast<double>(hit) / static_cast<double>(r.input_tokens);
}

/// Pending prefill backlog plus the request's own new prefill tokens.
inline std::uint64_t p_tokens(const IndicatorSnapshot& snap, std::uint32_t input_tokens,
                              std::uint32_t hit_tokens) {
  return snap.pending_prefill_tokens + new_prefill_tokens(input_tokens, hit_tokens);
}

inline std::uint64_t p_tokens(const InstanceSim& instance, const TraceRecord& r, Micros now,
                              Micros staleness = 0) {
  const std::uint32_t hit =
      hit_tokens_for(instance.hit_blocks(r), instance.block_size(), r.input_tokens);
  return p_tokens(instance.snapshot(now, staleness), r.input_tokens, hit);
}

}  // namespace kvroute

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

#include <algorithm>
#include <cstdint>
#include <limits>
#include <unordered_set>
#include <vector>

#include "kvroute/kvroute.hpp"

// Brute-force reference for the cluster loop: infinite caches, integer
// microsecond costs, the multiplicative policy, and a clock that visits every
// instant at which anything can happen. Shares no code with the simulator
// beyond the trace types and hash helpers.

namespace kvroute::ref {

struct Costs {  // microseconds
  std::int64_t prefill_base = 5000;
  std::int64_t prefill_per_token = 100;
  std::int64_t decode_base = 20000;
  std::int64_t decode_per_seq = 1000;
  std::uint32_t chunk = 2048;
  std::uint32_t max_batch = 256;
};

struct Outcome {
  RequestId id = 0;
  std::size_t instance = 0;
  std::uint32_t hit_tokens = 0;
  Micros arrival = 0;
  Micros first_token = -1;
  Micros finish = -1;
};

inline std::vector<Outcome> simulate(const std::vector<TraceRecord>& trace, std::size_t n, const Costs& c,
                                     std::uint64_t tie_seed, std::uint32_t block_size = kDefaultBlockSize) {
  struct Req {
    std::size_t slot;
    std::uint32_t output;
    std::uint32_t pending;
    std::uint32_t generated = 0;
    std::vector<BlockHash> blocks;
    std::uint32_t input;
  };
  struct Inst {
    std::vector<Req> queue, running;
    std::unordered_set<BlockHash> cache;
    Micros busy_until = 0;
  };
  std::vector<Inst> inst(n);
  std::vector<Outcome> out(trace.size());
  std::uint64_t ties = 0;
  const std::uint64_t offset = mix64(tie_seed);

  auto cached_prefix = [&](const Inst& in, const std::vector<BlockHash>& b) {
    std::size_t k = 0;
    while (k < b.size() && in.cache.contains(b[k])) ++k;
    return k;
  };
  auto retire = [&](Inst& in, const Req& r) {
    std::vector<BlockHash> chain = r.blocks;
    const std::size_t total = (r.input + r.output + block_size - 1) / block_size;
    for (std::size_t j = chain.size(); j < total; ++j) chain.push_back(output_block_hash(trace[r.slot].request_id, j));
    in.cache.insert(chain.begin(), chain.end());
    out[r.slot].finish = -2;  // patched to the step end below
  };

  std::size_t next = 0, done = 0;
  Micros t = 0;
  while (done < trace.size()) {
    // Arrivals at t, in trace order.
    while (next < trace.size() && seconds_to_micros(trace[next].arrival_s) == t) {
      const TraceRecord& r = trace[next];
      std::vector<double> score(n);
      std::vector<std::uint32_t> hit(n);
      for (std::size_t i = 0; i < n; ++i) {
        hit[i] = std::min<std::uint32_t>(static_cast<std::uint32_t>(cached_prefix(inst[i], r.prefix_blocks)) * block_size,
                                         r.input_tokens);
        std::uint64_t pending = 0;
        for (const Req& q : inst[i].queue) pending += q.pending;
        const std::uint64_t fresh = r.input_tokens > hit[i] ? r.input_tokens - hit[i] : 1;
        const std::uint64_t bs = inst[i].queue.size() + inst[i].running.size();
        score[i] = static_cast<double>(pending + fresh) * static_cast<double>(std::max<std::uint64_t>(bs, 1));
      }
      const double best = *std::min_element(score.begin(), score.end());
      std::vector<std::size_t> tied;
      for (std::size_t i = 0; i < n; ++i) {
        if (score[i] == best) tied.push_back(i);
      }
      std::size_t pick = tied.front();
      if (tied.size() > 1) {
        const std::size_t start = (offset + ties++) % n;
        for (std::size_t i : tied) {
          if (i >= start) {
            pick = i;
            break;
          }
        }
      }
      Outcome& o = out[next];
      o.id = r.request_id;
      o.instance = pick;
      o.hit_tokens = hit[pick];
      o.arrival = t;
      inst[pick].queue.push_back(
          Req{next, r.output_tokens, r.input_tokens > hit[pick] ? r.input_tokens - hit[pick] : 1u, 0, r.prefix_blocks,
              r.input_tokens});
      ++next;
    }
    // Idle instances with work start a step at t.
    for (Inst& in : inst) {
      if (t < in.busy_until || (in.queue.empty() && in.running.empty())) continue;
      const std::size_t nd = std::min<std::size_t>(in.running.size(), c.max_batch);
      std::int64_t budget = static_cast<std::int64_t>(c.chunk) - static_cast<std::int64_t>(nd);
      std::vector<std::pair<std::size_t, std::uint32_t>> alloc;  // queue index, tokens
      std::uint64_t tokens = 0;
      for (std::size_t i = 0; i < in.queue.size() && budget > 0 && alloc.size() + nd < c.max_batch; ++i) {
        const std::uint32_t take = static_cast<std::uint32_t>(std::min<std::int64_t>(budget, in.queue[i].pending));
        alloc.emplace_back(i, take);
        tokens += take;
        budget -= take;
      }
      std::int64_t dur = 0;
      if (tokens > 0) dur += c.prefill_base + c.prefill_per_token * static_cast<std::int64_t>(tokens);
      if (nd > 0) dur += c.decode_base + c.decode_per_seq * static_cast<std::int64_t>(nd);
      const Micros end = t + dur;
      std::vector<std::size_t> finished;

      std::vector<Req> joined;
      std::size_t consumed = 0;
      for (auto [i, take] : alloc) {
        Req& q = in.queue[i];
        q.pending -= take;
        if (q.pending > 0) continue;
        ++consumed;
        q.generated = 1;
        out[q.slot].first_token = end;
        if (q.generated == q.output) {
          retire(in, q);
          finished.push_back(q.slot);
        } else {
          joined.push_back(q);
        }
      }
      in.queue.erase(in.queue.begin(), in.queue.begin() + static_cast<std::ptrdiff_t>(consumed));
      std::vector<Req> still;
      for (std::size_t i = 0; i < in.running.size(); ++i) {
        Req& q = in.running[i];
        if (i < nd && ++q.generated == q.output) {
          retire(in, q);
          finished.push_back(q.slot);
        } else {
          still.push_back(q);
        }
      }
      still.insert(still.end(), joined.begin(), joined.end());
      in.running = std::move(still);
      for (std::size_t s : finished) out[s].finish = end;
      done += finished.size();
      in.busy_until = end;
    }
    // Jump to the next instant at which something can happen.
    Micros nt = std::numeric_limits<Micros>::max();
    if (next < trace.size()) nt = seconds_to_micros(trace[next].arrival_s);
    for (const Inst& in : inst) {
      if (!in.queue.empty() || !in.running.empty()) nt = std::min(nt, std::max(in.busy_until, t + 1));
    }
    if (nt == std::numeric_limits<Micros>::max()) break;
    t = nt;
  }
  return out;
}

/// The scripted 2-instance, 10-request scenario: two shared prefixes, a
/// burst of simultaneous arrivals, a long prompt that needs two chunks and a
/// single-token output.
inline std::vector<TraceRecord> scripted_trace() {
  auto rec = [](RequestId id, double at, BlockHash base, std::size_t shared, std::size_t own, std::uint32_t out) {
    TraceRecord r;
    r.request_id = id;
    r.arrival_s = at;
    std::vector<BlockHash> chain;
    BlockHash h = 0x5eed;
    for (std::size_t i = 0; i < shared; ++i) chain.push_back(h = hash_combine(h, base + i));
    for (std::size_t i = 0; i < own; ++i) chain.push_back(h = hash_combine(h, 1000 * id + i));
    r.prefix_blocks = chain;
    r.input_tokens = static_cast<std::uint32_t>(chain.size() * kDefaultBlockSize - 5);
    r.output_tokens = out;
    return r;
  };
  return {
      rec(1, 0.000, 100, 40, 4, 6),  rec(2, 0.000, 200, 30, 2, 3),  rec(3, 0.010, 100, 40, 8, 4),
      rec(4, 0.050, 200, 30, 1, 1),  rec(5, 0.050, 300, 150, 0, 5), rec(6, 0.200, 100, 40, 2, 8),
      rec(7, 0.2005, 200, 30, 6, 2), rec(8, 0.400, 100, 40, 1, 3),  rec(9, 0.400, 300, 150, 3, 2),
      rec(10, 0.900, 200, 30, 0, 7),
  };
}

}  // namespace kvroute::ref

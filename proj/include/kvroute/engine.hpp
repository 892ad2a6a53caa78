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
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "kvroute/common.hpp"
#include "kvroute/kvcache.hpp"
#include "kvroute/snapshot.hpp"
#include "kvroute/trace.hpp"

namespace kvroute {

struct StepCost {
  Micros total = 0;
  Micros prefill = 0;  // share of `total` attributed to prefill work
};

/// Affine per-step execution cost. Times are milliseconds.
struct CostModel {
  double prefill_base_ms = 5.0;
  double prefill_per_token_ms = 0.1;
  double decode_base_ms = 20.0;
  double decode_per_seq_ms = 1.0;
  double decode_per_ctx_token_ms = 0.0;
  std::uint32_t chunk_tokens = 2048;
  std::uint32_t max_batch_requests = 256;

  void validate() const {
    for (double v : {prefill_base_ms, prefill_per_token_ms, decode_base_ms,
                     decode_per_seq_ms, decode_per_ctx_token_ms}) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw Error(ErrorKind::kConfig, "cost model times must be finite and non-negative");
      }
    }
    if (chunk_tokens < 1) throw Error(ErrorKind::kConfig, "chunk_tokens must be >= 1");
    if (max_batch_requests < 1) throw Error(ErrorKind::kConfig, "max_batch_requests must be >= 1");
  }

  /// Copy with every time coefficient multiplied by `factor`.
  CostModel scaled(double factor) const {
    CostModel m = *this;
    m.prefill_base_ms *= factor;
    m.prefill_per_token_ms *= factor;
    m.decode_base_ms *= factor;
    m.decode_per_seq_ms *= factor;
    m.decode_per_ctx_token_ms *= factor;
    return m;
  }

  StepCost step_cost(std::uint64_t prefill_tokens, std::size_t decodes,
                     std::uint64_t context_tokens) const {
    double prefill_ms = 0.0;
    if (prefill_tokens > 0) {
      prefill_ms = prefill_base_ms + prefill_per_token_ms * static_cast<double>(prefill_tokens);
    }
    double decode_ms = 0.0;
    if (decodes > 0) {
      decode_ms = decode_base_ms + decode_per_seq_ms * static_cast<double>(decodes) +
                  decode_per_ctx_token_ms * static_cast<double>(context_tokens);
    }
    StepCost c;
    c.total = millis_to_micros(prefill_ms + decode_ms);
    c.prefill = std::min(c.total, millis_to_micros(prefill_ms));
    return c;
  }
};

/// An admitted request as seen by the batch scheduler.
struct WorkItem {
  RequestId id = 0;
  std::uint32_t input_tokens = 1;
  std::uint32_t output_tokens = 1;
  std::uint32_t hit_tokens = 0;
  std::uint32_t pending_prefill = 1;
  std::uint32_t generated = 0;
  bool started = false;

  std::uint64_t context_tokens() const { return std::uint64_t{input_tokens} + generated; }
};

struct PrefillAlloc {
  RequestId id = 0;
  std::uint32_t tokens = 0;
  bool operator==(const PrefillAlloc&) const = default;
};

/// One engine step: chunked-prefill allocations (FIFO over the queue) plus
/// the decode set (FIFO over running requests).
struct BatchPlan {
  std::vector<PrefillAlloc> prefill;
  std::vector<RequestId> decode;
  std::uint64_t prefill_tokens = 0;
  std::uint64_t context_tokens = 0;

  bool empty() const { return prefill.empty() && decode.empty(); }
  std::size_t requests() const { return prefill.size() + decode.size(); }
  bool operator==(const BatchPlan&) const = default;
};

enum class EngineEventKind { kScheduled, kFirstToken, kToken, kFinish };

struct EngineEvent {
  EngineEventKind kind;
  RequestId id;
  Micros time;
  bool operator==(const EngineEvent&) const = default;
};

/// Queue and running set of one instance, with incrementally maintained
/// indicator counters. Holds no cache state, so estimators can copy it and
/// replay steps with their own cost model.
class BatchState {
 public:
  bool contains(RequestId id) const {
    auto same = [id](const WorkItem& w) { return w.id == id; };
    return std::any_of(queue_.begin(), queue_.end(), same) ||
           std::any_of(running_.begin(), running_.end(), same);
  }

  void admit(const WorkItem& w) {
    queue_.push_back(w);
    ++q_bs_;
    pending_ += w.pending_prefill;
    total_tokens_ += w.context_tokens();
  }

  BatchPlan plan(const CostModel& cost) const {
    BatchPlan p;
    const std::size_t max_batch = cost.max_batch_requests;
    const std::size_t n_decode = std::min(running_.size(), max_batch);
    for (std::size_t i = 0; i < n_decode; ++i) {
      p.decode.push_back(running_[i].id);
      p.context_tokens += running_[i].context_tokens();
    }
    std::uint64_t budget = cost.chunk_tokens > n_decode ? cost.chunk_tokens - n_decode : 0;
    for (const WorkItem& w : queue_) {
      if (budget == 0 || p.requests() >= max_batch) break;
      const auto take = static_cast<std::uint32_t>(std::min<std::uint64_t>(budget, w.pending_prefill));
      p.prefill.push_back({w.id, take});
      p.prefill_tokens += take;
      budget -= take;
    }
    return p;
  }

  /// Applies a plan produced by `plan()` on this exact state. Scheduled
  /// events are stamped `start`, everything else `end`. Finished items are
  /// appended to `finished`.
  void apply(const BatchPlan& p, Micros start, Micros end, std::vector<EngineEvent>& events,
             std::vector<WorkItem>& finished) {
    if (p.decode.size() > running_.size() || p.prefill.size() > queue_.size()) {
      throw Error(ErrorKind::kInvariant, "batch plan does not match instance state");
    }
    std::vector<WorkItem> joined;
    for (std::size_t i = 0; i < p.prefill.size(); ++i) {
      WorkItem& w = queue_[i];
      const PrefillAlloc& a = p.prefill[i];
      if (w.id != a.id || a.tokens > w.pending_prefill || a.tokens == 0) {
        throw Error(ErrorKind::kInvariant, "prefill allocation mismatch");
      }
      if (!w.started) {
        w.started = true;
        --q_bs_;
        ++r_bs_;
        events.push_back({EngineEventKind::kScheduled, w.id, start});
      }
      w.pending_prefill -= a.tokens;
      pending_ -= a.tokens;
      if (w.pending_prefill == 0) {
        w.generated = 1;
        ++total_tokens_;
        events.push_back({EngineEventKind::kFirstToken, w.id, end});
        if (w.generated == w.output_tokens) {
          events.push_back({EngineEventKind::kFinish, w.id, end});
          --r_bs_;
          total_tokens_ -= w.context_tokens();
          finished.push_back(w);
        } else {
          dc_tokens_ += w.context_tokens();
          joined.push_back(w);
        }
      } else if (i + 1 != p.prefill.size()) {
        throw Error(ErrorKind::kInvariant, "only the last prefill allocation may be partial");
      }
    }
    while (!queue_.empty() && queue_.front().started && queue_.front().pending_prefill == 0) {
      queue_.pop_front();
    }

    bool any_finished = false;
    for (std::size_t i = 0; i < p.decode.size(); ++i) {
      WorkItem& w = running_[i];
      if (w.id != p.decode[i]) throw Error(ErrorKind::kInvariant, "decode set mismatch");
      ++w.generated;
      ++total_tokens_;
      ++dc_tokens_;
      events.push_back({EngineEventKind::kToken, w.id, end});
      if (w.generated == w.output_tokens) {
        events.push_back({EngineEventKind::kFinish, w.id, end});
        --r_bs_;
        total_tokens_ -= w.context_tokens();
        dc_tokens_ -= w.context_tokens();
        finished.push_back(w);
        any_finished = true;
      }
    }
    if (any_finished) {
      std::erase_if(running_, [](const WorkItem& w) { return w.generated == w.output_tokens; });
    }
    running_.insert(running_.end(), joined.begin(), joined.end());
  }

  IndicatorSnapshot indicators(Micros now) const {
    IndicatorSnapshot s;
    s.r_bs = r_bs_;
    s.q_bs = q_bs_;
    s.bs = r_bs_ + q_bs_;
    s.pending_prefill_tokens = pending_;
    s.total_tokens = total_tokens_;
    s.dc_tokens = dc_tokens_;
    s.as_of = now;
    return s;
  }

  /// Indicators recomputed from scratch; must equal `indicators()`.
  IndicatorSnapshot recount(Micros now) const {
    IndicatorSnapshot s;
    for (const WorkItem& w : queue_) {
      (w.started ? s.r_bs : s.q_bs) += 1;
      s.pending_prefill_tokens += w.pending_prefill;
      s.total_tokens += w.context_tokens();
    }
    for (const WorkItem& w : running_) {
      ++s.r_bs;
      s.total_tokens += w.context_tokens();
      s.dc_tokens += w.context_tokens();
    }
    s.bs = s.r_bs + s.q_bs;
    s.as_of = now;
    return s;
  }

  const std::deque<WorkItem>& queue() const { return queue_; }
  const std::vector<WorkItem>& running() const { return running_; }
  bool empty() const { return queue_.empty() && running_.empty(); }

 private:
  std::deque<WorkItem> queue_;
  std::vector<WorkItem> running_;
  std::uint32_t r_bs_ = 0;
  std::uint32_t q_bs_ = 0;
  std::uint64_t pending_ = 0;
  std::uint64_t total_tokens_ = 0;
  std::uint64_t dc_tokens_ = 0;
};

struct StepResult {
  std::vector<EngineEvent> events;
  Micros next_idle = 0;
  Micros duration = 0;
  Micros prefill = 0;
};

struct BsSample {
  Micros time = 0;
  std::uint32_t bs = 0;
  bool operator==(const BsSample&) const = default;
};

inline BlockHash output_block_hash(RequestId id, std::size_t index) {
  return hash_combine(mix64(id ^ 0x6f75747075746b76ULL), index);
}

/// Tokens of the prefix that are served from cache, given a block-level hit.
inline std::uint32_t hit_tokens_for(std::size_t hit_blocks, std::uint32_t block_size,
                                    std::uint32_t input_tokens) {
  return static_cast<std::uint32_t>(
      std::min<std::uint64_t>(std::uint64_t{hit_blocks} * block_size, input_tokens));
}

/// New prefill work for a request; a full hit still recomputes one token.
inline std::uint32_t new_prefill_tokens(std::uint32_t input_tokens, std::uint32_t hit_tokens) {
  return std::max<std::uint32_t>(input_tokens - hit_tokens, 1);
}

/// One serving instance: FIFO admission, continuous batching with chunked
/// prefill, and a prefix cache populated when requests finish.
///
/// A step's state transition is applied when the step starts; its events are
/// stamped with the step's end time and the instance stays busy until then.
class InstanceSim {
 public:
  InstanceSim(std::size_t id, const CostModel& cost,
              std::size_t cache_capacity = kDefaultCacheCapacityBlocks,
              std::uint32_t block_size = kDefaultBlockSize)
      : id_(id), cost_(cost), block_size_(block_size), cache_(cache_capacity) {
    cost_.validate();
  }

  std::size_t id() const { return id_; }
  const CostModel& cost_model() const { return cost_; }
  std::uint32_t block_size() const { return block_size_; }
  const PrefixCache& cache() const { return cache_; }
  PrefixCache& cache() { return cache_; }
  const BatchState& state() const { return state_; }

  bool idle(Micros now) const { return now >= busy_until_; }
  Micros busy_until() const { return busy_until_; }
  Micros step_start() const { return step_start_; }
  const BatchPlan& inflight_plan() const { return inflight_; }

  std::size_t hit_blocks(const TraceRecord& r) const { return cache_.match_prefix(r.prefix_blocks); }

  /// Admits a request: hits are fixed now, touched and pinned.
  void enqueue(const TraceRecord& r, Micros now) {
    if (blocks_.contains(r.request_id)) {
      throw Error(ErrorKind::kDuplicateRequest,
                  "request " + std::to_string(r.request_id) + " already on instance " +
                      std::to_string(id_));
    }
    const std::size_t hit = cache_.match_prefix(r.prefix_blocks);
    cache_.touch(r.prefix_blocks, now);
    cache_.pin(r.prefix_blocks, hit);

    WorkItem w;
    w.id = r.request_id;
    w.input_tokens = r.input_tokens;
    w.output_tokens = r.output_tokens;
    w.hit_tokens = hit_tokens_for(hit, block_size_, r.input_tokens);
    w.pending_prefill = new_prefill_tokens(r.input_tokens, w.hit_tokens);
    state_.admit(w);
    blocks_.emplace(r.request_id, Admitted{r.prefix_blocks, hit});
    note_change(now);
  }

  BatchPlan form_batch(Micros now) const {
    if (now < busy_until_) throw Error(ErrorKind::kInvariant, "form_batch on a busy instance");
    return state_.plan(cost_);
  }

  StepResult execute_batch(const BatchPlan& plan, Micros now) {
    if (now < busy_until_) throw Error(ErrorKind::kInvariant, "execute_batch on a busy instance");
    StepResult out;
    out.next_idle = now;
    if (plan.empty()) return out;

    const StepCost c = cost_.step_cost(plan.prefill_tokens, plan.decode.size(), plan.context_tokens);
    const Micros end = now + c.total;
    std::vector<WorkItem> finished;
    state_.apply(plan, now, end, out.events, finished);
    for (const WorkItem& w : finished) retire(w, end);

    out.duration = c.total;
    out.prefill = c.prefill;
    out.next_idle = end;
    busy_until_ = end;
    step_start_ = now;
    inflight_ = plan;
    busy_total_ += c.total;
    prefill_total_ += c.prefill;
    note_change(now);
    return out;
  }

  /// Live or staleness-delayed indicators.
  IndicatorSnapshot snapshot(Micros now, Micros staleness = 0) const {
    if (staleness <= 0) return state_.indicators(now);
    const Micros as_of = now - staleness;
    for (auto it = history_.rbegin(); it != history_.rend(); ++it) {
      if (it->as_of <= as_of) return *it;
    }
    IndicatorSnapshot empty;
    empty.as_of = std::max<Micros>(as_of, 0);
    return empty;
  }

  /// Enables snapshot history long enough to serve `horizon`-delayed reads.
  void set_history_horizon(Micros horizon) { history_horizon_ = horizon; }

  bool counters_consistent(Micros now) const {
    return state_.indicators(now) == state_.recount(now);
  }

  /// Preloads a prefix as if an earlier request had left it behind.
  void prewarm(std::span<const BlockHash> blocks, Micros now) { cache_.insert(blocks, now); }

  Micros busy_total() const { return busy_total_; }
  Micros prefill_total() const { return prefill_total_; }
  const std::vector<BsSample>& bs_log() const { return bs_log_; }

 private:
  struct Admitted {
    std::vector<BlockHash> blocks;
    std::size_t hit_blocks;
  };

  void retire(const WorkItem& w, Micros end) {
    auto it = blocks_.find(w.id);
    cache_.unpin(it->second.blocks, it->second.hit_blocks);
    std::vector<BlockHash> chain = std::move(it->second.blocks);
    const std::size_t total = blocks_for_tokens(std::uint64_t{w.input_tokens} + w.output_tokens, block_size_);
    for (std::size_t j = chain.size(); j < total; ++j) chain.push_back(output_block_hash(w.id, j));
    cache_.insert(chain, end);
    blocks_.erase(it);
  }

  void note_change(Micros now) {
    const IndicatorSnapshot s = state_.indicators(now);
    if (bs_log_.empty() || bs_log_.back().bs != s.bs) {
      if (!bs_log_.empty() && bs_log_.back().time == now) {
        bs_log_.back().bs = s.bs;
      } else {
        bs_log_.push_back({now, s.bs});
      }
    }
    if (history_horizon_ <= 0) return;
    if (!history_.empty() && history_.back().as_of == now) {
      history_.back() = s;
    } else {
      history_.push_back(s);
    }
    // Keep the newest entry at or before the oldest time still queryable.
    while (history_.size() > 1 && history_[1].as_of <= now - history_horizon_) history_.pop_front();
  }

  std::size_t id_;
  CostModel cost_;
  std::uint32_t block_size_;
  PrefixCache cache_;
  BatchState state_;
  std::unordered_map<RequestId, Admitted> blocks_;
  Micros busy_until_ = 0;
  Micros step_start_ = 0;
  BatchPlan inflight_;
  Micros busy_total_ = 0;
  Micros prefill_total_ = 0;
  Micros history_horizon_ = 0;
  std::deque<IndicatorSnapshot> history_;
  std::vector<BsSample> bs_log_;
};

}  // namespace kvroute

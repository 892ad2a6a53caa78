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
#include <cmath>
#include <cstdint>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "kvroute/detector.hpp"
#include "kvroute/engine.hpp"
#include "kvroute/metrics.hpp"
#include "kvroute/policies.hpp"
#include "kvroute/trace.hpp"

namespace kvroute {

struct CacheConfig {
  std::size_t capacity_blocks = kDefaultCacheCapacityBlocks;  // kInfiniteCapacity for unbounded
  std::uint32_t block_size = kDefaultBlockSize;
};

struct ClusterConfig {
  std::size_t n_instances = 16;
  CostModel cost;
  CacheConfig cache;
  PolicyConfig policy;
  DetectorConfig detector;
  double staleness_ms = 0.0;
  std::uint64_t seed = 0;
  bool debug = false;  // reconcile indicator counters after every step

  void validate() const {
    if (n_instances < 1) throw Error(ErrorKind::kConfig, "n_instances must be >= 1");
    if (cache.block_size < 1) throw Error(ErrorKind::kConfig, "block_size must be >= 1");
    if (!(staleness_ms >= 0.0)) throw Error(ErrorKind::kConfig, "staleness_ms must be >= 0");
    cost.validate();
    policy.validate();
    detector.validate();
  }
};

/// A prefix placed in an instance's cache before the run starts.
struct Prewarm {
  std::size_t instance = 0;
  std::vector<BlockHash> blocks;
};

/// Router plus instances. `route` is the global scheduler's decision path;
/// the event loop in `run` drives the engine side.
class Cluster {
 public:
  explicit Cluster(const ClusterConfig& cfg)
      : cfg_(cfg), tb_(cfg.seed ^ cfg.policy.tie_break_seed) {
    cfg_.validate();
    instances_.reserve(cfg_.n_instances);
    for (std::size_t i = 0; i < cfg_.n_instances; ++i) {
      instances_.emplace_back(i, cfg_.cost, cfg_.cache.capacity_blocks, cfg_.cache.block_size);
      if (staleness() > 0) instances_.back().set_history_horizon(staleness());
    }
    if (cfg_.detector.enabled) detector_.emplace(cfg_.detector, cfg_.n_instances);
  }

  const ClusterConfig& config() const { return cfg_; }
  std::span<InstanceSim> instances() { return instances_; }
  std::span<const InstanceSim> instances() const { return instances_; }
  const HotspotDetector* detector() const { return detector_ ? &*detector_ : nullptr; }
  HotspotDetector* detector() { return detector_ ? &*detector_ : nullptr; }
  Micros staleness() const { return millis_to_micros(cfg_.staleness_ms); }

  void prewarm(std::span<const Prewarm> items) {
    for (const Prewarm& p : items) {
      if (p.instance >= instances_.size()) throw Error(ErrorKind::kConfig, "prewarm instance out of range");
      instances_[p.instance].prewarm(p.blocks, 0);
    }
  }

  /// Snapshots every instance, consults the detector, picks an instance and
  /// enqueues the request there.
  RoutingDecision route(const TraceRecord& r, Micros now) {
    const std::vector<Candidate> cands = build_candidates(instances_, r, now, staleness());
    std::uint64_t key = 0;
    DetectorVerdict v;
    if (detector_) {
      std::uint32_t best_hit = 0;
      for (const Candidate& c : cands) best_hit = std::max(best_hit, c.hit_tokens);
      key = detector_->observe(r, now, best_hit, instances_);
      if (cfg_.detector.mitigate) v = detector_->verdict_for(key);
    }
    RoutingDecision d = choose(cands, r, cfg_.policy, v, tb_, cfg_.cost, now);
    if (detector_) {
      std::vector<double> products;
      products.reserve(cands.size());
      for (const Candidate& c : cands) products.push_back(score_multiplicative(c.p_tokens, c.snap.bs));
      detector_->after_route(key, d, products);
    }
    instances_[d.chosen].enqueue(r, now);
    last_hit_tokens_ = cands[d.chosen].hit_tokens;
    return d;
  }

  std::uint32_t last_hit_tokens() const { return last_hit_tokens_; }

 private:
  ClusterConfig cfg_;
  std::vector<InstanceSim> instances_;
  std::optional<HotspotDetector> detector_;
  TieBreaker tb_;
  std::uint32_t last_hit_tokens_ = 0;
};

/// Extra observations some callers need beyond the report.
struct RunStats {
  std::uint64_t queued_at_last_arrival = 0;  // total q_bs right after the last routing
  std::uint64_t batch_capacity = 0;          // sum over instances of the most prefills one step took on,
                                             // while arrivals were still coming
  std::vector<RoutingDecision> decisions;    // filled when requested
};

struct RunOptions {
  std::span<const Prewarm> prewarm;
  bool record_decisions = false;
  RunStats* stats = nullptr;
};

/// Deterministic discrete-event replay of `trace` on a fresh cluster.
/// Arrivals and instance-ready events share one ordering: by time, arrivals
/// first, then by instance id.
inline MetricsReport run(std::span<const TraceRecord> trace, const ClusterConfig& cfg,
                         const RunOptions& opt = {}) {
  Cluster cluster(cfg);
  cluster.prewarm(opt.prewarm);
  auto instances = cluster.instances();
  const std::size_t n = instances.size();

  MetricsReport report;
  report.policy = std::string(policy_name(cfg.policy.kind));
  report.n_instances = n;
  report.arrivals_hash = arrivals_digest(trace);
  report.requests.reserve(trace.size());

  struct Ready {
    Micros time;
    std::size_t instance;
    bool operator>(const Ready& o) const {
      return time != o.time ? time > o.time : instance > o.instance;
    }
  };
  std::priority_queue<Ready, std::vector<Ready>, std::greater<>> ready;
  std::vector<bool> scheduled(n, false);
  std::unordered_map<RequestId, std::size_t> slot;  // request id -> index in report.requests
  std::vector<std::uint64_t> peak_prefills(n, 0);
  RunStats local;
  RunStats& stats = opt.stats ? *opt.stats : local;

  auto arrival_time = [&](std::size_t i) { return seconds_to_micros(trace[i].arrival_s); };
  Micros last_event = 0;
  std::size_t next = 0;
  while (next < trace.size() || !ready.empty()) {
    const bool take_arrival =
        next < trace.size() && (ready.empty() || arrival_time(next) <= ready.top().time);
    if (take_arrival) {
      const TraceRecord& r = trace[next];
      const Micros now = arrival_time(next);
      if (slot.contains(r.request_id)) {
        throw Error(ErrorKind::kDuplicateRequest, "request " + std::to_string(r.request_id) + " routed twice");
      }
      RoutingDecision d = cluster.route(r, now);
      ++report.routed;
      if (d.fail_open) ++report.fail_open;
      RequestMetrics m;
      m.request_id = r.request_id;
      m.instance = d.chosen;
      m.arrival = now;
      m.input_tokens = r.input_tokens;
      m.output_tokens = r.output_tokens;
      m.hit_tokens = cluster.last_hit_tokens();
      slot.emplace(r.request_id, report.requests.size());
      report.requests.push_back(m);
      if (!scheduled[d.chosen]) {
        scheduled[d.chosen] = true;
        ready.push({now, d.chosen});
      }
      if (opt.record_decisions) stats.decisions.push_back(std::move(d));
      ++next;
      if (next == trace.size()) {
        stats.queued_at_last_arrival = 0;
        for (const InstanceSim& inst : instances) stats.queued_at_last_arrival += inst.state().indicators(now).q_bs;
      }
      last_event = std::max(last_event, now);
      continue;
    }

    const Ready ev = ready.top();
    ready.pop();
    InstanceSim& inst = instances[ev.instance];
    const BatchPlan plan = inst.form_batch(ev.time);
    if (plan.empty()) {
      scheduled[ev.instance] = false;
      continue;
    }
    const StepResult res = inst.execute_batch(plan, ev.time);
    for (const EngineEvent& e : res.events) {
      RequestMetrics& m = report.requests[slot.at(e.id)];
      switch (e.kind) {
        case EngineEventKind::kScheduled: m.scheduled = e.time; break;
        case EngineEventKind::kFirstToken: m.first_token = e.time; break;
        case EngineEventKind::kToken: break;
        case EngineEventKind::kFinish:
          m.finish = e.time;
          ++report.finished;
          break;
      }
    }
    if (res.prefill > 0) report.prefill_spans.push_back({ev.instance, ev.time, res.prefill});
    if (next < trace.size() && plan.prefill.size() > peak_prefills[ev.instance]) {
      stats.batch_capacity += plan.prefill.size() - peak_prefills[ev.instance];
      peak_prefills[ev.instance] = plan.prefill.size();
    }
    if (cfg.debug) {
      if (!inst.counters_consistent(ev.time)) {
        throw Error(ErrorKind::kInvariant, "indicator counters diverged on instance " + std::to_string(ev.instance));
      }
      std::string why;
      if (!inst.cache().check_invariants(&why)) throw Error(ErrorKind::kInvariant, "cache: " + why);
    }
    last_event = std::max(last_event, res.next_idle);
    ready.push({res.next_idle, ev.instance});
  }

  report.makespan = last_event;
  for (const InstanceSim& inst : instances) {
    report.bs_logs.push_back(inst.bs_log());
    report.busy_total.push_back(inst.busy_total());
    report.prefill_total.push_back(inst.prefill_total());
  }
  if (HotspotDetector* det = cluster.detector()) {
    det->finish(trace.empty() ? 0 : arrival_time(trace.size() - 1), instances);
    report.detector_rows = det->rows();
    report.detector_events = det->events();
  }
  if (report.routed != report.finished) {
    throw Error(ErrorKind::kInvariant, "routed " + std::to_string(report.routed) + " but finished " +
                                           std::to_string(report.finished));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Capacity probing
// ---------------------------------------------------------------------------

struct ProbeOptions {
  double upper_rps = 1e4;
  double rel_tol = 0.01;
  double span_factor = 1 << 20;  // lower bound = upper / span_factor
};

/// True when, at `rate_rps`, the queue is not diverging: requests still
/// waiting for their first prefill chunk when the last one arrives number
/// fewer than twice the cluster's batch capacity, i.e. the most new prefills
/// each instance started in one step, summed over instances.
inline bool sustainable(std::span<const TraceRecord> shape, const ClusterConfig& cfg, double rate_rps) {
  const std::vector<TraceRecord> scaled = scale_trace(shape, rate_rps);
  ClusterConfig c = cfg;
  c.detector.enabled = false;
  RunStats stats;
  RunOptions opt;
  opt.stats = &stats;
  run(scaled, c, opt);
  return stats.queued_at_last_arrival < 2 * std::max<std::uint64_t>(stats.batch_capacity, 1);
}

/// Highest sustainable arrival rate for the trace's shape, by geometric
/// bisection to `rel_tol`.
inline double probe_capacity(std::span<const TraceRecord> shape, const ClusterConfig& cfg,
                             const ProbeOptions& opt = {}) {
  if (shape.size() < 2) throw Error(ErrorKind::kEmptyTrace, "capacity probing needs >= 2 requests");
  double hi = opt.upper_rps;
  double lo = opt.upper_rps / opt.span_factor;
  if (sustainable(shape, cfg, hi)) return hi;
  if (!sustainable(shape, cfg, lo)) return lo;
  while (hi / lo > 1.0 + opt.rel_tol) {
    const double mid = std::sqrt(lo * hi);
    if (sustainable(shape, cfg, mid)) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return lo;
}

}  // namespace kvroute

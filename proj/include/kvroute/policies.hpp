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
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kvroute/engine.hpp"
#include "kvroute/indicators.hpp"

namespace kvroute {

enum class PolicyKind { kVllm, kLinear, kFilter, kSimulate, kMultiplicative, kLeastBs };

inline std::string_view policy_name(PolicyKind k) {
  switch (k) {
    case PolicyKind::kVllm: return "vllm";
    case PolicyKind::kLinear: return "linear";
    case PolicyKind::kFilter: return "filter";
    case PolicyKind::kSimulate: return "simulate";
    case PolicyKind::kMultiplicative: return "multiplicative";
    case PolicyKind::kLeastBs: return "least_bs";
  }
  return "unknown";
}

inline PolicyKind parse_policy_kind(std::string_view s) {
  for (PolicyKind k : {PolicyKind::kVllm, PolicyKind::kLinear, PolicyKind::kFilter,
                       PolicyKind::kSimulate, PolicyKind::kMultiplicative, PolicyKind::kLeastBs}) {
    if (policy_name(k) == s) return k;
  }
  throw Error(ErrorKind::kConfig, "unknown policy '" + std::string(s) + "'");
}

enum class KvIndicator { kPTokens, kOneMinusHit };
enum class BalanceIndicator { kBs, kTotalTokens };

struct PolicyConfig {
  PolicyKind kind = PolicyKind::kMultiplicative;
  // vllm: q_weight * Q-BS + R-BS
  double q_weight = 1.0;
  // linear: kv_weight * (1 - hit) + (1 - kv_weight) * normalized BS
  double kv_weight = 0.4;
  // linear: fixed BS normalizer; 0 means the per-decision max BS
  double bs_cap = 0.0;
  // filter: BS range above which KV$-awareness is dropped
  std::uint32_t range_threshold = 4;
  // simulate: estimator uses the engine model scaled by mis_scale when mis_tuned
  bool mis_tuned = false;
  double mis_scale = 4.0;
  // multiplicative factors
  KvIndicator kv_indicator = KvIndicator::kPTokens;
  BalanceIndicator balance_indicator = BalanceIndicator::kBs;
  std::uint64_t tie_break_seed = 0;

  void validate() const {
    if (!(kv_weight >= 0.0 && kv_weight <= 1.0)) {
      throw Error(ErrorKind::kConfig, "linear kv_weight must lie in [0, 1]");
    }
    if (!(q_weight >= 0.0) || !std::isfinite(q_weight)) {
      throw Error(ErrorKind::kConfig, "vllm q_weight must be non-negative");
    }
    if (range_threshold < 1) throw Error(ErrorKind::kConfig, "filter range_threshold must be >= 1");
    if (!(bs_cap >= 0.0)) throw Error(ErrorKind::kConfig, "linear bs_cap must be >= 0");
    if (!(mis_scale > 0.0)) throw Error(ErrorKind::kConfig, "simulate mis_scale must be > 0");
  }
};

/// What the router knows about one instance for one request.
struct Candidate {
  std::size_t instance = 0;
  IndicatorSnapshot snap;
  std::size_t hit_blocks = 0;
  std::uint32_t hit_tokens = 0;
  double hit_ratio = 0.0;
  std::uint64_t p_tokens = 0;
  const InstanceSim* sim = nullptr;  // needed by the simulate policy only
};

inline Candidate make_candidate(const InstanceSim& inst, const TraceRecord& r, Micros now,
                                Micros staleness = 0) {
  Candidate c;
  c.instance = inst.id();
  c.snap = inst.snapshot(now, staleness);
  c.hit_blocks = inst.hit_blocks(r);
  c.hit_tokens = hit_tokens_for(c.hit_blocks, inst.block_size(), r.input_tokens);
  c.hit_ratio = static_cast<double>(c.hit_tokens) / static_cast<double>(r.input_tokens);
  c.p_tokens = p_tokens(c.snap, r.input_tokens, c.hit_tokens);
  c.sim = &inst;
  return c;
}

inline std::vector<Candidate> build_candidates(std::span<const InstanceSim> instances,
                                               const TraceRecord& r, Micros now,
                                               Micros staleness = 0) {
  std::vector<Candidate> out;
  out.reserve(instances.size());
  for (const InstanceSim& inst : instances) out.push_back(make_candidate(inst, r, now, staleness));
  return out;
}

// ---------------------------------------------------------------------------
// Scores. Lower is better for all of them.
// ---------------------------------------------------------------------------

inline double score_vllm(const IndicatorSnapshot& s, double q_weight = 1.0) {
  return q_weight * static_cast<double>(s.q_bs) + static_cast<double>(s.r_bs);
}

inline double score_linear(double hit_ratio, double bs, double kv_weight, double bs_norm) {
  const double load = std::min(bs / std::max(bs_norm, 1.0), 1.0);
  return kv_weight * (1.0 - hit_ratio) + (1.0 - kv_weight) * load;
}

/// P-tokens x BS, with BS floored at 1 so idle instances still rank by P-tokens.
inline double score_multiplicative(std::uint64_t p_tokens, std::uint64_t bs) {
  return static_cast<double>(p_tokens) * static_cast<double>(std::max<std::uint64_t>(bs, 1));
}

inline double score_multiplicative(const Candidate& c, const PolicyConfig& cfg) {
  const double kv = cfg.kv_indicator == KvIndicator::kPTokens ? static_cast<double>(c.p_tokens)
                                                              : 1.0 - c.hit_ratio;
  const std::uint64_t balance =
      cfg.balance_indicator == BalanceIndicator::kBs ? c.snap.bs : c.snap.total_tokens;
  return kv * static_cast<double>(std::max<std::uint64_t>(balance, 1));
}

/// Estimated milliseconds until the request's first token if it were
/// enqueued on `inst` at `now`: the in-flight step's remainder followed by a
/// replay of the instance's batches under `model`, including this request.
inline double estimate_ttft(const InstanceSim& inst, const TraceRecord& r, const CostModel& model,
                            Micros now) {
  Micros t = now;
  const BatchPlan& inflight = inst.inflight_plan();
  if (inst.busy_until() > now && !inflight.empty()) {
    const StepCost c =
        model.step_cost(inflight.prefill_tokens, inflight.decode.size(), inflight.context_tokens);
    t = std::max(now, inst.step_start() + c.total);
  }
  BatchState state = inst.state();
  WorkItem w;
  w.id = r.request_id;
  w.input_tokens = r.input_tokens;
  w.output_tokens = r.output_tokens;
  w.hit_tokens = hit_tokens_for(inst.hit_blocks(r), inst.block_size(), r.input_tokens);
  w.pending_prefill = new_prefill_tokens(r.input_tokens, w.hit_tokens);
  state.admit(w);

  std::vector<EngineEvent> events;
  std::vector<WorkItem> finished;
  for (;;) {
    const BatchPlan p = state.plan(model);
    const StepCost c = model.step_cost(p.prefill_tokens, p.decode.size(), p.context_tokens);
    const Micros end = t + c.total;
    events.clear();
    finished.clear();
    state.apply(p, t, end, events, finished);
    for (const EngineEvent& e : events) {
      if (e.kind == EngineEventKind::kFirstToken && e.id == r.request_id) {
        return micros_to_millis(end - now);
      }
    }
    t = end;
  }
}

// ---------------------------------------------------------------------------
// Decisions
// ---------------------------------------------------------------------------

/// Detector output consumed by `choose`.
struct DetectorVerdict {
  std::vector<std::size_t> excluded;
  bool force_least_bs = false;

  bool empty() const { return excluded.empty() && !force_least_bs; }
};

struct RoutingDecision {
  std::size_t chosen = 0;
  std::vector<double> scores;         // +inf for filtered instances
  std::vector<std::size_t> filtered;  // instances removed before scoring
  PolicyKind kind = PolicyKind::kMultiplicative;
  Micros time = 0;
  bool fail_open = false;  // exclusion would have emptied the candidate set
};

/// Seeded round-robin among exactly tied instances: starting from a rotating
/// offset, the first tied instance id at or after it wins.
class TieBreaker {
 public:
  explicit TieBreaker(std::uint64_t seed = 0) : offset_(mix64(seed)) {}

  std::size_t pick(std::span<const std::size_t> tied_sorted, std::size_t n_instances) {
    if (tied_sorted.empty()) throw Error(ErrorKind::kNoInstances, "empty tie set");
    if (tied_sorted.size() == 1) return tied_sorted.front();
    const std::size_t start = static_cast<std::size_t>((offset_ + counter_++) % n_instances);
    auto it = std::lower_bound(tied_sorted.begin(), tied_sorted.end(), start);
    return it == tied_sorted.end() ? tied_sorted.front() : *it;
  }

 private:
  std::uint64_t offset_;
  std::uint64_t counter_ = 0;
};

namespace detail {

inline std::size_t argmin_with_ties(const std::vector<double>& scores,
                                    const std::vector<bool>& allowed, TieBreaker& tb) {
  double best = std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!allowed[i]) continue;
    if (!any || scores[i] < best) best = scores[i];
    any = true;
  }
  std::vector<std::size_t> tied;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (allowed[i] && scores[i] == best) tied.push_back(i);
  }
  return tb.pick(tied, scores.size());
}

}  // namespace detail

/// Picks the minimum-score instance under `policy` after applying the
/// detector's exclusions (ignored if they would exclude everyone).
/// Candidates must be indexed by instance id.
inline RoutingDecision choose(std::span<const Candidate> cands, const TraceRecord& r,
                              const PolicyConfig& policy, const DetectorVerdict& verdict,
                              TieBreaker& tb, const CostModel& engine_model, Micros now) {
  const std::size_t n = cands.size();
  if (n == 0) throw Error(ErrorKind::kNoInstances, "no instances to route to");

  RoutingDecision d;
  d.time = now;
  d.kind = verdict.force_least_bs ? PolicyKind::kLeastBs : policy.kind;

  std::vector<bool> allowed(n, true);
  for (std::size_t i : verdict.excluded) {
    if (i < n) allowed[i] = false;
  }
  if (std::none_of(allowed.begin(), allowed.end(), [](bool a) { return a; })) {
    allowed.assign(n, true);
    d.fail_open = true;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!allowed[i]) d.filtered.push_back(i);
  }

  d.scores.assign(n, std::numeric_limits<double>::infinity());
  auto for_allowed = [&](auto&& fn) {
    for (std::size_t i = 0; i < n; ++i) {
      if (allowed[i]) d.scores[i] = fn(cands[i]);
    }
  };

  switch (d.kind) {
    case PolicyKind::kVllm:
      for_allowed([&](const Candidate& c) { return score_vllm(c.snap, policy.q_weight); });
      break;
    case PolicyKind::kLinear: {
      double norm = policy.bs_cap;
      if (norm <= 0.0) {
        norm = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (allowed[i]) norm = std::max(norm, static_cast<double>(cands[i].snap.bs));
        }
      }
      for_allowed([&](const Candidate& c) {
        return score_linear(c.hit_ratio, static_cast<double>(c.snap.bs), policy.kv_weight, norm);
      });
      break;
    }
    case PolicyKind::kFilter: {
      std::uint32_t lo = std::numeric_limits<std::uint32_t>::max(), hi = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!allowed[i]) continue;
        lo = std::min(lo, cands[i].snap.bs);
        hi = std::max(hi, cands[i].snap.bs);
      }
      if (hi - lo > policy.range_threshold) {
        for_allowed([](const Candidate& c) { return static_cast<double>(c.snap.bs); });
      } else {
        for_allowed([](const Candidate& c) { return 1.0 - c.hit_ratio; });
      }
      break;
    }
    case PolicyKind::kSimulate: {
      const CostModel model = policy.mis_tuned ? engine_model.scaled(policy.mis_scale) : engine_model;
      for_allowed([&](const Candidate& c) {
        if (c.sim == nullptr) throw Error(ErrorKind::kInvariant, "simulate policy needs instance state");
        return estimate_ttft(*c.sim, r, model, now);
      });
      break;
    }
    case PolicyKind::kMultiplicative:
      for_allowed([&](const Candidate& c) { return score_multiplicative(c, policy); });
      break;
    case PolicyKind::kLeastBs:
      for_allowed([](const Candidate& c) { return static_cast<double>(c.snap.bs); });
      break;
  }
  d.chosen = detail::argmin_with_ties(d.scores, allowed, tb);
  return d;
}

/// Filter-based combination on its own: least BS when the BS range exceeds
/// the threshold, otherwise the highest KV$ hit ratio.
inline RoutingDecision route_filter(std::span<const Candidate> cands, const TraceRecord& r,
                                    std::uint32_t range_threshold, TieBreaker& tb, Micros now = 0) {
  PolicyConfig cfg;
  cfg.kind = PolicyKind::kFilter;
  cfg.range_threshold = range_threshold;
  return choose(cands, r, cfg, DetectorVerdict{}, tb, CostModel{}, now);
}

}  // namespace kvroute

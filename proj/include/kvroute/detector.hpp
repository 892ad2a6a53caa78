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
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kvroute/engine.hpp"
#include "kvroute/policies.hpp"

// KV$ hotspot detection for the multiplicative score.
//
// Requests sharing a leading prefix form a class. Over a sliding window a
// class has arrival share x (x_bar = 1 - x), and the cluster splits into M
// (instances caching the class prefix) and M_bar. Phase 1 flags a class when
// x / x_bar > |M| / |M_bar|, the only regime in which routing the whole class
// to M can leave M with a larger batch than M_bar. Phase 2 confirms it once
// more than multiplier * |M| consecutive class requests went to M while M
// still had the smaller P-tokens x BS product; the alarm then filters M out
// for that class until phase 1 has been benign for a full window.

namespace kvroute {

enum class MitigationMode { kExcludeM, kForceLeastBs };
enum class ProductCompare { kBest, kAverage };

struct DetectorConfig {
  bool enabled = false;
  bool mitigate = true;
  double window_s = 60.0;
  std::uint32_t top_k_classes = 8;
  std::uint32_t class_key_blocks = 2;
  double consecutive_multiplier = 2.0;
  MitigationMode mitigation_mode = MitigationMode::kExcludeM;
  ProductCompare compare = ProductCompare::kBest;

  void validate() const {
    if (!(window_s > 0.0) || !std::isfinite(window_s)) {
      throw Error(ErrorKind::kConfig, "detector window_s must be positive");
    }
    if (top_k_classes < 1) throw Error(ErrorKind::kConfig, "detector top_k_classes must be >= 1");
    if (class_key_blocks < 1) throw Error(ErrorKind::kConfig, "detector class_key_blocks must be >= 1");
    if (!(consecutive_multiplier >= 0.0)) {
      throw Error(ErrorKind::kConfig, "detector consecutive_multiplier must be >= 0");
    }
  }
};

enum class Phase1Result { kBenign, kSuspect };
enum class AlarmPhase { kNone, kPhase1, kPhase2 };

inline std::string_view alarm_phase_name(AlarmPhase p) {
  switch (p) {
    case AlarmPhase::kNone: return "none";
    case AlarmPhase::kPhase1: return "phase1";
    case AlarmPhase::kPhase2: return "phase2";
  }
  return "none";
}

/// Key of the class a request belongs to: its first `k` block hashes.
inline std::uint64_t class_key(std::span<const BlockHash> blocks, std::uint32_t k) {
  std::uint64_t h = 0x636c6173736b6579ULL;
  const std::size_t n = std::min<std::size_t>(k, blocks.size());
  for (std::size_t i = 0; i < n; ++i) h = hash_combine(h, blocks[i]);
  return h;
}

/// Expected batch-size ratio between M and M_bar instances after `t`
/// seconds if every class request lands on M:
///   (bs0 + x*qps/|M|*t) / (bs0 + x_bar*qps/|M_bar|*t)
inline double estimate_bs_ratio(double x, double qps, std::size_t m, std::size_t m_bar, double bs0,
                                double t) {
  if (m == 0 || m_bar == 0) throw Error(ErrorKind::kDomain, "|M| and |M_bar| must be >= 1");
  if (!(x >= 0.0 && x <= 1.0)) throw Error(ErrorKind::kDomain, "x must lie in [0, 1]");
  if (!(qps >= 0.0) || !(bs0 >= 0.0) || !(t >= 0.0)) {
    throw Error(ErrorKind::kDomain, "qps, bs0 and t must be non-negative");
  }
  const double num = bs0 + x * qps / static_cast<double>(m) * t;
  const double den = bs0 + (1.0 - x) * qps / static_cast<double>(m_bar) * t;
  if (num == den) return 1.0;
  return num / den;
}

/// Suspect iff x / x_bar > |M| / |M_bar|, evaluated cross-multiplied so the
/// degenerate cases fall out: x = 0 or M_bar empty is benign, x_bar = 0 with
/// a non-empty M_bar is suspect.
inline Phase1Result phase1_check(double x, std::size_t m, std::size_t m_bar) {
  const double lhs = x * static_cast<double>(m_bar);
  const double rhs = (1.0 - x) * static_cast<double>(m);
  return lhs > rhs ? Phase1Result::kSuspect : Phase1Result::kBenign;
}

struct ClassWindowStats {
  std::uint64_t class_key = 0;
  std::vector<BlockHash> prefix;
  std::uint64_t arrivals_in_window = 0;
  std::uint64_t total_in_window = 0;
  std::uint64_t hit_volume = 0;
  double x = 0.0;
  double x_bar = 1.0;
  std::vector<std::size_t> m;
  std::vector<std::size_t> m_bar;
  std::uint32_t consecutive_hotspot_count = 0;
  AlarmPhase alarm_phase = AlarmPhase::kNone;
  bool suspect = false;
  Micros last_update = 0;
  std::optional<Micros> benign_since;
};

/// Exact integer form of the phase-1 test on window counts.
inline Phase1Result phase1_check(const ClassWindowStats& s) {
  const std::uint64_t c = s.arrivals_in_window;
  const std::uint64_t rest = s.total_in_window - c;
  const std::uint64_t lhs = c * s.m_bar.size();
  const std::uint64_t rhs = rest * s.m.size();
  return lhs > rhs ? Phase1Result::kSuspect : Phase1Result::kBenign;
}

/// Counts consecutive class routings that chose an M instance whose
/// P-tokens x BS product is no larger than the M_bar reference (best or
/// average over unfiltered M_bar). Raises phase 2 past multiplier * |M|.
inline AlarmPhase phase2_update(ClassWindowStats& s, const RoutingDecision& d,
                                std::span<const double> mult_scores, const DetectorConfig& cfg) {
  if (!s.suspect || s.alarm_phase == AlarmPhase::kNone) {
    s.consecutive_hotspot_count = 0;
    return s.alarm_phase;
  }
  const bool chosen_in_m = std::binary_search(s.m.begin(), s.m.end(), d.chosen);
  bool holds = false;
  if (chosen_in_m) {
    double best = std::numeric_limits<double>::infinity();
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t j : s.m_bar) {
      if (std::find(d.filtered.begin(), d.filtered.end(), j) != d.filtered.end()) continue;
      best = std::min(best, mult_scores[j]);
      sum += mult_scores[j];
      ++count;
    }
    if (count > 0) {
      const double ref = cfg.compare == ProductCompare::kBest ? best : sum / static_cast<double>(count);
      holds = mult_scores[d.chosen] <= ref;
    }
  }
  if (holds) {
    ++s.consecutive_hotspot_count;
  } else {
    s.consecutive_hotspot_count = 0;
  }
  if (static_cast<double>(s.consecutive_hotspot_count) >
      cfg.consecutive_multiplier * static_cast<double>(s.m.size())) {
    s.alarm_phase = AlarmPhase::kPhase2;
  }
  return s.alarm_phase;
}

inline DetectorVerdict verdict(const ClassWindowStats& s, const DetectorConfig& cfg) {
  DetectorVerdict v;
  if (s.alarm_phase != AlarmPhase::kPhase2) return v;
  if (cfg.mitigation_mode == MitigationMode::kExcludeM) {
    v.excluded = s.m;
  } else {
    v.force_least_bs = true;
  }
  return v;
}

/// Per-window sample for the detector CSV.
struct DetectorRow {
  Micros window_end = 0;
  std::uint64_t class_key = 0;
  std::uint64_t arrivals = 0;
  std::uint64_t total = 0;
  double x = 0.0;
  double x_bar = 1.0;
  std::size_t m = 0;
  std::size_t m_bar = 0;
  bool suspect = false;
  AlarmPhase phase = AlarmPhase::kNone;
  std::uint32_t consecutive = 0;
  bool operator==(const DetectorRow&) const = default;
};

enum class DetectorEventKind { kPhase1Raised, kPhase1Cleared, kPhase2Raised, kAlarmCleared };

inline std::string_view detector_event_name(DetectorEventKind k) {
  switch (k) {
    case DetectorEventKind::kPhase1Raised: return "phase1_raised";
    case DetectorEventKind::kPhase1Cleared: return "phase1_cleared";
    case DetectorEventKind::kPhase2Raised: return "phase2_raised";
    case DetectorEventKind::kAlarmCleared: return "alarm_cleared";
  }
  return "unknown";
}

struct DetectorEvent {
  Micros time = 0;
  std::uint64_t class_key = 0;
  DetectorEventKind kind = DetectorEventKind::kPhase1Raised;
  bool operator==(const DetectorEvent&) const = default;
};

/// Sliding-window class tracker driving the two-phase alarm. Updated
/// synchronously by the router: `observe` on arrival, `verdict` before the
/// policy runs, `after_route` with the decision.
class HotspotDetector {
 public:
  static constexpr Micros kBucket = kMicrosPerSecond;

  HotspotDetector(const DetectorConfig& cfg, std::size_t n_instances)
      : cfg_(cfg),
        n_instances_(n_instances),
        window_buckets_(std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(cfg.window_s)))),
        window_us_(seconds_to_micros(cfg.window_s)),
        next_boundary_(window_us_) {
    cfg_.validate();
  }

  const DetectorConfig& config() const { return cfg_; }

  /// Registers an arrival and re-evaluates phase 1. `hit_tokens` is the best
  /// hit the request could get on any instance. Returns its class key.
  std::uint64_t observe(const TraceRecord& r, Micros now, std::uint64_t hit_tokens,
                        std::span<const InstanceSim> instances) {
    emit_rows_until(now, instances);
    expire(now);
    const std::uint64_t key = class_key(r.prefix_blocks, cfg_.class_key_blocks);
    const std::int64_t b = now / kBucket;
    if (buckets_.empty() || buckets_.back().index != b) buckets_.push_back(Bucket{b, 0, {}});
    Bucket& bucket = buckets_.back();
    ++bucket.total;
    auto& [count, volume] = bucket.classes[key];
    ++count;
    volume += hit_tokens;
    ++window_total_;
    Agg& agg = window_[key];
    ++agg.count;
    agg.volume += hit_tokens;
    const std::size_t k = std::min<std::size_t>(cfg_.class_key_blocks, r.prefix_blocks.size());
    agg.prefix.assign(r.prefix_blocks.begin(), r.prefix_blocks.begin() + static_cast<std::ptrdiff_t>(k));
    evaluate(now, instances, true);
    return key;
  }

  DetectorVerdict verdict_for(std::uint64_t key) const {
    auto it = stats_.find(key);
    if (it == stats_.end()) return {};
    return kvroute::verdict(it->second, cfg_);
  }

  /// Phase-2 bookkeeping for a routed class request. `mult_scores` are the
  /// P-tokens x BS products of every instance at decision time.
  void after_route(std::uint64_t key, const RoutingDecision& d, std::span<const double> mult_scores) {
    auto it = stats_.find(key);
    if (it == stats_.end()) return;
    ClassWindowStats& s = it->second;
    const AlarmPhase before = s.alarm_phase;
    phase2_update(s, d, mult_scores, cfg_);
    if (before != AlarmPhase::kPhase2 && s.alarm_phase == AlarmPhase::kPhase2) {
      events_.push_back({d.time, key, DetectorEventKind::kPhase2Raised});
    }
  }

  /// Flushes per-window rows up to `end`, including a final partial window.
  void finish(Micros end, std::span<const InstanceSim> instances) {
    emit_rows_until(end, instances);
    if (window_total_ > 0 && end > last_row_time_) {
      expire(end);
      evaluate(end, instances, false);
      push_rows(end);
    }
  }

  const std::vector<DetectorRow>& rows() const { return rows_; }
  const std::vector<DetectorEvent>& events() const { return events_; }
  const ClassWindowStats* stats(std::uint64_t key) const {
    auto it = stats_.find(key);
    return it == stats_.end() ? nullptr : &it->second;
  }
  std::uint64_t window_total() const { return window_total_; }
  std::uint64_t window_count(std::uint64_t key) const {
    auto it = window_.find(key);
    return it == window_.end() ? 0 : it->second.count;
  }
  std::vector<std::uint64_t> tracked() const { return tracked_; }

  /// Instances whose cache holds the whole class prefix.
  static std::vector<std::size_t> holders(std::span<const BlockHash> prefix,
                                          std::span<const InstanceSim> instances) {
    std::vector<std::size_t> m;
    for (std::size_t i = 0; i < instances.size(); ++i) {
      if (instances[i].cache().match_prefix(prefix) == prefix.size()) m.push_back(i);
    }
    return m;
  }

 private:
  struct Bucket {
    std::int64_t index;
    std::uint64_t total;
    std::unordered_map<std::uint64_t, std::pair<std::uint64_t, std::uint64_t>> classes;
  };
  struct Agg {
    std::uint64_t count = 0;
    std::uint64_t volume = 0;
    std::vector<BlockHash> prefix;
  };

  void expire(Micros now) {
    const std::int64_t b = now / kBucket;
    while (!buckets_.empty() && buckets_.front().index <= b - window_buckets_) {
      const Bucket& old = buckets_.front();
      window_total_ -= old.total;
      for (const auto& [key, cv] : old.classes) {
        auto it = window_.find(key);
        it->second.count -= cv.first;
        it->second.volume -= cv.second;
        if (it->second.count == 0) window_.erase(it);
      }
      buckets_.pop_front();
    }
  }

  // Top-k classes by window hit-token volume; classes without hits cannot
  // form a hotspot and are not tracked.
  void refresh_tracked() {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> ranked;  // (volume, key)
    for (const auto& [key, agg] : window_) {
      if (agg.volume > 0) ranked.emplace_back(agg.volume, key);
    }
    const std::size_t k = std::min<std::size_t>(cfg_.top_k_classes, ranked.size());
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k), ranked.end(),
                      [](const auto& a, const auto& b) {
                        return a.first != b.first ? a.first > b.first : a.second < b.second;
                      });
    tracked_.clear();
    for (std::size_t i = 0; i < k; ++i) tracked_.push_back(ranked[i].second);
    std::sort(tracked_.begin(), tracked_.end());
  }

  void evaluate(Micros now, std::span<const InstanceSim> instances, bool transitions) {
    refresh_tracked();
    std::vector<std::uint64_t> keys = tracked_;
    for (const auto& [key, s] : stats_) {
      if (s.alarm_phase != AlarmPhase::kNone) keys.push_back(key);
    }
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());

    for (std::uint64_t key : keys) {
      ClassWindowStats& s = stats_[key];
      s.class_key = key;
      auto wit = window_.find(key);
      if (wit != window_.end()) {
        s.prefix = wit->second.prefix;
        s.arrivals_in_window = wit->second.count;
        s.hit_volume = wit->second.volume;
      } else {
        s.arrivals_in_window = 0;
        s.hit_volume = 0;
      }
      s.total_in_window = window_total_;
      s.x = window_total_ == 0 ? 0.0
                               : static_cast<double>(s.arrivals_in_window) / static_cast<double>(window_total_);
      s.x_bar = 1.0 - s.x;
      s.m = holders(s.prefix, instances);
      s.m_bar.clear();
      for (std::size_t i = 0; i < n_instances_; ++i) {
        if (!std::binary_search(s.m.begin(), s.m.end(), i)) s.m_bar.push_back(i);
      }
      s.suspect = phase1_check(s) == Phase1Result::kSuspect;
      s.last_update = now;
      if (transitions) transition(s, now);
    }
    // Forget quiet classes.
    std::erase_if(stats_, [&](const auto& kv) {
      return kv.second.alarm_phase == AlarmPhase::kNone &&
             !std::binary_search(tracked_.begin(), tracked_.end(), kv.first);
    });
  }

  void transition(ClassWindowStats& s, Micros now) {
    if (s.suspect) {
      s.benign_since.reset();
      if (s.alarm_phase == AlarmPhase::kNone) {
        s.alarm_phase = AlarmPhase::kPhase1;
        events_.push_back({now, s.class_key, DetectorEventKind::kPhase1Raised});
      }
      return;
    }
    s.consecutive_hotspot_count = 0;
    if (s.alarm_phase == AlarmPhase::kPhase1) {
      s.alarm_phase = AlarmPhase::kNone;
      events_.push_back({now, s.class_key, DetectorEventKind::kPhase1Cleared});
    } else if (s.alarm_phase == AlarmPhase::kPhase2) {
      if (!s.benign_since) s.benign_since = now;
      if (now - *s.benign_since >= window_us_) {
        s.alarm_phase = AlarmPhase::kNone;
        s.benign_since.reset();
        events_.push_back({now, s.class_key, DetectorEventKind::kAlarmCleared});
      }
    }
  }

  void push_rows(Micros at) {
    for (std::uint64_t key : tracked_) {
      const ClassWindowStats& s = stats_.at(key);
      rows_.push_back({at, key, s.arrivals_in_window, s.total_in_window, s.x, s.x_bar, s.m.size(),
                       s.m_bar.size(), s.suspect, s.alarm_phase, s.consecutive_hotspot_count});
    }
    last_row_time_ = at;
  }

  void emit_rows_until(Micros now, std::span<const InstanceSim> instances) {
    while (next_boundary_ <= now) {
      expire(next_boundary_ - 1);
      if (window_total_ > 0) {
        evaluate(next_boundary_, instances, false);
        push_rows(next_boundary_);
      }
      next_boundary_ += window_us_;
    }
  }

  DetectorConfig cfg_;
  std::size_t n_instances_;
  std::int64_t window_buckets_;
  Micros window_us_;
  Micros next_boundary_;
  Micros last_row_time_ = 0;
  std::deque<Bucket> buckets_;
  std::unordered_map<std::uint64_t, Agg> window_;
  std::uint64_t window_total_ = 0;
  std::vector<std::uint64_t> tracked_;
  std::map<std::uint64_t, ClassWindowStats> stats_;
  std::vector<DetectorRow> rows_;
  std::vector<DetectorEvent> events_;
};

}  // namespace kvroute

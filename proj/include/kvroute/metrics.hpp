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
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kvroute/detector.hpp"
#include "kvroute/engine.hpp"

namespace kvroute {

struct RequestMetrics {
  RequestId request_id = 0;
  std::size_t instance = 0;
  Micros arrival = 0;
  Micros scheduled = 0;
  Micros first_token = 0;
  Micros finish = 0;
  std::uint32_t input_tokens = 0;
  std::uint32_t output_tokens = 0;
  std::uint32_t hit_tokens = 0;

  double ttft_ms() const { return micros_to_millis(first_token - arrival); }
  /// Undefined for single-token outputs.
  std::optional<double> tpot_ms() const {
    if (output_tokens <= 1) return std::nullopt;
    return micros_to_millis(finish - first_token) / static_cast<double>(output_tokens - 1);
  }
  double queue_delay_ms() const { return micros_to_millis(scheduled - arrival); }
  double service_ms() const { return micros_to_millis(finish - scheduled); }
  double hit_ratio() const {
    return input_tokens == 0 ? 0.0 : static_cast<double>(hit_tokens) / static_cast<double>(input_tokens);
  }
  bool operator==(const RequestMetrics&) const = default;
};

/// Prefill share of one engine step, placed at the start of the step.
struct PrefillSpan {
  std::size_t instance = 0;
  Micros start = 0;
  Micros duration = 0;
  bool operator==(const PrefillSpan&) const = default;
};

struct MetricsReport {
  std::string policy;
  std::size_t n_instances = 0;
  std::vector<RequestMetrics> requests;  // in arrival order
  std::vector<PrefillSpan> prefill_spans;
  std::vector<std::vector<BsSample>> bs_logs;
  std::vector<Micros> busy_total;
  std::vector<Micros> prefill_total;
  std::vector<DetectorRow> detector_rows;
  std::vector<DetectorEvent> detector_events;
  std::uint64_t routed = 0;
  std::uint64_t finished = 0;
  std::uint64_t fail_open = 0;
  std::uint64_t arrivals_hash = 0;
  Micros makespan = 0;
};

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value.
inline double percentile(std::span<const double> series, double p) {
  if (series.empty()) throw Error(ErrorKind::kEmptySeries, "percentile of an empty series");
  if (!(p >= 0.0 && p <= 100.0)) throw Error(ErrorKind::kDomain, "percentile p must lie in [0, 100]");
  std::vector<double> v(series.begin(), series.end());
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, v.size());
  return v[rank - 1];
}

inline double mean(std::span<const double> series) {
  if (series.empty()) throw Error(ErrorKind::kEmptySeries, "mean of an empty series");
  double s = 0.0;
  for (double v : series) s += v;
  return s / static_cast<double>(series.size());
}

inline double stddev(std::span<const double> series) {
  if (series.empty()) return 0.0;
  const double m = mean(series);
  double ss = 0.0;
  for (double v : series) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(series.size()));
}

/// Empirical CDF as (sorted value, cumulative fraction) pairs.
inline std::vector<std::pair<double, double>> cdf(std::span<const double> series) {
  std::vector<double> v(series.begin(), series.end());
  std::sort(v.begin(), v.end());
  std::vector<std::pair<double, double>> out;
  out.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.emplace_back(v[i], static_cast<double>(i + 1) / static_cast<double>(v.size()));
  }
  return out;
}

inline std::vector<double> ttft_series(const MetricsReport& r) {
  std::vector<double> v;
  v.reserve(r.requests.size());
  for (const auto& m : r.requests) v.push_back(m.ttft_ms());
  return v;
}

inline std::vector<double> tpot_series(const MetricsReport& r) {
  std::vector<double> v;
  for (const auto& m : r.requests) {
    if (auto t = m.tpot_ms()) v.push_back(*t);
  }
  return v;
}

/// Cluster-wide hit tokens over input tokens.
inline double hit_ratio_tokens(const MetricsReport& r) {
  std::uint64_t hit = 0, in = 0;
  for (const auto& m : r.requests) {
    hit += m.hit_tokens;
    in += m.input_tokens;
  }
  return in == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(in);
}

inline double hit_ratio_requests(const MetricsReport& r) {
  if (r.requests.empty()) return 0.0;
  double s = 0.0;
  for (const auto& m : r.requests) s += m.hit_ratio();
  return s / static_cast<double>(r.requests.size());
}

/// Time-weighted mean of a batch-size step function over [a, b).
inline double mean_bs(std::span<const BsSample> log, Micros a, Micros b) {
  if (b <= a) return 0.0;
  double area = 0.0;
  for (std::size_t i = 0; i < log.size(); ++i) {
    const Micros s = std::max(a, log[i].time);
    const Micros e = std::min(b, i + 1 < log.size() ? log[i + 1].time : b);
    if (e > s) area += static_cast<double>(log[i].bs) * static_cast<double>(e - s);
  }
  return area / static_cast<double>(b - a);
}

inline std::uint32_t max_bs(std::span<const BsSample> log, Micros a, Micros b) {
  std::uint32_t m = 0;
  for (std::size_t i = 0; i < log.size(); ++i) {
    const Micros e = i + 1 < log.size() ? log[i + 1].time : std::numeric_limits<Micros>::max();
    if (log[i].time < b && e > a) m = std::max(m, log[i].bs);
  }
  return m;
}

/// Per-instance time-weighted mean BS over the whole run.
inline std::vector<double> mean_bs_per_instance(const MetricsReport& r) {
  std::vector<double> out;
  for (const auto& log : r.bs_logs) out.push_back(mean_bs(log, 0, r.makespan));
  return out;
}

/// max/min of a non-negative series; +inf when only the minimum is zero.
inline double spread_ratio(std::span<const double> v) {
  if (v.empty()) return 1.0;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  if (*hi == 0.0) return 1.0;
  if (*lo == 0.0) return std::numeric_limits<double>::infinity();
  return *hi / *lo;
}

// ---------------------------------------------------------------------------
// Windowed profiles
// ---------------------------------------------------------------------------

struct WindowProfile {
  Micros window_start = 0;
  std::vector<double> prefill_s;  // per instance
  std::vector<double> mean_bs;    // per instance
  std::uint64_t hit_tokens = 0;
  std::uint64_t input_tokens = 0;

  double hit_ratio() const {
    return input_tokens == 0 ? 0.0 : static_cast<double>(hit_tokens) / static_cast<double>(input_tokens);
  }
};

struct ImbalanceProfile {
  std::vector<WindowProfile> windows;
  std::vector<double> prefill_stddev;  // per instance, across windows
  std::pair<std::size_t, std::size_t> top2{0, 0};
  bool degenerate = false;  // fewer than two instances
  double mean_cross_stddev = 0.0;  // mean over windows of the across-instance stddev
};

inline ImbalanceProfile imbalance_profile(const MetricsReport& r, double window_s = 10.0) {
  if (!(window_s > 0.0)) throw Error(ErrorKind::kDomain, "window_s must be positive");
  ImbalanceProfile out;
  const std::size_t n = r.n_instances;
  const Micros w = seconds_to_micros(window_s);
  Micros end = r.makespan;
  for (const auto& m : r.requests) end = std::max(end, m.arrival + 1);
  const std::size_t n_windows = end <= 0 ? 0 : static_cast<std::size_t>((end + w - 1) / w);

  out.windows.resize(n_windows);
  for (std::size_t k = 0; k < n_windows; ++k) {
    WindowProfile& wp = out.windows[k];
    wp.window_start = static_cast<Micros>(k) * w;
    wp.prefill_s.assign(n, 0.0);
    wp.mean_bs.assign(n, 0.0);
    for (std::size_t i = 0; i < n && i < r.bs_logs.size(); ++i) {
      wp.mean_bs[i] = mean_bs(r.bs_logs[i], wp.window_start, wp.window_start + w);
    }
  }
  for (const PrefillSpan& s : r.prefill_spans) {
    Micros t = s.start;
    const Micros stop = s.start + s.duration;
    while (t < stop) {
      const auto k = static_cast<std::size_t>(t / w);
      const Micros we = static_cast<Micros>(k + 1) * w;
      const Micros e = std::min(stop, we);
      if (k < n_windows) out.windows[k].prefill_s[s.instance] += micros_to_seconds(e - t);
      t = e;
    }
  }
  for (const auto& m : r.requests) {
    const auto k = static_cast<std::size_t>(m.arrival / w);
    if (k < n_windows) {
      out.windows[k].hit_tokens += m.hit_tokens;
      out.windows[k].input_tokens += m.input_tokens;
    }
  }

  out.prefill_stddev.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> series;
    for (const auto& wp : out.windows) series.push_back(wp.prefill_s[i]);
    out.prefill_stddev[i] = stddev(series);
  }
  if (n < 2) {
    out.degenerate = true;
    out.top2 = {0, 0};
  } else {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return out.prefill_stddev[a] > out.prefill_stddev[b];
    });
    out.top2 = {std::min(idx[0], idx[1]), std::max(idx[0], idx[1])};
  }
  if (!out.windows.empty()) {
    double s = 0.0;
    for (const auto& wp : out.windows) s += stddev(wp.prefill_s);
    out.mean_cross_stddev = s / static_cast<double>(out.windows.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_ratio(double num, double den) {
  if (den == 0.0) return num == 0.0 ? "nan" : "inf";
  return format_double(num / den);
}

inline void write_file(const std::filesystem::path& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  f << body;
  if (!f) throw Error(ErrorKind::kIo, "write failed for '" + path.string() + "'");
}

inline nlohmann::ordered_json stat_or_null(const std::vector<double>& v, double p) {
  if (v.empty()) return nullptr;
  return percentile(v, p);
}

}  // namespace detail

/// Per-window, per-class detector state.
inline void write_detector_csv(std::span<const DetectorRow> rows, const std::filesystem::path& path) {
  std::ostringstream o;
  o << "window_end_s,class,arrivals,total,x,x_bar,x_over_x_bar,m,m_bar,m_over_m_bar,benign,"
       "phase,consecutive\n";
  for (const auto& d : rows) {
    o << format_double(micros_to_seconds(d.window_end)) << ',' << format_hex64(d.class_key) << ','
      << d.arrivals << ',' << d.total << ',' << format_double(d.x) << ',' << format_double(d.x_bar)
      << ',' << detail::fmt_ratio(static_cast<double>(d.arrivals),
                                  static_cast<double>(d.total - d.arrivals))
      << ',' << d.m << ',' << d.m_bar << ','
      << detail::fmt_ratio(static_cast<double>(d.m), static_cast<double>(d.m_bar)) << ','
      << (d.suspect ? 0 : 1) << ',' << alarm_phase_name(d.phase) << ',' << d.consecutive << '\n';
  }
  detail::write_file(path, o.str());
}

inline nlohmann::ordered_json summary_json(const MetricsReport& r) {
  using nlohmann::ordered_json;
  const std::vector<double> ttft = ttft_series(r);
  const std::vector<double> tpot = tpot_series(r);
  const ImbalanceProfile imb = imbalance_profile(r);
  const std::vector<double> bs = mean_bs_per_instance(r);

  ordered_json j;
  j["policy"] = r.policy;
  j["n_instances"] = r.n_instances;
  j["requests"] = r.requests.size();
  j["routed"] = r.routed;
  j["finished"] = r.finished;
  j["tpot_requests"] = tpot.size();
  j["mean_ttft_ms"] = ttft.empty() ? ordered_json(nullptr) : ordered_json(mean(ttft));
  j["p50_ttft_ms"] = detail::stat_or_null(ttft, 50);
  j["p95_ttft_ms"] = detail::stat_or_null(ttft, 95);
  j["p99_ttft_ms"] = detail::stat_or_null(ttft, 99);
  j["mean_tpot_ms"] = tpot.empty() ? ordered_json(nullptr) : ordered_json(mean(tpot));
  j["p50_tpot_ms"] = detail::stat_or_null(tpot, 50);
  j["p95_tpot_ms"] = detail::stat_or_null(tpot, 95);
  j["p99_tpot_ms"] = detail::stat_or_null(tpot, 99);
  j["hit_ratio"] = hit_ratio_tokens(r);
  j["hit_ratio_request_weighted"] = hit_ratio_requests(r);
  j["makespan_s"] = micros_to_seconds(r.makespan);
  j["mean_bs_per_instance"] = bs;
  const double spread = spread_ratio(bs);
  j["bs_spread"] = std::isfinite(spread) ? ordered_json(spread) : ordered_json(nullptr);
  j["prefill_window_stddev_s"] = imb.mean_cross_stddev;
  j["imbalance_top2"] = {imb.top2.first, imb.top2.second};
  j["fail_open"] = r.fail_open;
  ordered_json events = ordered_json::array();
  for (const auto& e : r.detector_events) {
    events.push_back({{"time_s", micros_to_seconds(e.time)},
                      {"class", format_hex64(e.class_key)},
                      {"event", detector_event_name(e.kind)}});
  }
  j["detector_events"] = std::move(events);
  j["arrivals_hash"] = format_hex64(r.arrivals_hash);
  return j;
}

/// Writes requests.csv, cdf_ttft.csv, cdf_tpot.csv, hit_timeline.csv,
/// imbalance.csv, detector.csv and summary.json into `out_dir`.
inline void export_report(const MetricsReport& r, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create '" + out_dir.string() + "': " + ec.message());

  {
    std::ostringstream o;
    o << "request_id,instance,arrival_s,scheduled_s,first_token_s,finish_s,input_tokens,"
         "output_tokens,hit_tokens,hit_ratio,ttft_ms,tpot_ms\n";
    for (const auto& m : r.requests) {
      o << m.request_id << ',' << m.instance << ',' << format_double(micros_to_seconds(m.arrival)) << ','
        << format_double(micros_to_seconds(m.scheduled)) << ','
        << format_double(micros_to_seconds(m.first_token)) << ','
        << format_double(micros_to_seconds(m.finish)) << ',' << m.input_tokens << ','
        << m.output_tokens << ',' << m.hit_tokens << ',' << format_double(m.hit_ratio()) << ','
        << format_double(m.ttft_ms()) << ',';
      if (auto t = m.tpot_ms()) o << format_double(*t);
      o << '\n';
    }
    detail::write_file(out_dir / "requests.csv", o.str());
  }
  auto write_cdf = [&](const char* name, const std::vector<double>& series) {
    std::ostringstream o;
    o << "value_ms,cumulative_fraction\n";
    for (const auto& [v, f] : cdf(series)) o << format_double(v) << ',' << format_double(f) << '\n';
    detail::write_file(out_dir / name, o.str());
  };
  write_cdf("cdf_ttft.csv", ttft_series(r));
  write_cdf("cdf_tpot.csv", tpot_series(r));

  const ImbalanceProfile imb = imbalance_profile(r);
  {
    std::ostringstream o;
    o << "window_start_s,hit_tokens,input_tokens,hit_ratio\n";
    for (const auto& w : imb.windows) {
      o << format_double(micros_to_seconds(w.window_start)) << ',' << w.hit_tokens << ','
        << w.input_tokens << ',' << format_double(w.hit_ratio()) << '\n';
    }
    detail::write_file(out_dir / "hit_timeline.csv", o.str());
  }
  {
    std::ostringstream o;
    o << "window_start_s,instance,prefill_s,mean_bs\n";
    for (const auto& w : imb.windows) {
      for (std::size_t i = 0; i < w.prefill_s.size(); ++i) {
        o << format_double(micros_to_seconds(w.window_start)) << ',' << i << ','
          << format_double(w.prefill_s[i]) << ',' << format_double(w.mean_bs[i]) << '\n';
      }
    }
    detail::write_file(out_dir / "imbalance.csv", o.str());
  }
  write_detector_csv(r.detector_rows, out_dir / "detector.csv");
  detail::write_file(out_dir / "summary.json", summary_json(r).dump(2) + "\n");
}

}  // namespace kvroute

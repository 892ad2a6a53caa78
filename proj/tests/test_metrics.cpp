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

#include <gtest/gtest.h>

#include <numeric>
#include <random>
#include <sstream>

#include "test_util.hpp"

namespace kvroute {
namespace {

using tu::make_record;
using tu::read_file;
using tu::scratch_dir;
using tu::seq_blocks;

std::vector<double> one_to(int n) {
  std::vector<double> v(n);
  std::iota(v.begin(), v.end(), 1.0);
  return v;
}

TEST(Percentile, NearestRank) {
  EXPECT_EQ(percentile(std::vector<double>{5}, 99), 5);
  EXPECT_EQ(percentile(one_to(100), 50), 50);
  EXPECT_EQ(percentile(one_to(100), 95), 95);
  EXPECT_EQ(percentile(one_to(100), 100), 100);
  EXPECT_EQ(percentile(one_to(100), 0), 1);
  EXPECT_EQ(percentile(std::vector<double>{3, 1, 2}, 50), 2);
}

TEST(Percentile, Errors) {
  try {
    percentile(std::vector<double>{}, 50);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEmptySeries);
  }
  EXPECT_THROW(percentile(one_to(3), 101), Error);
  EXPECT_THROW(percentile(one_to(3), -1), Error);
}

TEST(Percentile, MonotoneInP) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1000);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(1 + rng() % 300);
    for (double& x : v) x = u(rng);
    double prev = -1;
    for (int p = 0; p <= 100; ++p) {
      const double q = percentile(v, p);
      ASSERT_GE(q, prev);
      prev = q;
    }
  }
}

TEST(Cdf, MonotoneBothColumns) {
  std::mt19937_64 rng(9);
  std::vector<double> v(500);
  for (double& x : v) x = static_cast<double>(rng() % 50);
  const auto c = cdf(v);
  ASSERT_EQ(c.size(), v.size());
  for (std::size_t i = 1; i < c.size(); ++i) {
    EXPECT_LE(c[i - 1].first, c[i].first);
    EXPECT_LT(c[i - 1].second, c[i].second);
  }
  EXPECT_DOUBLE_EQ(c.back().second, 1.0);
}

RequestMetrics req(RequestId id, Micros arrival, Micros first, Micros finish, std::uint32_t out,
                   std::uint32_t in = 100, std::uint32_t hit = 0) {
  RequestMetrics m;
  m.request_id = id;
  m.arrival = arrival;
  m.scheduled = arrival;
  m.first_token = first;
  m.finish = finish;
  m.output_tokens = out;
  m.input_tokens = in;
  m.hit_tokens = hit;
  return m;
}

TEST(RequestMetrics, TpotExcludesSingleToken) {
  MetricsReport r;
  r.requests = {req(1, 0, 1000, 1000, 1), req(2, 0, 2000, 5000, 4)};
  EXPECT_EQ(tpot_series(r), std::vector<double>{1.0});
  EXPECT_EQ(ttft_series(r), (std::vector<double>{1.0, 2.0}));
}

TEST(RequestMetrics, HitRatioWeighting) {
  MetricsReport r;
  r.requests = {req(1, 0, 1, 1, 1, 100, 100), req(2, 0, 1, 1, 1, 300, 0)};
  EXPECT_DOUBLE_EQ(hit_ratio_tokens(r), 0.25);
  EXPECT_DOUBLE_EQ(hit_ratio_requests(r), 0.5);
}

TEST(BatchSize, TimeWeightedMean) {
  const std::vector<BsSample> log{{0, 2}, {10, 4}, {30, 0}};
  EXPECT_DOUBLE_EQ(mean_bs(log, 0, 40), (2.0 * 10 + 4.0 * 20) / 40);
  EXPECT_DOUBLE_EQ(mean_bs(log, 10, 20), 4.0);
  EXPECT_EQ(max_bs(log, 0, 40), 4u);
  EXPECT_DOUBLE_EQ(spread_ratio(std::vector<double>{2, 4, 3}), 2.0);
  EXPECT_TRUE(std::isinf(spread_ratio(std::vector<double>{0, 4})));
}

ClusterConfig two(PolicyKind k = PolicyKind::kVllm) {
  ClusterConfig c;
  c.n_instances = 2;
  c.policy.kind = k;
  return c;
}

TEST(Imbalance, SingleInstanceIsDegenerate) {
  ClusterConfig c = two();
  c.n_instances = 1;
  const auto rep = run(std::vector<TraceRecord>{make_record(1, 0, seq_blocks(1, 10))}, c);
  const ImbalanceProfile p = imbalance_profile(rep);
  EXPECT_TRUE(p.degenerate);
  EXPECT_EQ(p.top2, (std::pair<std::size_t, std::size_t>{0, 0}));
}

TEST(Imbalance, SymmetricLoadBalances) {
  // Pairs of identical requests, well spaced: vllm sends one to each instance.
  std::vector<TraceRecord> t;
  for (int i = 0; i < 40; ++i) {
    const double at = 0.5 * (i / 2);
    t.push_back(make_record(i, at, seq_blocks(1000 * (i / 2 + 1), 20), 4));
  }
  const auto rep = run(t, two());
  const ImbalanceProfile p = imbalance_profile(rep);
  ASSERT_FALSE(p.windows.empty());
  for (const auto& w : p.windows) EXPECT_NEAR(w.prefill_s[0], w.prefill_s[1], 1e-9);
  EXPECT_NEAR(p.mean_cross_stddev, 0.0, 1e-9);
}

TEST(Imbalance, AllLoadOnOneInstance) {
  // Every request shares one prefix that only instance 0 holds.
  std::vector<TraceRecord> t;
  for (int i = 0; i < 30; ++i) t.push_back(make_record(i, 1.0 * i, seq_blocks(1, 30), 2));
  RunOptions opt;
  const std::vector<Prewarm> warm{{0, seq_blocks(1, 30)}};
  opt.prewarm = warm;
  const auto rep = run(t, two(PolicyKind::kMultiplicative), opt);
  for (const auto& m : rep.requests) ASSERT_EQ(m.instance, 0u);
  const ImbalanceProfile p = imbalance_profile(rep);
  double s0 = 0, s1 = 0;
  for (const auto& w : p.windows) {
    s0 += w.prefill_s[0];
    s1 += w.prefill_s[1];
  }
  EXPECT_NEAR(s0, micros_to_seconds(rep.prefill_total[0]), 1e-9);
  EXPECT_EQ(s1, 0.0);
}

TEST(Imbalance, PrefillSplitAcrossWindows) {
  MetricsReport r;
  r.n_instances = 2;
  r.prefill_spans = {{0, seconds_to_micros(9.5), seconds_to_micros(1.0)}};
  r.makespan = seconds_to_micros(11);
  const ImbalanceProfile p = imbalance_profile(r);
  ASSERT_EQ(p.windows.size(), 2u);
  EXPECT_NEAR(p.windows[0].prefill_s[0], 0.5, 1e-12);
  EXPECT_NEAR(p.windows[1].prefill_s[0], 0.5, 1e-12);
  EXPECT_EQ(p.top2, (std::pair<std::size_t, std::size_t>{0, 1}));
}

std::vector<TraceRecord> mixed_trace() {
  SyntheticSpec s;
  s.duration_s = 25;
  s.mean_rate_rps = 12;
  s.seed = 21;
  s.classes = {ClassSpec{0.5, 20, {1, 6}, {1, 12}}, ClassSpec{0.5, 0, {4, 10}, {1, 6}}};
  return generate_synthetic(s);
}

TEST(HitTimeline, RecountsAdmissions) {
  const auto trace = mixed_trace();
  ClusterConfig c = two(PolicyKind::kMultiplicative);
  const auto rep = run(trace, c);
  const ImbalanceProfile p = imbalance_profile(rep, 5);
  for (const auto& w : p.windows) {
    std::uint64_t hit = 0, in = 0;
    for (const auto& m : rep.requests) {
      if (m.arrival >= w.window_start && m.arrival < w.window_start + seconds_to_micros(5)) {
        hit += m.hit_tokens;
        in += m.input_tokens;
      }
    }
    EXPECT_EQ(w.hit_tokens, hit);
    EXPECT_EQ(w.input_tokens, in);
    for (double s : w.prefill_s) EXPECT_LE(s, 5.0 + 1e-9);
  }
}

const char* const kFiles[] = {"requests.csv",  "cdf_ttft.csv", "cdf_tpot.csv", "hit_timeline.csv",
                              "imbalance.csv", "detector.csv", "summary.json"};

TEST(Export, EmptyReportHasHeadersOnly) {
  const auto dir = scratch_dir("metrics_empty");
  MetricsReport r;
  r.policy = "vllm";
  export_report(r, dir);
  for (const char* f : kFiles) {
    const std::string body = read_file(dir / f);
    if (std::string_view(f).ends_with(".csv")) {
      EXPECT_EQ(std::count(body.begin(), body.end(), '\n'), 1) << f;
    }
  }
  const auto j = nlohmann::json::parse(read_file(dir / "summary.json"));
  EXPECT_EQ(j["requests"], 0);
  EXPECT_EQ(j["finished"], 0);
  EXPECT_TRUE(j["mean_ttft_ms"].is_null());
}

TEST(Export, SingleRequest) {
  const auto dir = scratch_dir("metrics_one");
  const auto rep = run(std::vector<TraceRecord>{make_record(1, 0.25, seq_blocks(1, 8), 3)}, two());
  export_report(rep, dir);
  const std::string csv = read_file(dir / "requests.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  const auto j = nlohmann::json::parse(read_file(dir / "summary.json"));
  EXPECT_DOUBLE_EQ(j["mean_ttft_ms"].get<double>(), rep.requests[0].ttft_ms());
}

std::vector<std::vector<std::string>> parse_csv(const std::string& body) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(body);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

TEST(Export, SummaryMatchesCsvAndIsStable) {
  const auto trace = mixed_trace();
  ClusterConfig c = two(PolicyKind::kMultiplicative);
  c.detector.enabled = true;
  c.detector.window_s = 5;
  const auto rep = run(trace, c);
  const auto a = scratch_dir("metrics_a"), b = scratch_dir("metrics_b");
  export_report(rep, a);
  export_report(run(trace, c), b);
  for (const char* f : kFiles) EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
  export_report(rep, b);
  for (const char* f : kFiles) EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;

  const auto rows = parse_csv(read_file(a / "requests.csv"));
  ASSERT_EQ(rows.size(), trace.size() + 1);
  ASSERT_EQ(rows[0][10], "ttft_ms");
  double sum = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) sum += std::stod(rows[i][10]);
  const auto j = nlohmann::json::parse(read_file(a / "summary.json"));
  EXPECT_NEAR(sum / static_cast<double>(trace.size()), j["mean_ttft_ms"].get<double>(), 1e-9);

  for (const char* f : {"cdf_ttft.csv", "cdf_tpot.csv"}) {
    const auto cdf_rows = parse_csv(read_file(a / f));
    for (std::size_t i = 2; i < cdf_rows.size(); ++i) {
      EXPECT_LE(std::stod(cdf_rows[i - 1][0]), std::stod(cdf_rows[i][0]));
      EXPECT_LE(std::stod(cdf_rows[i - 1][1]), std::stod(cdf_rows[i][1]));
    }
  }
}

TEST(Export, SummaryKeySet) {
  const auto j = summary_json(MetricsReport{});
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  const std::vector<std::string> want{
      "policy",        "n_instances",  "requests",    "routed",      "finished",    "tpot_requests",
      "mean_ttft_ms",  "p50_ttft_ms",  "p95_ttft_ms", "p99_ttft_ms", "mean_tpot_ms", "p50_tpot_ms",
      "p95_tpot_ms",   "p99_tpot_ms",  "hit_ratio",   "hit_ratio_request_weighted", "makespan_s",
      "mean_bs_per_instance", "bs_spread", "prefill_window_stddev_s", "imbalance_top2", "fail_open",
      "detector_events", "arrivals_hash"};
  EXPECT_EQ(keys, want);
}

TEST(Export, UnwritableDirectory) {
  const auto dir = scratch_dir("metrics_blocked");
  const auto file = dir / "plain_file";
  std::ofstream(file) << "x";
  try {
    export_report(MetricsReport{}, file / "sub");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
  }
}

}  // namespace
}  // namespace kvroute

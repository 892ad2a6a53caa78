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

#include <random>

#include "test_util.hpp"

namespace kvroute {
namespace {

using tu::Blocks;
using tu::make_record;
using tu::seq_blocks;

TEST(Indicators, IdleSnapshotIsZero) {
  InstanceSim inst(0, CostModel{});
  IndicatorSnapshot want;
  want.as_of = 42;
  EXPECT_EQ(snapshot(inst, 42), want);
}

TEST(Indicators, RunningAndQueuedCounts) {
  InstanceSim inst(0, CostModel{});
  for (RequestId i = 0; i < 3; ++i) inst.enqueue(make_record(i, 0, {i + 1}, 10), 0);
  inst.execute_batch(inst.form_batch(0), 0);
  inst.enqueue(make_record(10, 0, {50}), 0);
  inst.enqueue(make_record(11, 0, {51}), 0);
  const auto s = snapshot(inst, 0);
  EXPECT_EQ(s.r_bs, 3u);
  EXPECT_EQ(s.q_bs, 2u);
  EXPECT_EQ(s.bs, 5u);
  EXPECT_EQ(s.pending_prefill_tokens, 32u);
  EXPECT_LE(s.dc_tokens, s.total_tokens);
  EXPECT_EQ(s, inst.state().recount(0));
}

TEST(Indicators, StalenessHidesRecentAdmissions) {
  InstanceSim inst(0, CostModel{});
  inst.set_history_horizon(millis_to_micros(100));
  inst.enqueue(make_record(1, 0, {1}), 0);
  inst.enqueue(make_record(2, 0.2, {2}), millis_to_micros(200));
  const Micros now = millis_to_micros(250);
  EXPECT_EQ(snapshot(inst, now).bs, 2u);
  EXPECT_EQ(snapshot(inst, now, millis_to_micros(100)).bs, 1u);
  EXPECT_EQ(snapshot(inst, millis_to_micros(50), millis_to_micros(100)).bs, 0u);
}

TEST(Indicators, KvHitRatio) {
  InstanceSim inst(0, CostModel{});
  const TraceRecord r = make_record(1, 0, {1, 2, 3, 4}, 1, 64);
  EXPECT_DOUBLE_EQ(kv_hit_ratio(inst, r), 0.0);
  inst.prewarm(Blocks{1, 2}, 0);
  EXPECT_DOUBLE_EQ(kv_hit_ratio(inst, r), 0.5);
  inst.prewarm(Blocks{1, 2, 3, 4}, 0);
  EXPECT_DOUBLE_EQ(kv_hit_ratio(inst, r), 1.0);
  // Partial last block: the hit is capped at the input length.
  const TraceRecord partial = make_record(2, 0, {1, 2, 3, 4}, 1, 50);
  EXPECT_DOUBLE_EQ(kv_hit_ratio(inst, partial), 1.0);
}

TEST(Indicators, PTokens) {
  InstanceSim inst(0, CostModel{});
  EXPECT_EQ(p_tokens(inst, make_record(1, 0, seq_blocks(1, 32), 1, 500), 0), 500u);
  inst.prewarm(Blocks{7, 8}, 0);
  EXPECT_EQ(p_tokens(inst, make_record(2, 0, {7, 8}), 0), 1u);
  IndicatorSnapshot s;
  s.pending_prefill_tokens = 3000;
  EXPECT_EQ(p_tokens(s, 200, 0), 3200u);
}

TEST(Indicators, PTokensLowerBound) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 2000; ++trial) {
    InstanceSim inst(0, CostModel{});
    const std::size_t n = 1 + rng() % 20;
    const Blocks b = seq_blocks(0, n);
    inst.prewarm(Blocks(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(rng() % (n + 1))), 0);
    const auto in = static_cast<std::uint32_t>((n - 1) * 16 + 1 + rng() % 16);
    const TraceRecord r = make_record(1, 0, b, 1, in);
    const double bound = in * (1.0 - kv_hit_ratio(inst, r)) - 16.0;
    EXPECT_GE(static_cast<double>(p_tokens(inst, r, 0)), bound);
  }
}

TEST(Indicators, HitQueriesAreReadOnly) {
  auto build = [](bool query) {
    InstanceSim inst(0, CostModel{}, 4);
    inst.prewarm(Blocks{1, 2}, 1);
    inst.prewarm(Blocks{3, 4}, 2);
    if (query) {
      for (int i = 0; i < 10; ++i) kv_hit_ratio(inst, make_record(9, 0, {1, 2}));
    }
    inst.prewarm(Blocks{5}, 3);
    return std::make_pair(inst.cache().match_prefix(Blocks{1, 2}), inst.cache().match_prefix(Blocks{3, 4}));
  };
  EXPECT_EQ(build(false), build(true));
}

}  // namespace
}  // namespace kvroute

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

// Routes a handful of requests by hand on a 4-instance cluster and prints
// what each instance looked like to the multiplicative policy.

#include <iostream>

#include "kvroute/kvroute.hpp"

int main() {
  using namespace kvroute;
  ClusterConfig cfg;
  cfg.n_instances = 4;
  Cluster cluster(cfg);

  // Two requests sharing a 64-block system prompt, one unrelated.
  std::vector<BlockHash> shared;
  for (BlockHash b = 1; b <= 64; ++b) shared.push_back(b);
  cluster.instances()[2].prewarm(shared, 0);

  auto request = [&](RequestId id, std::vector<BlockHash> blocks) {
    TraceRecord r;
    r.request_id = id;
    r.prefix_blocks = std::move(blocks);
    r.input_tokens = static_cast<std::uint32_t>(r.prefix_blocks.size()) * kDefaultBlockSize;
    r.output_tokens = 32;
    return r;
  };
  std::vector<BlockHash> with_suffix = shared;
  with_suffix.push_back(1000);
  const TraceRecord reqs[] = {request(0, shared), request(1, with_suffix), request(2, {7, 8, 9})};

  for (const TraceRecord& r : reqs) {
    const auto cands = build_candidates(cluster.instances(), r, 0);
    const RoutingDecision d = cluster.route(r, 0);
    std::cout << "request " << r.request_id << " -> instance " << d.chosen << "\n";
    for (const Candidate& c : cands) {
      std::cout << "  instance " << c.instance << ": hit=" << format_double(c.hit_ratio)
                << " p_tokens=" << c.p_tokens << " bs=" << c.snap.bs
                << " score=" << format_double(d.scores[c.instance]) << "\n";
    }
  }
  return 0;
}

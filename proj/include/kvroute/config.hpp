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

#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "kvroute/cluster.hpp"
#include "kvroute/trace.hpp"

// JSON configuration. Every block and field is optional; unknown keys are
// rejected so typos do not silently fall back to defaults.
//
// {
//   "cluster":    {"n_instances": 16, "staleness_ms": 0, "seed": 0, "debug": false},
//   "cost_model": {"prefill_base_ms": 5, "prefill_per_token_ms": 0.1, ...},
//   "cache":      {"capacity_blocks": 40000 | "infinite", "block_size": 16},
//   "policy":     {"name": "multiplicative", "kv_weight": 0.4, ...},
//   "detector":   {"enabled": false, "window_s": 60, ...},
//   "trace":      {"path": "..."} or {"synthetic": {...}}, plus "rate_rps" / "rate_fraction"
// }

namespace kvroute {

struct TraceSource {
  std::optional<std::string> path;
  std::optional<SyntheticSpec> synthetic;
  std::optional<double> rate_rps;       // rescale to this mean rate
  std::optional<double> rate_fraction;  // rescale to this fraction of probed capacity
};

struct FileConfig {
  ClusterConfig cluster;
  TraceSource trace;
};

namespace detail {

using json = nlohmann::json;

inline void check_keys(const json& obj, std::string_view block, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw Error(ErrorKind::kConfig, "'" + std::string(block) + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (std::string_view a : allowed) ok = ok || it.key() == a;
    if (!ok) throw Error(ErrorKind::kConfig, "unknown key '" + std::string(block) + "." + it.key() + "'");
  }
}

template <typename T>
void get_to(const json& obj, std::string_view block, const char* key, T& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorKind::kConfig, "bad value for '" + std::string(block) + "." + key + "'");
  }
}

inline UniformRange parse_range(const json& j, const std::string& where) {
  UniformRange r;
  try {
    if (j.is_number_unsigned()) {
      r.min = r.max = j.get<std::uint32_t>();
    } else if (j.is_array() && j.size() == 2) {
      r.min = j[0].get<std::uint32_t>();
      r.max = j[1].get<std::uint32_t>();
    } else {
      throw Error(ErrorKind::kConfig, "'" + where + "' must be an integer or [min, max]");
    }
  } catch (const json::exception&) {
    throw Error(ErrorKind::kConfig, "'" + where + "' must hold non-negative integers");
  }
  return r;
}

inline SyntheticSpec parse_synthetic(const json& j) {
  check_keys(j, "trace.synthetic", {"duration_s", "mean_rate_rps", "seed", "block_size", "classes"});
  SyntheticSpec s;
  get_to(j, "trace.synthetic", "duration_s", s.duration_s);
  get_to(j, "trace.synthetic", "mean_rate_rps", s.mean_rate_rps);
  get_to(j, "trace.synthetic", "seed", s.seed);
  get_to(j, "trace.synthetic", "block_size", s.block_size);
  if (auto it = j.find("classes"); it != j.end()) {
    if (!it->is_array()) throw Error(ErrorKind::kConfig, "'trace.synthetic.classes' must be an array");
    for (const json& c : *it) {
      check_keys(c, "trace.synthetic.classes[]", {"weight", "shared_prefix_blocks", "suffix_blocks", "output_tokens"});
      ClassSpec cs;
      get_to(c, "class", "weight", cs.weight);
      get_to(c, "class", "shared_prefix_blocks", cs.shared_prefix_blocks);
      if (c.contains("suffix_blocks")) cs.suffix_blocks = parse_range(c["suffix_blocks"], "suffix_blocks");
      if (c.contains("output_tokens")) cs.output_tokens = parse_range(c["output_tokens"], "output_tokens");
      s.classes.push_back(cs);
    }
  }
  return s;
}

}  // namespace detail

inline FileConfig parse_config(const nlohmann::json& root) {
  using detail::check_keys;
  using detail::get_to;
  FileConfig fc;
  ClusterConfig& c = fc.cluster;
  if (root.is_null()) return fc;
  check_keys(root, "<root>", {"cluster", "cost_model", "cache", "policy", "detector", "trace"});

  if (auto it = root.find("cluster"); it != root.end()) {
    check_keys(*it, "cluster", {"n_instances", "staleness_ms", "seed", "debug"});
    get_to(*it, "cluster", "n_instances", c.n_instances);
    get_to(*it, "cluster", "staleness_ms", c.staleness_ms);
    get_to(*it, "cluster", "seed", c.seed);
    get_to(*it, "cluster", "debug", c.debug);
  }
  if (auto it = root.find("cost_model"); it != root.end()) {
    check_keys(*it, "cost_model",
               {"prefill_base_ms", "prefill_per_token_ms", "decode_base_ms", "decode_per_seq_ms",
                "decode_per_ctx_token_ms", "chunk_tokens", "max_batch_requests"});
    get_to(*it, "cost_model", "prefill_base_ms", c.cost.prefill_base_ms);
    get_to(*it, "cost_model", "prefill_per_token_ms", c.cost.prefill_per_token_ms);
    get_to(*it, "cost_model", "decode_base_ms", c.cost.decode_base_ms);
    get_to(*it, "cost_model", "decode_per_seq_ms", c.cost.decode_per_seq_ms);
    get_to(*it, "cost_model", "decode_per_ctx_token_ms", c.cost.decode_per_ctx_token_ms);
    get_to(*it, "cost_model", "chunk_tokens", c.cost.chunk_tokens);
    get_to(*it, "cost_model", "max_batch_requests", c.cost.max_batch_requests);
  }
  if (auto it = root.find("cache"); it != root.end()) {
    check_keys(*it, "cache", {"capacity_blocks", "block_size"});
    if (auto cap = it->find("capacity_blocks"); cap != it->end()) {
      if (cap->is_string() && cap->get<std::string>() == "infinite") {
        c.cache.capacity_blocks = kInfiniteCapacity;
      } else {
        get_to(*it, "cache", "capacity_blocks", c.cache.capacity_blocks);
      }
    }
    get_to(*it, "cache", "block_size", c.cache.block_size);
  }
  if (auto it = root.find("policy"); it != root.end()) {
    check_keys(*it, "policy",
               {"name", "q_weight", "kv_weight", "bs_cap", "range_threshold", "mis_tuned", "mis_scale",
                "kv_indicator", "balance_indicator", "tie_break_seed"});
    std::string name(policy_name(c.policy.kind));
    get_to(*it, "policy", "name", name);
    c.policy.kind = parse_policy_kind(name);
    get_to(*it, "policy", "q_weight", c.policy.q_weight);
    get_to(*it, "policy", "kv_weight", c.policy.kv_weight);
    get_to(*it, "policy", "bs_cap", c.policy.bs_cap);
    get_to(*it, "policy", "range_threshold", c.policy.range_threshold);
    get_to(*it, "policy", "mis_tuned", c.policy.mis_tuned);
    get_to(*it, "policy", "mis_scale", c.policy.mis_scale);
    get_to(*it, "policy", "tie_break_seed", c.policy.tie_break_seed);
    if (auto k = it->find("kv_indicator"); k != it->end()) {
      const std::string v = k->is_string() ? k->get<std::string>() : "";
      if (v == "p_tokens") {
        c.policy.kv_indicator = KvIndicator::kPTokens;
      } else if (v == "one_minus_hit") {
        c.policy.kv_indicator = KvIndicator::kOneMinusHit;
      } else {
        throw Error(ErrorKind::kConfig, "policy.kv_indicator must be p_tokens or one_minus_hit");
      }
    }
    if (auto k = it->find("balance_indicator"); k != it->end()) {
      const std::string v = k->is_string() ? k->get<std::string>() : "";
      if (v == "bs") {
        c.policy.balance_indicator = BalanceIndicator::kBs;
      } else if (v == "total_tokens") {
        c.policy.balance_indicator = BalanceIndicator::kTotalTokens;
      } else {
        throw Error(ErrorKind::kConfig, "policy.balance_indicator must be bs or total_tokens");
      }
    }
  }
  if (auto it = root.find("detector"); it != root.end()) {
    check_keys(*it, "detector",
               {"enabled", "mitigate", "window_s", "top_k_classes", "class_key_blocks",
                "consecutive_multiplier", "mitigation_mode", "compare"});
    DetectorConfig& d = c.detector;
    get_to(*it, "detector", "enabled", d.enabled);
    get_to(*it, "detector", "mitigate", d.mitigate);
    get_to(*it, "detector", "window_s", d.window_s);
    get_to(*it, "detector", "top_k_classes", d.top_k_classes);
    get_to(*it, "detector", "class_key_blocks", d.class_key_blocks);
    get_to(*it, "detector", "consecutive_multiplier", d.consecutive_multiplier);
    if (auto k = it->find("mitigation_mode"); k != it->end()) {
      const std::string v = k->is_string() ? k->get<std::string>() : "";
      if (v == "exclude_M") {
        d.mitigation_mode = MitigationMode::kExcludeM;
      } else if (v == "force_least_bs") {
        d.mitigation_mode = MitigationMode::kForceLeastBs;
      } else {
        throw Error(ErrorKind::kConfig, "detector.mitigation_mode must be exclude_M or force_least_bs");
      }
    }
    if (auto k = it->find("compare"); k != it->end()) {
      const std::string v = k->is_string() ? k->get<std::string>() : "";
      if (v == "best") {
        d.compare = ProductCompare::kBest;
      } else if (v == "average") {
        d.compare = ProductCompare::kAverage;
      } else {
        throw Error(ErrorKind::kConfig, "detector.compare must be best or average");
      }
    }
  }
  if (auto it = root.find("trace"); it != root.end()) {
    check_keys(*it, "trace", {"path", "synthetic", "rate_rps", "rate_fraction"});
    TraceSource& t = fc.trace;
    if (it->contains("path")) {
      std::string p;
      get_to(*it, "trace", "path", p);
      t.path = p;
    }
    if (auto s = it->find("synthetic"); s != it->end()) t.synthetic = detail::parse_synthetic(*s);
    if (t.path && t.synthetic) throw Error(ErrorKind::kConfig, "trace: give either path or synthetic, not both");
    if (it->contains("rate_rps")) {
      double v = 0;
      get_to(*it, "trace", "rate_rps", v);
      t.rate_rps = v;
    }
    if (it->contains("rate_fraction")) {
      double v = 0;
      get_to(*it, "trace", "rate_fraction", v);
      t.rate_fraction = v;
    }
  }
  c.validate();
  return fc;
}

inline FileConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::kConfig, "config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

}  // namespace kvroute

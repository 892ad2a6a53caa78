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

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "kvroute/cluster.hpp"
#include "kvroute/config.hpp"
#include "kvroute/metrics.hpp"

// Subcommands of the `kvroute` tool. Kept in a header so tests can drive
// them in-process.

namespace kvroute::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitInternal = 2;

/// Flags shared by the simulation commands. Flags win over config values.
struct RunSpec {
  std::string config_path;
  std::string trace_path;
  std::string policy;
  std::optional<double> rate_rps;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

inline std::string default_out_dir() {
  if (const char* env = std::getenv("KVROUTE_OUT_DIR"); env != nullptr && *env != '\0') return env;
  return "kvroute_out";
}

inline FileConfig resolve_config(const RunSpec& spec) {
  FileConfig fc;
  if (!spec.config_path.empty()) fc = load_config(spec.config_path);
  if (!spec.trace_path.empty()) {
    fc.trace.path = spec.trace_path;
    fc.trace.synthetic.reset();
  }
  if (!spec.policy.empty()) fc.cluster.policy.kind = parse_policy_kind(spec.policy);
  if (spec.seed) {
    fc.cluster.seed = *spec.seed;
    if (fc.trace.synthetic) fc.trace.synthetic->seed = *spec.seed;
  }
  if (spec.rate_rps) {
    fc.trace.rate_rps = spec.rate_rps;
    fc.trace.rate_fraction.reset();
  }
  return fc;
}

/// Loads or generates the trace without any rate rescaling.
inline std::vector<TraceRecord> base_trace(const FileConfig& fc) {
  if (fc.trace.path) return load_trace(*fc.trace.path, fc.cluster.cache.block_size);
  if (fc.trace.synthetic) {
    SyntheticSpec s = *fc.trace.synthetic;
    s.block_size = fc.cluster.cache.block_size;
    return generate_synthetic(s);
  }
  throw Error(ErrorKind::kConfig, "no trace given: pass --trace or set trace.path / trace.synthetic");
}

/// Base trace rescaled per trace.rate_rps or trace.rate_fraction.
inline std::vector<TraceRecord> materialize_trace(const FileConfig& fc) {
  std::vector<TraceRecord> t = base_trace(fc);
  if (fc.trace.rate_rps) return scale_trace(t, *fc.trace.rate_rps);
  if (fc.trace.rate_fraction) {
    const double cap = probe_capacity(t, fc.cluster);
    return scale_trace(t, *fc.trace.rate_fraction * cap);
  }
  return t;
}

inline void print_summary(std::ostream& out, const MetricsReport& r) {
  const auto ttft = ttft_series(r);
  out << r.policy << ": requests=" << r.requests.size() << " hit_ratio=" << format_double(hit_ratio_tokens(r));
  if (!ttft.empty()) out << " mean_ttft_ms=" << format_double(mean(ttft)) << " p99_ttft_ms=" << format_double(percentile(ttft, 99));
  out << '\n';
}

inline int cmd_run(const RunSpec& spec, std::ostream& out) {
  const FileConfig fc = resolve_config(spec);
  const std::vector<TraceRecord> trace = materialize_trace(fc);
  const MetricsReport report = run(trace, fc.cluster);
  export_report(report, spec.out_dir);
  print_summary(out, report);
  return kExitOk;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline void write_compare_csv(const std::filesystem::path& path, const std::vector<MetricsReport>& reports) {
  std::ostringstream o;
  o << "policy,requests,mean_ttft_ms,p50_ttft_ms,p95_ttft_ms,p99_ttft_ms,mean_tpot_ms,p50_tpot_ms,"
       "p95_tpot_ms,p99_tpot_ms,hit_ratio,arrivals_hash\n";
  auto stat = [](const std::vector<double>& v, double p) {
    return v.empty() ? std::string() : format_double(percentile(v, p));
  };
  auto avg = [](const std::vector<double>& v) { return v.empty() ? std::string() : format_double(mean(v)); };
  for (const MetricsReport& r : reports) {
    const auto ttft = ttft_series(r);
    const auto tpot = tpot_series(r);
    o << r.policy << ',' << r.requests.size() << ',' << avg(ttft) << ',' << stat(ttft, 50) << ','
      << stat(ttft, 95) << ',' << stat(ttft, 99) << ',' << avg(tpot) << ',' << stat(tpot, 50) << ','
      << stat(tpot, 95) << ',' << stat(tpot, 99) << ',' << format_double(hit_ratio_tokens(r)) << ','
      << format_hex64(r.arrivals_hash) << '\n';
  }
  detail::write_file(path, o.str());
}

/// Runs every policy on one arrival stream; one thread per policy when
/// `jobs` > 1. Results come back in `policies` order.
inline std::vector<MetricsReport> run_policies(const std::vector<TraceRecord>& trace, const ClusterConfig& base,
                                               const std::vector<PolicyKind>& policies, unsigned jobs) {
  std::vector<MetricsReport> reports(policies.size());
  std::vector<std::exception_ptr> errors(policies.size());
  auto one = [&](std::size_t i) {
    try {
      ClusterConfig c = base;
      c.policy.kind = policies[i];
      reports[i] = run(trace, c);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (jobs <= 1) {
    for (std::size_t i = 0; i < policies.size(); ++i) one(i);
  } else {
    for (std::size_t start = 0; start < policies.size(); start += jobs) {
      std::vector<std::thread> pool;
      for (std::size_t i = start; i < std::min(policies.size(), start + jobs); ++i) pool.emplace_back(one, i);
      for (auto& t : pool) t.join();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return reports;
}

inline int cmd_compare(const RunSpec& spec, const std::string& policy_list, const std::string& rate_list,
                       unsigned jobs, std::ostream& out) {
  std::vector<PolicyKind> kinds;
  std::set<std::string> seen;
  for (const std::string& name : split_list(policy_list)) {
    if (!seen.insert(name).second) throw Error(ErrorKind::kConfig, "duplicate policy '" + name + "'");
    kinds.push_back(parse_policy_kind(name));
  }
  if (kinds.size() < 2) throw Error(ErrorKind::kConfig, "compare needs at least two policies");

  const FileConfig fc = resolve_config(spec);
  const std::filesystem::path root(spec.out_dir);
  auto emit = [&](const std::filesystem::path& dir, const std::vector<TraceRecord>& trace) {
    const std::vector<MetricsReport> reports = run_policies(trace, fc.cluster, kinds, jobs);
    for (const MetricsReport& r : reports) {
      export_report(r, dir / r.policy);
      print_summary(out, r);
    }
    write_compare_csv(dir / "compare.csv", reports);
  };

  if (rate_list.empty()) {
    emit(root, materialize_trace(fc));
    return kExitOk;
  }
  const std::vector<TraceRecord> base = base_trace(fc);
  const double cap = probe_capacity(base, fc.cluster);
  out << "probed capacity: " << format_double(cap) << " rps\n";
  for (const std::string& item : split_list(rate_list)) {
    double f = 0.0;
    try {
      f = std::stod(item);
    } catch (const std::exception&) {
      throw Error(ErrorKind::kConfig, "bad rate fraction '" + item + "'");
    }
    if (!(f > 0.0)) throw Error(ErrorKind::kConfig, "rate fractions must be positive");
    out << "rate " << item << ":\n";
    emit(root / ("rate_" + item), scale_trace(base, f * cap));
  }
  return kExitOk;
}

/// First violating detector row, if any.
inline const DetectorRow* first_violation(const std::vector<DetectorRow>& rows) {
  for (const DetectorRow& r : rows) {
    if (r.suspect) return &r;
  }
  return nullptr;
}

/// Replays the trace on a cluster with unbounded caches and an observe-only
/// detector, and reports whether the workload condition ever fails.
inline int cmd_audit(const RunSpec& spec, std::optional<std::size_t> instances,
                     std::optional<double> window_s, std::ostream& out) {
  FileConfig fc = resolve_config(spec);
  if (instances) fc.cluster.n_instances = *instances;
  if (window_s) fc.cluster.detector.window_s = *window_s;
  fc.cluster.cache.capacity_blocks = kInfiniteCapacity;
  fc.cluster.detector.enabled = true;
  fc.cluster.detector.mitigate = false;
  fc.cluster.validate();

  const std::vector<TraceRecord> trace = materialize_trace(fc);
  const MetricsReport report = run(trace, fc.cluster);
  std::filesystem::create_directories(spec.out_dir);
  write_detector_csv(report.detector_rows, std::filesystem::path(spec.out_dir) / "detector.csv");
  std::set<Micros> windows;
  for (const DetectorRow& r : report.detector_rows) windows.insert(r.window_end);
  if (const DetectorRow* v = first_violation(report.detector_rows)) {
    out << "violation at " << format_double(micros_to_seconds(v->window_end)) << " s (class "
        << format_hex64(v->class_key) << ", x/x_bar=" << detail::fmt_ratio(double(v->arrivals), double(v->total - v->arrivals))
        << ", |M|/|M_bar|=" << detail::fmt_ratio(double(v->m), double(v->m_bar)) << ")\n";
  } else {
    out << "benign everywhere (" << windows.size() << " windows)\n";
  }
  return kExitOk;
}

inline int cmd_probe(const RunSpec& spec, const ProbeOptions& popt, std::ostream& out) {
  const FileConfig fc = resolve_config(spec);
  const std::vector<TraceRecord> trace = base_trace(fc);
  out << format_double(probe_capacity(trace, fc.cluster, popt)) << '\n';
  return kExitOk;
}

inline int cmd_gen(const RunSpec& spec, std::optional<double> duration_s, std::optional<double> rate,
                   const std::string& out_path, std::ostream& out) {
  FileConfig fc = resolve_config(spec);
  if (!fc.trace.synthetic) throw Error(ErrorKind::kConfig, "gen needs trace.synthetic in the config");
  SyntheticSpec s = *fc.trace.synthetic;
  s.block_size = fc.cluster.cache.block_size;
  if (duration_s) s.duration_s = *duration_s;
  if (rate) s.mean_rate_rps = *rate;
  const std::vector<TraceRecord> t = generate_synthetic(s);
  if (out_path.empty() || out_path == "-") {
    write_trace(out, t);
  } else {
    save_trace(out_path, t);
  }
  return kExitOk;
}

/// Entry point of the tool. Returns the process exit code.
inline int main(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"kvroute: request routing simulator for prefix-cache-aware LLM serving"};
  app.require_subcommand(1);

  RunSpec spec;
  spec.out_dir = default_out_dir();
  auto common = [&](CLI::App* sub, bool with_out) {
    sub->add_option("--config", spec.config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--trace", spec.trace_path, "JSONL trace file (overrides trace.path)");
    sub->add_option("--policy", spec.policy, "policy name (overrides policy.name)");
    sub->add_option("--rate", spec.rate_rps, "mean arrival rate in requests/s");
    sub->add_option("--seed", spec.seed, "seed (cluster tie-breaks and synthetic traces)");
    if (with_out) sub->add_option("--out", spec.out_dir, "output directory (default $KVROUTE_OUT_DIR)");
  };

  CLI::App* run_cmd = app.add_subcommand("run", "simulate one policy and export metrics");
  common(run_cmd, true);

  CLI::App* cmp = app.add_subcommand("compare", "run several policies on the same arrivals");
  common(cmp, true);
  std::string policies, rates;
  unsigned jobs = 1;
  cmp->add_option("--policies", policies, "comma-separated policy names")->required();
  cmp->add_option("--rates", rates, "comma-separated fractions of probed capacity");
  cmp->add_option("--jobs", jobs, "policies simulated in parallel")->check(CLI::PositiveNumber);

  CLI::App* audit = app.add_subcommand("audit", "check the hotspot workload condition on a trace");
  common(audit, true);
  std::optional<std::size_t> n_instances;
  std::optional<double> window;
  audit->add_option("--instances", n_instances, "assumed cluster size");
  audit->add_option("--window", window, "detector window in seconds");

  CLI::App* probe = app.add_subcommand("probe", "find the highest sustainable arrival rate");
  common(probe, false);
  ProbeOptions popt;
  probe->add_option("--upper", popt.upper_rps, "search upper limit in requests/s");
  probe->add_option("--tol", popt.rel_tol, "relative tolerance");

  CLI::App* gen = app.add_subcommand("gen", "write a synthetic trace");
  common(gen, false);
  std::optional<double> duration;
  std::string gen_out;
  gen->add_option("--duration", duration, "trace duration in seconds");
  gen->add_option("--out", gen_out, "output JSONL path ('-' for stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUser;
  }

  try {
    if (*run_cmd) return cmd_run(spec, out);
    if (*cmp) return cmd_compare(spec, policies, rates, jobs, out);
    if (*audit) return cmd_audit(spec, n_instances, window, out);
    if (*probe) return cmd_probe(spec, popt, out);
    if (*gen) return cmd_gen(spec, duration, spec.rate_rps, gen_out, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.kind() == ErrorKind::kInvariant ? kExitInternal : kExitUser;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: io-error: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitUser;
}

}  // namespace kvroute::cli

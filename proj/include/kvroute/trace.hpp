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
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kvroute/common.hpp"

namespace kvroute {

inline constexpr std::uint32_t kDefaultBlockSize = 16;

inline std::size_t blocks_for_tokens(std::uint64_t tokens,
                                     std::uint32_t block_size) {
  return static_cast<std::size_t>((tokens + block_size - 1) / block_size);
}

/// One replayed request. Output length is replayed verbatim regardless of
/// what a real model would emit.
struct TraceRecord {
  RequestId request_id = 0;
  double arrival_s = 0.0;
  std::vector<BlockHash> prefix_blocks;
  std::uint32_t input_tokens = 1;
  std::uint32_t output_tokens = 1;
  // Optional label carried through the file. The hotspot detector derives its
  // own class key from the leading blocks.
  std::optional<std::uint64_t> class_label;

  bool operator==(const TraceRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Line-delimited file format:
//   {"id":u64,"arrival_s":f64,"blocks":[u64...],"in":u32,"out":u32[,"class":u64]}
// ---------------------------------------------------------------------------

namespace detail {

inline TraceRecord parse_trace_line(const std::string& line, std::size_t lineno,
                                    std::uint32_t block_size) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::kParse,
                "line " + std::to_string(lineno) + ": " + e.what(), lineno);
  }
  auto fail = [&](const std::string& why) {
    throw Error(ErrorKind::kParse, "line " + std::to_string(lineno) + ": " + why,
                lineno);
  };
  if (!j.is_object()) fail("record is not an object");
  auto require_unsigned = [&](const char* key) -> std::uint64_t {
    auto it = j.find(key);
    if (it == j.end()) fail(std::string("missing key '") + key + "'");
    if (!it->is_number_unsigned()) {
      fail(std::string("key '") + key + "' must be a non-negative integer");
    }
    return it->get<std::uint64_t>();
  };

  TraceRecord r;
  r.request_id = require_unsigned("id");
  auto at = j.find("arrival_s");
  if (at == j.end() || !at->is_number()) fail("missing or non-numeric 'arrival_s'");
  r.arrival_s = at->get<double>();
  if (!(r.arrival_s >= 0.0) || !std::isfinite(r.arrival_s)) {
    fail("'arrival_s' must be finite and non-negative");
  }
  auto bt = j.find("blocks");
  if (bt == j.end() || !bt->is_array()) fail("missing 'blocks' array");
  r.prefix_blocks.reserve(bt->size());
  for (const auto& b : *bt) {
    if (!b.is_number_unsigned()) fail("block hashes must be unsigned integers");
    r.prefix_blocks.push_back(b.get<std::uint64_t>());
  }
  const std::uint64_t in = require_unsigned("in");
  const std::uint64_t out = require_unsigned("out");
  if (in < 1 || in > UINT32_MAX) fail("'in' must be in [1, 2^32)");
  if (out < 1 || out > UINT32_MAX) fail("'out' must be in [1, 2^32)");
  r.input_tokens = static_cast<std::uint32_t>(in);
  r.output_tokens = static_cast<std::uint32_t>(out);
  if (j.contains("class")) r.class_label = require_unsigned("class");
  if (blocks_for_tokens(r.input_tokens, block_size) != r.prefix_blocks.size()) {
    fail("block count " + std::to_string(r.prefix_blocks.size()) +
         " does not cover " + std::to_string(r.input_tokens) + " tokens");
  }
  return r;
}

}  // namespace detail

/// Parses a whole trace; any malformed line rejects the stream.
inline std::vector<TraceRecord> parse_trace(std::istream& in,
                                            std::uint32_t block_size = kDefaultBlockSize) {
  std::vector<TraceRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    TraceRecord r = detail::parse_trace_line(line, lineno, block_size);
    if (!records.empty() && r.arrival_s < records.back().arrival_s) {
      throw Error(ErrorKind::kNonMonotoneArrival,
                  "line " + std::to_string(lineno) + ": arrival " +
                      format_double(r.arrival_s) + " precedes " +
                      format_double(records.back().arrival_s),
                  lineno);
    }
    records.push_back(std::move(r));
  }
  return records;
}

inline std::vector<TraceRecord> load_trace(const std::string& path,
                                           std::uint32_t block_size = kDefaultBlockSize) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open trace file '" + path + "'");
  return parse_trace(in, block_size);
}

inline std::string trace_line(const TraceRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.request_id;
  j["arrival_s"] = r.arrival_s;
  j["blocks"] = r.prefix_blocks;
  j["in"] = r.input_tokens;
  j["out"] = r.output_tokens;
  if (r.class_label) j["class"] = *r.class_label;
  return j.dump();
}

inline void write_trace(std::ostream& out, std::span<const TraceRecord> records) {
  for (const auto& r : records) out << trace_line(r) << '\n';
}

inline void save_trace(const std::string& path, std::span<const TraceRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write trace file '" + path + "'");
  write_trace(out, records);
  if (!out) throw Error(ErrorKind::kIo, "write failed for '" + path + "'");
}

/// Mean arrival rate measured as (n - 1) / (last - first).
inline double observed_rate_rps(std::span<const TraceRecord> records) {
  if (records.size() < 2) throw Error(ErrorKind::kEmptyTrace, "need at least 2 records");
  const double span = records.back().arrival_s - records.front().arrival_s;
  if (span <= 0.0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(records.size() - 1) / span;
}

/// Rescales inter-arrival gaps so the mean rate becomes `target_rate_rps`,
/// and shifts the first arrival to zero.
inline std::vector<TraceRecord> scale_trace(std::span<const TraceRecord> records,
                                            double target_rate_rps) {
  if (!(target_rate_rps > 0.0) || !std::isfinite(target_rate_rps)) {
    throw Error(ErrorKind::kDomain, "target rate must be positive");
  }
  if (records.size() < 2) {
    throw Error(ErrorKind::kEmptyTrace, "scaling needs at least 2 records");
  }
  const double t0 = records.front().arrival_s;
  const double span = records.back().arrival_s - t0;
  // Zero span: all arrivals collapse onto t = 0.
  const double factor =
      span > 0.0 ? static_cast<double>(records.size() - 1) / (span * target_rate_rps)
                 : 0.0;
  std::vector<TraceRecord> out(records.begin(), records.end());
  for (auto& r : out) r.arrival_s = (r.arrival_s - t0) * factor;
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic traces
// ---------------------------------------------------------------------------

/// Inclusive integer range sampled uniformly; min == max gives a constant.
struct UniformRange {
  std::uint32_t min = 1;
  std::uint32_t max = 1;
};

struct ClassSpec {
  double weight = 1.0;
  std::uint32_t shared_prefix_blocks = 1;
  UniformRange suffix_blocks{0, 0};
  UniformRange output_tokens{1, 1};
};

struct SyntheticSpec {
  double duration_s = 60.0;
  double mean_rate_rps = 10.0;
  std::vector<ClassSpec> classes;
  std::uint64_t seed = 0;
  std::uint32_t block_size = kDefaultBlockSize;

  void validate() const {
    auto bad = [](const std::string& why) { throw Error(ErrorKind::kInvalidSpec, why); };
    if (!(duration_s > 0.0) || !std::isfinite(duration_s)) bad("duration_s must be positive");
    if (!(mean_rate_rps > 0.0) || !std::isfinite(mean_rate_rps)) bad("mean_rate_rps must be positive");
    if (block_size < 1) bad("block_size must be >= 1");
    if (classes.empty()) bad("class_mix must not be empty");
    double sum = 0.0;
    for (const auto& c : classes) {
      if (!(c.weight > 0.0)) bad("class weights must be positive");
      sum += c.weight;
      if (c.suffix_blocks.min > c.suffix_blocks.max) bad("suffix_blocks min > max");
      if (c.output_tokens.min > c.output_tokens.max) bad("output_tokens min > max");
      if (c.output_tokens.min < 1) bad("output_tokens must be >= 1");
      if (c.shared_prefix_blocks + c.suffix_blocks.min < 1) bad("a request needs at least one block");
    }
    if (std::abs(sum - 1.0) > 1e-9) bad("class weights must sum to 1");
  }
};

/// Hash of the `position`-th shared block of class `class_index`.
inline BlockHash shared_block_hash(std::uint64_t seed, std::size_t class_index,
                                   std::size_t position) {
  return hash_combine(hash_combine(mix64(seed ^ 0x5eedc1a55ULL), class_index), position);
}

/// Per-class Poisson arrivals merged into one stream. Deterministic for a
/// fixed seed on a given standard library.
inline std::vector<TraceRecord> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);

  std::vector<std::pair<double, std::size_t>> arrivals;
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    std::exponential_distribution<double> gap(spec.classes[c].weight * spec.mean_rate_rps);
    for (double t = gap(rng); t < spec.duration_s; t += gap(rng)) arrivals.emplace_back(t, c);
  }
  std::sort(arrivals.begin(), arrivals.end());

  std::vector<TraceRecord> out;
  out.reserve(arrivals.size());
  for (std::size_t i = 0; i < arrivals.size(); ++i) {
    const auto [t, c] = arrivals[i];
    const ClassSpec& cs = spec.classes[c];
    auto draw = [&](UniformRange r) {
      return std::uniform_int_distribution<std::uint32_t>(r.min, r.max)(rng);
    };
    TraceRecord r;
    r.request_id = i;
    r.arrival_s = t;
    r.class_label = c;
    const std::uint32_t suffix = draw(cs.suffix_blocks);
    const std::uint32_t total = cs.shared_prefix_blocks + suffix;
    r.prefix_blocks.reserve(total);
    for (std::uint32_t b = 0; b < cs.shared_prefix_blocks; ++b) {
      r.prefix_blocks.push_back(shared_block_hash(spec.seed, c, b));
    }
    for (std::uint32_t b = 0; b < suffix; ++b) r.prefix_blocks.push_back(rng());
    // Last block may be partially filled.
    const std::uint32_t tail =
        std::uniform_int_distribution<std::uint32_t>(1, spec.block_size)(rng);
    r.input_tokens = (total - 1) * spec.block_size + tail;
    r.output_tokens = draw(cs.output_tokens);
    out.push_back(std::move(r));
  }
  return out;
}

/// Order-sensitive digest of an arrival stream (ids, times, content).
inline std::uint64_t arrivals_digest(std::span<const TraceRecord> records) {
  std::uint64_t h = 0x6b76726f757465ULL;
  for (const auto& r : records) {
    h = hash_combine(h, r.request_id);
    h = hash_combine(h, static_cast<std::uint64_t>(seconds_to_micros(r.arrival_s)));
    h = hash_combine(h, r.input_tokens);
    h = hash_combine(h, r.output_tokens);
    for (BlockHash b : r.prefix_blocks) h = hash_combine(h, b);
  }
  return h;
}

}  // namespace kvroute

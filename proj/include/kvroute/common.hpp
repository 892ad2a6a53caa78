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

#include <charconv>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace kvroute {

using BlockHash = std::uint64_t;
using RequestId = std::uint64_t;

// Simulation time. All internal clocks are integer microseconds.
using Micros = std::int64_t;

inline constexpr Micros kMicrosPerSecond = 1'000'000;
inline constexpr Micros kMicrosPerMilli = 1'000;

inline Micros seconds_to_micros(double s) {
  return static_cast<Micros>(std::llround(s * 1e6));
}
inline Micros millis_to_micros(double ms) {
  return static_cast<Micros>(std::llround(ms * 1e3));
}
inline double micros_to_seconds(Micros us) {
  return static_cast<double>(us) / 1e6;
}
inline double micros_to_millis(Micros us) {
  return static_cast<double>(us) / 1e3;
}

enum class ErrorKind {
  kIo,
  kParse,
  kNonMonotoneArrival,
  kEmptyTrace,
  kInvalidSpec,
  kDuplicateRequest,
  kCapacityExhausted,
  kDomain,
  kNoInstances,
  kConfig,
  kEmptySeries,
  kInvariant,
};

inline std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kIo: return "io-error";
    case ErrorKind::kParse: return "parse-error";
    case ErrorKind::kNonMonotoneArrival: return "non-monotone-arrival";
    case ErrorKind::kEmptyTrace: return "empty-trace";
    case ErrorKind::kInvalidSpec: return "invalid-spec";
    case ErrorKind::kDuplicateRequest: return "duplicate-request";
    case ErrorKind::kCapacityExhausted: return "capacity-exhausted";
    case ErrorKind::kDomain: return "domain-error";
    case ErrorKind::kNoInstances: return "no-instances";
    case ErrorKind::kConfig: return "config-error";
    case ErrorKind::kEmptySeries: return "empty-series";
    case ErrorKind::kInvariant: return "invariant-violation";
  }
  return "unknown";
}

/// Every module reports failures through this exception. `line()` is the
/// 1-based input line for trace parse errors and 0 otherwise.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what, std::size_t line = 0)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + what),
        kind_(kind),
        line_(line) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::size_t line() const noexcept { return line_; }

 private:
  ErrorKind kind_;
  std::size_t line_;
};

// splitmix64 finalizer; the only hash primitive used for chains and keys.
inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t hash_combine(std::uint64_t seed,
                                            std::uint64_t value) {
  return mix64(seed ^ (mix64(value) + 0x632be59bd9b4e019ULL + (seed << 6) +
                       (seed >> 2)));
}

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_hex64(std::uint64_t v) {
  char buf[17];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, 16);
  std::string s(buf, res.ptr);
  return std::string(16 - s.size(), '0') + s;
}

}  // namespace kvroute

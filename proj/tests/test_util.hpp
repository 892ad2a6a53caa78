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

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kvroute/kvroute.hpp"

namespace kvroute::tu {

using Blocks = std::vector<BlockHash>;

/// Record with explicit blocks; input tokens default to full blocks.
inline TraceRecord make_record(RequestId id, double arrival_s, std::vector<BlockHash> blocks,
                               std::uint32_t out = 4, std::uint32_t in = 0,
                               std::uint32_t block_size = kDefaultBlockSize) {
  TraceRecord r;
  r.request_id = id;
  r.arrival_s = arrival_s;
  r.prefix_blocks = std::move(blocks);
  r.input_tokens = in != 0 ? in : static_cast<std::uint32_t>(r.prefix_blocks.size()) * block_size;
  r.output_tokens = out;
  return r;
}

/// Blocks [base, base + n).
inline std::vector<BlockHash> seq_blocks(BlockHash base, std::size_t n) {
  std::vector<BlockHash> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(base + i);
  return v;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("kvroute_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace kvroute::tu

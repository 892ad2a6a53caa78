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
#include <map>
#include <stdexcept>
#include <vector>

#include "kvroute/kvroute.hpp"

// Independent reference models shared by the unit tests and the acceptance
// binary.

namespace kvroute::oracle {

using Blocks = std::vector<BlockHash>;

// Explicit block sequences with strict LRU eviction.
class NaiveCache {
 public:
  explicit NaiveCache(std::size_t cap) : cap_(cap) {}

  std::size_t match(const Blocks& b) const {
    std::size_t n = 0;
    for (std::size_t k = 1; k <= b.size(); ++k) {
      if (!entries_.contains(Blocks(b.begin(), b.begin() + k))) break;
      n = k;
    }
    return n;
  }
  void insert(const Blocks& b, Micros now) {
    for (std::size_t k = 1; k <= b.size(); ++k) {
      auto& e = entries_[Blocks(b.begin(), b.begin() + k)];
      e.touch = std::max(e.touch, now);
    }
    evict();
  }
  void touch(const Blocks& b, Micros now) {
    for (std::size_t k = 1; k <= match(b); ++k) {
      auto& e = entries_[Blocks(b.begin(), b.begin() + k)];
      e.touch = std::max(e.touch, now);
    }
  }
  void pin(const Blocks& b, std::size_t n, int delta) {
    for (std::size_t k = 1; k <= n; ++k) entries_.at(Blocks(b.begin(), b.begin() + k)).pins += delta;
  }
  std::size_t pinned() const {
    std::size_t p = 0;
    for (const auto& [k, e] : entries_) p += e.pins > 0;
    return p;
  }
  bool set_capacity(std::size_t cap) {
    if (pinned() > cap) return false;
    cap_ = cap;
    evict();
    return true;
  }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    Micros touch = -1;
    int pins = 0;
  };
  void evict() {
    while (entries_.size() > cap_) {
      auto victim = entries_.end();
      for (auto it = entries_.begin(); it != entries_.end(); ++it) {
        if (it->second.pins > 0) continue;
        if (victim == entries_.end() || it->second.touch < victim->second.touch ||
            (it->second.touch == victim->second.touch && it->first.size() > victim->first.size())) {
          victim = it;
        }
      }
      if (victim == entries_.end()) throw std::logic_error("naive cache: nothing evictable");
      entries_.erase(victim);
    }
  }
  std::size_t cap_;
  std::map<Blocks, Entry> entries_;
};

// Literal transcription of the reference pseudocode: imbalance test on the
// max/min batch sizes, else the highest hit ratio.
inline std::vector<std::size_t> filter_reference(const std::vector<std::uint32_t>& bs, const std::vector<double>& hit,
                                          std::uint32_t range) {
  const auto [lo, hi] = std::minmax_element(bs.begin(), bs.end());
  std::vector<std::size_t> out;
  if (*hi - *lo > range) {
    for (std::size_t i = 0; i < bs.size(); ++i) {
      if (bs[i] == *lo) out.push_back(i);
    }
  } else {
    const double best = *std::max_element(hit.begin(), hit.end());
    for (std::size_t i = 0; i < bs.size(); ++i) {
      if (hit[i] == best) out.push_back(i);
    }
  }
  return out;
}

}  // namespace kvroute::oracle

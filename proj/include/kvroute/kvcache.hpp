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
#include <limits>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "kvroute/common.hpp"
#include "kvroute/trace.hpp"

namespace kvroute {

using ChainHash = std::uint64_t;

inline constexpr std::size_t kInfiniteCapacity = std::numeric_limits<std::size_t>::max();
inline constexpr std::size_t kDefaultCacheCapacityBlocks = 40'000;

inline constexpr ChainHash kRootChain = 0;

/// Key of the chain ending at `block` whose parent chain is `parent`.
inline ChainHash extend_chain(ChainHash parent, BlockHash block) {
  ChainHash h = hash_combine(parent ^ 0x9a3c1f0b7d2e4c65ULL, block);
  return h == kRootChain ? 1 : h;
}

/// Per-instance prefix KV$ model at block granularity.
///
/// Entries are keyed by the running hash of the block sequence up to and
/// including each block, so a present key of depth k implies the whole
/// length-k prefix was inserted. Eviction is strict LRU by last-touch with
/// deeper chains evicted first on ties; since touching a chain refreshes all
/// of its ancestors, the LRU victim is always a leaf and prefix-closure holds.
/// Pinned chains (in-flight requests) are kept out of the LRU order.
class PrefixCache {
 public:
  explicit PrefixCache(std::size_t capacity_blocks = kDefaultCacheCapacityBlocks)
      : capacity_(capacity_blocks) {}

  std::size_t capacity() const { return capacity_; }
  bool infinite() const { return capacity_ == kInfiniteCapacity; }
  std::size_t occupancy() const { return nodes_.size(); }
  std::size_t pinned_blocks() const { return nodes_.size() - lru_.size(); }

  /// Length of the longest present prefix chain. Read-only.
  std::size_t match_prefix(std::span<const BlockHash> blocks) const {
    ChainHash h = kRootChain;
    std::size_t n = 0;
    for (BlockHash b : blocks) {
      h = extend_chain(h, b);
      if (!nodes_.contains(h)) break;
      ++n;
    }
    return n;
  }

  /// Inserts every prefix chain of `blocks` with last-touch `now` and evicts
  /// down to capacity. Returns the number of evicted blocks.
  std::size_t insert(std::span<const BlockHash> blocks, Micros now) {
    if (!infinite() && pinned_blocks() > capacity_) {
      throw Error(ErrorKind::kCapacityExhausted,
                  "pinned blocks (" + std::to_string(pinned_blocks()) +
                      ") exceed capacity " + std::to_string(capacity_));
    }
    ChainHash parent = kRootChain;
    std::uint32_t depth = 0;
    for (BlockHash b : blocks) {
      const ChainHash h = extend_chain(parent, b);
      ++depth;
      auto it = nodes_.find(h);
      if (it == nodes_.end()) {
        nodes_.emplace(h, Node{parent, depth, now, 0, 0});
        lru_.emplace(now, -static_cast<std::int64_t>(depth), h);
        if (parent != kRootChain) ++nodes_.at(parent).children;
      } else {
        refresh(h, it->second, now);
      }
      parent = h;
    }
    return evict_to_capacity();
  }

  /// Refreshes last-touch on the matched prefix; never changes structure.
  void touch(std::span<const BlockHash> blocks, Micros now) {
    ChainHash h = kRootChain;
    for (BlockHash b : blocks) {
      h = extend_chain(h, b);
      auto it = nodes_.find(h);
      if (it == nodes_.end()) break;
      refresh(h, it->second, now);
    }
  }

  /// Pins the first `n` blocks; all of them must be present.
  void pin(std::span<const BlockHash> blocks, std::size_t n) {
    for_prefix(blocks, n, [&](ChainHash h, Node& node) {
      if (node.pins++ == 0) lru_.erase(lru_key(h, node));
    });
  }

  void unpin(std::span<const BlockHash> blocks, std::size_t n) {
    for_prefix(blocks, n, [&](ChainHash h, Node& node) {
      if (node.pins == 0) throw Error(ErrorKind::kInvariant, "unpin of an unpinned chain");
      if (--node.pins == 0) lru_.insert(lru_key(h, node));
    });
  }

  /// Changes capacity, evicting as needed. Fails if pinned blocks alone
  /// exceed the new capacity.
  std::size_t set_capacity(std::size_t capacity_blocks) {
    if (capacity_blocks != kInfiniteCapacity && pinned_blocks() > capacity_blocks) {
      throw Error(ErrorKind::kCapacityExhausted,
                  "pinned blocks (" + std::to_string(pinned_blocks()) +
                      ") exceed capacity " + std::to_string(capacity_blocks));
    }
    capacity_ = capacity_blocks;
    return evict_to_capacity();
  }

  std::size_t evicted_total() const { return evicted_total_; }

  /// Structural self-check used by property tests and debug runs.
  bool check_invariants(std::string* why = nullptr) const {
    auto fail = [&](const std::string& msg) {
      if (why) *why = msg;
      return false;
    };
    if (!infinite() && nodes_.size() > capacity_) return fail("occupancy exceeds capacity");
    std::size_t unpinned = 0;
    std::unordered_map<ChainHash, std::uint32_t> child_counts;
    for (const auto& [h, node] : nodes_) {
      if (node.pins == 0) {
        ++unpinned;
        if (!lru_.contains(lru_key(h, node))) return fail("unpinned node missing from LRU");
      }
      if (node.depth == 1) {
        if (node.parent != kRootChain) return fail("depth-1 node with parent");
        continue;
      }
      auto pit = nodes_.find(node.parent);
      if (pit == nodes_.end()) return fail("prefix-closure violated");
      if (pit->second.depth + 1 != node.depth) return fail("depth mismatch");
      if (pit->second.last_touch < node.last_touch) return fail("parent older than child");
      if (node.pins > pit->second.pins) return fail("child pinned more than parent");
      ++child_counts[node.parent];
    }
    if (unpinned != lru_.size()) return fail("LRU size mismatch");
    for (const auto& [h, node] : nodes_) {
      auto it = child_counts.find(h);
      const std::uint32_t expected = it == child_counts.end() ? 0 : it->second;
      if (expected != node.children) return fail("child count mismatch");
    }
    return true;
  }

 private:
  struct Node {
    ChainHash parent;
    std::uint32_t depth;
    Micros last_touch;
    std::uint32_t pins;
    std::uint32_t children;
  };
  using LruKey = std::tuple<Micros, std::int64_t, ChainHash>;

  static LruKey lru_key(ChainHash h, const Node& n) {
    return {n.last_touch, -static_cast<std::int64_t>(n.depth), h};
  }

  // Last-touch never moves backwards, which keeps parents at least as recent
  // as their children.
  void refresh(ChainHash h, Node& node, Micros now) {
    if (now <= node.last_touch) return;
    if (node.pins == 0) {
      lru_.erase(lru_key(h, node));
      node.last_touch = now;
      lru_.insert(lru_key(h, node));
    } else {
      node.last_touch = now;
    }
  }

  template <typename Fn>
  void for_prefix(std::span<const BlockHash> blocks, std::size_t n, Fn&& fn) {
    ChainHash h = kRootChain;
    for (std::size_t i = 0; i < n && i < blocks.size(); ++i) {
      h = extend_chain(h, blocks[i]);
      auto it = nodes_.find(h);
      if (it == nodes_.end()) throw Error(ErrorKind::kInvariant, "pin of an absent chain");
      fn(h, it->second);
    }
  }

  std::size_t evict_to_capacity() {
    if (infinite()) return 0;
    std::size_t evicted = 0;
    while (nodes_.size() > capacity_) {
      if (lru_.empty()) {
        throw Error(ErrorKind::kCapacityExhausted, "only pinned blocks remain");
      }
      auto first = lru_.begin();
      const ChainHash h = std::get<2>(*first);
      auto it = nodes_.find(h);
      if (it->second.children != 0) {
        throw Error(ErrorKind::kInvariant, "LRU victim is not a leaf");
      }
      if (it->second.parent != kRootChain) --nodes_.at(it->second.parent).children;
      lru_.erase(first);
      nodes_.erase(it);
      ++evicted;
    }
    evicted_total_ += evicted;
    return evicted;
  }

  std::size_t capacity_;
  std::unordered_map<ChainHash, Node> nodes_;
  std::set<LruKey> lru_;
  std::size_t evicted_total_ = 0;
};

/// Token-weighted hit ratio an oracle router would see if every request could
/// reuse every earlier request's prefix (one shared infinite cache).
inline double achievable_hit_ratio(std::span<const TraceRecord> records,
                                   std::uint32_t block_size = kDefaultBlockSize) {
  PrefixCache cache(kInfiniteCapacity);
  std::uint64_t hit = 0, total = 0;
  for (const auto& r : records) {
    const std::size_t blocks = cache.match_prefix(r.prefix_blocks);
    hit += std::min<std::uint64_t>(std::uint64_t{blocks} * block_size, r.input_tokens);
    total += r.input_tokens;
    cache.insert(r.prefix_blocks, seconds_to_micros(r.arrival_s));
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace kvroute

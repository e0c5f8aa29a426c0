#pragma once

#include <cstdint>
#include <vector>

#include "bcm/types.hpp"

namespace bcm {

using RankId = int;

/// Cube -> rank assignment. Starts in linear mode (contiguous blocks of
/// Z-ordered ids with the closed-form counts); switches to an explicit map
/// after dynamic balancing, at which point every rank holds the full map.
class Distribution {
public:
  Distribution() = default;

  /// Linear load-balanced distribution: n(p) = floor((N + P - p - 1) / P),
  /// ranks indexed from 0. Throws for P < 1 or N < 0.
  static Distribution linear(int64_t n_cubes, int n_ranks);

  /// Explicit assignment (post-balancing). map[gid] = rank.
  static Distribution explicit_map(std::vector<RankId> map, int n_ranks);

  int ranks() const { return n_ranks_; }
  int64_t total() const { return n_total_; }
  bool is_linear() const { return linear_; }

  RankId owner_of(int64_t gid) const;
  int64_t count(RankId p) const { return counts_[p]; }
  const std::vector<int64_t>& counts() const { return counts_; }

  /// Global ids owned by rank p, ascending.
  std::vector<int32_t> owned(RankId p) const;

  bool operator==(const Distribution&) const = default;

private:
  bool linear_ = true;
  int n_ranks_ = 1;
  int64_t n_total_ = 0;
  std::vector<int64_t> counts_;
  std::vector<int64_t> offsets_;   // linear mode: first gid per rank
  std::vector<RankId> map_;        // explicit mode
};

/// Local<->global index maps for one rank, rebuilt after redistribution.
struct IndexMap {
  std::vector<int32_t> local_to_global;              // ascending gids
  std::vector<std::pair<RankId, int32_t>> global_to; // gid -> (rank, local)

  static IndexMap build(const Distribution& dist, RankId self);
  int local_of(int32_t gid) const { return global_to[gid].first == self_rank ? global_to[gid].second : -1; }
  RankId self_rank = 0;
};

}  // namespace bcm

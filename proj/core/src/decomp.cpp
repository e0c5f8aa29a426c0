#include "bcm/decomp.hpp"

#include <algorithm>
#include <string>

namespace bcm {

Distribution Distribution::linear(int64_t n_cubes, int n_ranks) {
  if (n_ranks < 1) throw Error("Distribution: rank count must be >= 1");
  if (n_cubes < 0) throw Error("Distribution: negative cube count");
  Distribution d;
  d.linear_ = true;
  d.n_ranks_ = n_ranks;
  d.n_total_ = n_cubes;
  d.counts_.resize(n_ranks);
  d.offsets_.resize(n_ranks + 1, 0);
  for (int p = 0; p < n_ranks; ++p) {
    d.counts_[p] = (n_cubes + n_ranks - p - 1) / n_ranks;
    d.offsets_[p + 1] = d.offsets_[p] + d.counts_[p];
  }
  return d;
}

Distribution Distribution::explicit_map(std::vector<RankId> map, int n_ranks) {
  if (n_ranks < 1) throw Error("Distribution: rank count must be >= 1");
  Distribution d;
  d.linear_ = false;
  d.n_ranks_ = n_ranks;
  d.n_total_ = static_cast<int64_t>(map.size());
  d.counts_.assign(n_ranks, 0);
  for (RankId r : map) {
    if (r < 0 || r >= n_ranks) throw Error("Distribution: rank out of range in explicit map");
    d.counts_[r]++;
  }
  d.map_ = std::move(map);
  return d;
}

RankId Distribution::owner_of(int64_t gid) const {
  if (gid < 0 || gid >= n_total_)
    throw Error("owner_of: index " + std::to_string(gid) + " out of range");
  if (!linear_) return map_[gid];
  // Closed-form inverse of the linear counts: the first R = N mod P ranks
  // hold L+1 cubes, the rest hold L.
  const int64_t L = n_total_ / n_ranks_;
  const int64_t R = n_total_ % n_ranks_;
  if (L == 0) return static_cast<RankId>(gid);
  if (gid < R * (L + 1)) return static_cast<RankId>(gid / (L + 1));
  return static_cast<RankId>(R + (gid - R * (L + 1)) / L);
}

std::vector<int32_t> Distribution::owned(RankId p) const {
  std::vector<int32_t> out;
  if (linear_) {
    out.reserve(counts_[p]);
    for (int64_t g = offsets_[p]; g < offsets_[p + 1]; ++g) out.push_back(static_cast<int32_t>(g));
  } else {
    for (int64_t g = 0; g < n_total_; ++g)
      if (map_[g] == p) out.push_back(static_cast<int32_t>(g));
  }
  return out;
}

IndexMap IndexMap::build(const Distribution& dist, RankId self) {
  IndexMap m;
  m.self_rank = self;
  m.global_to.resize(dist.total());
  std::vector<int32_t> next_local(dist.ranks(), 0);
  for (int64_t g = 0; g < dist.total(); ++g) {
    const RankId r = dist.owner_of(g);
    m.global_to[g] = {r, next_local[r]++};
    if (r == self) m.local_to_global.push_back(static_cast<int32_t>(g));
  }
  return m;
}

}  // namespace bcm

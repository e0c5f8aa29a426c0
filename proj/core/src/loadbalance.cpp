#include "bcm/loadbalance.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>

namespace bcm {

double DualGraph::node_total(int i) const {
  double w = w_cells[i] + w_particles[i];
  for (const Edge& e : edges[i]) w += e.weight;
  return w;
}

DualGraph build_graph(const BcmMesh& mesh, const std::vector<int64_t>& particles_per_cube,
                      const BalanceConfig& cfg) {
  DualGraph g;
  const int N = mesh.num_cubes();
  const int n = mesh.n_cells_per_edge;
  const double halo_w = 2.0;
  g.w_cells.resize(N);
  g.w_particles.resize(N);
  g.edges.resize(N);
  for (const Cube& c : mesh.cubes) {
    g.w_cells[c.global_id] = static_cast<double>(n) * n * n;
    g.w_particles[c.global_id] =
        cfg.gamma * static_cast<double>(particles_per_cube.empty()
                                           ? 0
                                           : particles_per_cube[c.global_id]);
    for (int fct = 0; fct < kNumFaces; ++fct) {
      const FaceNeighbors& fn = c.neighbors[fct];
      for (int i = 0; i < fn.count(); ++i) {
        const Cube& nb = mesh.cubes[fn.ids[i]];
        // Halo cells exchanged across the shared face patch, one direction;
        // a fine neighbor covers a quarter of the face.
        double cells = halo_w * n * n;
        if (nb.level != c.level) cells = halo_w * (n / 2.0) * (n / 2.0) * 2.0;
        if (c.global_id < nb.global_id)  // emit each undirected edge once
          continue;
        g.edges[c.global_id].push_back({nb.global_id, cells});
        g.edges[nb.global_id].push_back({c.global_id, cells});
      }
    }
  }
  return g;
}

ImbalanceEstimate estimate_imbalance(const DualGraph& graph, const Distribution& assignment) {
  ImbalanceEstimate est;
  est.per_rank.assign(assignment.ranks(), 0.0);
  for (int i = 0; i < graph.nodes(); ++i)
    est.per_rank[assignment.owner_of(i)] += graph.node_total(i);
  const double wmax = *std::max_element(est.per_rank.begin(), est.per_rank.end());
  const double wavg =
      std::accumulate(est.per_rank.begin(), est.per_rank.end(), 0.0) / assignment.ranks();
  est.ratio = wavg > 0.0 ? wmax / wavg : 1.0;
  return est;
}

double edge_cut(const DualGraph& graph, const std::vector<int>& part) {
  double cut = 0.0;
  for (int i = 0; i < graph.nodes(); ++i)
    for (const auto& e : graph.edges[i])
      if (e.to > i && part[e.to] != part[i]) cut += e.weight;
  return cut;
}

namespace {

// Recursive weighted bisection over the Z-order: nodes are already in curve
// order (global ids), so prefixes are spatially compact.
void bisect(const std::vector<double>& w, int lo, int hi, int k, int part_base,
            std::vector<int>& part) {
  if (k == 1) {
    for (int i = lo; i < hi; ++i) part[i] = part_base;
    return;
  }
  const int k1 = k / 2;
  const int k2 = k - k1;
  double total = 0.0;
  for (int i = lo; i < hi; ++i) total += w[i];
  const double target = total * k1 / k;

  // Best split with at least k1 nodes left and k2 right.
  int best = lo + k1;
  double run = 0.0, best_err = std::abs(run - target) + total;
  for (int s = lo + 1; s <= hi - 1; ++s) {
    run += w[s - 1];
    if (s - lo < k1 || hi - s < k2) continue;
    const double err = std::abs(run - target);
    if (err < best_err) {
      best_err = err;
      best = s;
    }
  }
  bisect(w, lo, best, k1, part_base, part);
  bisect(w, best, hi, k2, part_base + k1, part);
}

}  // namespace

std::vector<int> partition_graph(const DualGraph& graph, int k) {
  const int N = graph.nodes();
  if (k < 1) throw Error("partition_graph: k must be >= 1");
  if (k > N) throw Error("partition_graph: more parts than nodes");
  std::vector<double> w(N);
  for (int i = 0; i < N; ++i) w[i] = graph.node_total(i);
  std::vector<int> part(N, 0);
  bisect(w, 0, N, k, 0, part);

  // Boundary refinement: shift single border cubes toward balance while the
  // edge cut stays within 10% of its pre-refinement value.
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  const double avg = total / k;
  std::vector<double> W(k, 0.0);
  std::vector<int> first(k, N), last(k, -1);
  for (int i = 0; i < N; ++i) {
    W[part[i]] += w[i];
    first[part[i]] = std::min(first[part[i]], i);
    last[part[i]] = std::max(last[part[i]], i);
  }
  const double cut_budget = 1.10 * std::max(edge_cut(graph, part), 1e-300);

  for (int pass = 0; pass < 4; ++pass) {
    bool changed = false;
    for (int q = 0; q + 1 < k; ++q) {
      if (last[q] < 0 || first[q + 1] >= N) continue;
      auto try_move = [&](int node, int from, int to) {
        if (last[from] == first[from]) return false;  // keep parts non-empty
        const double before = std::max(std::abs(W[from] - avg), std::abs(W[to] - avg));
        const double after = std::max(std::abs(W[from] - w[node] - avg),
                                      std::abs(W[to] + w[node] - avg));
        if (after >= before) return false;
        part[node] = to;
        if (edge_cut(graph, part) > cut_budget) {
          part[node] = from;
          return false;
        }
        W[from] -= w[node];
        W[to] += w[node];
        return true;
      };
      if (try_move(last[q], q, q + 1)) {
        first[q + 1] = last[q];
        last[q] -= 1;
        changed = true;
      } else if (try_move(first[q + 1], q + 1, q)) {
        last[q] = first[q + 1];
        first[q + 1] += 1;
        changed = true;
      }
    }
    if (!changed) break;
  }
  return part;
}

std::vector<std::vector<double>> construct_similarity(const DualGraph& graph,
                                                      const Distribution& old_assignment,
                                                      const std::vector<int>& new_parts, int k) {
  std::vector<std::vector<double>> S(old_assignment.ranks(), std::vector<double>(k, 0.0));
  for (int i = 0; i < graph.nodes(); ++i)
    S[old_assignment.owner_of(i)][new_parts[i]] += graph.w_cells[i];
  return S;
}

std::vector<int> remap_mwbg(const std::vector<std::vector<double>>& S) {
  const int P = static_cast<int>(S.size());
  struct Entry {
    double w;
    int old_rank, new_part;
  };
  std::vector<Entry> entries;
  entries.reserve(P * P);
  for (int r = 0; r < P; ++r) {
    if (static_cast<int>(S[r].size()) != P) throw Error("remap_mwbg: S must be square");
    for (int q = 0; q < P; ++q) entries.push_back({S[r][q], r, q});
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.w != b.w) return a.w > b.w;
    if (a.old_rank != b.old_rank) return a.old_rank < b.old_rank;
    return a.new_part < b.new_part;
  });
  std::vector<int> rank_of_part(P, -1);
  std::vector<bool> rank_used(P, false);
  for (const Entry& e : entries)
    if (rank_of_part[e.new_part] < 0 && !rank_used[e.old_rank]) {
      rank_of_part[e.new_part] = e.old_rank;
      rank_used[e.old_rank] = true;
    }
  return rank_of_part;
}

BalanceDecision plan_rebalance(const DualGraph& graph, const Distribution& current,
                               const BalanceConfig& cfg) {
  BalanceDecision d;
  d.pre_ratio = estimate_imbalance(graph, current).ratio;
  d.post_ratio = d.pre_ratio;
  if (d.pre_ratio <= cfg.kappa) return d;

  const int P = current.ranks();
  const auto parts = partition_graph(graph, P);
  const auto S = construct_similarity(graph, current, parts, P);
  const auto rank_of_part = remap_mwbg(S);

  std::vector<RankId> map(graph.nodes());
  for (int i = 0; i < graph.nodes(); ++i) map[i] = rank_of_part[parts[i]];
  d.new_dist = Distribution::explicit_map(std::move(map), P);
  d.post_ratio = estimate_imbalance(graph, d.new_dist).ratio;
  d.cut = edge_cut(graph, parts);
  for (int i = 0; i < graph.nodes(); ++i)
    if (d.new_dist.owner_of(i) != current.owner_of(i)) d.cubes_moved++;
  d.fired = true;
  return d;
}

// ---------------------------------------------------------------------------

namespace {
constexpr int64_t kRedistTagBase = (int64_t{1} << 55) | (int64_t{1} << 54);

struct WireParticle {
  uint64_t id;
  double x, y, z, dc;
  int64_t body_and_gid;
};
}  // namespace

RedistributedState redistribute(const Distribution& old_dist, const Distribution& new_dist,
                                const std::vector<const Field*>& fields,
                                const ParticleStore& store, Transport& transport, RankId self,
                                uint64_t epoch) {
  const IndexMap old_map = IndexMap::build(old_dist, self);
  const IndexMap new_map = IndexMap::build(new_dist, self);
  const int P = old_dist.ranks();

  int64_t doubles_per_cube = 0;
  for (const Field* f : fields) doubles_per_cube += f->cells_per_comp() * f->components();

  RedistributedState out;
  out.field_payloads.resize(fields.size());
  for (size_t fi = 0; fi < fields.size(); ++fi)
    out.field_payloads[fi].resize(fields[fi]->cells_per_comp() * fields[fi]->components() *
                                  new_map.local_to_global.size());
  out.particles.sets.resize(new_map.local_to_global.size());
  for (size_t lc = 0; lc < out.particles.sets.size(); ++lc)
    out.particles.sets[lc].cube_gid = new_map.local_to_global[lc];

  auto copy_cube_local = [&](int32_t gid) {
    const int old_lc = old_map.local_of(gid);
    const int new_lc = new_map.local_of(gid);
    for (size_t fi = 0; fi < fields.size(); ++fi) {
      const auto span = fields[fi]->cube_span(old_lc);
      const int64_t per = static_cast<int64_t>(span.size());
      std::memcpy(out.field_payloads[fi].data() + new_lc * per, span.data(),
                  per * sizeof(double));
    }
    out.particles.sets[new_lc].members = store.sets[old_lc].members;
  };

  // Serialize cubes leaving this rank, per destination, ascending gid.
  std::vector<std::vector<uint8_t>> outbound(P);
  for (int32_t gid : old_map.local_to_global) {
    const RankId dst = new_dist.owner_of(gid);
    if (dst == self) {
      copy_cube_local(gid);
      continue;
    }
    auto& buf = outbound[dst];
    const int old_lc = old_map.local_of(gid);
    const int64_t gid64 = gid;
    const auto* g = reinterpret_cast<const uint8_t*>(&gid64);
    buf.insert(buf.end(), g, g + 8);
    for (const Field* f : fields) {
      const auto span = f->cube_span(old_lc);
      const auto* b = reinterpret_cast<const uint8_t*>(span.data());
      buf.insert(buf.end(), b, b + span.size() * sizeof(double));
    }
    const auto sorted = store.sets[old_lc].sorted();
    const int64_t count = static_cast<int64_t>(sorted.size());
    const auto* cb = reinterpret_cast<const uint8_t*>(&count);
    buf.insert(buf.end(), cb, cb + 8);
    for (const Particle* p : sorted) {
      WireParticle w{p->global_id, p->position.x, p->position.y, p->position.z, p->dc_volume,
                     (static_cast<int64_t>(p->body_id) << 32) | static_cast<uint32_t>(gid)};
      const auto* wb = reinterpret_cast<const uint8_t*>(&w);
      buf.insert(buf.end(), wb, wb + sizeof(WireParticle));
    }
  }

  const int64_t tag = kRedistTagBase + static_cast<int64_t>(epoch);
  for (int r = 0; r < P; ++r) {
    if (r == self) continue;
    out.bytes_moved += static_cast<int64_t>(outbound[r].size());
    transport.post_send(self, r, tag, std::move(outbound[r]));
  }
  std::vector<Handle> recvs;
  for (int r = 0; r < P; ++r)
    if (r != self) recvs.push_back(transport.post_recv(self, r, tag));
  std::vector<bool> done(recvs.size(), false);
  size_t remaining = recvs.size();
  while (remaining > 0) {
    for (int idx : transport.test_some(recvs))
      if (!done[idx]) {
        done[idx] = true;
        remaining--;
      }
    if (remaining > 0) std::this_thread::yield();
  }

  for (const Handle& h : recvs) {
    const uint8_t* ptr = h->payload.data();
    const uint8_t* end = ptr + h->payload.size();
    while (ptr < end) {
      int64_t gid64;
      std::memcpy(&gid64, ptr, 8);
      ptr += 8;
      const int new_lc = new_map.local_of(static_cast<int32_t>(gid64));
      for (size_t fi = 0; fi < fields.size(); ++fi) {
        const int64_t per = fields[fi]->cells_per_comp() * fields[fi]->components();
        std::memcpy(out.field_payloads[fi].data() + new_lc * per, ptr, per * sizeof(double));
        ptr += per * sizeof(double);
      }
      int64_t count;
      std::memcpy(&count, ptr, 8);
      ptr += 8;
      for (int64_t i = 0; i < count; ++i) {
        WireParticle w;
        std::memcpy(&w, ptr, sizeof(WireParticle));
        ptr += sizeof(WireParticle);
        Particle p;
        p.global_id = w.id;
        p.position = {w.x, w.y, w.z};
        p.dc_volume = w.dc;
        p.body_id = static_cast<int32_t>(w.body_and_gid >> 32);
        out.particles.sets[new_lc].members.emplace(p.global_id, p);
      }
    }
  }
  return out;
}

}  // namespace bcm

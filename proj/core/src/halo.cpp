#include "bcm/halo.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <map>
#include <thread>

namespace bcm {

double fine_to_coarse(std::span<const double> fine8, std::span<const double> weights8) {
  double s = 0.0;
  for (int p = 0; p < 8; ++p) s += weights8[p] * fine8[p];
  return s;
}

double fine_to_coarse(std::span<const double> fine8) {
  double s = 0.0;
  for (int p = 0; p < 8; ++p) s += fine8[p];
  return 0.125 * s;
}

std::array<double, 8> coarse_to_fine(double coarse) {
  std::array<double, 8> out;
  out.fill(coarse);
  return out;
}

std::vector<uint8_t> classify_zones(const BcmMesh& mesh, const Distribution& dist) {
  std::vector<uint8_t> zone(mesh.num_cubes(), 0);
  for (const Cube& c : mesh.cubes) {
    const RankId owner = dist.owner_of(c.global_id);
    for (int f = 0; f < kNumFaces && !zone[c.global_id]; ++f)
      for (int i = 0; i < c.neighbors[f].count(); ++i)
        if (dist.owner_of(c.neighbors[f].ids[i]) != owner) {
          zone[c.global_id] = 1;
          break;
        }
  }
  return zone;
}

namespace {

constexpr int kHalo = 2;

int fdiv2(int a) { return a >= 0 ? a / 2 : (a - 1) / 2; }

int64_t make_tag(int stream, uint64_t epoch, int round, bool rev) {
  return static_cast<int64_t>((static_cast<uint64_t>(stream) << 48) | (epoch << 4) |
                              (static_cast<uint64_t>(round) << 1) | (rev ? 1u : 0u));
}

/// Clamp range (inclusive lo, inclusive hi for a block base) of source cells
/// available to an averaging transfer in the given round. Axes swept in an
/// earlier round may read the source cube's own halo.
void avg_clamp(int round, int axis, int n, int& lo, int& hi) {
  const bool swept_earlier = (round == 1 && axis == 0) || (round == 2 && axis != 2);
  lo = swept_earlier ? -kHalo : 0;
  hi = (swept_earlier ? n + kHalo : n) - 2;
}

struct CellRef {
  int lc;  // local cube index
  int64_t base_index;
};

}  // namespace

HaloExchanger::HaloExchanger(const BcmMesh& mesh, const Distribution& dist, Transport& transport,
                             RankId self, std::array<bool, 3> periodic, int tag_stream)
    : mesh_(mesh), dist_(dist), transport_(transport), self_(self), periodic_(periodic),
      tag_stream_(tag_stream) {
  imap_ = IndexMap::build(dist, self);
  int depths = 0;
  for (int n = mesh.n_cells_per_edge; n >= 2; n /= 2) depths++;
  plans_.resize(depths);
  for (int d = 0; d < depths; ++d) build_plan(d);
}

void HaloExchanger::build_plan(int depth) {
  auto plan = std::make_unique<ExchangePlan>();
  const int n = mesh_.n_cells_per_edge >> depth;
  plan->n = n;
  plan->depth = depth;
  const int h = kHalo;

  std::array<std::map<RankId, ExchangePlan::Batch>, 3> send_map, recv_map, rev_send_map,
      rev_recv_map;
  std::vector<uint8_t> has_offrank(mesh_.num_cubes(), 0);

  auto cells_per_edge_t = [&](const Cube& c) -> int64_t { return c.edge_units; };

  // t-vector of a recipe: (B_dst - B_src) in cell units of the reference cube.
  auto t_vector = [&](const Cube& dst, const Cube& src, const IVec3& wrap_shift,
                      const Cube& ref) -> IVec3 {
    IVec3 t;
    for (int a = 0; a < 3; ++a) {
      const int64_t diff = dst.base_units[a] - (src.base_units[a] + wrap_shift[a]);
      const int64_t num = diff * n;
      if (num % cells_per_edge_t(ref) != 0)
        throw Error("halo plan: non-integer cell offset across a face");
      t[a] = num / cells_per_edge_t(ref);
    }
    return t;
  };

  auto emit = [&](const Recipe& r) {
    const RankId src_owner = dist_.owner_of(r.src_gid);
    const RankId dst_owner = dist_.owner_of(r.dst_gid);
    const int round = r.round;
    if (src_owner != dst_owner) {
      if (src_owner == self_ || dst_owner == self_) {
        has_offrank[r.src_gid] = has_offrank[r.src_gid] || src_owner == self_;
        has_offrank[r.dst_gid] = has_offrank[r.dst_gid] || dst_owner == self_;
      }
      if (src_owner == self_) {
        auto& b = send_map[round][dst_owner];
        b.peer = dst_owner;
        b.items.push_back(r);
        b.n_cells += r.dst.cells();
      }
      if (dst_owner == self_) {
        auto& b = recv_map[round][src_owner];
        b.peer = src_owner;
        b.items.push_back(r);
        b.n_cells += r.dst.cells();
        // Reverse direction: we hold the halo, the src owner accumulates.
        auto& rb = rev_send_map[round][src_owner];
        rb.peer = src_owner;
        rb.items.push_back(r);
        rb.n_cells += r.dst.cells();
      }
      if (src_owner == self_) {
        auto& rb = rev_recv_map[round][dst_owner];
        rb.peer = dst_owner;
        ExchangePlan::RevItem ri{r, static_cast<int>(0), rb.n_cells};
        rb.n_cells += r.dst.cells();
        rb.items.push_back(r);
        plan->rev_apply[round].push_back(ri);  // batch index fixed up later
      }
    } else if (src_owner == self_) {
      plan->local[round].push_back(r);
      plan->rev_apply[round].push_back({r, -1, 0});
    }
  };

  // Tangential claim of a finer neighbor along one tangential axis:
  // the low child owns [-h, n/2), the high child [n/2, n + h).
  auto child_claim = [&](int off_cells) -> std::pair<int, int> {
    return off_cells == 0 ? std::pair{-h, n / 2} : std::pair{n / 2, n + h};
  };

  for (const Cube& D : mesh_.cubes) {
    for (int f = 0; f < kNumFaces; ++f) {
      const int axis = face_axis(f);
      const int side = face_side(f);

      // Destination regions this face fills, per round.
      std::vector<std::pair<int, Region>> regions;  // (round, region)
      Region r0;
      for (int a = 0; a < 3; ++a) {
        r0.lo[a] = 0;
        r0.hi[a] = n;
      }
      r0.lo[axis] = side ? n : -h;
      r0.hi[axis] = side ? n + h : 0;
      regions.push_back({0, r0});
      if (axis == 1) {
        for (int xs = 0; xs < 2; ++xs) {
          Region r = r0;
          r.lo[0] = xs ? n : -h;
          r.hi[0] = xs ? n + h : 0;
          regions.push_back({1, r});
        }
      } else if (axis == 2) {
        for (int xs = 0; xs < 2; ++xs) {
          Region r = r0;
          r.lo[0] = xs ? n : -h;
          r.hi[0] = xs ? n + h : 0;
          regions.push_back({2, r});
        }
        for (int ys = 0; ys < 2; ++ys) {
          Region r = r0;
          r.lo[0] = -h;
          r.hi[0] = n + h;
          r.lo[1] = ys ? n : -h;
          r.hi[1] = ys ? n + h : 0;
          regions.push_back({2, r});
        }
      }

      const FaceNeighbors& fn = D.neighbors[f];
      bool is_bc = fn.kind == FaceKind::boundary;
      int wrap_gid = -1;
      IVec3 wrap_shift{0, 0, 0};
      if (is_bc && periodic_[axis]) {
        IVec3 base = D.base_units;
        base[axis] = side ? 0 : mesh_.lattice_extent[axis] - D.edge_units;
        auto hit = mesh_.find_cube(D.level, base);
        if (!hit)
          throw Error("halo plan: periodic wrap requires a same-level cube on the far side");
        wrap_gid = *hit;
        wrap_shift[axis] = side ? mesh_.lattice_extent[axis] : -mesh_.lattice_extent[axis];
        is_bc = false;
      }

      if (is_bc) {
        if (dist_.owner_of(D.global_id) == self_)
          for (auto& [round, reg] : regions) {
            Recipe r;
            r.src_gid = -1;
            r.dst_gid = D.global_id;
            r.face = static_cast<uint8_t>(f);
            r.round = static_cast<uint8_t>(round);
            r.dst = reg;
            plan->bc[round].push_back(r);
          }
        continue;
      }

      for (auto& [round, reg] : regions) {
        if (fn.kind == FaceKind::same || wrap_gid >= 0) {
          const Cube& S = mesh_.cubes[wrap_gid >= 0 ? wrap_gid : fn.ids[0]];
          Recipe r;
          r.src_gid = S.global_id;
          r.dst_gid = D.global_id;
          r.kind = TransferKind::copy;
          r.face = static_cast<uint8_t>(f);
          r.round = static_cast<uint8_t>(round);
          r.t = t_vector(D, S, wrap_shift, D);
          r.dst = reg;
          emit(r);
        } else if (fn.kind == FaceKind::coarser) {
          const Cube& S = mesh_.cubes[fn.ids[0]];
          Recipe r;
          r.src_gid = S.global_id;
          r.dst_gid = D.global_id;
          r.kind = TransferKind::inject;
          r.face = static_cast<uint8_t>(f);
          r.round = static_cast<uint8_t>(round);
          r.t = t_vector(D, S, {0, 0, 0}, D);
          r.dst = reg;
          emit(r);
        } else {  // finer: split the region by the children's tangential claims
          for (int i = 0; i < 4; ++i) {
            const Cube& S = mesh_.cubes[fn.ids[i]];
            Region sub = reg;
            bool empty = false;
            for (int a = 0; a < 3 && !empty; ++a) {
              if (a == axis) continue;
              const int64_t diff = S.base_units[a] - D.base_units[a];
              const int off = static_cast<int>(diff * n / D.edge_units);  // 0 or n/2
              auto [clo, chi] = child_claim(off);
              sub.lo[a] = std::max(sub.lo[a], clo);
              sub.hi[a] = std::min(sub.hi[a], chi);
              if (sub.lo[a] >= sub.hi[a]) empty = true;
            }
            if (empty) continue;
            Recipe r;
            r.src_gid = S.global_id;
            r.dst_gid = D.global_id;
            r.kind = TransferKind::average;
            r.face = static_cast<uint8_t>(f);
            r.round = static_cast<uint8_t>(round);
            r.t = t_vector(D, S, {0, 0, 0}, S);
            r.dst = sub;
            emit(r);
          }
        }
      }
    }
  }

  auto flatten = [](std::array<std::map<RankId, ExchangePlan::Batch>, 3>& maps,
                    std::array<std::vector<ExchangePlan::Batch>, 3>& out) {
    for (int r = 0; r < 3; ++r)
      for (auto& [peer, batch] : maps[r]) out[r].push_back(std::move(batch));
  };
  flatten(send_map, plan->send);
  flatten(recv_map, plan->recv);
  flatten(rev_send_map, plan->rev_send);
  flatten(rev_recv_map, plan->rev_recv);

  // Fix up reverse-apply batch indices now that batch order is final.
  for (int r = 0; r < 3; ++r) {
    std::map<int32_t, int> peer_to_batch;
    for (size_t b = 0; b < plan->rev_recv[r].size(); ++b)
      peer_to_batch[plan->rev_recv[r][b].peer] = static_cast<int>(b);
    for (auto& ri : plan->rev_apply[r]) {
      if (ri.batch < 0) continue;
      const RankId dst_owner = dist_.owner_of(ri.r.dst_gid);
      ri.batch = peer_to_batch.at(dst_owner);
    }
  }

  // Zone split: external iff the cube exchanges with another rank.
  for (int32_t gid : imap_.local_to_global) {
    const int lc = imap_.local_of(gid);
    plan->zone_of_local.push_back(has_offrank[gid]);
    (has_offrank[gid] ? plan->external_locals : plan->internal_locals).push_back(lc);
  }

  plans_[depth] = std::move(plan);
}

// ---------------------------------------------------------------------------
// Forward value generation, shared by local transfers and message packing so
// both paths produce bit-identical results.

namespace {

template <class Emit>
void forward_recipe(const Field& f, int src_lc, const Recipe& r, int n, InterfaceAvg avg,
                    Emit&& emit) {
  const int nc = f.components();
  const int face_axis_idx = face_axis(r.face);
  const int near_off = face_side(r.face) ? 0 : 1;  // fine layer touching the shared face
  for (int c = 0; c < nc; ++c)
    for (int i = r.dst.lo[0]; i < r.dst.hi[0]; ++i)
      for (int j = r.dst.lo[1]; j < r.dst.hi[1]; ++j)
        for (int k = r.dst.lo[2]; k < r.dst.hi[2]; ++k) {
          double v;
          switch (r.kind) {
            case TransferKind::copy:
              v = f.at(src_lc, c, i + static_cast<int>(r.t.x), j + static_cast<int>(r.t.y),
                       k + static_cast<int>(r.t.z));
              break;
            case TransferKind::inject:
              v = f.at(src_lc, c, fdiv2(i + static_cast<int>(r.t.x)),
                       fdiv2(j + static_cast<int>(r.t.y)), fdiv2(k + static_cast<int>(r.t.z)));
              break;
            default: {  // average
              int b[3] = {2 * i + static_cast<int>(r.t.x), 2 * j + static_cast<int>(r.t.y),
                          2 * k + static_cast<int>(r.t.z)};
              for (int a = 0; a < 3; ++a) {
                int lo, hi;
                avg_clamp(r.round, a, n, lo, hi);
                b[a] = std::clamp(b[a], lo, hi);
              }
              if (avg == InterfaceAvg::first_layer) {
                int d[3] = {0, 0, 0};
                d[face_axis_idx] = near_off;
                double s = 0.0;
                for (int t1 = 0; t1 < 2; ++t1)
                  for (int t2 = 0; t2 < 2; ++t2) {
                    int off[3] = {d[0], d[1], d[2]};
                    off[(face_axis_idx + 1) % 3] = t1;
                    off[(face_axis_idx + 2) % 3] = t2;
                    s += f.at(src_lc, c, b[0] + off[0], b[1] + off[1], b[2] + off[2]);
                  }
                v = 0.25 * s;
              } else {
                double s = 0.0;
                for (int di = 0; di < 2; ++di)
                  for (int dj = 0; dj < 2; ++dj)
                    for (int dk = 0; dk < 2; ++dk)
                      s += f.at(src_lc, c, b[0] + di, b[1] + dj, b[2] + dk);
                v = 0.125 * s;
              }
            }
          }
          emit(c, i, j, k, v);
        }
}

void apply_bc_recipe(Field& f, int lc, const Recipe& r, int n, const FieldBc& bc) {
  const int axis = face_axis(r.face);
  const int side = face_side(r.face);
  const BcKind kind = bc.kind[r.face];
  const Vec3& u0 = bc.inflow_value[r.face];
  const int nc = f.components();
  for (int c = 0; c < nc; ++c)
    for (int i = r.dst.lo[0]; i < r.dst.hi[0]; ++i)
      for (int j = r.dst.lo[1]; j < r.dst.hi[1]; ++j)
        for (int k = r.dst.lo[2]; k < r.dst.hi[2]; ++k) {
          int m[3] = {i, j, k};
          m[axis] = side ? 2 * n - 1 - m[axis] : -1 - m[axis];
          const double mirror = f.at(lc, c, m[0], m[1], m[2]);
          double v = mirror;  // scalars and outflow/neumann: zero-gradient
          if (nc == 3) {
            switch (kind) {
              case BcKind::noslip: v = -mirror; break;
              case BcKind::slip: v = (c == axis) ? -mirror : mirror; break;
              case BcKind::inflow: v = 2.0 * u0[c] - mirror; break;
              default: break;
            }
          }
          f.at(lc, c, i, j, k) = v;
        }
}

}  // namespace

void HaloExchanger::run_local_round(Field& f, const FieldBc& bc, const ExchangePlan& plan,
                                    int round, WorkerPool* pool, InterfaceAvg avg) {
  const auto& locals = plan.local[round];
  const auto& bcs = plan.bc[round];
  const int64_t n_jobs = static_cast<int64_t>(locals.size()) + bcs.size();
  auto job = [&](int64_t idx) {
    if (idx < static_cast<int64_t>(locals.size())) {
      const Recipe& r = locals[idx];
      const int src_lc = imap_.local_of(r.src_gid);
      const int dst_lc = imap_.local_of(r.dst_gid);
      forward_recipe(f, src_lc, r, plan.n, avg,
                     [&](int c, int i, int j, int k, double v) { f.at(dst_lc, c, i, j, k) = v; });
    } else {
      const Recipe& r = bcs[idx - locals.size()];
      apply_bc_recipe(f, imap_.local_of(r.dst_gid), r, plan.n, bc);
    }
  };
  if (pool)
    pool->parallel_for(n_jobs, job);
  else
    for (int64_t i = 0; i < n_jobs; ++i) job(i);
}

void HaloExchanger::post_round_recvs(ExchangeToken& t, const ExchangePlan& plan, int round,
                                     std::vector<Handle>& out) {
  for (const auto& batch : plan.recv[round])
    out.push_back(transport_.post_recv(self_, batch.peer, make_tag(tag_stream_, t.epoch, round, false)));
}

void HaloExchanger::pack_send_round(Field& f, const ExchangePlan& plan, int round,
                                    InterfaceAvg avg) {
  // epoch of the pending token is carried in f.exchange_epoch's shadow; the
  // caller passes it via the token; here we read the member epoch_ snapshot.
  // (callers always invoke pack under the token's epoch)
  const uint64_t epoch = current_pack_epoch_;
  for (const auto& batch : plan.send[round]) {
    std::vector<uint8_t> bytes(batch.n_cells * f.components() * sizeof(double));
    auto* out = reinterpret_cast<double*>(bytes.data());
    int64_t pos = 0;
    for (const Recipe& r : batch.items) {
      const int src_lc = imap_.local_of(r.src_gid);
      forward_recipe(f, src_lc, r, plan.n, avg,
                     [&](int, int, int, int, double v) { out[pos++] = v; });
    }
    transport_.post_send(self_, batch.peer, make_tag(tag_stream_, epoch, round, false), std::move(bytes));
  }
}

void HaloExchanger::unpack_batch(Field& f, const ExchangePlan::Batch& batch,
                                 const std::vector<uint8_t>& bytes) {
  const auto* in = reinterpret_cast<const double*>(bytes.data());
  int64_t pos = 0;
  for (const Recipe& r : batch.items) {
    const int dst_lc = imap_.local_of(r.dst_gid);
    for (int c = 0; c < f.components(); ++c)
      for (int i = r.dst.lo[0]; i < r.dst.hi[0]; ++i)
        for (int j = r.dst.lo[1]; j < r.dst.hi[1]; ++j)
          for (int k = r.dst.lo[2]; k < r.dst.hi[2]; ++k)
            f.at(dst_lc, c, i, j, k) = in[pos++];
  }
}

ExchangeToken HaloExchanger::begin(Field& f, const FieldBc& bc, int depth, WorkerPool* pool,
                                   InterfaceAvg avg) {
  if (f.exchange_pending)
    throw Error("halo: exchange already pending on this field (missing finalize)");
  f.exchange_pending = true;
  f.exchange_epoch++;

  const ExchangePlan& plan = *plans_[depth];
  ExchangeToken token;
  token.field = &f;
  token.bc = &bc;
  token.depth = depth;
  token.epoch = epoch_++;
  token.avg = avg;
  current_pack_epoch_ = token.epoch;

  const bool any_remote =
      !plan.recv[0].empty() || !plan.recv[1].empty() || !plan.recv[2].empty() ||
      !plan.send[0].empty() || !plan.send[1].empty() || !plan.send[2].empty();

  if (pool && pool->size() > 1) {
    std::atomic<bool> packer_claimed{false};
    std::atomic<int64_t> next{0};
    const auto& locals = plan.local[0];
    const auto& bcs = plan.bc[0];
    const int64_t n_jobs = static_cast<int64_t>(locals.size()) + bcs.size();
    pool->run_workers([&](int) {
      bool claimed = false;
      if (!packer_claimed.exchange(true)) {
        claimed = true;
        post_round_recvs(token, plan, 0, token.recvs);
        pack_send_round(f, plan, 0, avg);
      }
      (void)claimed;
      for (;;) {
        const int64_t idx = next.fetch_add(1, std::memory_order_relaxed);
        if (idx >= n_jobs) break;
        if (idx < static_cast<int64_t>(locals.size())) {
          const Recipe& r = locals[idx];
          forward_recipe(f, imap_.local_of(r.src_gid), r, plan.n, avg,
                         [&](int c, int i, int j, int k, double v) {
                           f.at(imap_.local_of(r.dst_gid), c, i, j, k) = v;
                         });
        } else {
          const Recipe& r = bcs[idx - locals.size()];
          apply_bc_recipe(f, imap_.local_of(r.dst_gid), r, plan.n, bc);
        }
      }
    });
  } else {
    post_round_recvs(token, plan, 0, token.recvs);
    pack_send_round(f, plan, 0, avg);
    run_local_round(f, bc, plan, 0, nullptr, avg);
  }

  token.stage = 1;
  if (!any_remote) {
    // Whole exchange is rank-local: complete the edge/corner sweeps now.
    run_local_round(f, bc, plan, 1, pool, avg);
    run_local_round(f, bc, plan, 2, pool, avg);
    token.stage = 3;
  }
  return token;
}

void HaloExchanger::run_rounds_12(ExchangeToken& t, WorkerPool* pool) {
  const ExchangePlan& plan = *plans_[t.depth];
  Field& f = *t.field;
  for (int round = 1; round <= 2; ++round) {
    std::vector<Handle> recvs;
    for (const auto& batch : plan.recv[round])
      recvs.push_back(transport_.post_recv(self_, batch.peer, make_tag(tag_stream_, t.epoch, round, false)));
    current_pack_epoch_ = t.epoch;
    pack_send_round(f, plan, round, t.avg);
    run_local_round(f, *t.bc, plan, round, pool, t.avg);
    std::vector<bool> done(recvs.size(), false);
    size_t remaining = recvs.size();
    while (remaining > 0) {
      for (int idx : transport_.test_some(recvs))
        if (!done[idx]) {
          unpack_batch(f, plan.recv[round][idx], recvs[idx]->payload);
          done[idx] = true;
          remaining--;
        }
      if (remaining > 0) std::this_thread::yield();
    }
  }
}

void HaloExchanger::finalize(ExchangeToken& token, WorkerPool* pool) {
  Field& f = *token.field;
  if (!f.exchange_pending) throw Error("halo: finalize without a pending exchange");
  if (token.stage >= 3) {
    f.exchange_pending = false;
    return;
  }
  const ExchangePlan& plan = *plans_[token.depth];
  // Drain round-0 arrivals first come first served.
  std::vector<bool> done(token.recvs.size(), false);
  size_t remaining = token.recvs.size();
  while (remaining > 0) {
    for (int idx : transport_.test_some(token.recvs))
      if (!done[idx]) {
        unpack_batch(f, plan.recv[0][idx], token.recvs[idx]->payload);
        done[idx] = true;
        remaining--;
      }
    if (remaining > 0) std::this_thread::yield();
  }
  run_rounds_12(token, pool);
  token.stage = 3;
  f.exchange_pending = false;
}

void HaloExchanger::exchange(Field& f, const FieldBc& bc, int depth, WorkerPool* pool,
                             InterfaceAvg avg) {
  ExchangeToken t = begin(f, bc, depth, pool, avg);
  finalize(t, pool);
}

// ---------------------------------------------------------------------------
// Reverse (transpose) exchange.

void HaloExchanger::reverse(Field& f, int depth) {
  const ExchangePlan& plan = *plans_[depth];
  const int nc = f.components();
  const uint64_t epoch = epoch_++;

  for (int round = 2; round >= 0; --round) {
    // Pack this rank's halo regions for the owners of the source cubes,
    // zeroing as we go: the values are now in flight.
    for (const auto& batch : plan.rev_send[round]) {
      std::vector<uint8_t> bytes(batch.n_cells * nc * sizeof(double));
      auto* out = reinterpret_cast<double*>(bytes.data());
      int64_t pos = 0;
      for (const Recipe& r : batch.items) {
        const int lc = imap_.local_of(r.dst_gid);
        for (int c = 0; c < nc; ++c)
          for (int i = r.dst.lo[0]; i < r.dst.hi[0]; ++i)
            for (int j = r.dst.lo[1]; j < r.dst.hi[1]; ++j)
              for (int k = r.dst.lo[2]; k < r.dst.hi[2]; ++k) {
                out[pos++] = f.at(lc, c, i, j, k);
                f.at(lc, c, i, j, k) = 0.0;
              }
      }
      transport_.post_send(self_, batch.peer, make_tag(tag_stream_, epoch, round, true), std::move(bytes));
    }

    std::vector<Handle> recvs;
    for (const auto& batch : plan.rev_recv[round])
      recvs.push_back(transport_.post_recv(self_, batch.peer, make_tag(tag_stream_, epoch, round, true)));
    {
      std::vector<bool> done(recvs.size(), false);
      size_t remaining = recvs.size();
      while (remaining > 0) {
        for (int idx : transport_.test_some(recvs))
          if (!done[idx]) {
            done[idx] = true;
            remaining--;
          }
        if (remaining > 0) std::this_thread::yield();
      }
    }

    // Accumulate in canonical order so results are independent of rank count
    // and arrival order.
    std::vector<double> scratch;
    for (const auto& ri : plan.rev_apply[round]) {
      const Recipe& r = ri.r;
      const int src_lc = imap_.local_of(r.src_gid);
      const int64_t n_cells = r.dst.cells();
      scratch.resize(n_cells * nc);
      if (ri.batch >= 0) {
        const auto* in = reinterpret_cast<const double*>(recvs[ri.batch]->payload.data());
        std::memcpy(scratch.data(), in + ri.cell_offset * nc, n_cells * nc * sizeof(double));
      } else {
        const int dst_lc = imap_.local_of(r.dst_gid);
        int64_t pos = 0;
        for (int c = 0; c < nc; ++c)
          for (int i = r.dst.lo[0]; i < r.dst.hi[0]; ++i)
            for (int j = r.dst.lo[1]; j < r.dst.hi[1]; ++j)
              for (int k = r.dst.lo[2]; k < r.dst.hi[2]; ++k) {
                scratch[pos++] = f.at(dst_lc, c, i, j, k);
                f.at(dst_lc, c, i, j, k) = 0.0;
              }
      }
      int64_t pos = 0;
      for (int c = 0; c < nc; ++c)
        for (int i = r.dst.lo[0]; i < r.dst.hi[0]; ++i)
          for (int j = r.dst.lo[1]; j < r.dst.hi[1]; ++j)
            for (int k = r.dst.lo[2]; k < r.dst.hi[2]; ++k) {
              const double v = scratch[pos++];
              switch (r.kind) {
                case TransferKind::copy:
                  f.at(src_lc, c, i + static_cast<int>(r.t.x), j + static_cast<int>(r.t.y),
                       k + static_cast<int>(r.t.z)) += v;
                  break;
                case TransferKind::inject:
                  f.at(src_lc, c, fdiv2(i + static_cast<int>(r.t.x)),
                       fdiv2(j + static_cast<int>(r.t.y)),
                       fdiv2(k + static_cast<int>(r.t.z))) += v;
                  break;
                default: {
                  int b[3] = {2 * i + static_cast<int>(r.t.x), 2 * j + static_cast<int>(r.t.y),
                              2 * k + static_cast<int>(r.t.z)};
                  for (int a = 0; a < 3; ++a) {
                    int lo, hi;
                    avg_clamp(r.round, a, plan.n, lo, hi);
                    b[a] = std::clamp(b[a], lo, hi);
                  }
                  const double w = 0.125 * v;
                  for (int di = 0; di < 2; ++di)
                    for (int dj = 0; dj < 2; ++dj)
                      for (int dk = 0; dk < 2; ++dk)
                        f.at(src_lc, c, b[0] + di, b[1] + dj, b[2] + dk) += w;
                }
              }
            }
    }
  }

  // Boundary ghost regions have no transpose target; drop them.
  for (int round = 0; round < 3; ++round)
    for (const Recipe& r : plan.bc[round]) {
      const int lc = imap_.local_of(r.dst_gid);
      for (int c = 0; c < nc; ++c)
        for (int i = r.dst.lo[0]; i < r.dst.hi[0]; ++i)
          for (int j = r.dst.lo[1]; j < r.dst.hi[1]; ++j)
            for (int k = r.dst.lo[2]; k < r.dst.hi[2]; ++k) f.at(lc, c, i, j, k) = 0.0;
    }
}

}  // namespace bcm

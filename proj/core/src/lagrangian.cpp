#include "bcm/lagrangian.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>

namespace bcm {

std::vector<const Particle*> ParticleSet::sorted() const {
  std::vector<const Particle*> out;
  out.reserve(members.size());
  for (const auto& [id, p] : members) out.push_back(&p);
  std::sort(out.begin(), out.end(),
            [](const Particle* a, const Particle* b) { return a->global_id < b->global_id; });
  return out;
}

int64_t ParticleStore::local_count() const {
  int64_t n = 0;
  for (const auto& s : sets) n += static_cast<int64_t>(s.members.size());
  return n;
}

std::vector<uint64_t> ParticleStore::sorted_ids() const {
  std::vector<uint64_t> ids;
  ids.reserve(local_count());
  for (const auto& s : sets)
    for (const auto& [id, p] : s.members) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

Vec3 RigidBody::velocity_at(const Vec3& x, double t) const {
  double ramp = 1.0;
  if (has_ramp) ramp = std::tanh(ramp_alpha * (t - ramp_t0));
  const Vec3 omega = angular_velocity * ramp;
  return linear_velocity + cross(omega, x - center);
}

// ---------------------------------------------------------------------------
// Geometry input.

std::vector<std::array<Vec3, 3>> read_stl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_stl: cannot open " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 15) throw Error("read_stl: truncated file " + path);

  // Binary layout check: 80-byte header + count + 50 bytes per triangle.
  if (bytes.size() >= 84) {
    uint32_t count;
    std::memcpy(&count, bytes.data() + 80, 4);
    if (bytes.size() == 84 + static_cast<size_t>(count) * 50) {
      std::vector<std::array<Vec3, 3>> tris(count);
      const char* p = bytes.data() + 84;
      for (uint32_t t = 0; t < count; ++t, p += 50) {
        float v[12];
        std::memcpy(v, p, 48);
        for (int i = 0; i < 3; ++i)
          tris[t][i] = {v[3 + 3 * i], v[4 + 3 * i], v[5 + 3 * i]};
      }
      return tris;
    }
  }

  // ASCII fallback.
  std::string text(bytes.begin(), bytes.end());
  std::vector<std::array<Vec3, 3>> tris;
  size_t pos = 0;
  auto next_vertex = [&](Vec3& v) -> bool {
    pos = text.find("vertex", pos);
    if (pos == std::string::npos) return false;
    pos += 6;
    const char* s = text.c_str() + pos;
    char* end = nullptr;
    v.x = std::strtod(s, &end);
    v.y = std::strtod(end, &end);
    v.z = std::strtod(end, &end);
    return true;
  };
  for (;;) {
    std::array<Vec3, 3> tri;
    if (!next_vertex(tri[0])) break;
    if (!next_vertex(tri[1]) || !next_vertex(tri[2]))
      throw Error("read_stl: dangling vertex list in " + path);
    tris.push_back(tri);
  }
  if (tris.empty()) throw Error("read_stl: no triangles in " + path);
  return tris;
}

void write_stl_binary(const std::string& path, const std::vector<std::array<Vec3, 3>>& tris) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_stl: cannot open " + path);
  char header[80] = {};
  out.write(header, 80);
  const uint32_t count = static_cast<uint32_t>(tris.size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& tri : tris) {
    const Vec3 n = cross(tri[1] - tri[0], tri[2] - tri[0]);
    const double l = norm(n);
    float rec[12] = {};
    if (l > 0) {
      rec[0] = static_cast<float>(n.x / l);
      rec[1] = static_cast<float>(n.y / l);
      rec[2] = static_cast<float>(n.z / l);
    }
    for (int i = 0; i < 3; ++i)
      for (int a = 0; a < 3; ++a) rec[3 + 3 * i + a] = static_cast<float>(tri[i][a]);
    out.write(reinterpret_cast<const char*>(rec), 48);
    const uint16_t attr = 0;
    out.write(reinterpret_cast<const char*>(&attr), 2);
  }
}

std::vector<std::array<Vec3, 3>> icosphere(const Vec3& center, double diameter, int subdivisions) {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0},
                         {0, -1, phi}, {0, 1, phi}, {0, -1, -phi}, {0, 1, -phi},
                         {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1}};
  for (auto& p : v) p = p / norm(p);
  std::vector<std::array<int, 3>> f = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9},  {5, 11, 4},
      {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6},  {3, 6, 8},
      {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      Vec3 m = (v[a] + v[b]) * 0.5;
      m = m / norm(m);
      v.push_back(m);
      const int idx = static_cast<int>(v.size()) - 1;
      midpoint[key] = idx;
      return idx;
    };
    std::vector<std::array<int, 3>> nf;
    nf.reserve(f.size() * 4);
    for (auto& t : f) {
      const int ab = mid(t[0], t[1]), bc = mid(t[1], t[2]), ca = mid(t[2], t[0]);
      nf.push_back({t[0], ab, ca});
      nf.push_back({t[1], bc, ab});
      nf.push_back({t[2], ca, bc});
      nf.push_back({ab, bc, ca});
    }
    f = std::move(nf);
  }
  std::vector<std::array<Vec3, 3>> tris;
  tris.reserve(f.size());
  const double r = diameter / 2.0;
  for (auto& t : f)
    tris.push_back({center + v[t[0]] * r, center + v[t[1]] * r, center + v[t[2]] * r});
  return tris;
}

// ---------------------------------------------------------------------------
// Surface discretization: clip triangles against cell boxes.

namespace {

// Sutherland-Hodgman against one axis-aligned half-space.
void clip_halfspace(std::vector<Vec3>& poly, int axis, double bound, bool keep_below) {
  if (poly.empty()) return;
  std::vector<Vec3> out;
  out.reserve(poly.size() + 2);
  auto inside = [&](const Vec3& p) {
    return keep_below ? p[axis] <= bound : p[axis] >= bound;
  };
  for (size_t i = 0; i < poly.size(); ++i) {
    const Vec3& a = poly[i];
    const Vec3& b = poly[(i + 1) % poly.size()];
    const bool ia = inside(a), ib = inside(b);
    if (ia) out.push_back(a);
    if (ia != ib) {
      const double denom = b[axis] - a[axis];
      const double s = (bound - a[axis]) / denom;
      out.push_back(a + (b - a) * s);
    }
  }
  poly = std::move(out);
}

struct FragmentAccum {
  double area = 0.0;
  Vec3 weighted_centroid;
};

void polygon_area_centroid(const std::vector<Vec3>& poly, double& area, Vec3& centroid) {
  area = 0.0;
  centroid = {0, 0, 0};
  if (poly.size() < 3) return;
  for (size_t i = 1; i + 1 < poly.size(); ++i) {
    const Vec3 c = cross(poly[i] - poly[0], poly[i + 1] - poly[0]);
    const double a = 0.5 * norm(c);
    area += a;
    centroid += (poly[0] + poly[i] + poly[i + 1]) * (a / 3.0);
  }
  if (area > 0) centroid = centroid / area;
}

}  // namespace

std::vector<Particle> discretize_surface(const RigidBody& body, const BcmMesh& mesh,
                                         uint64_t id_base) {
  // (cube gid, cell linear index) -> fragment accumulation
  std::map<std::pair<int32_t, int64_t>, FragmentAccum> cells;
  const int n = mesh.n_cells_per_edge;

  for (const auto& tri : body.triangles) {
    Box bb{tri[0], tri[0]};
    for (const auto& p : tri)
      for (int a = 0; a < 3; ++a) {
        bb.lo[a] = std::min(bb.lo[a], p[a]);
        bb.hi[a] = std::max(bb.hi[a], p[a]);
      }
    const Vec3 n0 = cross(tri[1] - tri[0], tri[2] - tri[0]);
    if (norm(n0) == 0.0) continue;  // degenerate triangle
    // Inflate so planar axis-aligned triangles still register as intersecting.
    Box query = bb;
    const double eps = 1e-9 * mesh.unit_length;
    for (int a = 0; a < 3; ++a) query.hi[a] += eps;
    if (!query.intersects(mesh.domain))
      throw Error("discretize_surface: surface outside the mesh");

    for (const Cube& cube : mesh.cubes) {
      const Box cb = mesh.cube_box(cube);
      if (!cb.intersects(query)) continue;
      const double dx = mesh.cell_spacing(cube);
      const Vec3 base = mesh.base_corner(cube);
      int lo[3], hi[3];
      bool empty = false;
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::max(0, static_cast<int>(std::floor((bb.lo[a] - base[a]) / dx)));
        hi[a] = std::min(n - 1, static_cast<int>(std::floor((bb.hi[a] - base[a]) / dx)));
        if (lo[a] > hi[a]) empty = true;
      }
      if (empty) continue;
      for (int i = lo[0]; i <= hi[0]; ++i)
        for (int j = lo[1]; j <= hi[1]; ++j)
          for (int k = lo[2]; k <= hi[2]; ++k) {
            std::vector<Vec3> poly(tri.begin(), tri.end());
            const Vec3 clo = base + Vec3{i * dx, j * dx, k * dx};
            const Vec3 chi = clo + Vec3{dx, dx, dx};
            for (int a = 0; a < 3 && !poly.empty(); ++a) {
              clip_halfspace(poly, a, clo[a], false);
              clip_halfspace(poly, a, chi[a], true);
            }
            double area;
            Vec3 centroid;
            polygon_area_centroid(poly, area, centroid);
            if (area <= 0) continue;
            // Half-open ownership: accept the fragment only in the cell that
            // contains its centroid, so fragments lying on a face count once.
            bool owns = true;
            const int ci[3] = {i, j, k};
            for (int a = 0; a < 3; ++a) {
              const int idx = static_cast<int>(std::floor((centroid[a] - base[a]) / dx));
              if (idx != ci[a]) owns = false;
            }
            if (!owns) continue;
            const int64_t cell_lin = (static_cast<int64_t>(i) * n + j) * n + k;
            auto& acc = cells[{cube.global_id, cell_lin}];
            acc.area += area;
            acc.weighted_centroid += centroid * area;
          }
    }
  }

  std::vector<Particle> out;
  out.reserve(cells.size());
  uint64_t id = id_base;
  for (const auto& [key, acc] : cells) {
    const Cube& cube = mesh.cubes[key.first];
    Particle p;
    p.global_id = id++;
    p.position = acc.weighted_centroid / acc.area;
    p.dc_volume = acc.area * mesh.cell_spacing(cube);
    p.body_id = body.body_id;
    out.push_back(p);
  }
  return out;
}

ParticleStore assign_sets(const std::vector<Particle>& particles, const BcmMesh& mesh,
                          const Distribution& dist, const IndexMap& imap, RankId self) {
  ParticleStore store;
  store.sets.resize(imap.local_to_global.size());
  for (size_t lc = 0; lc < store.sets.size(); ++lc)
    store.sets[lc].cube_gid = imap.local_to_global[lc];
  for (const Particle& p : particles) {
    auto gid = mesh.locate_cube(p.position);
    if (!gid) throw Error("assign_sets: particle outside every cube");
    if (dist.owner_of(*gid) != self) continue;
    store.sets[imap.local_of(*gid)].members.emplace(p.global_id, p);
  }
  return store;
}

void advect(ParticleStore& store, const std::vector<RigidBody>& bodies, double dt, double t_new) {
  if (dt <= 0) throw Error("advect: dt must be positive");
  for (auto& set : store.sets)
    for (auto& [id, p] : set.members)
      p.position += bodies[p.body_id].velocity_at(p.position, t_new) * dt;
}

namespace {

constexpr int64_t kMigrateTagBase = int64_t{1} << 55;

struct WireParticle {
  uint64_t id;
  double x, y, z, dc;
  int64_t body_and_gid;  // body id in high 32 bits, destination cube gid low
};

}  // namespace

MigrateStats migrate(ParticleStore& store, const BcmMesh& mesh, const Distribution& dist,
                     const IndexMap& imap, RankId self, Transport& transport,
                     uint64_t migrate_epoch) {
  MigrateStats stats;
  std::vector<std::pair<int32_t, Particle>> local_moves;  // (dst gid, particle)
  std::vector<std::vector<WireParticle>> outbound(dist.ranks());

  // Detection: containment is judged with locate_cube itself so the
  // set-containment invariant holds exactly after reconciliation.
  for (auto& set : store.sets) {
    std::vector<uint64_t> leavers;
    for (auto& [id, p] : set.members) {
      auto gid = mesh.locate_cube(p.position);
      if (gid && *gid == set.cube_gid) continue;
      leavers.push_back(id);
    }
    std::sort(leavers.begin(), leavers.end());
    for (uint64_t id : leavers) {
      Particle p = set.members.at(id);
      set.members.erase(id);
      auto gid = mesh.locate_cube(p.position);
      if (!gid) {
        stats.exited_domain++;
        continue;
      }
      const RankId owner = dist.owner_of(*gid);
      if (owner == self) {
        local_moves.emplace_back(*gid, p);
        stats.moved_local++;
      } else {
        outbound[owner].push_back(
            {p.global_id, p.position.x, p.position.y, p.position.z, p.dc_volume,
             (static_cast<int64_t>(p.body_id) << 32) | static_cast<uint32_t>(*gid)});
        stats.moved_remote++;
      }
    }
  }

  // Reconciliation: local inserts, then the cross-rank exchange.
  for (auto& [gid, p] : local_moves) store.sets[imap.local_of(gid)].members.emplace(p.global_id, p);

  if (dist.ranks() > 1) {
    const int64_t tag = kMigrateTagBase + static_cast<int64_t>(migrate_epoch);
    for (RankId r = 0; r < dist.ranks(); ++r) {
      if (r == self) continue;
      auto& v = outbound[r];
      std::sort(v.begin(), v.end(),
                [](const WireParticle& a, const WireParticle& b) { return a.id < b.id; });
      std::vector<uint8_t> bytes(v.size() * sizeof(WireParticle));
      std::memcpy(bytes.data(), v.data(), bytes.size());
      transport.post_send(self, r, tag, std::move(bytes));
    }
    std::vector<Handle> recvs;
    for (RankId r = 0; r < dist.ranks(); ++r)
      if (r != self) recvs.push_back(transport.post_recv(self, r, tag));
    std::vector<WireParticle> incoming;
    size_t remaining = recvs.size();
    std::vector<bool> done(recvs.size(), false);
    while (remaining > 0) {
      for (int idx : transport.test_some(recvs))
        if (!done[idx]) {
          done[idx] = true;
          remaining--;
          const auto& payload = recvs[idx]->payload;
          const size_t count = payload.size() / sizeof(WireParticle);
          const auto* w = reinterpret_cast<const WireParticle*>(payload.data());
          incoming.insert(incoming.end(), w, w + count);
        }
      if (remaining > 0) std::this_thread::yield();
    }
    std::sort(incoming.begin(), incoming.end(),
              [](const WireParticle& a, const WireParticle& b) { return a.id < b.id; });
    for (const WireParticle& w : incoming) {
      Particle p;
      p.global_id = w.id;
      p.position = {w.x, w.y, w.z};
      p.dc_volume = w.dc;
      p.body_id = static_cast<int32_t>(w.body_and_gid >> 32);
      const int32_t gid = static_cast<int32_t>(w.body_and_gid & 0xffffffff);
      store.sets[imap.local_of(gid)].members.emplace(p.global_id, p);
    }
  }
  return stats;
}

std::vector<int64_t> global_particle_counts(const ParticleStore& store, const BcmMesh& mesh,
                                            const IndexMap& imap, Collectives& coll) {
  std::vector<int32_t> gids;
  std::vector<double> counts;
  gids.reserve(store.sets.size());
  for (size_t lc = 0; lc < store.sets.size(); ++lc) {
    gids.push_back(imap.local_to_global[lc]);
    counts.push_back(static_cast<double>(store.sets[lc].members.size()));
  }
  const auto global = coll.gather_by_gid(gids, counts, mesh.num_cubes());
  std::vector<int64_t> out(global.size());
  for (size_t i = 0; i < global.size(); ++i) out[i] = static_cast<int64_t>(global[i]);
  return out;
}

}  // namespace bcm

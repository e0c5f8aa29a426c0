#include "bcm/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace bcm {

namespace {

// Spread the low 21 bits of v so they occupy every third bit.
uint64_t spread3(uint64_t v) {
  v &= 0x1fffff;
  v = (v | v << 32) & 0x1f00000000ffffull;
  v = (v | v << 16) & 0x1f0000ff0000ffull;
  v = (v | v << 8) & 0x100f00f00f00f00full;
  v = (v | v << 4) & 0x10c30c30c30c30c3ull;
  v = (v | v << 2) & 0x1249249249249249ull;
  return v;
}

}  // namespace

uint64_t morton_key(const IVec3& p) {
  return spread3(static_cast<uint64_t>(p.x)) | spread3(static_cast<uint64_t>(p.y)) << 1 |
         spread3(static_cast<uint64_t>(p.z)) << 2;
}

uint64_t BcmMesh::lookup_key(int level, const IVec3& base) const {
  // Base corners are unique across levels of an overlap-free mesh, but during
  // generation a parent and its first child share a corner, so fold in level.
  return morton_key(base) * 64 + static_cast<uint64_t>(level);
}

/// Mutable cube set used only while generating; keyed by (level, base).
class MeshBuilder {
public:
  static void build_adjacency(BcmMesh& mesh);

  explicit MeshBuilder(const MeshSpec& spec) : spec_(spec) {
    const Vec3 ext = spec.domain.extent();
    if (spec.level0_tiling.x < 1 || spec.level0_tiling.y < 1 || spec.level0_tiling.z < 1)
      throw Error("generate_mesh: level0_tiling must be >= 1 per axis");
    const double e0 = ext.x / spec.level0_tiling.x;
    for (int a = 1; a < 3; ++a) {
      const double ea = ext[a] / static_cast<double>(spec.level0_tiling[a]);
      if (std::abs(ea - e0) > 1e-9 * e0)
        throw Error("generate_mesh: domain box and tiling do not produce cubic cubes");
    }
    if (spec.n_cells_per_edge != 4 && spec.n_cells_per_edge != 8 && spec.n_cells_per_edge != 16)
      throw Error("generate_mesh: n_cells_per_edge must be one of {4, 8, 16}");
    if (spec.max_level < 0 || spec.max_level > 20)
      throw Error("generate_mesh: max_level out of range");

    finest_ = spec.max_level;
    units_per_level0_ = int64_t{1} << finest_;
    unit_length_ = e0 / static_cast<double>(units_per_level0_);
    extent_ = {spec.level0_tiling.x * units_per_level0_, spec.level0_tiling.y * units_per_level0_,
               spec.level0_tiling.z * units_per_level0_};

    for (int64_t i = 0; i < spec.level0_tiling.x; ++i)
      for (int64_t j = 0; j < spec.level0_tiling.y; ++j)
        for (int64_t k = 0; k < spec.level0_tiling.z; ++k)
          insert(0, {i * units_per_level0_, j * units_per_level0_, k * units_per_level0_});
  }

  void refine_region(const Box& region, int target_level) {
    if (target_level > finest_)
      throw Error("refine region requests level above configured max");
    if (!region.intersects(spec_.domain))
      throw Error("refine region lies outside the domain");
    bool changed = true;
    while (changed) {
      changed = false;
      std::vector<std::pair<int, IVec3>> to_split;
      for (const auto& [key, lb] : active_) {
        (void)key;
        if (lb.first < target_level && box_of(lb.first, lb.second).intersects(region))
          to_split.emplace_back(lb);
      }
      std::sort(to_split.begin(), to_split.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first < b.first : morton_key(a.second) < morton_key(b.second);
      });
      for (const auto& [lvl, base] : to_split)
        if (is_active(lvl, base)) {
          split(lvl, base);
          changed = true;
        }
    }
  }

  void refine_surface(const RefineSurface& rs) {
    if (rs.target_level > finest_)
      throw Error("refine region requests level above configured max");
    // Conservative: refine cubes intersecting any triangle AABB inflated by distance.
    for (const auto& tri : rs.triangles) {
      Box bb{tri[0], tri[0]};
      for (const auto& v : tri) {
        bb.lo.x = std::min(bb.lo.x, v.x); bb.hi.x = std::max(bb.hi.x, v.x);
        bb.lo.y = std::min(bb.lo.y, v.y); bb.hi.y = std::max(bb.hi.y, v.y);
        bb.lo.z = std::min(bb.lo.z, v.z); bb.hi.z = std::max(bb.hi.z, v.z);
      }
      const Vec3 d{rs.distance, rs.distance, rs.distance};
      bb.lo -= d;
      bb.hi += d;
      if (!bb.intersects(spec_.domain)) throw Error("refine surface lies outside the domain");
      refine_region(bb, rs.target_level);
    }
  }

  BcmMesh finish() {
    BcmMesh mesh;
    mesh.n_cells_per_edge = spec_.n_cells_per_edge;
    mesh.n_levels = finest_ + 1;
    mesh.domain = spec_.domain;
    mesh.level0_tiling = spec_.level0_tiling;
    mesh.units_per_level0 = units_per_level0_;
    mesh.unit_length = unit_length_;
    mesh.lattice_extent = extent_;

    mesh.cubes.reserve(active_.size());
    for (const auto& [key, lb] : active_) {
      (void)key;
      Cube c;
      c.level = lb.first;
      c.base_units = lb.second;
      c.edge_units = edge_units(lb.first);
      mesh.cubes.push_back(c);
    }
    std::sort(mesh.cubes.begin(), mesh.cubes.end(),
              [](const Cube& a, const Cube& b) { return morton_key(a.base_units) < morton_key(b.base_units); });
    for (size_t i = 0; i < mesh.cubes.size(); ++i) {
      mesh.cubes[i].global_id = static_cast<int32_t>(i);
      mesh.lookup_[mesh.lookup_key(mesh.cubes[i].level, mesh.cubes[i].base_units)] =
          static_cast<int32_t>(i);
    }
    build_adjacency(mesh);
    return mesh;
  }

private:
  int64_t edge_units(int level) const { return units_per_level0_ >> level; }

  Box box_of(int level, const IVec3& base) const {
    const double e = edge_units(level) * unit_length_;
    Vec3 lo{spec_.domain.lo.x + base.x * unit_length_, spec_.domain.lo.y + base.y * unit_length_,
            spec_.domain.lo.z + base.z * unit_length_};
    return {lo, {lo.x + e, lo.y + e, lo.z + e}};
  }

  uint64_t key(int level, const IVec3& base) const { return morton_key(base) * 64 + level; }
  bool is_active(int level, const IVec3& base) const { return active_.count(key(level, base)) != 0; }
  void insert(int level, const IVec3& base) { active_[key(level, base)] = {level, base}; }
  void erase(int level, const IVec3& base) { active_.erase(key(level, base)); }

  // Active cube containing the given lattice point, walking coarse to fine.
  std::pair<int, IVec3> find_at(const IVec3& p) const {
    for (int l = 0; l <= finest_; ++l) {
      const int64_t e = edge_units(l);
      IVec3 base{p.x / e * e, p.y / e * e, p.z / e * e};
      if (is_active(l, base)) return {l, base};
    }
    throw Error("mesh generation: lattice point not covered");
  }

  // Split one cube into 8 children, first splitting any coarser face neighbor
  // so the 2:1 grading holds by construction.
  void split(int level, const IVec3 base) {
    if (level >= finest_) throw Error("split below finest level");
    const int64_t e = edge_units(level);
    for (int f = 0; f < kNumFaces; ++f) {
      const int axis = face_axis(f);
      IVec3 probe = base;
      probe[axis] += face_side(f) ? e : -1;
      if (probe[axis] < 0 || probe[axis] >= extent_[axis]) continue;
      auto [nl, nb] = find_at(probe);
      while (nl < level) {
        split(nl, nb);
        std::tie(nl, nb) = find_at(probe);
      }
    }
    erase(level, base);
    const int64_t h = e / 2;
    for (int dx = 0; dx < 2; ++dx)
      for (int dy = 0; dy < 2; ++dy)
        for (int dz = 0; dz < 2; ++dz)
          insert(level + 1, {base.x + dx * h, base.y + dy * h, base.z + dz * h});
  }

  const MeshSpec& spec_;
  int finest_ = 0;
  int64_t units_per_level0_ = 1;
  double unit_length_ = 1.0;
  IVec3 extent_;
  std::unordered_map<uint64_t, std::pair<int, IVec3>> active_;
};

void MeshBuilder::build_adjacency(BcmMesh& mesh) {
    for (Cube& c : mesh.cubes) {
      for (int f = 0; f < kNumFaces; ++f) {
        FaceNeighbors& fn = c.neighbors[f];
        const int axis = face_axis(f);
        const int side = face_side(f);
        const int64_t e = c.edge_units;
        IVec3 probe = c.base_units;
        probe[axis] += side ? e : -1;
        if (probe[axis] < 0 || probe[axis] >= mesh.lattice_extent[axis]) {
          fn.kind = FaceKind::boundary;
          continue;
        }
        // Same level.
        IVec3 nb = c.base_units;
        nb[axis] += side ? e : -e;
        if (auto it = mesh.lookup_.find(mesh.lookup_key(c.level, nb)); it != mesh.lookup_.end()) {
          fn.kind = FaceKind::same;
          fn.ids[0] = it->second;
          continue;
        }
        // Coarser: align probe down to the level-1 grid.
        if (c.level > 0) {
          const int64_t ce = e * 2;
          IVec3 cb{probe.x / ce * ce, probe.y / ce * ce, probe.z / ce * ce};
          if (auto it = mesh.lookup_.find(mesh.lookup_key(c.level - 1, cb));
              it != mesh.lookup_.end()) {
            fn.kind = FaceKind::coarser;
            fn.ids[0] = it->second;
            continue;
          }
        }
        // Finer: four children tiles on the shared face, ordered by (u, v).
        if (c.level + 1 < mesh.n_levels) {
          const int64_t h = e / 2;
          const int au = (axis + 1) % 3, av = (axis + 2) % 3;
          IVec3 fb = nb;
          if (!side) fb[axis] = c.base_units[axis] - h;  // nearer child slab
          bool ok = true;
          for (int v = 0; v < 2 && ok; ++v)
            for (int u = 0; u < 2 && ok; ++u) {
              IVec3 q = fb;
              q[au] += u * h;
              q[av] += v * h;
              auto it = mesh.lookup_.find(mesh.lookup_key(c.level + 1, q));
              if (it == mesh.lookup_.end())
                ok = false;
              else
                fn.ids[v * 2 + u] = it->second;
            }
          if (ok) {
            fn.kind = FaceKind::finer;
            continue;
          }
        }
        throw Error("build_adjacency: grading violation at cube " + std::to_string(c.global_id));
      }
    }
}

BcmMesh generate_mesh(const MeshSpec& spec) {
  MeshBuilder b(spec);
  for (const auto& rb : spec.refine_boxes) b.refine_region(rb.region, rb.target_level);
  for (const auto& rs : spec.refine_surfaces) b.refine_surface(rs);
  return b.finish();
}

BcmMesh assemble_mesh(const Box& domain, const IVec3& level0_tiling, int n_cells_per_edge,
                      int n_levels, const std::vector<std::pair<int32_t, IVec3>>& records) {
  BcmMesh mesh;
  mesh.n_cells_per_edge = n_cells_per_edge;
  mesh.n_levels = n_levels;
  mesh.domain = domain;
  mesh.level0_tiling = level0_tiling;
  mesh.units_per_level0 = int64_t{1} << (n_levels - 1);
  mesh.unit_length =
      (domain.hi.x - domain.lo.x) / level0_tiling.x / static_cast<double>(mesh.units_per_level0);
  mesh.lattice_extent = {level0_tiling.x * mesh.units_per_level0,
                         level0_tiling.y * mesh.units_per_level0,
                         level0_tiling.z * mesh.units_per_level0};
  mesh.cubes.reserve(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    Cube c;
    c.global_id = static_cast<int32_t>(i);
    c.level = records[i].first;
    c.base_units = records[i].second;
    c.edge_units = mesh.units_per_level0 >> c.level;
    mesh.cubes.push_back(c);
    mesh.lookup_[mesh.lookup_key(c.level, c.base_units)] = c.global_id;
  }
  MeshBuilder::build_adjacency(mesh);
  mesh.validate();
  return mesh;
}

std::optional<int> BcmMesh::locate_cube(const Vec3& x) const {
  IVec3 p;
  for (int a = 0; a < 3; ++a) {
    const double u = (x[a] - domain.lo[a]) / unit_length;
    const auto q = static_cast<int64_t>(std::floor(u));
    if (q < 0 || q >= lattice_extent[a]) return std::nullopt;
    p[a] = q;
  }
  for (int l = 0; l < n_levels; ++l) {
    const int64_t e = units_per_level0 >> l;
    IVec3 base{p.x / e * e, p.y / e * e, p.z / e * e};
    if (auto it = lookup_.find(lookup_key(l, base)); it != lookup_.end()) return it->second;
  }
  return std::nullopt;
}

std::optional<int> BcmMesh::find_cube(int level, const IVec3& base_units) const {
  if (auto it = lookup_.find(lookup_key(level, base_units)); it != lookup_.end())
    return it->second;
  return std::nullopt;
}

std::vector<int> BcmMesh::level_counts() const {
  std::vector<int> counts(n_levels, 0);
  for (const Cube& c : cubes) counts[c.level]++;
  return counts;
}

void BcmMesh::validate() const {
  // Volume conservation, exact in lattice arithmetic.
  int64_t vol = 0;
  for (const Cube& c : cubes) vol += c.edge_units * c.edge_units * c.edge_units;
  const int64_t want = lattice_extent.x * lattice_extent.y * lattice_extent.z;
  if (vol != want) throw Error("mesh: cube volumes do not tile the domain");

  for (const Cube& c : cubes)
    for (int f = 0; f < kNumFaces; ++f) {
      const FaceNeighbors& fn = c.neighbors[f];
      for (int i = 0; i < fn.count(); ++i) {
        const Cube& nb = cubes[fn.ids[i]];
        if (std::abs(nb.level - c.level) > 1) throw Error("mesh: grading violation");
      }
    }
}

std::vector<int> zorder_sort(const BcmMesh& mesh) {
  std::vector<int> perm(mesh.cubes.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) {
    return morton_key(mesh.cubes[a].base_units) < morton_key(mesh.cubes[b].base_units);
  });
  return perm;
}

std::string mesh_stats(const BcmMesh& mesh) {
  std::ostringstream os;
  const auto counts = mesh.level_counts();
  const int64_t cells_per_cube = static_cast<int64_t>(mesh.n_cells_per_edge) *
                                 mesh.n_cells_per_edge * mesh.n_cells_per_edge;
  os << "cubes: " << mesh.num_cubes() << "\n";
  os << "levels: " << mesh.n_levels << "\n";
  os << "cells_per_cube: " << cells_per_cube << "\n";
  for (int l = 0; l < mesh.n_levels; ++l) {
    const Cube* sample = nullptr;
    for (const Cube& c : mesh.cubes)
      if (c.level == l) { sample = &c; break; }
    os << "level " << l << ": " << counts[l] << " cubes";
    if (sample) os << ", dx = " << mesh.cell_spacing(*sample);
    os << "\n";
  }
  os << "total_cells: " << cells_per_cube * mesh.num_cubes() << "\n";
  return os.str();
}

}  // namespace bcm

#pragma once

#include <optional>
#include <unordered_map>
#include <vector>

#include "bcm/types.hpp"

namespace bcm {

/// How a cube face connects to the rest of the mesh. With 2:1 grading a face
/// sees exactly one same-level cube, one coarser cube, four finer cubes, or
/// the domain boundary.
enum class FaceKind : uint8_t { boundary, same, coarser, finer };

struct FaceNeighbors {
  FaceKind kind = FaceKind::boundary;
  // same/coarser: ids[0]; finer: ids[0..3] ordered by (tangential u, v) quadrant.
  std::array<int32_t, 4> ids{-1, -1, -1, -1};
  int count() const { return kind == FaceKind::finer ? 4 : (kind == FaceKind::boundary ? 0 : 1); }
};

/// One cube of the hierarchy. Extents live on an integer lattice at
/// finest-level resolution so coverage and adjacency checks are exact;
/// physical coordinates are derived on demand.
struct Cube {
  int32_t global_id = -1;
  int32_t level = 0;
  IVec3 base_units;        // base corner, finest-level lattice units
  int64_t edge_units = 0;  // cube edge in lattice units (= 2^(finest - level))
  std::array<FaceNeighbors, kNumFaces> neighbors;
};

/// Explicit refinement request: every cube intersecting `region` is refined
/// until it reaches `target_level`.
struct RefineBox {
  Box region;
  int target_level = 0;
};

/// Refine every cube within `distance` of the given triangle soup.
struct RefineSurface {
  std::vector<std::array<Vec3, 3>> triangles;
  double distance = 0.0;
  int target_level = 0;
};

struct MeshSpec {
  Box domain;
  IVec3 level0_tiling{1, 1, 1};  // level-0 cubes per axis; cells must come out cubic
  int n_cells_per_edge = 16;     // {4, 8, 16}
  int max_level = 0;             // finest admissible level
  std::vector<RefineBox> refine_boxes;
  std::vector<RefineSurface> refine_surfaces;
};

/// Building-Cube mesh: a flat, Z-ordered list of equal-cell-count cubes plus
/// exact adjacency tables. Immutable after generation; concurrent reads are safe.
class BcmMesh {
public:
  int n_cells_per_edge = 16;
  int n_levels = 1;  // levels 0 .. n_levels-1
  Box domain;
  IVec3 level0_tiling{1, 1, 1};
  std::vector<Cube> cubes;  // ordered by global_id == Z-order position

  int64_t units_per_level0 = 1;  // 2^(n_levels-1)
  double unit_length = 1.0;      // physical length of one lattice unit
  IVec3 lattice_extent;          // domain size in lattice units

  int num_cubes() const { return static_cast<int>(cubes.size()); }

  double edge_length(const Cube& c) const { return c.edge_units * unit_length; }
  double cell_spacing(const Cube& c) const { return edge_length(c) / n_cells_per_edge; }
  Vec3 base_corner(const Cube& c) const {
    return {domain.lo.x + c.base_units.x * unit_length,
            domain.lo.y + c.base_units.y * unit_length,
            domain.lo.z + c.base_units.z * unit_length};
  }
  Box cube_box(const Cube& c) const {
    Vec3 lo = base_corner(c);
    double e = edge_length(c);
    return {lo, {lo.x + e, lo.y + e, lo.z + e}};
  }

  /// Coordinate of the center of cell (i,j,k) of a cube. Halo indices
  /// (outside [0, n_cells_per_edge)) are permitted; the formula extends linearly.
  Vec3 cell_center(const Cube& c, const IVec3& idx) const {
    Vec3 x0 = base_corner(c);
    double dx = cell_spacing(c);
    return {x0.x + (idx.x + 0.5) * dx, x0.y + (idx.y + 0.5) * dx, x0.z + (idx.z + 0.5) * dx};
  }

  /// Id of the cube whose half-open extent contains x (lower-closed ties),
  /// or nullopt if x is outside the domain.
  std::optional<int> locate_cube(const Vec3& x) const;

  /// Exact lattice lookup of a cube by (level, base corner).
  std::optional<int> find_cube(int level, const IVec3& base_units) const;

  /// Per-level cube counts, for the statistics dump.
  std::vector<int> level_counts() const;

  /// Exact integer-lattice audit: cube interiors disjoint, union covers the
  /// domain, every face pair graded. Throws Error on violation.
  void validate() const;

private:
  friend BcmMesh generate_mesh(const MeshSpec&);
  friend BcmMesh assemble_mesh(const Box&, const IVec3&, int, int,
                               const std::vector<std::pair<int32_t, IVec3>>&);
  friend class MeshBuilder;
  // (level, base_units) -> global id, for point location.
  std::unordered_map<uint64_t, int32_t> lookup_;
  uint64_t lookup_key(int level, const IVec3& base) const;
};

/// Builds the mesh: level-0 tiling, refinement with outward 2:1 grading
/// propagation, Z-order relabeling, adjacency tables.
/// Throws Error for refinement regions outside the domain or above max_level.
BcmMesh generate_mesh(const MeshSpec& spec);

/// Rebuilds a mesh from serialized (level, base_units) records in Z-order,
/// as stored in a checkpoint header.
BcmMesh assemble_mesh(const Box& domain, const IVec3& level0_tiling, int n_cells_per_edge,
                      int n_levels, const std::vector<std::pair<int32_t, IVec3>>& records);

/// Morton key of a lattice point (21 bits per axis).
uint64_t morton_key(const IVec3& p);

/// Z-order permutation of cube ids: position k holds the id of the k-th cube
/// along the Morton curve of base corners quantized to the finest lattice.
/// Deterministic and stable under re-invocation.
std::vector<int> zorder_sort(const BcmMesh& mesh);

/// Human-readable statistics (counts per level, cell totals).
std::string mesh_stats(const BcmMesh& mesh);

}  // namespace bcm

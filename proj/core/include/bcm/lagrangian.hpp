#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "bcm/field.hpp"
#include "bcm/mesh.hpp"
#include "bcm/transport.hpp"

namespace bcm {

/// Lagrangian surface particle. dc_volume is the particle's quadrature
/// weight for the projection sum: surface fragment area times the local
/// cell spacing.
struct Particle {
  uint64_t global_id = 0;
  Vec3 position;
  double dc_volume = 0.0;
  int32_t body_id = 0;
};

/// Fibonacci (multiplicative) hash of the particle id; chosen to keep
/// bucket collisions rare for dense id ranges.
struct ParticleIdHash {
  size_t operator()(uint64_t id) const noexcept {
    return static_cast<size_t>(id * 0x9e3779b97f4a7c15ull);
  }
};

/// Unordered set of the particles inside one cube, keyed by global id.
/// Insert/erase/lookup are amortized O(1).
struct ParticleSet {
  int32_t cube_gid = -1;
  std::unordered_map<uint64_t, Particle, ParticleIdHash> members;

  /// Members sorted by id, for deterministic iteration.
  std::vector<const Particle*> sorted() const;
};

/// All particle sets owned by one rank: one set per locally owned cube
/// (empty cubes keep empty sets).
struct ParticleStore {
  std::vector<ParticleSet> sets;  // indexed by local cube index

  int64_t local_count() const;
  std::vector<uint64_t> sorted_ids() const;
};

/// Prescribed rigid motion: U_s(X, t) = U0(t) + ramp(t) * omega x (X - center(t)),
/// with an optional tanh(alpha (t - t0)) ramp on the angular part.
struct RigidBody {
  int32_t body_id = 0;
  std::vector<std::array<Vec3, 3>> triangles;
  Vec3 center;
  Vec3 linear_velocity;
  Vec3 angular_velocity;
  bool has_ramp = false;
  double ramp_alpha = 0.0;
  double ramp_t0 = 0.0;

  Vec3 velocity_at(const Vec3& x, double t) const;
  /// Advance the reference center with the linear velocity.
  void advance_center(double dt) { center += linear_velocity * dt; }
};

/// Reads an STL triangle soup (binary or ASCII detected from content).
std::vector<std::array<Vec3, 3>> read_stl(const std::string& path);
void write_stl_binary(const std::string& path, const std::vector<std::array<Vec3, 3>>& tris);

/// Subdivided-icosahedron sphere tessellation (test geometry and the built-in
/// validation body).
std::vector<std::array<Vec3, 3>> icosphere(const Vec3& center, double diameter,
                                           int subdivisions);

/// One particle per finest-covering Eulerian cell the surface intersects:
/// position is the area-weighted centroid of the triangle fragments clipped
/// to the cell, dc_volume the fragment area times the cell spacing. Ids are
/// assigned densely from id_base in (cube id, cell) order. Degenerate
/// triangles contribute nothing. Throws if the surface leaves the mesh.
std::vector<Particle> discretize_surface(const RigidBody& body, const BcmMesh& mesh,
                                         uint64_t id_base = 0);

/// Groups particles into per-cube sets for the cubes owned by `self`.
/// Containment follows locate_cube (lower-closed faces). Particles outside
/// every cube are rejected.
ParticleStore assign_sets(const std::vector<Particle>& particles, const BcmMesh& mesh,
                          const Distribution& dist, const IndexMap& imap, RankId self);

/// Explicit Euler position update with the body's prescribed velocity at
/// time t_new: X += dt * U_s(X, t_new).
void advect(ParticleStore& store, const std::vector<RigidBody>& bodies, double dt, double t_new);

struct MigrateStats {
  int64_t moved_local = 0;
  int64_t moved_remote = 0;
  int64_t exited_domain = 0;
};

/// Re-establishes set containment after advection, moving particles between
/// cubes and ranks. Particles leaving the domain are deleted and counted.
/// Collective; deterministic reconciliation (sorted by particle id).
MigrateStats migrate(ParticleStore& store, const BcmMesh& mesh, const Distribution& dist,
                     const IndexMap& imap, RankId self, Transport& transport,
                     uint64_t migrate_epoch);

/// Per-cube particle counts for every cube in the mesh (collective gather).
std::vector<int64_t> global_particle_counts(const ParticleStore& store, const BcmMesh& mesh,
                                            const IndexMap& imap, Collectives& coll);

}  // namespace bcm

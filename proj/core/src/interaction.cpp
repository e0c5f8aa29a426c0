#include "bcm/interaction.hpp"

#include <cmath>

namespace bcm {

double delta1(double r) {
  const double a = std::abs(r);
  if (a <= 0.5) return 0.75 - r * r;
  if (a <= 1.5) return 0.5 * (2.25 - 3.0 * a + r * r);
  return 0.0;
}

double delta3(const Vec3& offset, const Vec3& dx) {
  double v = 1.0;
  for (int a = 0; a < 3; ++a) v *= delta1(offset[a] / dx[a]) / dx[a];
  return v;
}

namespace {

/// Stencil base: the 3-cell support centered on the cell containing the
/// particle, i.e. cells floor((X - x_c)/dx) + {-1, 0, 1} per axis. Cells a
/// full 1.5 dx away carry zero weight, so this captures the entire support.
void stencil_base(const BcmMesh& mesh, const Cube& cube, const Vec3& X, int base[3]) {
  const Vec3 x0 = mesh.base_corner(cube);
  const double dx = mesh.cell_spacing(cube);
  for (int a = 0; a < 3; ++a)
    base[a] = static_cast<int>(std::floor((X[a] - x0[a]) / dx)) - 1;
}

}  // namespace

void interpolate(const Field& u, const ParticleStore& store, const BcmMesh& mesh,
                 const std::function<void(int, const Particle&, const Vec3&)>& fn,
                 WorkerPool* pool) {
  const int nc = u.components();
  const int h = u.halo();
  const int n = u.n();
  std::vector<std::vector<std::pair<const Particle*, Vec3>>> results(store.sets.size());

  auto do_set = [&](int64_t lc) {
    const ParticleSet& set = store.sets[lc];
    if (set.members.empty()) return;
    const Cube& cube = mesh.cubes[set.cube_gid];
    const double dx = mesh.cell_spacing(cube);
    const Vec3 dxv{dx, dx, dx};
    const double cell_vol = dx * dx * dx;
    auto& out = results[lc];
    out.reserve(set.members.size());
    for (const Particle* p : set.sorted()) {
      int base[3];
      stencil_base(mesh, cube, p->position, base);
      if (base[0] < -h || base[0] + 2 >= n + h || base[1] < -h || base[1] + 2 >= n + h ||
          base[2] < -h || base[2] + 2 >= n + h)
        throw Error("interpolate: particle support extends past the halo");
      Vec3 U{0, 0, 0};
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          for (int k = 0; k < 3; ++k) {
            const IVec3 idx{base[0] + i, base[1] + j, base[2] + k};
            const Vec3 xc = mesh.cell_center(cube, idx);
            const double w = delta3(xc - p->position, dxv) * cell_vol;
            if (w == 0.0) continue;
            for (int c = 0; c < nc && c < 3; ++c)
              U[c] += w * u.at(static_cast<int>(lc), c, static_cast<int>(idx.x),
                               static_cast<int>(idx.y), static_cast<int>(idx.z));
          }
      out.emplace_back(p, U);
    }
  };

  if (pool)
    pool->parallel_for(static_cast<int64_t>(store.sets.size()), do_set);
  else
    for (int64_t lc = 0; lc < static_cast<int64_t>(store.sets.size()); ++lc) do_set(lc);

  for (size_t lc = 0; lc < results.size(); ++lc)
    for (auto& [p, U] : results[lc]) fn(static_cast<int>(lc), *p, U);
}

void project(const std::function<Vec3(int, const Particle&)>& values, const ParticleStore& store,
             Field& f, const BcmMesh& mesh, WorkerPool* pool) {
  const int nc = f.components();
  const int h = f.halo();
  const int n = f.n();

  // Each worker owns whole cubes, so scatter writes never race and the
  // per-cube particle order (sorted ids) fixes the summation order.
  auto do_set = [&](int64_t lc) {
    const ParticleSet& set = store.sets[lc];
    if (set.members.empty()) return;
    const Cube& cube = mesh.cubes[set.cube_gid];
    const double dx = mesh.cell_spacing(cube);
    const Vec3 dxv{dx, dx, dx};
    for (const Particle* p : set.sorted()) {
      const Vec3 F = values(static_cast<int>(lc), *p);
      int base[3];
      stencil_base(mesh, cube, p->position, base);
      if (base[0] < -h || base[0] + 2 >= n + h || base[1] < -h || base[1] + 2 >= n + h ||
          base[2] < -h || base[2] + 2 >= n + h)
        throw Error("project: particle support extends past the halo");
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          for (int k = 0; k < 3; ++k) {
            const IVec3 idx{base[0] + i, base[1] + j, base[2] + k};
            const Vec3 xc = mesh.cell_center(cube, idx);
            const double w = delta3(xc - p->position, dxv) * p->dc_volume;
            if (w == 0.0) continue;
            for (int c = 0; c < nc && c < 3; ++c)
              f.at(static_cast<int>(lc), c, static_cast<int>(idx.x), static_cast<int>(idx.y),
                   static_cast<int>(idx.z)) += w * F[c];
          }
    }
  };

  if (pool)
    pool->parallel_for(static_cast<int64_t>(store.sets.size()), do_set);
  else
    for (int64_t lc = 0; lc < static_cast<int64_t>(store.sets.size()); ++lc) do_set(lc);
}

}  // namespace bcm

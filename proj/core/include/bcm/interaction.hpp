#pragma once

#include "bcm/field.hpp"
#include "bcm/lagrangian.hpp"
#include "bcm/mesh.hpp"

namespace bcm {

/// Smoothed 3-point discrete delta profile:
///   phi(r) = 3/4 - r^2                      |r| <= 1/2
///          = (1/2)(9/4 - 3|r| + r^2)        1/2 < |r| <= 3/2
///          = 0 otherwise.
/// Continuous at the branch points; sums to one over the integer lattice.
double delta1(double r);

/// 3D kernel: product of the scaled 1D profiles, one 1/dx per axis.
double delta3(const Vec3& offset, const Vec3& dx);

/// U_R = sum over the 3^3 nearest cells of u * delta3 * dx^3, cells found
/// from the particle's own cube (halo cells included). Requires a completed
/// halo exchange on u: the support may cross cube faces. fn receives
/// (local cube, particle, interpolated value) in deterministic order.
void interpolate(const Field& u, const ParticleStore& store, const BcmMesh& mesh,
                 const std::function<void(int, const Particle&, const Vec3&)>& fn,
                 WorkerPool* pool = nullptr);

/// Scatter per-particle vectors F into the force field:
///   f_ijk += F * delta3 * dc_volume,
/// writing into halo cells when the support crosses a cube face. The caller
/// zeroes f beforehand and runs reverse_exchange afterwards to accumulate
/// halo images into owning interiors. values(lc, particle) supplies F.
void project(const std::function<Vec3(int, const Particle&)>& values, const ParticleStore& store,
             Field& f, const BcmMesh& mesh, WorkerPool* pool = nullptr);

}  // namespace bcm

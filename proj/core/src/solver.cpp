#include "bcm/solver.hpp"

#include <cmath>
#include <cstring>

namespace bcm {

FlowSolver::FlowSolver(const BcmMesh& mesh_, Distribution dist_, RankContext& ctx_,
                       SolverConfig cfg_, DomainBc bc_, std::vector<RigidBody> bodies_,
                       ParticleStore particles, int tag_stream)
    : mesh(mesh_),
      dist(std::move(dist_)),
      ctx(ctx_),
      cfg(cfg_),
      bc(bc_),
      bodies(std::move(bodies_)),
      store(std::move(particles)),
      tag_stream_(tag_stream) {
  vel_bc_ = bc.velocity_bc();
  rebuild(tag_stream);
}

void FlowSolver::rebuild(int tag_stream) {
  tag_stream_ = tag_stream;
  coll_ = std::make_unique<Collectives>(*ctx.transport, ctx.rank, tag_stream);
  ex_ = std::make_unique<HaloExchanger>(mesh, dist, *ctx.transport, ctx.rank, bc.periodic,
                                        tag_stream);
  poisson_ = std::make_unique<PoissonSolver>(mesh, dist, *ex_, *coll_, cfg.poisson);

  const int n_local = static_cast<int>(ex_->index_map().local_to_global.size());
  const int n = mesh.n_cells_per_edge;
  auto make = [&](Quantity q, int nc) { return Field(q, nc, n, 2, n_local); };
  if (u.local_cubes() != n_local) {
    u = make(Quantity::velocity, 3);
    p = make(Quantity::pressure, 1);
    f = make(Quantity::force, 3);
    rhs_prev = make(Quantity::scratch, 3);
  }
  u_tilde = make(Quantity::scratch, 3);
  u_star = make(Quantity::scratch, 3);
  scratch3 = make(Quantity::scratch, 3);
  rhs_p = make(Quantity::scratch, 1);
  particle_force_.assign(n_local, {});
}

std::vector<Field*> FlowSolver::state_fields() { return {&u, &p, &f, &rhs_prev}; }

double FlowSolver::cube_dx(int lc) const {
  return mesh.cell_spacing(mesh.cubes[ex_->index_map().local_to_global[lc]]);
}

// ---------------------------------------------------------------------------
// Kernels. Each reads only its own cube's array (interior + halo) and writes
// its own interior, so cubes can be processed in any order by any worker.

void FlowSolver::momentum_kernel(int lc, const Field& src, Field& out) const {
  const int n = mesh.n_cells_per_edge;
  const double dx = cube_dx(lc);
  const double inv_dx = 1.0 / dx;
  const double nu = cfg.mu / cfg.rho;
  const double inv_dx2 = inv_dx * inv_dx;

  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k)
        for (int c = 0; c < 3; ++c) {
          double flux_div = 0.0, vel_div = 0.0, lap = 0.0;
          const double phi_c = src.at(lc, c, i, j, k);
          for (int a = 0; a < 3; ++a) {
            const int di = a == 0, dj = a == 1, dk = a == 2;
            auto phi = [&](int s) {
              return src.at(lc, c, i + s * di, j + s * dj, k + s * dk);
            };
            auto vel = [&](int s) {
              return src.at(lc, a, i + s * di, j + s * dj, k + s * dk);
            };
            const double uf_hi = 0.5 * (vel(0) + vel(1));
            const double uf_lo = 0.5 * (vel(-1) + vel(0));
            const double phi_hi = uf_hi >= 0.0 ? quick_face(phi(-1), phi(0), phi(1))
                                               : quick_face(phi(2), phi(1), phi(0));
            const double phi_lo = uf_lo >= 0.0 ? quick_face(phi(-2), phi(-1), phi(0))
                                               : quick_face(phi(1), phi(0), phi(-1));
            flux_div += (uf_hi * phi_hi - uf_lo * phi_lo) * inv_dx;
            vel_div += (uf_hi - uf_lo) * inv_dx;
            lap += (phi(1) - 2.0 * phi_c + phi(-1)) * inv_dx2;
          }
          // Advective form via the divergence form minus phi * div(u):
          // constants are transported exactly even when div(u) != 0.
          out.at(lc, c, i, j, k) = -(flux_div - phi_c * vel_div) + nu * lap;
        }
}

void FlowSolver::integrate_kernel(int lc) {
  const int n = mesh.n_cells_per_edge;
  const double dt = cfg.dt;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
          const double r = scratch3.at(lc, c, i, j, k);
          double v;
          if (cfg.integrator == Integrator::ab2 && have_prev)
            v = u.at(lc, c, i, j, k) + dt * (1.5 * r - 0.5 * rhs_prev.at(lc, c, i, j, k));
          else
            v = u.at(lc, c, i, j, k) + dt * r;
          u_tilde.at(lc, c, i, j, k) = v;
        }
}

void FlowSolver::divergence_kernel(int lc, const Field& vel, const Field* pressure, Field& out,
                                   double scale) const {
  const int n = mesh.n_cells_per_edge;
  const double dx = cube_dx(lc);
  const double inv_dx = 1.0 / dx;
  const double coef = cfg.dt / cfg.rho;

  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        double div = 0.0;
        for (int a = 0; a < 3; ++a) {
          const int di = a == 0, dj = a == 1, dk = a == 2;
          auto v = [&](int s) { return vel.at(lc, a, i + s * di, j + s * dj, k + s * dk); };
          double uf_hi = 0.5 * (v(0) + v(1));
          double uf_lo = 0.5 * (v(-1) + v(0));
          if (pressure) {
            // Rhie-Chow face correction: compact face gradient minus the
            // average of the cell-centered gradients.
            auto pr = [&](int s) {
              return pressure->at(lc, 0, i + s * di, j + s * dj, k + s * dk);
            };
            const double g0 = (pr(1) - pr(-1)) * 0.5 * inv_dx;
            const double g1 = (pr(2) - pr(0)) * 0.5 * inv_dx;
            const double gm1 = (pr(0) - pr(-2)) * 0.5 * inv_dx;
            uf_hi -= coef * ((pr(1) - pr(0)) * inv_dx - 0.5 * (g0 + g1));
            uf_lo -= coef * ((pr(0) - pr(-1)) * inv_dx - 0.5 * (gm1 + g0));
          }
          div += (uf_hi - uf_lo) * inv_dx;
        }
        out.at(lc, 0, i, j, k) = scale * div;
      }
}

// ---------------------------------------------------------------------------

namespace {
/// Runs per_cube over local cubes with the exchange either overlapped
/// (internal zone between begin and finalize) or plain; results are
/// bit-identical either way because each cube depends only on its own
/// halo-complete array.
template <class PerCube>
void zone_sweep(HaloExchanger& ex, Field& field, const FieldBc& bc, int depth, bool overlap,
                WorkerPool* pool, PerCube&& per_cube) {
  const ExchangePlan& plan = ex.plan(depth);
  auto run = [&](const std::vector<int32_t>& locals) {
    if (pool)
      pool->parallel_for(static_cast<int64_t>(locals.size()),
                         [&](int64_t idx) { per_cube(locals[idx]); });
    else
      for (int32_t lc : locals) per_cube(lc);
  };
  if (overlap) {
    ExchangeToken tok = ex.begin(field, bc, depth, pool);
    run(plan.internal_locals);
    ex.finalize(tok, pool);
    run(plan.external_locals);
  } else {
    ex.exchange(field, bc, depth, pool);
    std::vector<int32_t> all(field.local_cubes());
    for (int i = 0; i < field.local_cubes(); ++i) all[i] = i;
    run(all);
  }
}
}  // namespace

void FlowSolver::substep_momentum() {
  diag.cn_iterations = 0;
  if (cfg.integrator != Integrator::cn) {
    zone_sweep(*ex_, u, vel_bc_, 0, cfg.overlap, ctx.pool, [&](int lc) {
      momentum_kernel(lc, u, scratch3);
      integrate_kernel(lc);
    });
    std::swap(rhs_prev, scratch3);
    have_prev = true;
    return;
  }

  // Crank-Nicolson diffusion: (I - c lap) u~ = u + dt (-conv(u)) + c lap(u),
  // c = mu dt / (2 rho). Solved by a diagonally-scaled fixed-point iteration
  // on the diffusion term; convection stays explicit.
  const double c = cfg.mu * cfg.dt / (2.0 * cfg.rho);
  const int n = mesh.n_cells_per_edge;
  zone_sweep(*ex_, u, vel_bc_, 0, cfg.overlap, ctx.pool, [&](int lc) {
    momentum_kernel(lc, u, scratch3);  // scratch3 = -conv + nu lap
    const double dx = cube_dx(lc);
    const double inv_dx2 = 1.0 / (dx * dx);
    const double nu = cfg.mu / cfg.rho;
    for (int cc = 0; cc < 3; ++cc)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          for (int k = 0; k < n; ++k) {
            const double lap =
                (u.at(lc, cc, i - 1, j, k) + u.at(lc, cc, i + 1, j, k) +
                 u.at(lc, cc, i, j - 1, k) + u.at(lc, cc, i, j + 1, k) +
                 u.at(lc, cc, i, j, k - 1) + u.at(lc, cc, i, j, k + 1) -
                 6.0 * u.at(lc, cc, i, j, k)) *
                inv_dx2;
            const double conv = -(scratch3.at(lc, cc, i, j, k) - nu * lap);
            // u_star is free here; it carries the fixed right-hand side.
            u_star.at(lc, cc, i, j, k) =
                u.at(lc, cc, i, j, k) + cfg.dt * (-conv) + c * lap;
            u_tilde.at(lc, cc, i, j, k) = u.at(lc, cc, i, j, k);
          }
  });

  double diff = 0.0;
  std::vector<double> cube_diff(u.local_cubes(), 0.0);
  for (int it = 0; it < cfg.cn_cap; ++it) {
    zone_sweep(*ex_, u_tilde, vel_bc_, 0, cfg.overlap, ctx.pool, [&](int lc) {
      const double dx = cube_dx(lc);
      const double a = c / (dx * dx);
      const double inv_diag = 1.0 / (1.0 + 6.0 * a);
      double m = 0.0;
      for (int cc = 0; cc < 3; ++cc)
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) {
              const double nb = u_tilde.at(lc, cc, i - 1, j, k) + u_tilde.at(lc, cc, i + 1, j, k) +
                                u_tilde.at(lc, cc, i, j - 1, k) + u_tilde.at(lc, cc, i, j + 1, k) +
                                u_tilde.at(lc, cc, i, j, k - 1) + u_tilde.at(lc, cc, i, j, k + 1);
              const double v = (u_star.at(lc, cc, i, j, k) + a * nb) * inv_diag;
              m = std::max(m, std::abs(v - u_tilde.at(lc, cc, i, j, k)));
              scratch3.at(lc, cc, i, j, k) = v;
            }
      cube_diff[lc] = m;
    });
    double rank_max = 0.0;
    for (double v : cube_diff) rank_max = std::max(rank_max, v);
    std::swap(u_tilde, scratch3);
    diff = coll_->max_all(rank_max);
    diag.cn_iterations = it + 1;
    if (diff <= cfg.cn_tol) break;
  }
  if (diff > cfg.cn_tol)
    throw NumericsError("Crank-Nicolson iteration did not converge: residual " + std::to_string(diff));
  have_prev = false;
}

void FlowSolver::apply_ib_force() {
  const int n = mesh.n_cells_per_edge;
  diag.body_force = {0, 0, 0};
  if (bodies.empty()) {
    std::swap(u_star, u_tilde);
    return;
  }

  ex_->exchange(u_tilde, vel_bc_, 0, ctx.pool);

  for (auto& m : particle_force_) m.clear();
  interpolate(
      u_tilde, store, mesh,
      [&](int lc, const Particle& part, const Vec3& U) {
        const Vec3 us = bodies[part.body_id].velocity_at(part.position, time);
        particle_force_[lc][part.global_id] = (us - U) * (cfg.rho / cfg.dt);
      },
      ctx.pool);

  f.fill(0.0);
  project([&](int lc, const Particle& part) { return particle_force_.at(lc).at(part.global_id); },
          store, f, mesh, ctx.pool);
  ex_->reverse(f, 0);

  // Total fluid->body force: -sum F dc, summed per cube (sorted particle ids)
  // then in global cube order.
  const auto& gids = ex_->index_map().local_to_global;
  std::vector<double> px(gids.size(), 0.0), py(gids.size(), 0.0), pz(gids.size(), 0.0);
  for (size_t lc = 0; lc < store.sets.size(); ++lc)
    for (const Particle* part : store.sets[lc].sorted()) {
      const Vec3& F = particle_force_[lc].at(part->global_id);
      px[lc] -= F.x * part->dc_volume;
      py[lc] -= F.y * part->dc_volume;
      pz[lc] -= F.z * part->dc_volume;
    }
  diag.body_force.x = coll_->sum_ordered(gids, px, mesh.num_cubes());
  diag.body_force.y = coll_->sum_ordered(gids, py, mesh.num_cubes());
  diag.body_force.z = coll_->sum_ordered(gids, pz, mesh.num_cubes());
  force_sum_x += diag.body_force.x;
  force_samples++;
  const double favg = force_samples > 0 ? force_sum_x / force_samples : 0.0;
  diag.body_force_normalized =
      favg != 0.0 ? diag.body_force / favg : Vec3{0, 0, 0};

  const double scale = cfg.dt / cfg.rho;
  auto add_force = [&](int64_t lc) {
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          for (int k = 0; k < n; ++k)
            u_star.at(lc, c, i, j, k) =
                u_tilde.at(lc, c, i, j, k) + scale * f.at(lc, c, i, j, k);
  };
  if (ctx.pool)
    ctx.pool->parallel_for(u.local_cubes(), add_force);
  else
    for (int lc = 0; lc < u.local_cubes(); ++lc) add_force(lc);
}

void FlowSolver::pressure_projection() {
  const int n = mesh.n_cells_per_edge;
  zone_sweep(*ex_, u_star, vel_bc_, 0, cfg.overlap, ctx.pool,
             [&](int lc) { divergence_kernel(lc, u_star, nullptr, rhs_p, cfg.rho / cfg.dt); });

  diag.poisson = poisson_->solve(p, rhs_p, cfg.overlap, ctx.pool);
  if (!diag.poisson.converged) diag.poisson_cap_hits++;

  // u = u* - (dt/rho) grad p, wide central gradient; p's halo is valid.
  const double coef = cfg.dt / cfg.rho;
  double local_cfl = 0.0;
  std::vector<double> cube_cfl(u.local_cubes(), 0.0);
  auto correct = [&](int64_t lc) {
    const double dx = cube_dx(static_cast<int>(lc));
    const double inv2dx = 0.5 / dx;
    double cmax = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
          const double gx = (p.at(lc, 0, i + 1, j, k) - p.at(lc, 0, i - 1, j, k)) * inv2dx;
          const double gy = (p.at(lc, 0, i, j + 1, k) - p.at(lc, 0, i, j - 1, k)) * inv2dx;
          const double gz = (p.at(lc, 0, i, j, k + 1) - p.at(lc, 0, i, j, k - 1)) * inv2dx;
          const double ux = u_star.at(lc, 0, i, j, k) - coef * gx;
          const double uy = u_star.at(lc, 1, i, j, k) - coef * gy;
          const double uz = u_star.at(lc, 2, i, j, k) - coef * gz;
          u.at(lc, 0, i, j, k) = ux;
          u.at(lc, 1, i, j, k) = uy;
          u.at(lc, 2, i, j, k) = uz;
          cmax = std::max({cmax, std::abs(ux), std::abs(uy), std::abs(uz)});
        }
    cube_cfl[lc] = cmax * cfg.dt / dx;
  };
  if (ctx.pool)
    ctx.pool->parallel_for(u.local_cubes(), correct);
  else
    for (int lc = 0; lc < u.local_cubes(); ++lc) correct(lc);
  for (double v : cube_cfl) local_cfl = std::max(local_cfl, v);
  diag.cfl = coll_->max_all(local_cfl);
  diag.cfl_exceeded = diag.cfl > cfg.cfl_warn;
}

void FlowSolver::update_particles() {
  if (bodies.empty()) return;
  advect(store, bodies, cfg.dt, time + cfg.dt);
  migrate(store, mesh, dist, ex_->index_map(), ctx.rank, *ctx.transport, migrate_epoch++);
  for (auto& b : bodies) b.advance_center(cfg.dt);
}

void FlowSolver::step() {
  substep_momentum();
  apply_ib_force();
  pressure_projection();
  update_particles();
  time += cfg.dt;
  step_index++;
}

double FlowSolver::divergence_inf(bool use_rhie_chow) {
  const int n = mesh.n_cells_per_edge;
  ex_->exchange(u, vel_bc_, 0, ctx.pool);
  if (use_rhie_chow) ex_->exchange(p, neumann_, 0, ctx.pool);
  Field div(Quantity::scratch, 1, n, 2, u.local_cubes());
  for (int lc = 0; lc < u.local_cubes(); ++lc)
    divergence_kernel(lc, u, use_rhie_chow ? &p : nullptr, div, 1.0);
  double m = 0.0;
  for (int lc = 0; lc < u.local_cubes(); ++lc)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) m = std::max(m, std::abs(div.at(lc, 0, i, j, k)));
  return coll_->max_all(m);
}

double FlowSolver::kinetic_energy() {
  const int n = mesh.n_cells_per_edge;
  const auto& gids = ex_->index_map().local_to_global;
  std::vector<double> partial(u.local_cubes(), 0.0);
  for (int lc = 0; lc < u.local_cubes(); ++lc) {
    const double dx = cube_dx(lc);
    const double vol = dx * dx * dx;
    double s = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k)
          s += u.at(lc, 0, i, j, k) * u.at(lc, 0, i, j, k) +
               u.at(lc, 1, i, j, k) * u.at(lc, 1, i, j, k) +
               u.at(lc, 2, i, j, k) * u.at(lc, 2, i, j, k);
    partial[lc] = 0.5 * cfg.rho * s * vol;
  }
  return coll_->sum_ordered(gids, partial, mesh.num_cubes());
}

Vec3 FlowSolver::sample_velocity_collective(const Vec3& x) {
  return sample_velocities_collective({x})[0];
}

std::vector<Vec3> FlowSolver::sample_velocities_collective(const std::vector<Vec3>& points) {
  ex_->exchange(u, vel_bc_, 0, ctx.pool);
  std::vector<Vec3> out(points.size(), Vec3{0, 0, 0});
  std::vector<int32_t> mine_idx;
  std::vector<double> mine_vals;
  for (size_t q = 0; q < points.size(); ++q) {
    const auto gid = mesh.locate_cube(points[q]);
    if (gid && dist.owner_of(*gid) == ctx.rank) {
      Vec3 v{0, 0, 0};
      const int lc = ex_->index_map().local_of(*gid);
      const Cube& cube = mesh.cubes[*gid];
      const Vec3 x0 = mesh.base_corner(cube);
      const double dx = mesh.cell_spacing(cube);
      int b[3];
      double w[3];
      for (int a = 0; a < 3; ++a) {
        const double r = (points[q][a] - x0[a]) / dx - 0.5;
        b[a] = static_cast<int>(std::floor(r));
        w[a] = r - b[a];
      }
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj)
            for (int dk = 0; dk < 2; ++dk) {
              const double weight = (di ? w[0] : 1 - w[0]) * (dj ? w[1] : 1 - w[1]) *
                                    (dk ? w[2] : 1 - w[2]);
              acc += weight * u.at(lc, c, b[0] + di, b[1] + dj, b[2] + dk);
            }
        v[c] = acc;
      }
      for (int c = 0; c < 3; ++c) {
        mine_idx.push_back(static_cast<int32_t>(3 * q + c));
        mine_vals.push_back(v[c]);
      }
    }
  }
  // Only the owning rank contributes; the gather gives every rank the same bits.
  const auto global = coll_->gather_by_gid(mine_idx, mine_vals,
                                           static_cast<int64_t>(points.size()) * 3);
  for (size_t q = 0; q < points.size(); ++q)
    out[q] = {global[3 * q], global[3 * q + 1], global[3 * q + 2]};
  return out;
}

void FlowSolver::adopt_distribution(Distribution new_dist,
                                    std::vector<std::vector<double>> moved_fields,
                                    ParticleStore moved_particles) {
  dist = std::move(new_dist);
  store = std::move(moved_particles);
  // moved_fields holds per-field concatenated cube payloads in the new
  // local order: u, p, f, rhs_prev.
  rebuild(tag_stream_ + 1);
  const auto fields = state_fields();
  for (size_t fi = 0; fi < fields.size(); ++fi) {
    Field& fld = *fields[fi];
    const auto& payload = moved_fields[fi];
    const int64_t per_cube = fld.cells_per_comp() * fld.components();
    for (int lc = 0; lc < fld.local_cubes(); ++lc)
      std::memcpy(fld.cube_data(lc).data(), payload.data() + lc * per_cube,
                  per_cube * sizeof(double));
  }
}

}  // namespace bcm

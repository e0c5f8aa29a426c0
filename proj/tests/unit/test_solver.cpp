#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <map>
#include <mutex>
#include <random>

#include "bcm/solver.hpp"

using namespace bcm;

namespace {

MeshSpec box_spec(double lo, double hi, int tiles, int cells, int max_level = 0) {
  MeshSpec spec;
  spec.domain = {{lo, lo, lo}, {hi, hi, hi}};
  spec.level0_tiling = {tiles, tiles, tiles};
  spec.n_cells_per_edge = cells;
  spec.max_level = max_level;
  return spec;
}

DomainBc periodic_bc() {
  DomainBc bc;
  bc.periodic = {true, true, true};
  return bc;
}

void set_velocity(FlowSolver& s, const std::function<Vec3(const Vec3&)>& fn) {
  for (int lc = 0; lc < s.u.local_cubes(); ++lc) {
    const Cube& cube = s.mesh.cubes[s.imap().local_to_global[lc]];
    for (int i = 0; i < s.u.n(); ++i)
      for (int j = 0; j < s.u.n(); ++j)
        for (int k = 0; k < s.u.n(); ++k) {
          const Vec3 v = fn(s.mesh.cell_center(cube, {i, j, k}));
          for (int c = 0; c < 3; ++c) s.u.at(lc, c, i, j, k) = v[c];
        }
  }
}

struct SolverRun {
  std::map<int, std::vector<double>> u, p;
  double kinetic_first = 0, kinetic_last = 0;
  std::vector<double> energy_history;
};

SolverRun run_steps(const BcmMesh& mesh, int P, int T, SolverConfig cfg, DomainBc bc,
                    std::vector<RigidBody> bodies, const std::vector<Particle>& particles,
                    const std::function<Vec3(const Vec3&)>& init, int steps, uint64_t seed = 0,
                    int delay = 0) {
  SolverRun out;
  std::mutex mtx;
  Transport transport(P, seed, delay);
  run_ranks(P, T, transport, [&](RankContext& ctx) {
    auto dist = Distribution::linear(mesh.num_cubes(), P);
    const auto imap = IndexMap::build(dist, ctx.rank);
    auto store = assign_sets(particles, mesh, dist, imap, ctx.rank);
    FlowSolver solver(mesh, dist, ctx, cfg, bc, bodies, std::move(store));
    set_velocity(solver, init);
    const double ke0 = solver.kinetic_energy();
    std::vector<double> ke{ke0};
    for (int s = 0; s < steps; ++s) {
      solver.step();
      ke.push_back(solver.kinetic_energy());
    }
    std::lock_guard lk(mtx);
    out.kinetic_first = ke0;
    out.kinetic_last = ke.back();
    out.energy_history = ke;
    for (int lc = 0; lc < solver.u.local_cubes(); ++lc) {
      auto su = solver.u.cube_span(lc);
      auto sp = solver.p.cube_span(lc);
      out.u[imap.local_to_global[lc]] = std::vector<double>(su.begin(), su.end());
      out.p[imap.local_to_global[lc]] = std::vector<double>(sp.begin(), sp.end());
    }
  });
  return out;
}

}  // namespace

TEST_CASE("QUICK face value is exact for constant, linear, and quadratic profiles") {
  auto probe = [](const std::function<double(double)>& f) {
    // Face between cells at x = 0 and x = 1 sits at x = 0.5; upwind from below:
    // UU = f(-1), U = f(0), D = f(1).
    return quick_face(f(-1.0), f(0.0), f(1.0));
  };
  CHECK(probe([](double) { return 4.2; }) == doctest::Approx(4.2));
  CHECK(probe([](double x) { return 2.0 * x + 1.0; }) == doctest::Approx(2.0 * 0.5 + 1.0));
  CHECK(probe([](double x) { return x * x; }) ==
        doctest::Approx(0.5 * 0.5 - 0.125 * 0 + 0.25 - 0.25));  // exact value 1/8? compute below
  // Quadratic check against the cell-average interpretation: QUICK's parabola
  // through the three cells evaluated at the face equals the pointwise value
  // for cell-centered samples f(-1), f(0), f(1) at x = 1/2:
  const double face = quick_face(1.0, 0.0, 1.0);  // f(x) = x^2
  CHECK(face == doctest::Approx(0.25));           // (6*0 + 3*1 - 1) / 8 = 0.25 = (1/2)^2
}

TEST_CASE("constant velocity field has zero convective flux divergence") {
  const BcmMesh mesh = generate_mesh(box_spec(0, 2, 2, 4));
  SolverConfig cfg;
  cfg.mu = 0.0;
  cfg.dt = 0.01;
  cfg.integrator = Integrator::euler;
  cfg.poisson.tol = 1e-10;
  const auto run =
      run_steps(mesh, 1, 1, cfg, periodic_bc(), {}, {}, [](const Vec3&) {
        return Vec3{1.25, -0.5, 2.0};
      }, 1);
  Field probe(Quantity::velocity, 3, 4, 2, 1);
  for (const auto& [gid, data] : run.u)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
          for (int k = 0; k < 4; ++k) {
            const double want = c == 0 ? 1.25 : (c == 1 ? -0.5 : 2.0);
            CHECK(data[probe.index(c, i, j, k)] == doctest::Approx(want).epsilon(1e-13));
          }
}

TEST_CASE("zero state with no inflow and a stationary body is a fixed point") {
  const BcmMesh mesh = generate_mesh(box_spec(0, 2, 2, 4));
  DomainBc bc;  // all slip
  RigidBody body;
  body.triangles = icosphere({1, 1, 1}, 0.7, 3);
  const auto particles = discretize_surface(body, mesh);
  SolverConfig cfg;
  cfg.mu = 0.01;
  cfg.dt = 0.01;
  const auto run = run_steps(mesh, 1, 1, cfg, bc, {body}, particles,
                             [](const Vec3&) { return Vec3{0, 0, 0}; }, 3);
  for (const auto& [gid, data] : run.u)
    for (double v : data) CHECK(v == 0.0);
  for (const auto& [gid, data] : run.p)
    for (double v : data) CHECK(v == 0.0);
}

TEST_CASE("pure diffusion decays a shear wave at the analytic rate") {
  // u_x = sin(y) in a periodic box solves the full equations with p = 0;
  // kinetic energy decays as exp(-2 nu t) for the k = 1 mode.
  const double L = 2.0 * M_PI;
  MeshSpec spec;
  spec.domain = {{0, 0, 0}, {L, L, L}};
  spec.level0_tiling = {2, 2, 2};
  spec.n_cells_per_edge = 8;
  spec.max_level = 0;
  const BcmMesh mesh = generate_mesh(spec);

  SolverConfig cfg;
  cfg.mu = 0.05;
  cfg.dt = 0.005;
  cfg.integrator = Integrator::ab2;
  cfg.poisson.tol = 1e-9;
  const int steps = 200;  // t = 1
  const auto run = run_steps(mesh, 1, 1, cfg, periodic_bc(), {}, {},
                             [](const Vec3& x) { return Vec3{std::sin(x.y), 0, 0}; }, steps);

  for (size_t i = 1; i < run.energy_history.size(); ++i)
    CHECK(run.energy_history[i] <= run.energy_history[i - 1] * (1 + 1e-12));  // monotone decay

  const double t = steps * cfg.dt;
  const double expected = run.kinetic_first * std::exp(-2.0 * cfg.mu * t);
  const double measured_rate = std::log(run.kinetic_first / run.kinetic_last) / (2.0 * cfg.mu * t);
  CHECK(measured_rate == doctest::Approx(1.0).epsilon(0.05));  // within 5% of exp(-2 nu k^2 t)
  CHECK(run.kinetic_last == doctest::Approx(expected).epsilon(0.1));
}

TEST_CASE("AB2 falls back to Euler on the first step") {
  const BcmMesh mesh = generate_mesh(box_spec(0, 2, 2, 4));
  auto init = [](const Vec3& x) {
    return Vec3{std::sin(M_PI * x.x) * 0.1, std::cos(M_PI * x.y) * 0.1, 0};
  };
  SolverConfig ab2;
  ab2.mu = 0.02;
  ab2.dt = 0.004;
  ab2.integrator = Integrator::ab2;
  SolverConfig euler = ab2;
  euler.integrator = Integrator::euler;
  const auto a = run_steps(mesh, 1, 1, ab2, periodic_bc(), {}, {}, init, 1);
  const auto b = run_steps(mesh, 1, 1, euler, periodic_bc(), {}, {}, init, 1);
  for (const auto& [gid, data] : a.u)
    CHECK(std::memcmp(data.data(), b.u.at(gid).data(), data.size() * sizeof(double)) == 0);
}

TEST_CASE("Crank-Nicolson pure diffusion never gains energy across time steps") {
  const double L = 2.0 * M_PI;
  MeshSpec spec;
  spec.domain = {{0, 0, 0}, {L, L, L}};
  spec.level0_tiling = {2, 2, 2};
  spec.n_cells_per_edge = 4;
  spec.max_level = 0;
  const BcmMesh mesh = generate_mesh(spec);
  for (double dt : {0.01, 0.05, 0.2, 0.5}) {
    SolverConfig cfg;
    cfg.mu = 0.05;
    cfg.dt = dt;
    cfg.integrator = Integrator::cn;
    cfg.cn_cap = 400;  // slow fixed point at large dt
    const auto run = run_steps(mesh, 1, 1, cfg, periodic_bc(), {}, {},
                               [](const Vec3& x) { return Vec3{std::sin(x.y), 0, 0}; }, 8);
    for (size_t i = 1; i < run.energy_history.size(); ++i)
      CHECK(run.energy_history[i] <= run.energy_history[i - 1] * (1 + 1e-10));
  }
}

TEST_CASE("inviscid periodic vortex: per-step energy drift shrinks quadratically with dt") {
  const double L = 2.0 * M_PI;
  MeshSpec spec;
  spec.domain = {{0, 0, 0}, {L, L, L}};
  spec.level0_tiling = {2, 2, 2};
  spec.n_cells_per_edge = 8;
  spec.max_level = 0;
  const BcmMesh mesh = generate_mesh(spec);
  auto tg = [](const Vec3& x) {
    return Vec3{std::sin(x.x) * std::cos(x.y), -std::cos(x.x) * std::sin(x.y), 0};
  };
  auto drift_per_step = [&](double dt, int steps) {
    SolverConfig cfg;
    cfg.mu = 0.0;
    cfg.dt = dt;
    cfg.integrator = Integrator::ab2;
    cfg.poisson.tol = 1e-10;
    const auto run = run_steps(mesh, 1, 1, cfg, periodic_bc(), {}, {}, tg, steps);
    return std::abs(run.kinetic_last - run.kinetic_first) / run.kinetic_first / steps;
  };
  const double coarse = drift_per_step(0.02, 10);
  const double fine = drift_per_step(0.01, 20);
  CHECK(fine < 0.5 * coarse);  // at least first order per step; expect ~4x
  CHECK(coarse < 5e-4);        // bounded drift
}

TEST_CASE("manufactured Poisson solution converges at second order with fast V-cycles") {
  auto solve_error = [&](int tiles) {
    MeshSpec spec = box_spec(0, 1, tiles, 8);
    const BcmMesh mesh = generate_mesh(spec);
    Transport transport(1);
    double err = 0.0;
    run_ranks(1, 1, transport, [&](RankContext& ctx) {
      auto dist = Distribution::linear(mesh.num_cubes(), 1);
      HaloExchanger ex(mesh, dist, transport, ctx.rank);
      Collectives coll(*ctx.transport, ctx.rank);
      PoissonConfig pcfg;
      pcfg.tol = 1e-10;
      PoissonSolver solver(mesh, dist, ex, coll, pcfg);
      const int n = mesh.n_cells_per_edge;
      Field p(Quantity::pressure, 1, n, 2, mesh.num_cubes());
      Field rhs(Quantity::scratch, 1, n, 2, mesh.num_cubes());
      for (int lc = 0; lc < rhs.local_cubes(); ++lc) {
        const Cube& cube = mesh.cubes[lc];
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) {
              const Vec3 x = mesh.cell_center(cube, {i, j, k});
              rhs.at(lc, 0, i, j, k) = -3.0 * M_PI * M_PI * std::cos(M_PI * x.x) *
                                       std::cos(M_PI * x.y) * std::cos(M_PI * x.z);
            }
      }
      const auto stats = solver.solve(p, rhs, false, ctx.pool);
      CHECK(stats.converged);
      // Compare against the zero-mean analytic solution.
      double mx = 0.0;
      for (int lc = 0; lc < p.local_cubes(); ++lc) {
        const Cube& cube = mesh.cubes[lc];
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) {
              const Vec3 x = mesh.cell_center(cube, {i, j, k});
              const double want =
                  std::cos(M_PI * x.x) * std::cos(M_PI * x.y) * std::cos(M_PI * x.z);
              mx = std::max(mx, std::abs(p.at(lc, 0, i, j, k) - want));
            }
      }
      err = mx;
    });
    return err;
  };
  const double e1 = solve_error(2);  // h = 1/16
  const double e2 = solve_error(4);  // h = 1/32
  const double ratio = e1 / e2;
  CHECK(ratio > 3.5);
  CHECK(ratio < 4.5);
}

TEST_CASE("V-cycle residual reduction factor stays at or below 0.2") {
  const BcmMesh mesh = generate_mesh(box_spec(0, 1, 4, 8));  // uniform 32^3
  Transport transport(1);
  run_ranks(1, 1, transport, [&](RankContext& ctx) {
    auto dist = Distribution::linear(mesh.num_cubes(), 1);
    HaloExchanger ex(mesh, dist, transport, ctx.rank);
    Collectives coll(*ctx.transport, ctx.rank);
    PoissonConfig pcfg;
    pcfg.tol = 1e-30;  // never converge: watch per-cycle history instead
    pcfg.max_vcycles = 1;
    PoissonSolver solver(mesh, dist, ex, coll, pcfg);
    const int n = mesh.n_cells_per_edge;
    Field p(Quantity::pressure, 1, n, 2, mesh.num_cubes());
    Field rhs(Quantity::scratch, 1, n, 2, mesh.num_cubes());
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> uni(-1, 1);
    for (int lc = 0; lc < rhs.local_cubes(); ++lc)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          for (int k = 0; k < n; ++k) rhs.at(lc, 0, i, j, k) = uni(rng);
    double prev = -1.0;
    for (int cycle = 0; cycle < 6; ++cycle) {
      const auto stats = solver.solve(p, rhs, false, ctx.pool);  // one V-cycle, warm start
      if (prev > 0) CHECK(stats.rel_residual2 / prev <= 0.2);
      prev = stats.rel_residual2;
    }
    CHECK(prev < 1e-4);
  });
}

TEST_CASE("null right-hand side returns the zero-mean representative") {
  const BcmMesh mesh = generate_mesh(box_spec(0, 1, 2, 4));
  Transport transport(1);
  run_ranks(1, 1, transport, [&](RankContext& ctx) {
    auto dist = Distribution::linear(mesh.num_cubes(), 1);
    HaloExchanger ex(mesh, dist, transport, ctx.rank);
    Collectives coll(*ctx.transport, ctx.rank);
    PoissonSolver solver(mesh, dist, ex, coll, {});
    Field p(Quantity::pressure, 1, 4, 2, mesh.num_cubes());
    p.fill(42.0);  // arbitrary constant initial guess
    Field rhs(Quantity::scratch, 1, 4, 2, mesh.num_cubes());
    const auto stats = solver.solve(p, rhs, false, ctx.pool);
    CHECK(stats.converged);
    for (int lc = 0; lc < p.local_cubes(); ++lc)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
          for (int k = 0; k < 4; ++k) CHECK(p.at(lc, 0, i, j, k) == 0.0);
  });
}

TEST_CASE("projection drives the coupled divergence to the solver tolerance") {
  const BcmMesh mesh = generate_mesh(box_spec(0, 1, 2, 8));
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> uni(-1, 1);
  SolverConfig cfg;
  cfg.mu = 0.005;
  cfg.dt = 0.002;
  cfg.poisson.tol = 1e-8;
  cfg.integrator = Integrator::euler;

  Transport transport(1);
  run_ranks(1, 1, transport, [&](RankContext& ctx) {
    auto dist = Distribution::linear(mesh.num_cubes(), 1);
    DomainBc bc;  // slip box
    FlowSolver solver(mesh, dist, ctx, cfg, bc, {}, ParticleStore{});
    solver.store.sets.resize(solver.u.local_cubes());
    set_velocity(solver, [&](const Vec3&) {
      return Vec3{uni(rng), uni(rng), uni(rng)};
    });
    const double div_before = solver.divergence_inf(false);
    solver.step();
    const double div_after = solver.divergence_inf(true);
    CHECK(div_after <= 10.0 * cfg.poisson.tol * div_before);

  });

  // Already divergence-free (constant field, periodic walls): the pressure is
  // the zero-mean constant and the velocity passes through unchanged.
  Transport transport2(1);
  run_ranks(1, 1, transport2, [&](RankContext& ctx) {
    auto dist = Distribution::linear(mesh.num_cubes(), 1);
    FlowSolver solver(mesh, dist, ctx, cfg, periodic_bc(), {}, ParticleStore{});
    solver.store.sets.resize(solver.u.local_cubes());
    set_velocity(solver, [](const Vec3&) { return Vec3{0.3, -0.2, 0.1}; });
    const auto before = solver.u;
    solver.step();
    for (int lc = 0; lc < solver.p.local_cubes(); ++lc)
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
          for (int k = 0; k < 8; ++k) {
            CHECK(std::abs(solver.p.at(lc, 0, i, j, k)) < 1e-10);
            for (int c = 0; c < 3; ++c)
              CHECK(solver.u.at(lc, c, i, j, k) ==
                    doctest::Approx(before.at(lc, c, i, j, k)).epsilon(1e-12));
          }
  });
}

TEST_CASE("global momentum change equals the boundary pressure flux") {
  const BcmMesh mesh = generate_mesh(box_spec(0, 1, 2, 8));
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> uni(-1, 1);
  SolverConfig cfg;
  cfg.dt = 0.004;
  cfg.poisson.tol = 1e-11;
  Transport transport(1);
  run_ranks(1, 1, transport, [&](RankContext& ctx) {
    auto dist = Distribution::linear(mesh.num_cubes(), 1);
    DomainBc bc;
    FlowSolver solver(mesh, dist, ctx, cfg, bc, {}, ParticleStore{});
    solver.store.sets.resize(solver.u.local_cubes());
    set_velocity(solver, [&](const Vec3&) {
      return Vec3{uni(rng), uni(rng), uni(rng)};
    });
    // u* := u (skip momentum), project, and audit the x-momentum budget.
    solver.u_star = solver.u;
    const auto before = solver.u;
    solver.pressure_projection();

    const int n = 8;
    double dmom = 0.0;      // sum rho (u - u*) dx^3
    double boundary = 0.0;  // -dt * sum over domain-boundary faces of p_face A
    const auto& imap = solver.imap();
    for (int lc = 0; lc < solver.u.local_cubes(); ++lc) {
      const Cube& cube = mesh.cubes[imap.local_to_global[lc]];
      const double dx = mesh.cell_spacing(cube);
      const double vol = dx * dx * dx;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          for (int k = 0; k < n; ++k)
            dmom += cfg.rho * (solver.u.at(lc, 0, i, j, k) - before.at(lc, 0, i, j, k)) * vol;
      // Wide-gradient telescoping: per (j,k) line the interior sum of
      // (p[i+1] - p[i-1])/2 collapses to (p_n + p_{n-1} - p_0 - p_{-1})/2,
      // and the ghosts mirror their boundary cells under zero-Neumann.
      const Box cb = mesh.cube_box(cube);
      const double A = dx * dx;
      if (std::abs(cb.lo.x - mesh.domain.lo.x) < 1e-12)
        for (int j = 0; j < n; ++j)
          for (int k = 0; k < n; ++k)
            boundary += cfg.dt * A * 0.5 *
                        (solver.p.at(lc, 0, 0, j, k) + solver.p.at(lc, 0, -1, j, k));
      if (std::abs(cb.hi.x - mesh.domain.hi.x) < 1e-12)
        for (int j = 0; j < n; ++j)
          for (int k = 0; k < n; ++k)
            boundary -= cfg.dt * A * 0.5 *
                        (solver.p.at(lc, 0, n - 1, j, k) + solver.p.at(lc, 0, n, j, k));
    }
    CHECK(dmom == doctest::Approx(boundary).epsilon(1e-9));
  });
}

TEST_CASE("IB forcing: the prescribed-velocity field is already a fixed point") {
  const BcmMesh mesh = generate_mesh(box_spec(0, 2, 2, 8));
  RigidBody body;
  body.triangles = icosphere({1, 1, 1}, 0.8, 3);
  body.linear_velocity = {0.4, 0, 0};
  const auto particles = discretize_surface(body, mesh);
  SolverConfig cfg;
  cfg.dt = 0.01;
  Transport transport(1);
  run_ranks(1, 1, transport, [&](RankContext& ctx) {
    auto dist = Distribution::linear(mesh.num_cubes(), 1);
    const auto imap = IndexMap::build(dist, 0);
    auto store = assign_sets(particles, mesh, dist, imap, 0);
    DomainBc bc;
    FlowSolver solver(mesh, dist, ctx, cfg, bc, {body}, std::move(store));
    set_velocity(solver, [](const Vec3&) { return Vec3{0.4, 0, 0}; });
    solver.u_tilde = solver.u;
    solver.apply_ib_force();
    CHECK(solver.diag.body_force.x == doctest::Approx(0.0));
    for (int lc = 0; lc < solver.u_star.local_cubes(); ++lc)
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
          for (int k = 0; k < 8; ++k)
            CHECK(solver.u_star.at(lc, 0, i, j, k) == doctest::Approx(0.4).epsilon(1e-12));
  });
}

TEST_CASE("IB forcing bookkeeping: single particle momentum injection is exact") {
  const BcmMesh mesh = generate_mesh(box_spec(0, 2, 2, 8));
  std::vector<Particle> particles{{0, {1.0, 1.0, 1.0}, 0.42, 0}};
  RigidBody body;  // stationary; never discretized, carries only motion
  body.triangles = {{Vec3{0, 0, 0}, Vec3{1, 0, 0}, Vec3{0, 1, 0}}};
  SolverConfig cfg;
  cfg.dt = 0.02;
  cfg.rho = 2.0;
  Transport transport(1);
  run_ranks(1, 1, transport, [&](RankContext& ctx) {
    auto dist = Distribution::linear(mesh.num_cubes(), 1);
    const auto imap = IndexMap::build(dist, 0);
    auto store = assign_sets(particles, mesh, dist, imap, 0);
    DomainBc bc;
    FlowSolver solver(mesh, dist, ctx, cfg, bc, {body}, std::move(store));
    set_velocity(solver, [](const Vec3&) { return Vec3{1, 0, 0}; });
    solver.u_tilde = solver.u;
    solver.apply_ib_force();
    // sum u* dx^3 - sum u~ dx^3 = (dt/rho) F dc; F = (rho/dt)(0 - 1) => delta = -dc.
    double delta = 0.0;
    const double dx = mesh.cell_spacing(mesh.cubes[0]);
    for (int lc = 0; lc < solver.u_star.local_cubes(); ++lc)
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
          for (int k = 0; k < 8; ++k)
            delta += (solver.u_star.at(lc, 0, i, j, k) - solver.u_tilde.at(lc, 0, i, j, k)) *
                     dx * dx * dx;
    CHECK(delta == doctest::Approx(-0.42).epsilon(1e-12));
    CHECK(solver.diag.body_force.x == doctest::Approx(0.42 * cfg.rho / cfg.dt).epsilon(1e-12));
  });
}

TEST_CASE("IB forcing pins the flow to the body: slip velocity drops by 10x") {
  const BcmMesh mesh = generate_mesh(box_spec(-1, 1, 2, 16));
  RigidBody body;
  body.triangles = icosphere({0, 0, 0}, 1.0, 3);
  const auto particles = discretize_surface(body, mesh);
  SolverConfig cfg;
  cfg.mu = 0.01;
  cfg.dt = 0.02;
  cfg.poisson.tol = 1e-7;
  Transport transport(1);
  run_ranks(1, 1, transport, [&](RankContext& ctx) {
    auto dist = Distribution::linear(mesh.num_cubes(), 1);
    const auto imap = IndexMap::build(dist, 0);
    auto store = assign_sets(particles, mesh, dist, imap, 0);
    FlowSolver solver(mesh, dist, ctx, cfg, periodic_bc(), {body}, std::move(store));
    set_velocity(solver, [](const Vec3&) { return Vec3{1, 0, 0}; });
    for (int s = 0; s < 40; ++s) solver.step();
    solver.exchanger().exchange(solver.u, solver.bc.velocity_bc(), 0, ctx.pool);
    double slip = 0.0;
    int count = 0;
    interpolate(solver.u, solver.store, solver.mesh, [&](int, const Particle&, const Vec3& U) {
      slip += norm(U);
      count++;
    });
    slip /= count;
    CHECK(slip < 0.1);  // >= 10x below the 1.0 baseline without forcing
  });
}

TEST_CASE("overlapped and plain stepping agree bit-for-bit") {
  MeshSpec spec = box_spec(0, 2, 2, 4, 1);
  spec.refine_boxes = {{{{0.2, 0.2, 0.2}, {1.0, 1.0, 1.0}}, 1}};
  const BcmMesh mesh = generate_mesh(spec);
  RigidBody body;
  body.triangles = icosphere({0.7, 0.7, 0.7}, 0.5, 3);
  body.angular_velocity = {0, 0, 0.5};
  body.center = {0.7, 0.7, 0.7};
  const auto particles = discretize_surface(body, mesh);

  auto init = [](const Vec3& x) {
    return Vec3{0.2 * std::sin(x.y * 3), 0.1 * std::cos(x.x * 2), 0.05};
  };
  SolverConfig cfg;
  cfg.mu = 0.01;
  cfg.dt = 0.005;
  cfg.integrator = Integrator::ab2;
  DomainBc bc;
  bc.kind = {BcKind::inflow, BcKind::outflow, BcKind::slip,
             BcKind::slip,   BcKind::slip,    BcKind::slip};
  bc.inflow[0] = {0.2, 0, 0};

  SolverConfig plain = cfg;
  plain.overlap = false;
  SolverConfig over = cfg;
  over.overlap = true;

  const auto a = run_steps(mesh, 1, 1, plain, bc, {body}, particles, init, 5);
  const auto b = run_steps(mesh, 1, 1, over, bc, {body}, particles, init, 5);
  const auto c = run_steps(mesh, 2, 2, over, bc, {body}, particles, init, 5, 3, 5);
  const auto d = run_steps(mesh, 2, 1, plain, bc, {body}, particles, init, 5, 8, 2);
  for (const auto& [gid, data] : a.u) {
    CHECK(std::memcmp(data.data(), b.u.at(gid).data(), data.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(data.data(), c.u.at(gid).data(), data.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(data.data(), d.u.at(gid).data(), data.size() * sizeof(double)) == 0);
  }
  for (const auto& [gid, data] : a.p) {
    CHECK(std::memcmp(data.data(), c.p.at(gid).data(), data.size() * sizeof(double)) == 0);
  }
}

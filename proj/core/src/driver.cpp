#include "bcm/driver.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>

namespace bcm {

namespace {

std::string fmt_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void fill_velocity(Field& u, const Vec3& v) {
  for (int lc = 0; lc < u.local_cubes(); ++lc)
    for (int c = 0; c < 3; ++c)
      for (int i = -u.halo(); i < u.n() + u.halo(); ++i)
        for (int j = -u.halo(); j < u.n() + u.halo(); ++j)
          for (int k = -u.halo(); k < u.n() + u.halo(); ++k) u.at(lc, c, i, j, k) = v[c];
}

void load_state(FlowSolver& solver, CheckpointData&& data) {
  const auto fields = solver.state_fields();
  if (data.field_names.size() != fields.size())
    throw IoError("restart: field set mismatch");
  for (size_t fi = 0; fi < fields.size(); ++fi) {
    Field& dst = *fields[fi];
    for (int lc = 0; lc < dst.local_cubes(); ++lc) {
      auto& src = data.fields[fi][lc];
      if (src.size() != dst.cube_data(lc).size()) throw IoError("restart: payload size mismatch");
      dst.cube_data(lc) = std::move(src);
    }
  }
  solver.store = std::move(data.particles);
  solver.time = data.extras.time;
  solver.step_index = data.extras.step;
  solver.force_sum_x = data.extras.force_sum_x;
  solver.force_samples = data.extras.force_samples;
  solver.have_prev = data.extras.have_prev;
}

void write_state_checkpoint(FlowSolver& solver, const CaseConfig& cfg, const std::string& path) {
  CheckpointWriteSpec spec;
  spec.field_names = {"u", "p", "f", "rhs_prev"};
  for (Field* f : solver.state_fields()) spec.fields.push_back(f);
  spec.mode = cfg.checkpoint_mode;
  // Relative tolerance scaled by the current velocity range.
  double range = 1.0;
  if (spec.mode == CompressionMode::lossy) {
    double lo = 0.0, hi = 0.0;
    for (int lc = 0; lc < solver.u.local_cubes(); ++lc)
      for (double v : solver.u.cube_span(lc)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    const double local_range = hi - lo;
    range = std::max(solver.collectives().max_all(local_range), 1e-30);
  }
  spec.lossy_abs_tol = cfg.checkpoint_tolerance * range;
  CheckpointExtras extras{solver.time, solver.step_index, solver.force_sum_x,
                          solver.force_samples, solver.have_prev};
  write_checkpoint(path, solver.mesh, solver.dist, solver.imap(), spec, solver.store, extras,
                   *solver.ctx.transport, solver.ctx.rank, solver.ctx.pool);
}

struct LoopCallbacks {
  std::function<void(FlowSolver&)> after_run;  // collective, solvers still alive
};

void simulate(const CaseConfig& cfg, const RunOptions& opt, std::ostream& out,
              const LoopCallbacks& callbacks) {
  validate_config(cfg);
  const auto bodies = make_bodies(cfg);
  const BcmMesh mesh = generate_mesh(cfg.mesh);
  const int64_t steps =
      cfg.max_steps >= 0 ? cfg.max_steps : static_cast<int64_t>(std::llround(cfg.t_end / cfg.dt));

  if (opt.dry_run) {
    out << "dry run: configuration valid\n" << describe_config(cfg) << mesh_stats(mesh);
    const auto dist = Distribution::linear(mesh.num_cubes(), cfg.ranks);
    out << "cubes per rank:";
    for (int p = 0; p < cfg.ranks; ++p) out << " " << dist.count(p);
    out << "\nplanned steps: " << steps << "\n";
    return;
  }

  std::vector<Particle> all_particles;
  uint64_t id_base = 0;
  for (const RigidBody& b : bodies) {
    auto ps = discretize_surface(b, mesh, id_base);
    id_base += ps.size();
    all_particles.insert(all_particles.end(), ps.begin(), ps.end());
  }

  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir + "/checkpoints");

  Transport transport(cfg.ranks, cfg.seed, cfg.transport_delay);
  std::ofstream forces_csv, balance_csv, logf;
  std::mutex io_mtx;

  run_ranks(cfg.ranks, cfg.threads, transport, [&](RankContext& ctx) {
    const bool am0 = ctx.rank == 0;
    Distribution dist = Distribution::linear(mesh.num_cubes(), ctx.n_ranks);
    IndexMap imap = IndexMap::build(dist, ctx.rank);
    ParticleStore store = assign_sets(all_particles, mesh, dist, imap, ctx.rank);

    SolverConfig scfg;
    scfg.rho = cfg.rho;
    scfg.mu = cfg.mu;
    scfg.dt = cfg.dt;
    scfg.integrator = cfg.integrator;
    scfg.poisson = cfg.poisson;
    scfg.overlap = cfg.overlap;
    scfg.cfl_warn = cfg.cfl_warn;

    FlowSolver solver(mesh, dist, ctx, scfg, cfg.bc, bodies, std::move(store));

    if (!opt.restart_path.empty()) {
      CheckpointData data = read_checkpoint(opt.restart_path, ctx.n_ranks, ctx.rank);
      if (data.mesh.num_cubes() != mesh.num_cubes() ||
          data.mesh.n_cells_per_edge != mesh.n_cells_per_edge)
        throw IoError("restart: checkpoint mesh does not match the configured mesh");
      load_state(solver, std::move(data));
    } else {
      fill_velocity(solver.u, cfg.initial_velocity);
    }

    if (am0) {
      forces_csv.open(cfg.out_dir + "/forces.csv");
      forces_csv << "t,Fx,Fy,Fz,Fnx,Fny,Fnz\n";
      balance_csv.open(cfg.out_dir + "/balance.csv");
      balance_csv << "step,ratio_pre,ratio_post,fired,cubes_moved,bytes_moved,edge_cut,W\n";
      logf.open(cfg.out_dir + "/log.txt");
      logf << describe_config(cfg) << mesh_stats(mesh);
    }
    transport.barrier();

    write_state_checkpoint(solver, cfg,
                           cfg.out_dir + "/checkpoints/step_" +
                               std::to_string(solver.step_index) + ".ckpt");

    uint64_t redist_epoch = 0;
    int64_t last_ckpt_step = solver.step_index;
    for (int64_t s = 0; s < steps; ++s) {
      const auto t0 = std::chrono::steady_clock::now();
      solver.step();
      if (!std::isfinite(solver.diag.cfl))
        throw NumericsError("non-finite state at step " + std::to_string(solver.step_index));

      if (cfg.output_every <= 1 || solver.step_index % cfg.output_every == 0) {
        if (am0) {
          const auto& d = solver.diag;
          forces_csv << fmt_g17(solver.time) << "," << fmt_g17(d.body_force.x) << ","
                     << fmt_g17(d.body_force.y) << "," << fmt_g17(d.body_force.z) << ","
                     << fmt_g17(d.body_force_normalized.x) << ","
                     << fmt_g17(d.body_force_normalized.y) << ","
                     << fmt_g17(d.body_force_normalized.z) << "\n";
        }
      }

      if (cfg.balance_enabled && cfg.balance.cadence > 0 &&
          solver.step_index % cfg.balance.cadence == 0) {
        const auto counts =
            global_particle_counts(solver.store, mesh, solver.imap(), solver.collectives());
        const DualGraph graph = build_graph(mesh, counts, cfg.balance);
        const BalanceDecision decision = plan_rebalance(graph, solver.dist, cfg.balance);
        int64_t bytes_moved = 0;
        if (decision.fired) {
          std::vector<const Field*> fields;
          for (Field* f : solver.state_fields()) fields.push_back(f);
          auto moved = redistribute(solver.dist, decision.new_dist, fields, solver.store,
                                    transport, ctx.rank, redist_epoch++);
          bytes_moved = solver.collectives().sum_int(moved.bytes_moved);
          solver.adopt_distribution(decision.new_dist, std::move(moved.field_payloads),
                                    std::move(moved.particles));
        }
        if (am0) {
          const auto est = estimate_imbalance(graph, solver.dist);
          balance_csv << solver.step_index << "," << fmt_g17(decision.pre_ratio) << ","
                      << fmt_g17(decision.post_ratio) << "," << (decision.fired ? 1 : 0) << ","
                      << decision.cubes_moved << "," << bytes_moved << ","
                      << fmt_g17(decision.cut);
          for (double w : est.per_rank) balance_csv << "," << fmt_g17(w);
          balance_csv << "\n";
        }
      }

      if (cfg.checkpoint_every > 0 && solver.step_index % cfg.checkpoint_every == 0) {
        write_state_checkpoint(solver, cfg,
                               cfg.out_dir + "/checkpoints/step_" +
                                   std::to_string(solver.step_index) + ".ckpt");
        last_ckpt_step = solver.step_index;
      }

      if (am0) {
        const auto dt_wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        logf << "step " << solver.step_index << " t " << solver.time << " cfl " << solver.diag.cfl
             << " vcycles " << solver.diag.poisson.vcycles << " resid "
             << solver.diag.poisson.rel_residual2 << " wall " << dt_wall << "\n";
        if (solver.diag.cfl_exceeded)
          logf << "warning: CFL " << solver.diag.cfl << " above " << cfg.cfl_warn << " at step "
               << solver.step_index << "\n";
        if (!solver.diag.poisson.converged)
          logf << "warning: Poisson V-cycle cap reached at step " << solver.step_index
               << " (relative residual " << solver.diag.poisson.rel_residual2 << ")\n";
      }
    }

    if (solver.step_index != last_ckpt_step || steps == 0) {
      if (steps > 0)
        write_state_checkpoint(solver, cfg,
                               cfg.out_dir + "/checkpoints/step_" +
                                   std::to_string(solver.step_index) + ".ckpt");
    }

    if (callbacks.after_run) callbacks.after_run(solver);
    {
      std::lock_guard lk(io_mtx);  // flush once per rank exit
    }
    transport.barrier();
  });
  out << "run complete: " << steps << " steps, output in " << cfg.out_dir << "\n";
}

}  // namespace

void run_case(const CaseConfig& cfg, const RunOptions& opt, std::ostream& out) {
  simulate(cfg, opt, out, {});
}

CaseConfig sphere_case_config() {
  CaseConfig cfg;
  cfg.mesh.domain = {{-8, -8, -8}, {8, 8, 8}};
  cfg.mesh.level0_tiling = {5, 5, 5};
  cfg.mesh.n_cells_per_edge = 8;
  cfg.mesh.max_level = 3;
  cfg.mesh.refine_boxes = {
      {{{-2.6, -2.6, -2.6}, {4.2, 2.6, 2.6}}, 1},
      {{{-1.8, -1.8, -1.8}, {3.0, 1.8, 1.8}}, 2},
      {{{-1.0, -1.2, -1.2}, {2.4, 1.2, 1.2}}, 3},
  };
  cfg.rho = 1.0;
  cfg.mu = 0.01;  // Re = U D / nu = 100
  cfg.dt = 0.02;
  cfg.t_end = 30.0;
  cfg.integrator = Integrator::ab2;
  cfg.bc.kind = {BcKind::inflow, BcKind::outflow, BcKind::slip,
                 BcKind::slip,   BcKind::slip,    BcKind::slip};
  cfg.bc.inflow[0] = {1, 0, 0};
  cfg.initial_velocity = {1, 0, 0};
  BodySpec body;
  body.sphere = {{0, 0, 0, 1.0, 4}};
  cfg.bodies.push_back(body);
  cfg.poisson.tol = 1e-6;
  cfg.output_every = 10;
  cfg.out_dir = "run_sphere";
  return cfg;
}

SphereValidation run_sphere_validation(const CaseConfig& cfg, std::ostream& log) {
  SphereValidation result;
  std::mutex mtx;
  LoopCallbacks cb;
  cb.after_run = [&](FlowSolver& solver) {
    const double dx = 0.05;
    const double y_off = dx / 2.0;

    // Axial scan behind the sphere for the reversed-flow extent.
    std::vector<Vec3> axis_pts;
    for (double x = 0.5 + dx / 2; x < 4.0; x += dx / 2)
      axis_pts.push_back({x, y_off, y_off});
    const auto axis_u = solver.sample_velocities_collective(axis_pts);

    double x_reattach = 0.5;
    bool found = false;
    for (size_t i = 0; i + 1 < axis_pts.size(); ++i) {
      if (axis_u[i].x < 0.0) {
        found = true;
        if (axis_u[i + 1].x >= 0.0) {
          const double f = axis_u[i].x / (axis_u[i].x - axis_u[i + 1].x);
          x_reattach = axis_pts[i].x + f * (axis_pts[i + 1].x - axis_pts[i].x);
        }
      }
    }

    // Meridional-plane stagnation point of the standing vortex ring.
    std::vector<Vec3> grid_pts;
    for (double x = 0.5 + dx / 2; x < std::max(x_reattach, 0.6); x += dx / 2)
      for (double y = y_off; y < 1.0; y += dx / 2) grid_pts.push_back({x, y, y_off});
    const auto grid_u = solver.sample_velocities_collective(grid_pts);
    double best = 1e300;
    Vec3 center{0, 0, 0};
    for (size_t i = 0; i < grid_pts.size(); ++i) {
      const double m = grid_u[i].x * grid_u[i].x + grid_u[i].y * grid_u[i].y;
      if (m < best) {
        best = m;
        center = grid_pts[i];
      }
    }

    const double cd =
        solver.diag.body_force.x / (0.5 * cfg.rho * 1.0 * 1.0 * M_PI * 0.25 * 1.0 * 1.0);
    if (solver.ctx.rank == 0) {
      std::lock_guard lk(mtx);
      result.recirculation_found = found;
      result.lb_over_d = x_reattach - 0.5;
      result.xc_over_d = center.x;
      result.yc_over_d = center.y;
      result.drag_coefficient = cd;
    }
  };
  RunOptions opt;
  simulate(cfg, opt, log, cb);
  return result;
}

std::vector<BalanceBenchRow> run_balance_report(int ranks, int threads, std::ostream& out) {
  std::vector<BalanceBenchRow> rows;
  auto base = []() {
    CaseConfig cfg;
    cfg.mesh.domain = {{0, 0, 0}, {8, 8, 8}};
    cfg.mesh.level0_tiling = {4, 4, 4};
    cfg.mesh.n_cells_per_edge = 8;
    cfg.mesh.max_level = 0;
    cfg.rho = 1.0;
    cfg.mu = 0.01;
    cfg.dt = 0.01;
    cfg.max_steps = 24;
    cfg.integrator = Integrator::euler;
    cfg.initial_velocity = {0.5, 0, 0};
    cfg.bc.kind = {BcKind::inflow, BcKind::outflow, BcKind::slip,
                   BcKind::slip,   BcKind::slip,    BcKind::slip};
    cfg.bc.inflow[0] = {0.5, 0, 0};
    BodySpec body;
    body.sphere = {{2.0, 2.0, 2.0, 3.0, 4}};  // clustered particles near one corner
    cfg.bodies.push_back(body);
    cfg.poisson.tol = 1e-5;
    cfg.balance.cadence = 8;
    cfg.output_every = 100;
    return cfg;
  };

  // Unbalanced timing baseline.
  double t_unbalanced;
  {
    CaseConfig cfg = base();
    cfg.ranks = ranks;
    cfg.threads = threads;
    cfg.balance_enabled = false;
    cfg.out_dir = "run_balance_off";
    const auto t0 = std::chrono::steady_clock::now();
    std::ostringstream sink;
    run_case(cfg, {}, sink);
    t_unbalanced = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() /
                   cfg.max_steps;
  }

  for (double gamma : {1.0, 2.0, 3.0, 4.0}) {
    CaseConfig cfg = base();
    cfg.ranks = ranks;
    cfg.threads = threads;
    cfg.balance_enabled = true;
    cfg.balance.gamma = gamma;
    cfg.out_dir = "run_balance_g" + std::to_string(static_cast<int>(gamma));

    BalanceBenchRow row;
    row.gamma = gamma;
    row.time_per_step_unbalanced = t_unbalanced;

    const auto t0 = std::chrono::steady_clock::now();
    std::ostringstream sink;
    run_case(cfg, {}, sink);
    row.time_per_step_balanced =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() /
        cfg.max_steps;

    // Pull the first balance-check row back out of the CSV.
    std::ifstream bal(cfg.out_dir + "/balance.csv");
    std::string line;
    std::getline(bal, line);  // header
    if (std::getline(bal, line)) {
      std::istringstream is(line);
      std::string tok;
      std::getline(is, tok, ',');  // step
      std::getline(is, tok, ',');
      row.pre_imbalance = std::stod(tok);
      std::getline(is, tok, ',');
      row.post_imbalance = std::stod(tok);
      std::getline(is, tok, ',');
      row.fired = tok == "1";
    }
    rows.push_back(row);
  }

  out << "gamma,pre_imbalance,post_imbalance,fired,t_step_unbalanced,t_step_balanced\n";
  for (const auto& r : rows)
    out << r.gamma << "," << r.pre_imbalance << "," << r.post_imbalance << "," << r.fired << ","
        << r.time_per_step_unbalanced << "," << r.time_per_step_balanced << "\n";
  return rows;
}

std::vector<CompressBenchRow> run_compress_bench(std::ostream& out) {
  std::vector<CompressBenchRow> rows;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);

  for (int n : {4, 8, 16}) {
    const int ext = n + 4;
    const int64_t count = static_cast<int64_t>(ext) * ext * ext;
    std::vector<double> smooth(count), noise(count);
    const double a = uni(rng), b = uni(rng), c = uni(rng), d = uni(rng);
    for (int i = 0; i < ext; ++i)
      for (int j = 0; j < ext; ++j)
        for (int k = 0; k < ext; ++k) {
          const double x = i / double(ext), y = j / double(ext), z = k / double(ext);
          smooth[(static_cast<int64_t>(i) * ext + j) * ext + k] =
              a + b * x + c * y + d * z + 0.3 * std::sin(3.0 * x) * std::cos(2.0 * y + z);
          noise[(static_cast<int64_t>(i) * ext + j) * ext + k] = uni(rng);
        }

    auto measure = [&](const std::vector<double>& data, double rel_tol) {
      CompressBenchRow row;
      row.cells_per_edge = n;
      row.rel_tolerance = rel_tol;
      double lo = data[0], hi = data[0];
      for (double v : data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      const double range = std::max(hi - lo, 1e-30);
      std::vector<uint8_t> stream;
      if (rel_tol == 0.0) {
        stream = compress_cube(data, ext, 1, CompressionMode::lossless, 0.0);
      } else {
        stream = compress_cube(data, ext, 1, CompressionMode::lossy,
                               quant_step_for_tolerance(rel_tol * range));
      }
      const auto back = decompress_cube(stream, ext, 1);
      double max_err = 0.0;
      for (size_t i = 0; i < data.size(); ++i)
        max_err = std::max(max_err, std::abs(back[i] - data[i]));
      row.max_rel_error = max_err / range;
      row.ratio = static_cast<double>(count * sizeof(double)) / stream.size();
      return row;
    };

    rows.push_back(measure(smooth, 0.0));
    for (double tol : {1e-2, 1e-3, 1e-4, 1e-5}) rows.push_back(measure(smooth, tol));
    auto noisy = measure(noise, 1e-4);
    noisy.cells_per_edge = -n;  // white-noise rows marked negative
    rows.push_back(noisy);
  }

  out << "cells_per_edge,rel_tolerance,ratio,max_rel_error\n";
  for (const auto& r : rows)
    out << r.cells_per_edge << "," << r.rel_tolerance << "," << r.ratio << "," << r.max_rel_error
        << "\n";
  return rows;
}

}  // namespace bcm

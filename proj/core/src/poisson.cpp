#include "bcm/poisson.hpp"

#include <cmath>

namespace bcm {

PoissonSolver::PoissonSolver(const BcmMesh& mesh, const Distribution& dist, HaloExchanger& ex,
                             Collectives& coll, PoissonConfig cfg)
    : mesh_(mesh), dist_(dist), ex_(ex), coll_(coll), cfg_(cfg) {
  const auto& imap = ex.index_map();
  const int n_local = static_cast<int>(imap.local_to_global.size());
  levels_.resize(ex.depths());
  for (int d = 0; d < ex.depths(); ++d) {
    Level& lv = levels_[d];
    lv.n = mesh.n_cells_per_edge >> d;
    lv.p = Field(Quantity::scratch, 1, lv.n, 2, n_local);
    lv.rhs = Field(Quantity::scratch, 1, lv.n, 2, n_local);
    lv.res = Field(Quantity::scratch, 1, lv.n, 2, n_local);
    lv.tmp = Field(Quantity::scratch, 1, lv.n, 2, n_local);
    lv.inv_h2.resize(n_local);
    lv.cell_vol.resize(n_local);
    for (int lc = 0; lc < n_local; ++lc) {
      const Cube& cube = mesh.cubes[imap.local_to_global[lc]];
      const double h = mesh.edge_length(cube) / lv.n;
      lv.inv_h2[lc] = 1.0 / (h * h);
      lv.cell_vol[lc] = h * h * h;
    }
  }
  face_scale_.resize(n_local);
  for (int lc = 0; lc < n_local; ++lc) {
    const Cube& cube = mesh.cubes[imap.local_to_global[lc]];
    for (int f = 0; f < kNumFaces; ++f) {
      double s = 1.0;
      if (cube.neighbors[f].kind == FaceKind::coarser) s = 2.0 / 3.0;
      if (cube.neighbors[f].kind == FaceKind::finer) s = 4.0 / 3.0;
      face_scale_[lc][f] = s;
    }
  }
}

void PoissonSolver::sweep_cubes(int d, std::span<const int32_t> locals, const Field& src,
                                Field& dst) {
  Level& lv = levels_[d];
  const int n = lv.n;
  const double w = cfg_.jacobi_omega;
  for (int32_t lc : locals) {
    const double ih2 = lv.inv_h2[lc];
    const auto& fs = face_scale_[lc];
    const double diag = fs[0] + fs[1] + fs[2] + fs[3] + fs[4] + fs[5];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
          const double nb = fs[0] * src.at(lc, 0, i - 1, j, k) +
                            fs[1] * src.at(lc, 0, i + 1, j, k) +
                            fs[2] * src.at(lc, 0, i, j - 1, k) +
                            fs[3] * src.at(lc, 0, i, j + 1, k) +
                            fs[4] * src.at(lc, 0, i, j, k - 1) +
                            fs[5] * src.at(lc, 0, i, j, k + 1);
          const double pc = src.at(lc, 0, i, j, k);
          const double gs = (nb - lv.rhs.at(lc, 0, i, j, k) / ih2) / diag;
          dst.at(lc, 0, i, j, k) = pc + w * (gs - pc);
        }
  }
}

void PoissonSolver::smooth(int d, int sweeps, bool overlap, WorkerPool* pool) {
  Level& lv = levels_[d];
  const ExchangePlan& plan = ex_.plan(d);
  const int n_local = lv.p.local_cubes();
  std::vector<int32_t> all(n_local);
  for (int i = 0; i < n_local; ++i) all[i] = i;

  for (int s = 0; s < sweeps; ++s) {
    if (overlap) {
      ExchangeToken tok = ex_.begin(lv.p, neumann_, d, pool, InterfaceAvg::first_layer);
      auto run = [&](const std::vector<int32_t>& locals) {
        if (pool)
          pool->parallel_for(static_cast<int64_t>(locals.size()), [&](int64_t idx) {
            sweep_cubes(d, std::span(&locals[idx], 1), lv.p, lv.tmp);
          });
        else
          sweep_cubes(d, locals, lv.p, lv.tmp);
      };
      run(plan.internal_locals);
      ex_.finalize(tok, pool);
      run(plan.external_locals);
    } else {
      ex_.exchange(lv.p, neumann_, d, pool, InterfaceAvg::first_layer);
      if (pool)
        pool->parallel_for(n_local, [&](int64_t lc) {
          const int32_t l = static_cast<int32_t>(lc);
          sweep_cubes(d, std::span(&l, 1), lv.p, lv.tmp);
        });
      else
        sweep_cubes(d, all, lv.p, lv.tmp);
    }
    std::swap(lv.p, lv.tmp);
  }
}

void PoissonSolver::residual(int d, WorkerPool* pool) {
  Level& lv = levels_[d];
  const int n = lv.n;
  ex_.exchange(lv.p, neumann_, d, pool, InterfaceAvg::first_layer);
  auto kernel = [&](int64_t lc) {
    const double ih2 = lv.inv_h2[lc];
    const auto& fs = face_scale_[lc];
    const double diag = fs[0] + fs[1] + fs[2] + fs[3] + fs[4] + fs[5];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
          const double lap = (fs[0] * lv.p.at(lc, 0, i - 1, j, k) +
                              fs[1] * lv.p.at(lc, 0, i + 1, j, k) +
                              fs[2] * lv.p.at(lc, 0, i, j - 1, k) +
                              fs[3] * lv.p.at(lc, 0, i, j + 1, k) +
                              fs[4] * lv.p.at(lc, 0, i, j, k - 1) +
                              fs[5] * lv.p.at(lc, 0, i, j, k + 1) -
                              diag * lv.p.at(lc, 0, i, j, k)) *
                             ih2;
          lv.res.at(lc, 0, i, j, k) = lv.rhs.at(lc, 0, i, j, k) - lap;
        }
  };
  if (pool)
    pool->parallel_for(lv.p.local_cubes(), kernel);
  else
    for (int lc = 0; lc < lv.p.local_cubes(); ++lc) kernel(lc);
}

void PoissonSolver::restrict_to(int d, WorkerPool* pool) {
  Level& fine = levels_[d];
  Level& coarse = levels_[d + 1];
  const int nc = coarse.n;
  auto kernel = [&](int64_t lc) {
    for (int i = 0; i < nc; ++i)
      for (int j = 0; j < nc; ++j)
        for (int k = 0; k < nc; ++k) {
          double s = 0.0;
          for (int di = 0; di < 2; ++di)
            for (int dj = 0; dj < 2; ++dj)
              for (int dk = 0; dk < 2; ++dk)
                s += fine.res.at(lc, 0, 2 * i + di, 2 * j + dj, 2 * k + dk);
          coarse.rhs.at(lc, 0, i, j, k) = 0.125 * s;
        }
  };
  if (pool)
    pool->parallel_for(coarse.rhs.local_cubes(), kernel);
  else
    for (int lc = 0; lc < coarse.rhs.local_cubes(); ++lc) kernel(lc);
}

void PoissonSolver::prolong_add(int d, WorkerPool* pool) {
  Level& fine = levels_[d];
  Level& coarse = levels_[d + 1];
  ex_.exchange(coarse.p, neumann_, d + 1, pool, InterfaceAvg::first_layer);
  const int nf = fine.n;
  auto kernel = [&](int64_t lc) {
    for (int i = 0; i < nf; ++i)
      for (int j = 0; j < nf; ++j)
        for (int k = 0; k < nf; ++k) {
          const int ci = i >> 1, cj = j >> 1, ck = k >> 1;
          const int si = (i & 1) ? 1 : -1, sj = (j & 1) ? 1 : -1, sk = (k & 1) ? 1 : -1;
          // Trilinear: 3/4 toward the containing coarse cell per axis.
          double v = 0.0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int c = 0; c < 2; ++c) {
                const double w = (a ? 0.25 : 0.75) * (b ? 0.25 : 0.75) * (c ? 0.25 : 0.75);
                v += w * coarse.p.at(lc, 0, ci + a * si, cj + b * sj, ck + c * sk);
              }
          fine.p.at(lc, 0, i, j, k) += v;
        }
  };
  if (pool)
    pool->parallel_for(fine.p.local_cubes(), kernel);
  else
    for (int lc = 0; lc < fine.p.local_cubes(); ++lc) kernel(lc);
}

double PoissonSolver::subtract_volume_mean(Field& f, int d) {
  Level& lv = levels_[d];
  const auto& imap = ex_.index_map();
  const int n = lv.n;
  std::vector<double> sums(f.local_cubes(), 0.0), vols(f.local_cubes(), 0.0);
  for (int lc = 0; lc < f.local_cubes(); ++lc) {
    double s = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) s += f.at(lc, 0, i, j, k);
    sums[lc] = s * lv.cell_vol[lc];
    vols[lc] = lv.cell_vol[lc] * n * n * n;
  }
  const double total = coll_.sum_ordered(imap.local_to_global, sums, mesh_.num_cubes());
  const double vol = coll_.sum_ordered(imap.local_to_global, vols, mesh_.num_cubes());
  const double mean = vol > 0 ? total / vol : 0.0;
  for (int lc = 0; lc < f.local_cubes(); ++lc)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) f.at(lc, 0, i, j, k) -= mean;
  return mean;
}

void PoissonSolver::coarse_cg(WorkerPool* pool) {
  const int d = static_cast<int>(levels_.size()) - 1;
  Level& lv = levels_[d];
  const auto& imap = ex_.index_map();
  const int n = lv.n;
  const int n_local = lv.p.local_cubes();
  const int64_t cells = static_cast<int64_t>(n) * n * n;

  subtract_volume_mean(lv.rhs, d);

  // x = p (initial 0 set by caller), r = rhs - A x = rhs, q = A s.
  Field r = lv.rhs, s = lv.rhs, q(Quantity::scratch, 1, n, 2, n_local);

  auto dot = [&](const Field& a, const Field& b) {
    std::vector<double> partial(n_local, 0.0);
    for (int lc = 0; lc < n_local; ++lc) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          for (int k = 0; k < n; ++k) acc += a.at(lc, 0, i, j, k) * b.at(lc, 0, i, j, k);
      partial[lc] = acc;
    }
    return coll_.sum_ordered(imap.local_to_global, partial, mesh_.num_cubes());
  };
  auto apply_a = [&](Field& x, Field& out) {
    ex_.exchange(x, neumann_, d, pool, InterfaceAvg::first_layer);
    for (int lc = 0; lc < n_local; ++lc) {
      const double ih2 = lv.inv_h2[lc];
      const auto& fs = face_scale_[lc];
      const double diag = fs[0] + fs[1] + fs[2] + fs[3] + fs[4] + fs[5];
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          for (int k = 0; k < n; ++k)
            out.at(lc, 0, i, j, k) =
                (fs[0] * x.at(lc, 0, i - 1, j, k) + fs[1] * x.at(lc, 0, i + 1, j, k) +
                 fs[2] * x.at(lc, 0, i, j - 1, k) + fs[3] * x.at(lc, 0, i, j + 1, k) +
                 fs[4] * x.at(lc, 0, i, j, k - 1) + fs[5] * x.at(lc, 0, i, j, k + 1) -
                 diag * x.at(lc, 0, i, j, k)) *
                ih2;
    }
  };

  double rr = dot(r, r);
  const double rr0 = rr;
  if (rr == 0.0) return;
  for (int it = 0; it < cfg_.coarse_cg_cap; ++it) {
    apply_a(s, q);
    const double sq = dot(s, q);
    if (sq == 0.0) break;
    const double alpha = rr / sq;
    for (int lc = 0; lc < n_local; ++lc)
      for (int64_t idx = 0; idx < cells; ++idx) {
        const int i = static_cast<int>(idx / (n * n)), j = static_cast<int>((idx / n) % n),
                  k = static_cast<int>(idx % n);
        lv.p.at(lc, 0, i, j, k) += alpha * s.at(lc, 0, i, j, k);
        r.at(lc, 0, i, j, k) -= alpha * q.at(lc, 0, i, j, k);
      }
    const double rr_new = dot(r, r);
    if (rr_new <= 1e-24 * rr0) break;
    const double beta = rr_new / rr;
    rr = rr_new;
    for (int lc = 0; lc < n_local; ++lc)
      for (int64_t idx = 0; idx < cells; ++idx) {
        const int i = static_cast<int>(idx / (n * n)), j = static_cast<int>((idx / n) % n),
                  k = static_cast<int>(idx % n);
        s.at(lc, 0, i, j, k) = r.at(lc, 0, i, j, k) + beta * s.at(lc, 0, i, j, k);
      }
  }
}

void PoissonSolver::vcycle(int d, bool overlap, WorkerPool* pool) {
  if (d == static_cast<int>(levels_.size()) - 1) {
    if (levels_.size() == 1) {
      // Single-depth meshes (n = 2): smooth instead of recursing.
      smooth(d, cfg_.pre_sweeps + cfg_.post_sweeps, overlap, pool);
      return;
    }
    levels_[d].p.fill(0.0);
    coarse_cg(pool);
    return;
  }
  smooth(d, cfg_.pre_sweeps, overlap, pool);
  residual(d, pool);
  restrict_to(d, pool);
  if (d + 1 < static_cast<int>(levels_.size()) - 1) levels_[d + 1].p.fill(0.0);
  vcycle(d + 1, overlap, pool);
  prolong_add(d, pool);
  smooth(d, cfg_.post_sweeps, overlap, pool);
}

PoissonStats PoissonSolver::solve(Field& p, const Field& rhs, bool overlap, WorkerPool* pool) {
  Level& lv0 = levels_[0];
  const auto& imap = ex_.index_map();
  const int n = lv0.n;
  const int n_local = p.local_cubes();

  lv0.rhs = rhs;
  subtract_volume_mean(lv0.rhs, 0);
  lv0.p = p;

  auto norms = [&](const Field& f, double& n2, double& ninf) {
    std::vector<double> sq(n_local, 0.0), mx(n_local, 0.0);
    for (int lc = 0; lc < n_local; ++lc) {
      double s = 0.0, m = 0.0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          for (int k = 0; k < n; ++k) {
            const double v = f.at(lc, 0, i, j, k);
            s += v * v;
            m = std::max(m, std::abs(v));
          }
      sq[lc] = s;
      mx[lc] = m;
    }
    n2 = std::sqrt(coll_.sum_ordered(imap.local_to_global, sq, mesh_.num_cubes()));
    double local_max = 0.0;
    for (double v : mx) local_max = std::max(local_max, v);
    ninf = coll_.max_all(local_max);
  };

  PoissonStats stats;
  double rhs2, rhsinf;
  norms(lv0.rhs, rhs2, rhsinf);
  if (rhs2 == 0.0) {
    // Null right-hand side: the zero-mean representative of the constant family.
    p.fill(0.0);
    ex_.exchange(p, neumann_, 0, pool);
    stats.converged = true;
    return stats;
  }

  double prev_r2 = rhs2;
  for (int cycle = 0; cycle < cfg_.max_vcycles; ++cycle) {
    vcycle(0, overlap, pool);
    residual(0, pool);
    double r2, rinf;
    norms(lv0.res, r2, rinf);
    stats.vcycles = cycle + 1;
    stats.rel_residual2 = r2 / rhs2;
    stats.rel_residual_inf = rhsinf > 0 ? rinf / rhsinf : 0.0;
    stats.last_reduction = prev_r2 > 0 ? r2 / prev_r2 : 0.0;
    prev_r2 = r2;
    if (stats.rel_residual2 <= cfg_.tol && stats.rel_residual_inf <= cfg_.tol) {
      stats.converged = true;
      break;
    }
  }

  subtract_volume_mean(lv0.p, 0);
  p = lv0.p;
  ex_.exchange(p, neumann_, 0, pool);
  return stats;
}

double PoissonSolver::residual_inf(Field& p, const Field& rhs, WorkerPool* pool) {
  levels_[0].rhs = rhs;
  levels_[0].p = p;
  residual(0, pool);
  const int n = levels_[0].n;
  double m = 0.0;
  for (int lc = 0; lc < p.local_cubes(); ++lc)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) m = std::max(m, std::abs(levels_[0].res.at(lc, 0, i, j, k)));
  return coll_.max_all(m);
}

}  // namespace bcm

#pragma once

#include "bcm/halo.hpp"

namespace bcm {

struct PoissonConfig {
  double tol = 1e-8;          // relative residual (2-norm and inf-norm)
  int max_vcycles = 50;
  int coarse_cg_cap = 10;     // CG iterations on the coarsest per-cube grid
  int pre_sweeps = 3;
  int post_sweeps = 3;
  double jacobi_omega = 6.0 / 7.0;
};

struct PoissonStats {
  int vcycles = 0;
  double rel_residual2 = 0.0;
  double rel_residual_inf = 0.0;
  bool converged = false;
  double last_reduction = 0.0;  // residual reduction factor of the final cycle
};

/// Geometric multigrid for the pressure Poisson equation, coarsened on a
/// per-cube basis (every cube's cells halve per depth, down to 2^3), so the
/// cube-to-cube communication pattern is identical on all depths. Damped
/// Jacobi smoothing with a halo exchange per sweep; the coarsest level is
/// solved by conjugate gradient with a fixed iteration cap. All reductions
/// are deterministic ordered sums, so results are independent of rank count.
///
/// Refinement interfaces use flux-matched coupling (first-layer halo
/// averages and a 1.5 h center distance), which keeps the operator
/// conservative and symmetric, so the all-Neumann problem stays compatible
/// after the volume-weighted mean subtraction.
class PoissonSolver {
public:
  PoissonSolver(const BcmMesh& mesh, const Distribution& dist, HaloExchanger& ex,
                Collectives& coll, PoissonConfig cfg);

  /// Solves lap(p) = rhs in place; p's initial content is the first guess.
  /// rhs is pre-balanced by subtracting its volume-weighted mean (the
  /// all-Neumann problem is singular); p's mean is pinned to zero and its
  /// halo is valid on return. Never throws on a missed tolerance: the cycle
  /// cap is reported in the stats and counted by the caller.
  PoissonStats solve(Field& p, const Field& rhs, bool overlap, WorkerPool* pool);

  /// Residual infinity-norm of lap(p) = rhs with current halos (diagnostics).
  double residual_inf(Field& p, const Field& rhs, WorkerPool* pool);

private:
  struct Level {
    int n = 0;
    Field p, rhs, res, tmp;
    std::vector<double> inv_h2;  // per local cube: 1/dx^2 at this depth
    std::vector<double> cell_vol;
  };

  // Per-face flux scale making the operator conservative and symmetric
  // across refinement interfaces: 1 within a level, 2/3 on the fine side of
  // an interface (1.5 h center distance), 4/3 on the coarse side (paired
  // with first-layer halo averages). Depth-independent.
  std::vector<std::array<double, kNumFaces>> face_scale_;

  void smooth(int d, int sweeps, bool overlap, WorkerPool* pool);
  void residual(int d, WorkerPool* pool);  // res = rhs - lap(p), exchanges p
  void restrict_to(int d, WorkerPool* pool);
  void prolong_add(int d, WorkerPool* pool);
  void coarse_cg(WorkerPool* pool);
  void vcycle(int d, bool overlap, WorkerPool* pool);
  double subtract_volume_mean(Field& f, int d);
  void sweep_cubes(int d, std::span<const int32_t> locals, const Field& src, Field& dst);

  const BcmMesh& mesh_;
  const Distribution& dist_;
  HaloExchanger& ex_;
  Collectives& coll_;
  PoissonConfig cfg_;
  std::vector<Level> levels_;
  FieldBc neumann_;
};

}  // namespace bcm

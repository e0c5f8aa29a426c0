#pragma once

#include <iostream>

#include "bcm/config.hpp"

namespace bcm {

struct RunOptions {
  bool dry_run = false;
  std::string restart_path;  // resume from this checkpoint when non-empty
};

/// Executes the batch time loop described by the config: mesh generation,
/// rank harness, per-step force CSV, periodic checkpoints, balance checks.
/// Deterministic for fixed (config, seed, ranks, threads). Output layout:
/// out_dir/{forces.csv, balance.csv, checkpoints/step_<n>.ckpt, log.txt}.
/// Throws Error/NumericsError/IoError; the CLI maps them to exit codes.
void run_case(const CaseConfig& cfg, const RunOptions& opt, std::ostream& out);

/// The built-in desk-scale sphere benchmark configuration: Re = 100 sphere
/// of diameter 1 centered in a [-8, 8]^3 box, finest spacing 0.05 D.
CaseConfig sphere_case_config();

struct SphereValidation {
  double lb_over_d = 0.0;   // recirculation length from the rear stagnation point
  double xc_over_d = 0.0;   // vortex center, from the sphere center
  double yc_over_d = 0.0;   // vortex center, from the axis
  double drag_coefficient = 0.0;
  double metric_drift = 0.0;  // |L_b(t_end) - L_b(0.9 t_end)|
  bool recirculation_found = false;
};

/// Runs the sphere case and measures the steady wake bubble: downstream
/// extent of reversed axial flow on the axis and the meridional-plane
/// stagnation point of the standing vortex ring.
SphereValidation run_sphere_validation(const CaseConfig& cfg, std::ostream& log);

struct BalanceBenchRow {
  double gamma = 0.0;
  double pre_imbalance = 0.0;
  double post_imbalance = 0.0;
  bool fired = false;
  double time_per_step_unbalanced = 0.0;
  double time_per_step_balanced = 0.0;
};

/// Synthetic clustered-particle suite across gamma in {1,2,3,4}: per-gamma
/// estimated imbalance before/after balancing plus wall time per step.
std::vector<BalanceBenchRow> run_balance_report(int ranks, int threads, std::ostream& out);

struct CompressBenchRow {
  int cells_per_edge = 0;
  double rel_tolerance = 0.0;  // 0 = lossless
  double ratio = 0.0;
  double max_rel_error = 0.0;
};

/// Compression ratio/error table over cells-per-cube x tolerance on smooth
/// synthetic fields, plus a white-noise row per size.
std::vector<CompressBenchRow> run_compress_bench(std::ostream& out);

}  // namespace bcm

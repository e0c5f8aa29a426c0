#pragma once

#include <optional>
#include <string>

#include "bcm/io.hpp"
#include "bcm/loadbalance.hpp"
#include "bcm/solver.hpp"

namespace bcm {

/// One body entry of the case file: either an STL path or the built-in
/// sphere tessellation, plus the prescribed-motion parameters.
struct BodySpec {
  std::string stl_path;                  // empty when using the built-in sphere
  std::optional<std::array<double, 5>> sphere;  // cx, cy, cz, diameter, subdivisions
  Vec3 center;
  Vec3 linear_velocity;
  Vec3 angular_velocity;
  bool has_ramp = false;
  double ramp_alpha = 0.0;
  double ramp_t0 = 0.0;
};

/// Full case description; every run-affecting knob lives here so a config
/// plus (seed, ranks, threads) pins the run.
struct CaseConfig {
  MeshSpec mesh;

  double rho = 1.0;
  double mu = 0.0;

  double dt = 0.01;
  double t_end = 0.0;
  int64_t max_steps = -1;  // overrides t_end when >= 0
  Integrator integrator = Integrator::ab2;

  DomainBc bc;
  Vec3 initial_velocity;

  std::vector<BodySpec> bodies;

  PoissonConfig poisson;
  double cfl_warn = 0.8;

  BalanceConfig balance;
  bool balance_enabled = false;

  int ranks = 1;
  int threads = 1;
  uint64_t seed = 0;
  int transport_delay = 0;  // max random delivery delay in polls (testing)
  bool overlap = true;

  std::string out_dir = "run";
  int64_t output_every = 0;      // force-CSV cadence (0 = every step)
  int64_t checkpoint_every = 0;  // 0 = only final
  CompressionMode checkpoint_mode = CompressionMode::lossless;
  double checkpoint_tolerance = 1e-4;  // relative to field range, lossy mode
};

/// Parses the nested key/value case file. Unknown keys and malformed values
/// are rejected with a diagnostic naming the line.
CaseConfig parse_config(const std::string& text);
CaseConfig load_config_file(const std::string& path);

/// Builds the runtime bodies (reads STL / tessellates spheres).
std::vector<RigidBody> make_bodies(const CaseConfig& cfg);

/// Validation: positive caps/tolerances, referenced files exist. Throws.
void validate_config(const CaseConfig& cfg);

std::string describe_config(const CaseConfig& cfg);

}  // namespace bcm

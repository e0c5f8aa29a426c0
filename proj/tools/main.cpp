#include <CLI11.hpp>
#include <iostream>

#include "bcm/driver.hpp"

using namespace bcm;

namespace {

struct GlobalFlags {
  int ranks = -1;
  int threads = -1;
  int64_t seed = -1;
  std::string overlap;  // on|off
  std::string balance;  // on|off
  bool dry_run = false;
};

void apply_overrides(CaseConfig& cfg, const GlobalFlags& g) {
  if (g.ranks > 0) cfg.ranks = g.ranks;
  if (g.threads > 0) cfg.threads = g.threads;
  if (g.seed >= 0) cfg.seed = static_cast<uint64_t>(g.seed);
  if (g.overlap == "on") cfg.overlap = true;
  if (g.overlap == "off") cfg.overlap = false;
  if (g.balance == "on") cfg.balance_enabled = true;
  if (g.balance == "off") cfg.balance_enabled = false;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Building-cube incompressible flow solver with immersed boundaries"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  GlobalFlags g;
  app.add_option("--ranks", g.ranks, "Rank count (overrides config)");
  app.add_option("--threads", g.threads, "Worker threads per rank (overrides config)");
  app.add_option("--seed", g.seed, "Run seed (overrides config)");
  app.add_option("--overlap", g.overlap, "on|off: overlapped halo exchange")
      ->check(CLI::IsMember({"on", "off"}));
  app.add_option("--balance", g.balance, "on|off: dynamic load balancing")
      ->check(CLI::IsMember({"on", "off"}));
  app.add_flag("--dry-run", g.dry_run, "Validate config and print the plan without compute");

  std::string config_path, restart_path, out_dir;

  auto* run = app.add_subcommand("run", "Run a case");
  run->add_option("--config", config_path, "Case file")->required();
  run->add_option("--restart", restart_path, "Checkpoint to resume from");

  auto* sphere = app.add_subcommand("validate-sphere", "Re=100 sphere wake validation");
  double sphere_t_end = -1.0;
  sphere->add_option("--config", config_path, "Case file overriding the built-in setup");
  sphere->add_option("--t-end", sphere_t_end, "Override end time");
  sphere->add_option("--out", out_dir, "Output directory");

  auto* balance = app.add_subcommand("balance-report", "Clustered-particle balancing sweep");
  auto* compress = app.add_subcommand("compress-bench", "Compression ratio/error table");
  auto* stats = app.add_subcommand("mesh-stats", "Mesh statistics for a case");
  stats->add_option("--config", config_path, "Case file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (run->parsed()) {
      CaseConfig cfg = load_config_file(config_path);
      apply_overrides(cfg, g);
      RunOptions opt;
      opt.dry_run = g.dry_run;
      opt.restart_path = restart_path;
      run_case(cfg, opt, std::cout);
    } else if (sphere->parsed()) {
      CaseConfig cfg = config_path.empty() ? sphere_case_config() : load_config_file(config_path);
      apply_overrides(cfg, g);
      if (sphere_t_end > 0) cfg.t_end = sphere_t_end;
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      if (g.dry_run) {
        RunOptions opt;
        opt.dry_run = true;
        run_case(cfg, opt, std::cout);
        return 0;
      }
      const SphereValidation v = run_sphere_validation(cfg, std::cout);
      std::cout << "L_b/D  = " << v.lb_over_d << "  (target 0.794 +- 0.12)\n";
      std::cout << "x_c/D  = " << v.xc_over_d << "  (target 0.729 +- 0.10)\n";
      std::cout << "y_c/D  = " << v.yc_over_d << "  (target 0.288 +- 0.10)\n";
      std::cout << "Cd     = " << v.drag_coefficient << "  (literature ~1.09)\n";
      const bool pass = v.recirculation_found && std::abs(v.lb_over_d - 0.794) <= 0.12 &&
                        std::abs(v.xc_over_d - 0.729) <= 0.10 &&
                        std::abs(v.yc_over_d - 0.288) <= 0.10;
      std::cout << (pass ? "PASS" : "FAIL") << "\n";
      return pass ? 0 : 2;
    } else if (balance->parsed()) {
      if (g.dry_run) {
        std::cout << "dry run: balance-report sweeps gamma in {1,2,3,4} on the synthetic case\n";
        return 0;
      }
      run_balance_report(g.ranks > 0 ? g.ranks : 4, g.threads > 0 ? g.threads : 1, std::cout);
    } else if (compress->parsed()) {
      if (g.dry_run) {
        std::cout << "dry run: compress-bench covers cells {4,8,16} x tolerances\n";
        return 0;
      }
      run_compress_bench(std::cout);
    } else if (stats->parsed()) {
      CaseConfig cfg = load_config_file(config_path);
      apply_overrides(cfg, g);
      validate_config(cfg);
      std::cout << mesh_stats(generate_mesh(cfg.mesh));
    }
  } catch (const NumericsError& e) {
    std::cerr << "numerics failure: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

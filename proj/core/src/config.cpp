#include "bcm/config.hpp"

#include <fstream>
#include <sstream>
#include <sys/stat.h>

namespace bcm {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

double to_num(const std::string& s, int line) {
  try {
    size_t pos;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (...) {
    throw Error("config line " + std::to_string(line) + ": bad number '" + s + "'");
  }
}

Vec3 to_vec3(const std::string& s, int line) {
  const auto w = split_ws(s);
  if (w.size() != 3) throw Error("config line " + std::to_string(line) + ": expected 3 numbers");
  return {to_num(w[0], line), to_num(w[1], line), to_num(w[2], line)};
}

bool to_bool(const std::string& s, int line) {
  if (s == "on" || s == "true" || s == "1") return true;
  if (s == "off" || s == "false" || s == "0") return false;
  throw Error("config line " + std::to_string(line) + ": expected on/off");
}

int face_index(const std::string& name, int line) {
  if (name == "xmin") return 0;
  if (name == "xmax") return 1;
  if (name == "ymin") return 2;
  if (name == "ymax") return 3;
  if (name == "zmin") return 4;
  if (name == "zmax") return 5;
  throw Error("config line " + std::to_string(line) + ": unknown face '" + name + "'");
}

}  // namespace

CaseConfig parse_config(const std::string& text) {
  CaseConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line = 0;
  bool body_open = false;

  auto current_body = [&]() -> BodySpec& {
    if (!body_open) throw Error("config line " + std::to_string(line) + ": key outside [body]");
    return cfg.bodies.back();
  };

  while (std::getline(in, raw)) {
    line++;
    std::string s = raw;
    if (const auto h = s.find('#'); h != std::string::npos) s = s.substr(0, h);
    s = trim(s);
    if (s.empty()) continue;

    if (s.front() == '[') {
      if (s.back() != ']') throw Error("config line " + std::to_string(line) + ": bad section");
      section = trim(s.substr(1, s.size() - 2));
      if (section == "body") {
        cfg.bodies.emplace_back();
        body_open = true;
      } else {
        body_open = false;
      }
      continue;
    }

    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw Error("config line " + std::to_string(line) + ": expected key = value");
    const std::string key = trim(s.substr(0, eq));
    const std::string val = trim(s.substr(eq + 1));

    if (section == "mesh") {
      if (key == "domain_min") cfg.mesh.domain.lo = to_vec3(val, line);
      else if (key == "domain_max") cfg.mesh.domain.hi = to_vec3(val, line);
      else if (key == "level0_tiling") {
        const Vec3 v = to_vec3(val, line);
        cfg.mesh.level0_tiling = {static_cast<int64_t>(v.x), static_cast<int64_t>(v.y),
                                  static_cast<int64_t>(v.z)};
      } else if (key == "cells_per_edge") cfg.mesh.n_cells_per_edge = static_cast<int>(to_num(val, line));
      else if (key == "max_level") cfg.mesh.max_level = static_cast<int>(to_num(val, line));
      else if (key == "refine_box") {
        const auto w = split_ws(val);
        if (w.size() != 7)
          throw Error("config line " + std::to_string(line) + ": refine_box wants 6 coords + level");
        RefineBox rb;
        rb.region.lo = {to_num(w[0], line), to_num(w[1], line), to_num(w[2], line)};
        rb.region.hi = {to_num(w[3], line), to_num(w[4], line), to_num(w[5], line)};
        rb.target_level = static_cast<int>(to_num(w[6], line));
        cfg.mesh.refine_boxes.push_back(rb);
      } else if (key == "refine_surface_stl") {
        const auto w = split_ws(val);
        if (w.size() != 3)
          throw Error("config line " + std::to_string(line) +
                      ": refine_surface_stl wants path distance level");
        RefineSurface rs;
        rs.triangles = read_stl(w[0]);
        rs.distance = to_num(w[1], line);
        rs.target_level = static_cast<int>(to_num(w[2], line));
        cfg.mesh.refine_surfaces.push_back(rs);
      } else throw Error("config line " + std::to_string(line) + ": unknown mesh key '" + key + "'");
    } else if (section == "fluid") {
      if (key == "rho") cfg.rho = to_num(val, line);
      else if (key == "mu") cfg.mu = to_num(val, line);
      else throw Error("config line " + std::to_string(line) + ": unknown fluid key '" + key + "'");
    } else if (section == "time") {
      if (key == "dt") cfg.dt = to_num(val, line);
      else if (key == "t_end") cfg.t_end = to_num(val, line);
      else if (key == "max_steps") cfg.max_steps = static_cast<int64_t>(to_num(val, line));
      else if (key == "integrator") {
        if (val == "euler") cfg.integrator = Integrator::euler;
        else if (val == "ab2") cfg.integrator = Integrator::ab2;
        else if (val == "cn") cfg.integrator = Integrator::cn;
        else throw Error("config line " + std::to_string(line) + ": unknown integrator");
      } else throw Error("config line " + std::to_string(line) + ": unknown time key '" + key + "'");
    } else if (section == "bc") {
      if (key == "periodic") {
        for (const auto& w : split_ws(val)) {
          if (w == "x") cfg.bc.periodic[0] = true;
          else if (w == "y") cfg.bc.periodic[1] = true;
          else if (w == "z") cfg.bc.periodic[2] = true;
          else throw Error("config line " + std::to_string(line) + ": periodic wants axes");
        }
      } else if (key == "initial_velocity") {
        cfg.initial_velocity = to_vec3(val, line);
      } else {
        const int f = face_index(key, line);
        const auto w = split_ws(val);
        if (w.empty()) throw Error("config line " + std::to_string(line) + ": empty bc");
        if (w[0] == "inflow") {
          if (w.size() != 4)
            throw Error("config line " + std::to_string(line) + ": inflow wants a velocity");
          cfg.bc.kind[f] = BcKind::inflow;
          cfg.bc.inflow[f] = {to_num(w[1], line), to_num(w[2], line), to_num(w[3], line)};
        } else if (w[0] == "outflow") cfg.bc.kind[f] = BcKind::outflow;
        else if (w[0] == "slip") cfg.bc.kind[f] = BcKind::slip;
        else if (w[0] == "noslip") cfg.bc.kind[f] = BcKind::noslip;
        else if (w[0] == "neumann") cfg.bc.kind[f] = BcKind::neumann;
        else throw Error("config line " + std::to_string(line) + ": unknown bc kind '" + w[0] + "'");
      }
    } else if (section == "body") {
      if (key == "stl") current_body().stl_path = val;
      else if (key == "sphere") {
        const auto w = split_ws(val);
        if (w.size() != 5)
          throw Error("config line " + std::to_string(line) + ": sphere wants cx cy cz D subdiv");
        current_body().sphere = {{to_num(w[0], line), to_num(w[1], line), to_num(w[2], line),
                                  to_num(w[3], line), to_num(w[4], line)}};
      } else if (key == "center") current_body().center = to_vec3(val, line);
      else if (key == "linear_velocity") current_body().linear_velocity = to_vec3(val, line);
      else if (key == "angular_velocity") current_body().angular_velocity = to_vec3(val, line);
      else if (key == "ramp_alpha") {
        current_body().ramp_alpha = to_num(val, line);
        current_body().has_ramp = true;
      } else if (key == "ramp_t0") current_body().ramp_t0 = to_num(val, line);
      else throw Error("config line " + std::to_string(line) + ": unknown body key '" + key + "'");
    } else if (section == "solver") {
      if (key == "poisson_tol") cfg.poisson.tol = to_num(val, line);
      else if (key == "vcycle_cap") cfg.poisson.max_vcycles = static_cast<int>(to_num(val, line));
      else if (key == "coarse_cg_cap") cfg.poisson.coarse_cg_cap = static_cast<int>(to_num(val, line));
      else if (key == "pre_sweeps") cfg.poisson.pre_sweeps = static_cast<int>(to_num(val, line));
      else if (key == "post_sweeps") cfg.poisson.post_sweeps = static_cast<int>(to_num(val, line));
      else if (key == "cfl_warn") cfg.cfl_warn = to_num(val, line);
      else throw Error("config line " + std::to_string(line) + ": unknown solver key '" + key + "'");
    } else if (section == "balance") {
      if (key == "enabled") cfg.balance_enabled = to_bool(val, line);
      else if (key == "kappa") cfg.balance.kappa = to_num(val, line);
      else if (key == "gamma") cfg.balance.gamma = to_num(val, line);
      else if (key == "cadence") cfg.balance.cadence = static_cast<int>(to_num(val, line));
      else throw Error("config line " + std::to_string(line) + ": unknown balance key '" + key + "'");
    } else if (section == "run") {
      if (key == "ranks") cfg.ranks = static_cast<int>(to_num(val, line));
      else if (key == "threads") cfg.threads = static_cast<int>(to_num(val, line));
      else if (key == "seed") cfg.seed = static_cast<uint64_t>(to_num(val, line));
      else if (key == "overlap") cfg.overlap = to_bool(val, line);
      else if (key == "out_dir") cfg.out_dir = val;
      else if (key == "output_every") cfg.output_every = static_cast<int64_t>(to_num(val, line));
      else if (key == "checkpoint_every") cfg.checkpoint_every = static_cast<int64_t>(to_num(val, line));
      else if (key == "checkpoint_mode") {
        if (val == "lossless") cfg.checkpoint_mode = CompressionMode::lossless;
        else if (val == "lossy") cfg.checkpoint_mode = CompressionMode::lossy;
        else throw Error("config line " + std::to_string(line) + ": unknown checkpoint mode");
      } else if (key == "checkpoint_tolerance") cfg.checkpoint_tolerance = to_num(val, line);
      else if (key == "transport_delay") cfg.transport_delay = static_cast<int>(to_num(val, line));
      else throw Error("config line " + std::to_string(line) + ": unknown run key '" + key + "'");
    } else {
      throw Error("config line " + std::to_string(line) + ": key before any [section]");
    }
  }
  return cfg;
}

CaseConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::vector<RigidBody> make_bodies(const CaseConfig& cfg) {
  std::vector<RigidBody> bodies;
  for (size_t i = 0; i < cfg.bodies.size(); ++i) {
    const BodySpec& spec = cfg.bodies[i];
    RigidBody b;
    b.body_id = static_cast<int32_t>(i);
    if (spec.sphere) {
      const auto& s = *spec.sphere;
      b.triangles = icosphere({s[0], s[1], s[2]}, s[3], static_cast<int>(s[4]));
    } else if (!spec.stl_path.empty()) {
      b.triangles = read_stl(spec.stl_path);
    } else {
      throw Error("body " + std::to_string(i) + ": needs stl or sphere");
    }
    b.center = spec.center;
    b.linear_velocity = spec.linear_velocity;
    b.angular_velocity = spec.angular_velocity;
    b.has_ramp = spec.has_ramp;
    b.ramp_alpha = spec.ramp_alpha;
    b.ramp_t0 = spec.ramp_t0;
    bodies.push_back(std::move(b));
  }
  return bodies;
}

void validate_config(const CaseConfig& cfg) {
  if (cfg.dt <= 0) throw Error("config: dt must be positive");
  if (cfg.rho <= 0) throw Error("config: rho must be positive");
  if (cfg.mu < 0) throw Error("config: mu must be nonnegative");
  if (cfg.poisson.tol <= 0 || cfg.poisson.max_vcycles <= 0 || cfg.poisson.coarse_cg_cap <= 0)
    throw Error("config: solver caps and tolerances must be positive");
  if (cfg.balance.kappa <= 1.0) throw Error("config: kappa must exceed 1");
  if (cfg.balance.gamma <= 0) throw Error("config: gamma must be positive");
  if (cfg.ranks < 1 || cfg.threads < 1) throw Error("config: ranks and threads must be >= 1");
  if (cfg.checkpoint_tolerance <= 0) throw Error("config: checkpoint tolerance must be positive");
  if (cfg.t_end < 0) throw Error("config: t_end must be nonnegative");
  for (const auto& b : cfg.bodies)
    if (!b.sphere && !b.stl_path.empty()) {
      struct stat st {};
      if (stat(b.stl_path.c_str(), &st) != 0)
        throw Error("config: body STL not found: " + b.stl_path);
    }
  for (int a = 0; a < 3; ++a)
    if (cfg.mesh.domain.hi[a] <= cfg.mesh.domain.lo[a])
      throw Error("config: empty domain box");
}

std::string describe_config(const CaseConfig& cfg) {
  std::ostringstream os;
  os << "domain: [" << cfg.mesh.domain.lo.x << "," << cfg.mesh.domain.lo.y << ","
     << cfg.mesh.domain.lo.z << "] .. [" << cfg.mesh.domain.hi.x << "," << cfg.mesh.domain.hi.y
     << "," << cfg.mesh.domain.hi.z << "]\n";
  os << "tiling: " << cfg.mesh.level0_tiling.x << "x" << cfg.mesh.level0_tiling.y << "x"
     << cfg.mesh.level0_tiling.z << ", cells/edge " << cfg.mesh.n_cells_per_edge << ", levels "
     << cfg.mesh.max_level + 1 << "\n";
  os << "fluid: rho " << cfg.rho << ", mu " << cfg.mu << "\n";
  os << "dt " << cfg.dt << ", t_end " << cfg.t_end << ", steps "
     << (cfg.max_steps >= 0 ? cfg.max_steps
                            : static_cast<int64_t>(cfg.t_end / cfg.dt + 0.5))
     << "\n";
  os << "bodies: " << cfg.bodies.size() << "\n";
  os << "ranks " << cfg.ranks << ", threads " << cfg.threads << ", overlap "
     << (cfg.overlap ? "on" : "off") << ", balance " << (cfg.balance_enabled ? "on" : "off")
     << "\n";
  return os.str();
}

}  // namespace bcm

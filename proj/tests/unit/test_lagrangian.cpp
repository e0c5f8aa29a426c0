#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <mutex>
#include <random>
#include <set>

#include "bcm/lagrangian.hpp"

using namespace bcm;

namespace {

MeshSpec slab_spec() {
  MeshSpec spec;
  spec.domain = {{0, 0, 0}, {2, 2, 2}};
  spec.level0_tiling = {2, 2, 2};
  spec.n_cells_per_edge = 4;  // cell size 0.25
  spec.max_level = 0;
  return spec;
}

}  // namespace

TEST_CASE("an axis-aligned unit square discretizes into one particle per intersected cell") {
  const BcmMesh mesh = generate_mesh(slab_spec());
  RigidBody body;
  body.body_id = 0;
  // A 0.5 x 0.5 square in the z = 0.625 plane spanning exactly 4 cells
  // (2x2 of size 0.25), split into two triangles.
  const Vec3 a{0.25, 0.25, 0.625}, b{0.75, 0.25, 0.625}, c{0.75, 0.75, 0.625},
      d{0.25, 0.75, 0.625};
  body.triangles = {{a, b, c}, {a, c, d}};
  const auto particles = discretize_surface(body, mesh);
  REQUIRE(particles.size() == 4);
  double area = 0.0;
  for (const Particle& p : particles) {
    CHECK(p.dc_volume == doctest::Approx(0.0625 * 0.25));  // fragment area x dx
    CHECK(p.position.z == doctest::Approx(0.625));
    area += p.dc_volume / 0.25;
  }
  CHECK(area == doctest::Approx(0.25));
  // Fragment centroids sit at the cell-wise quarter points.
  std::set<std::pair<double, double>> got;
  for (const Particle& p : particles)
    got.insert({std::round(p.position.x * 1e9) / 1e9, std::round(p.position.y * 1e9) / 1e9});
  CHECK(got.count({0.375, 0.375}) == 1);
  CHECK(got.count({0.625, 0.625}) == 1);
}

TEST_CASE("degenerate triangles contribute nothing") {
  const BcmMesh mesh = generate_mesh(slab_spec());
  RigidBody body;
  body.triangles = {{Vec3{0.5, 0.5, 0.5}, Vec3{0.7, 0.5, 0.5}, Vec3{0.6, 0.5, 0.5}}};
  CHECK(discretize_surface(body, mesh).empty());
}

TEST_CASE("a surface outside the mesh is rejected") {
  const BcmMesh mesh = generate_mesh(slab_spec());
  RigidBody body;
  body.triangles = {{Vec3{5, 5, 5}, Vec3{6, 5, 5}, Vec3{5, 6, 5}}};
  CHECK_THROWS_AS(discretize_surface(body, mesh), Error);
}

TEST_CASE("sphere particle count and quadrature weight track the surface area") {
  MeshSpec spec;
  spec.domain = {{-1, -1, -1}, {1, 1, 1}};
  spec.level0_tiling = {2, 2, 2};
  spec.n_cells_per_edge = 16;  // dx = 1/16 = D/16 for D = 1
  spec.max_level = 0;
  const BcmMesh mesh = generate_mesh(spec);
  const double dx = 1.0 / 16.0;

  RigidBody body;
  body.triangles = icosphere({0, 0, 0}, 1.0, 4);
  const auto particles = discretize_surface(body, mesh, 100);

  // One particle per intersected cell: a curved surface crosses more cells
  // than area/dx^2 (about 1.5x for random orientations), so the count sits
  // above the raw area estimate while the quadrature weight matches the
  // area tightly.
  const double expected_count = M_PI / (dx * dx);  // pi D^2 / dx^2
  CHECK(particles.size() > 0.8 * expected_count);
  CHECK(particles.size() < 1.6 * expected_count);

  double area = 0.0;
  for (const Particle& p : particles) {
    CHECK(p.dc_volume > 0.0);
    area += p.dc_volume / dx;
    CHECK(norm(p.position) == doctest::Approx(0.5).epsilon(0.02));
  }
  CHECK(area == doctest::Approx(M_PI).epsilon(0.01));  // sum dc = area x dx to 1%

  // Ids dense from the base.
  std::set<uint64_t> ids;
  for (const Particle& p : particles) ids.insert(p.global_id);
  CHECK(ids.size() == particles.size());
  CHECK(*ids.begin() == 100);
  CHECK(*ids.rbegin() == 100 + particles.size() - 1);
}

TEST_CASE("assign_sets respects containment and the partition property") {
  const BcmMesh mesh = generate_mesh(slab_spec());
  RigidBody body;
  body.triangles = icosphere({1.0, 1.0, 1.0}, 0.8, 3);
  const auto particles = discretize_surface(body, mesh);
  REQUIRE(!particles.empty());

  const auto dist = Distribution::linear(mesh.num_cubes(), 2);
  int64_t total = 0;
  for (int rank = 0; rank < 2; ++rank) {
    const auto imap = IndexMap::build(dist, rank);
    const auto store = assign_sets(particles, mesh, dist, imap, rank);
    for (const auto& set : store.sets) {
      for (const auto& [id, p] : set.members) {
        const auto gid = mesh.locate_cube(p.position);
        REQUIRE(gid.has_value());
        CHECK(*gid == set.cube_gid);
      }
      total += static_cast<int64_t>(set.members.size());
    }
  }
  CHECK(total == static_cast<int64_t>(particles.size()));

  // A particle exactly on a cube face lands in the lower-closed cube.
  Particle face_particle{999999, {1.0, 0.5, 0.5}, 1.0, 0};
  const auto imap0 = IndexMap::build(Distribution::linear(mesh.num_cubes(), 1), 0);
  auto store = assign_sets({face_particle}, mesh, Distribution::linear(mesh.num_cubes(), 1),
                           imap0, 0);
  const auto owner = mesh.locate_cube({1.0, 0.5, 0.5});
  REQUIRE(owner.has_value());
  CHECK(store.sets[imap0.local_of(*owner)].members.count(999999) == 1);

  Particle outside{1000000, {9, 9, 9}, 1.0, 0};
  CHECK_THROWS_AS(
      assign_sets({outside}, mesh, Distribution::linear(mesh.num_cubes(), 1), imap0, 0), Error);
}

TEST_CASE("body velocity composes translation, rotation, and the tanh ramp") {
  RigidBody body;
  body.center = {1, 1, 1};

  SUBCASE("pure translation") {
    body.linear_velocity = {2, 0, 0};
    CHECK(body.velocity_at({5, -3, 9}, 0.0).x == doctest::Approx(2.0));
    CHECK(body.velocity_at({5, -3, 9}, 0.0).y == doctest::Approx(0.0));
  }
  SUBCASE("unit rotation about z") {
    body.angular_velocity = {0, 0, 1};
    const Vec3 v = body.velocity_at({2, 1, 1}, 0.0);  // X - center = (1,0,0)
    CHECK(v.x == doctest::Approx(0.0));
    CHECK(v.y == doctest::Approx(1.0));
    CHECK(v.z == doctest::Approx(0.0));
  }
  SUBCASE("tanh ramp vanishes at t0 and saturates") {
    body.angular_velocity = {0, 0, 1};
    body.has_ramp = true;
    body.ramp_alpha = 20.0;
    body.ramp_t0 = 0.3;
    CHECK(body.velocity_at({2, 1, 1}, 0.3).y == doctest::Approx(0.0));
    CHECK(body.velocity_at({2, 1, 1}, 10.0).y == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("advect applies explicit Euler with the prescribed velocity") {
  const BcmMesh mesh = generate_mesh(slab_spec());
  const auto dist = Distribution::linear(mesh.num_cubes(), 1);
  const auto imap = IndexMap::build(dist, 0);

  std::vector<RigidBody> bodies(1);
  bodies[0].linear_velocity = {1, 0, 0};
  std::vector<Particle> particles{{1, {0.5, 0.5, 0.5}, 1.0, 0}, {2, {1.5, 1.5, 1.5}, 1.0, 0}};
  auto store = assign_sets(particles, mesh, dist, imap, 0);
  advect(store, bodies, 0.1, 0.0);
  for (const auto& set : store.sets)
    for (const auto& [id, p] : set.members)
      CHECK(p.position.x == doctest::Approx(id == 1 ? 0.6 : 1.6));

  bodies[0].linear_velocity = {0, 0, 0};
  auto before = store.sorted_ids();
  advect(store, bodies, 0.1, 0.0);
  CHECK(store.sorted_ids() == before);  // zero velocity leaves positions fixed
  CHECK_THROWS_AS(advect(store, bodies, -0.1, 0.0), Error);
}

TEST_CASE("rigid rotation preserves inter-particle distances to first order") {
  std::vector<RigidBody> bodies(1);
  bodies[0].center = {1, 1, 1};
  bodies[0].angular_velocity = {0, 0, 2.0};

  MeshSpec spec = slab_spec();
  const BcmMesh mesh = generate_mesh(spec);
  const auto dist = Distribution::linear(mesh.num_cubes(), 1);
  const auto imap = IndexMap::build(dist, 0);

  std::vector<Particle> particles{{1, {1.4, 1.0, 1.0}, 1, 0}, {2, {1.0, 1.35, 1.0}, 1, 0}};
  const double d0 = norm(particles[0].position - particles[1].position);
  auto store = assign_sets(particles, mesh, dist, imap, 0);

  Transport transport(1);
  const double dt = 1e-3;
  for (int s = 0; s < 1000; ++s) {
    advect(store, bodies, dt, s * dt);
    migrate(store, mesh, dist, imap, 0, transport, s);
  }
  std::map<uint64_t, Vec3> pos;
  for (const auto& set : store.sets)
    for (const auto& [id, p] : set.members) pos[id] = p.position;
  REQUIRE(pos.size() == 2);
  const double d1 = norm(pos[1] - pos[2]);
  CHECK(d1 == doctest::Approx(d0).epsilon(5e-3));  // O(dt) drift per step

  // Compare against the exact rotation matrix after t = 1.
  const double theta = 2.0 * 1.0;
  const Vec3 r0 = Vec3{1.4, 1.0, 1.0} - bodies[0].center;
  const Vec3 exact{r0.x * std::cos(theta) - r0.y * std::sin(theta),
                   r0.x * std::sin(theta) + r0.y * std::cos(theta), 0.0};
  CHECK(norm(pos[1] - (bodies[0].center + exact)) < 5e-3);
}

TEST_CASE("migrate moves particles between cubes and ranks without loss or duplication") {
  const BcmMesh mesh = generate_mesh(slab_spec());

  auto gather_all = [&](int P, int steps) {
    std::mutex mtx;
    std::map<uint64_t, Vec3> all;
    int64_t exited = 0;
    Transport transport(P, 3, 3);
    std::vector<RigidBody> bodies(1);
    bodies[0].center = {1, 1, 1};
    bodies[0].angular_velocity = {0, 0, 1.5};
    RigidBody shape;
    shape.triangles = icosphere({1, 1, 1}, 0.9, 3);
    const auto particles = discretize_surface(shape, mesh);
    run_ranks(P, 1, transport, [&](RankContext& ctx) {
      const auto dist = Distribution::linear(mesh.num_cubes(), P);
      const auto imap = IndexMap::build(dist, ctx.rank);
      auto store = assign_sets(particles, mesh, dist, imap, ctx.rank);
      MigrateStats stats;
      for (int s = 0; s < steps; ++s) {
        advect(store, bodies, 0.01, s * 0.01);
        const auto st = migrate(store, mesh, dist, imap, ctx.rank, transport,
                                static_cast<uint64_t>(s));
        stats.exited_domain += st.exited_domain;
        for (const auto& set : store.sets)
          for (const auto& [id, p] : set.members) {
            const auto gid = mesh.locate_cube(p.position);
            REQUIRE(gid.has_value());
            REQUIRE(*gid == set.cube_gid);  // containment after every migrate
          }
      }
      std::lock_guard lk(mtx);
      exited += stats.exited_domain;
      for (const auto& set : store.sets)
        for (const auto& [id, p] : set.members) {
          REQUIRE(all.count(id) == 0);  // no duplicates across ranks
          all[id] = p.position;
        }
    });
    CHECK(exited == 0);
    return all;
  };

  const auto ref = gather_all(1, 40);
  const auto par = gather_all(3, 40);
  REQUIRE(ref.size() == par.size());
  for (const auto& [id, x] : ref) {
    REQUIRE(par.count(id) == 1);
    CHECK(norm(par.at(id) - x) == doctest::Approx(0.0));
  }
}

TEST_CASE("no movement leaves sets unchanged") {
  const BcmMesh mesh = generate_mesh(slab_spec());
  const auto dist = Distribution::linear(mesh.num_cubes(), 1);
  const auto imap = IndexMap::build(dist, 0);
  RigidBody shape;
  shape.triangles = icosphere({1, 1, 1}, 0.9, 2);
  const auto particles = discretize_surface(shape, mesh);
  auto store = assign_sets(particles, mesh, dist, imap, 0);
  const auto before = store.sorted_ids();
  Transport transport(1);
  const auto stats = migrate(store, mesh, dist, imap, 0, transport, 0);
  CHECK(stats.moved_local == 0);
  CHECK(stats.moved_remote == 0);
  CHECK(store.sorted_ids() == before);
}

TEST_CASE("particles exiting the domain are deleted and counted") {
  const BcmMesh mesh = generate_mesh(slab_spec());
  const auto dist = Distribution::linear(mesh.num_cubes(), 1);
  const auto imap = IndexMap::build(dist, 0);
  std::vector<Particle> particles{{7, {1.95, 1.0, 1.0}, 1.0, 0}};
  auto store = assign_sets(particles, mesh, dist, imap, 0);
  std::vector<RigidBody> bodies(1);
  bodies[0].linear_velocity = {20.0, 0, 0};
  advect(store, bodies, 0.1, 0.0);
  Transport transport(1);
  const auto stats = migrate(store, mesh, dist, imap, 0, transport, 0);
  CHECK(stats.exited_domain == 1);
  CHECK(store.local_count() == 0);
}

TEST_CASE("STL round trip through the binary writer") {
  const auto tris = icosphere({0.5, 0.5, 0.5}, 0.5, 2);
  const auto path = std::filesystem::temp_directory_path() / "bcm_test_sphere.stl";
  write_stl_binary(path.string(), tris);
  const auto back = read_stl(path.string());
  REQUIRE(back.size() == tris.size());
  for (size_t i = 0; i < tris.size(); ++i)
    for (int v = 0; v < 3; ++v)
      CHECK(norm(back[i][v] - tris[i][v]) < 1e-6);  // f32 storage
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_stl("/nonexistent/file.stl"), Error);
}

TEST_CASE("hash-table sets stay near constant time per operation") {
  // Guards against accidental linear scans: per-op time must not grow with
  // the set size. Generous 8x budget absorbs machine noise.
  auto time_ops = [](int n) {
    ParticleSet set;
    std::mt19937_64 rng(1);
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < n; ++i) {
      Particle p;
      p.global_id = rng();
      set.members.emplace(p.global_id, p);
    }
    uint64_t probe = 0;
    std::mt19937_64 rng2(1);
    for (int i = 0; i < n; ++i) probe += set.members.count(rng2());
    const auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(probe == static_cast<uint64_t>(n));
    return dt / n;
  };
  const double small = time_ops(20000);
  const double large = time_ops(200000);
  CHECK(large < 8.0 * small + 1e-6);
}

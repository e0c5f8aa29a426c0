#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <random>

#include "bcm/io.hpp"

using namespace bcm;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

BcmMesh small_mesh() {
  MeshSpec spec;
  spec.domain = {{0, 0, 0}, {2, 2, 2}};
  spec.level0_tiling = {2, 2, 2};
  spec.n_cells_per_edge = 4;
  spec.max_level = 1;
  spec.refine_boxes = {{{{0.1, 0.1, 0.1}, {0.9, 0.9, 0.9}}, 1}};
  return generate_mesh(spec);
}

struct GlobalState {
  std::map<int, std::vector<double>> field0, field1;
  std::map<uint64_t, Particle> particles;
  CheckpointExtras extras;
};

/// Writes a synthetic state on P ranks; returns what was written.
GlobalState write_synthetic(const std::string& path, const BcmMesh& mesh, int P,
                            CompressionMode mode, double tol = 1e-4, bool single_writer = false) {
  GlobalState global;
  std::mutex mtx;
  Transport transport(P);
  run_ranks(P, 1, transport, [&](RankContext& ctx) {
    const auto dist = Distribution::linear(mesh.num_cubes(), P);
    const auto imap = IndexMap::build(dist, ctx.rank);
    const int n_local = static_cast<int>(imap.local_to_global.size());
    Field a(Quantity::velocity, 3, mesh.n_cells_per_edge, 2, n_local);
    Field b(Quantity::pressure, 1, mesh.n_cells_per_edge, 2, n_local);
    ParticleStore store;
    store.sets.resize(n_local);
    for (int lc = 0; lc < n_local; ++lc) {
      const int gid = imap.local_to_global[lc];
      store.sets[lc].cube_gid = gid;
      std::mt19937_64 rng(gid + 1);  // keyed by cube, not by rank
      std::uniform_real_distribution<double> uni(-2, 2);
      for (auto& v : a.cube_data(lc)) v = uni(rng);
      for (auto& v : b.cube_data(lc)) v = uni(rng);
      for (int q = 0; q < gid % 4; ++q) {
        Particle p;
        p.global_id = static_cast<uint64_t>(gid) * 50 + q;
        p.position = mesh.cell_center(mesh.cubes[gid], {1, 2, 1});
        p.dc_volume = 0.125 + q;
        p.body_id = 1;
        store.sets[lc].members.emplace(p.global_id, p);
      }
    }
    CheckpointWriteSpec spec;
    spec.field_names = {"u", "p"};
    spec.fields = {&a, &b};
    spec.mode = mode;
    spec.lossy_abs_tol = tol * 4.0;  // field range is 4
    spec.single_writer = single_writer;
    CheckpointExtras extras{1.25, 77, -3.5, 12, true};
    write_checkpoint(path, mesh, dist, imap, spec, store, extras, transport, ctx.rank, ctx.pool);
    std::lock_guard lk(mtx);
    global.extras = extras;
    for (int lc = 0; lc < n_local; ++lc) {
      auto sa = a.cube_span(lc);
      auto sb = b.cube_span(lc);
      global.field0[imap.local_to_global[lc]] = std::vector<double>(sa.begin(), sa.end());
      global.field1[imap.local_to_global[lc]] = std::vector<double>(sb.begin(), sb.end());
      for (auto& [id, p] : store.sets[lc].members) global.particles[id] = p;
    }
  });
  return global;
}

GlobalState read_merged(const std::string& path, int P) {
  GlobalState global;
  for (int rank = 0; rank < P; ++rank) {
    const auto data = read_checkpoint(path, P, rank);
    global.extras = data.extras;
    const auto imap = IndexMap::build(data.dist, rank);
    for (size_t lc = 0; lc < imap.local_to_global.size(); ++lc) {
      global.field0[imap.local_to_global[lc]] = data.fields[0][lc];
      global.field1[imap.local_to_global[lc]] = data.fields[1][lc];
      for (auto& [id, p] : data.particles.sets[lc].members) global.particles[id] = p;
    }
  }
  return global;
}

}  // namespace

TEST_CASE("wavelet lifting round-trips") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> uni(-5, 5);
  const int ext = 8;
  std::vector<double> data(ext * ext * ext);
  for (auto& v : data) v = uni(rng);

  SUBCASE("double path inverts to rounding") {
    auto work = data;
    dwt53_forward(work, ext);
    dwt53_inverse(work, ext);
    for (size_t i = 0; i < data.size(); ++i)
      CHECK(work[i] == doctest::Approx(data[i]).epsilon(1e-12));
  }
  SUBCASE("integer path is exactly reversible, arbitrary bit patterns included") {
    std::vector<int64_t> bits(data.size());
    std::memcpy(bits.data(), data.data(), data.size() * 8);
    bits[0] = INT64_MIN;
    bits[1] = INT64_MAX;
    bits[2] = -1;
    auto work = bits;
    dwt53_forward_i64(work, ext);
    dwt53_inverse_i64(work, ext);
    CHECK(work == bits);
  }
  SUBCASE("a constant block has zero detail coefficients") {
    std::vector<double> flat(ext * ext * ext, 3.25);
    dwt53_forward(flat, ext);
    for (int i = 0; i < ext; ++i)
      for (int j = 0; j < ext; ++j)
        for (int k = 0; k < ext; ++k)
          if (i >= ext / 2 || j >= ext / 2 || k >= ext / 2)
            CHECK(std::abs(flat[(i * ext + j) * ext + k]) < 1e-14);
  }
}

TEST_CASE("cube codec: lossless is bit-exact, lossy bounded, q->0 converges") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> uni(-3, 3);
  const int ext = 12;  // 8 cells + halo
  std::vector<double> data(static_cast<size_t>(ext) * ext * ext * 3);
  for (auto& v : data) v = uni(rng);

  SUBCASE("lossless round trip") {
    const auto stream = compress_cube(data, ext, 3, CompressionMode::lossless, 0.0);
    const auto back = decompress_cube(stream, ext, 3);
    REQUIRE(back.size() == data.size());
    CHECK(std::memcmp(back.data(), data.data(), data.size() * 8) == 0);
  }
  SUBCASE("lossy error bound holds on random cubes; q->0 tightens") {
    double prev_err = 1e300;
    for (double q : {1e-2, 1e-4, 1e-6}) {
      const auto stream = compress_cube(data, ext, 3, CompressionMode::lossy, q);
      const auto back = decompress_cube(stream, ext, 3);
      double err = 0.0;
      for (size_t i = 0; i < data.size(); ++i)
        err = std::max(err, std::abs(back[i] - data[i]));
      CHECK(err <= kLossyAmplification * q);
      CHECK(err <= prev_err);
      prev_err = err;
    }
  }
  SUBCASE("empirical amplification over many random cubes stays under the constant") {
    const int e = 8;
    std::vector<double> block(e * e * e);
    double worst = 0.0;
    for (int trial = 0; trial < 10000; ++trial) {
      for (auto& v : block) v = uni(rng);
      const double q = 1e-3;
      const auto stream = compress_cube(block, e, 1, CompressionMode::lossy, q);
      const auto back = decompress_cube(stream, e, 1);
      for (size_t i = 0; i < block.size(); ++i)
        worst = std::max(worst, std::abs(back[i] - block[i]) / q);
    }
    CHECK(worst <= kLossyAmplification);
  }
  SUBCASE("the recorded constant equals the inverse operator norm") {
    // Scatter a unit impulse into every detail coefficient and accumulate
    // |weights| per output cell: the largest row sum, halved, is the bound.
    const int e = 8;
    const int half = e / 2;
    std::vector<double> acc(e * e * e, 0.0), basis(e * e * e);
    for (int i = 0; i < e; ++i)
      for (int j = 0; j < e; ++j)
        for (int k = 0; k < e; ++k) {
          if (i < half && j < half && k < half) continue;
          std::fill(basis.begin(), basis.end(), 0.0);
          basis[(static_cast<size_t>(i) * e + j) * e + k] = 1.0;
          dwt53_inverse(basis, e);
          for (size_t q = 0; q < acc.size(); ++q) acc[q] += std::abs(basis[q]);
        }
    double mx = 0.0;
    for (double v : acc) mx = std::max(mx, v);
    CHECK(0.5 * mx == doctest::Approx(kLossyAmplification));
  }
  SUBCASE("corrupt streams are rejected") {
    auto stream = compress_cube(data, ext, 3, CompressionMode::lossless, 0.0);
    stream[stream.size() / 2] ^= 0xff;
    stream[stream.size() / 2 + 1] ^= 0xff;
    CHECK_THROWS_AS(decompress_cube(stream, ext, 3), Error);
  }
}

TEST_CASE("compression ratios: constant cubes collapse, noise does not") {
  const int ext = 20;  // 16 cells + halo
  const size_t count = static_cast<size_t>(ext) * ext * ext;
  std::vector<double> flat(count, 1.234);
  const auto cstream = compress_cube(flat, ext, 1, CompressionMode::lossy, 1e-6);
  CHECK(static_cast<double>(count * 8) / cstream.size() > 20.0);

  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> uni(-1, 1);
  std::vector<double> noise(count);
  for (auto& v : noise) v = uni(rng);
  const auto nstream = compress_cube(noise, ext, 1, CompressionMode::lossy, 1e-9);
  CHECK(static_cast<double>(count * 8) / nstream.size() < 1.5);  // incompressible
  const auto back = decompress_cube(nstream, ext, 1);
  for (size_t i = 0; i < count; ++i)
    CHECK(std::abs(back[i] - noise[i]) <= kLossyAmplification * 1e-9);
}

TEST_CASE("checkpoint restores the exact global state on any rank count") {
  const BcmMesh mesh = small_mesh();
  const auto path = tmp_path("bcm_ckpt_roundtrip.ckpt");

  for (int wp : {1, 3}) {
    const auto written = write_synthetic(path, mesh, wp, CompressionMode::lossless);
    for (int rp : {1, 2, 3, 4, 7}) {
      const auto read = read_merged(path, rp);
      CHECK(read.extras.time == written.extras.time);
      CHECK(read.extras.step == written.extras.step);
      CHECK(read.extras.force_sum_x == written.extras.force_sum_x);
      CHECK(read.extras.have_prev == written.extras.have_prev);
      REQUIRE(read.field0.size() == written.field0.size());
      for (const auto& [gid, data] : written.field0)
        CHECK(std::memcmp(read.field0.at(gid).data(), data.data(), data.size() * 8) == 0);
      for (const auto& [gid, data] : written.field1)
        CHECK(std::memcmp(read.field1.at(gid).data(), data.data(), data.size() * 8) == 0);
      REQUIRE(read.particles.size() == written.particles.size());
      for (const auto& [id, p] : written.particles) {
        const Particle& q = read.particles.at(id);
        CHECK(q.position == p.position);
        CHECK(q.dc_volume == p.dc_volume);
        CHECK(q.body_id == p.body_id);
      }
    }
  }
  std::filesystem::remove(path);
}

TEST_CASE("writer paths produce identical bytes; single-writer fallback included") {
  const BcmMesh mesh = small_mesh();
  const auto p1 = tmp_path("bcm_ckpt_a.ckpt");
  const auto p2 = tmp_path("bcm_ckpt_b.ckpt");
  const auto p3 = tmp_path("bcm_ckpt_c.ckpt");
  write_synthetic(p1, mesh, 1, CompressionMode::lossless);
  write_synthetic(p2, mesh, 3, CompressionMode::lossless);
  write_synthetic(p3, mesh, 3, CompressionMode::lossless, 1e-4, true);

  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  };
  const auto a = slurp(p1), b = slurp(p2), c = slurp(p3);
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size()) == 0);
  REQUIRE(a.size() == c.size());
  CHECK(std::memcmp(a.data(), c.data(), a.size()) == 0);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
  std::filesystem::remove(p3);
}

TEST_CASE("lossy checkpoints restore within tolerance") {
  const BcmMesh mesh = small_mesh();
  const auto path = tmp_path("bcm_ckpt_lossy.ckpt");
  const double rel_tol = 1e-4;
  const auto written = write_synthetic(path, mesh, 2, CompressionMode::lossy, rel_tol);
  const auto read = read_merged(path, 1);
  double max_err = 0.0;
  for (const auto& [gid, data] : written.field0)
    for (size_t i = 0; i < data.size(); ++i)
      max_err = std::max(max_err, std::abs(read.field0.at(gid)[i] - data[i]));
  CHECK(max_err <= rel_tol * 4.0);  // tolerance x field range
  CHECK(max_err > 0.0);             // actually lossy
  // Particles stay lossless.
  for (const auto& [id, p] : written.particles)
    CHECK(read.particles.at(id).position == p.position);
  std::filesystem::remove(path);
}

TEST_CASE("truncated and corrupted files are rejected whole") {
  const BcmMesh mesh = small_mesh();
  const auto path = tmp_path("bcm_ckpt_trunc.ckpt");
  write_synthetic(path, mesh, 1, CompressionMode::lossless);

  auto bytes = [&] {
    std::ifstream in(path, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  }();

  SUBCASE("truncation") {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
  }
  SUBCASE("flipped payload byte") {
    bytes[bytes.size() / 2] ^= 0x40;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(read_checkpoint(path, 1, 0), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("empty-mesh checkpoints are valid header-only files") {
  MeshSpec spec;
  spec.domain = {{0, 0, 0}, {1, 1, 1}};
  spec.level0_tiling = {1, 1, 1};
  spec.n_cells_per_edge = 4;
  spec.max_level = 0;
  const BcmMesh mesh = generate_mesh(spec);
  // Single cube, no particles, no fields: the minimal container.
  const auto path = tmp_path("bcm_ckpt_minimal.ckpt");
  Transport transport(1);
  run_ranks(1, 1, transport, [&](RankContext& ctx) {
    const auto dist = Distribution::linear(1, 1);
    const auto imap = IndexMap::build(dist, 0);
    ParticleStore store;
    store.sets.resize(1);
    store.sets[0].cube_gid = 0;
    CheckpointWriteSpec spec2;
    write_checkpoint(path, mesh, dist, imap, spec2, store, {}, transport, ctx.rank, ctx.pool);
  });
  const auto data = read_checkpoint(path, 1, 0);
  CHECK(data.mesh.num_cubes() == 1);
  CHECK(data.field_names.empty());
  std::filesystem::remove(path);
}

TEST_CASE("vtk export writes inspectable per-cube files") {
  const BcmMesh mesh = small_mesh();
  const auto dist = Distribution::linear(mesh.num_cubes(), 1);
  const auto imap = IndexMap::build(dist, 0);
  Field f(Quantity::pressure, 1, 4, 2, mesh.num_cubes());
  f.fill(1.0);
  const auto base = tmp_path("bcm_vtk_test");
  export_vtk(base, mesh, imap, f, "pressure");
  const auto first = base + ".cube0.vtk";
  std::ifstream in(first);
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line.find("vtk DataFile") != std::string::npos);
  for (int gid = 0; gid < mesh.num_cubes(); ++gid)
    std::filesystem::remove(base + ".cube" + std::to_string(gid) + ".vtk");
}

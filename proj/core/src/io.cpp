#include "bcm/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fcntl.h>
#include <fstream>
#include <unistd.h>

namespace bcm {

namespace {

constexpr char kMagic[8] = {'C', 'U', 'B', 'E', 'L', 'E', 'T', '\0'};
constexpr uint32_t kVersion = 1;
constexpr int64_t kIoTagBase = (int64_t{1} << 55) | (int64_t{1} << 53);

struct WireParticle {
  uint64_t id;
  double x, y, z, dc;
  int64_t body_and_pad;
};
static_assert(sizeof(WireParticle) == 48);

template <class T>
void put(std::vector<uint8_t>& buf, const T& v) {
  const auto* b = reinterpret_cast<const uint8_t*>(&v);
  buf.insert(buf.end(), b, b + sizeof(T));
}

template <class T>
T get(const uint8_t*& p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  p += sizeof(T);
  return v;
}

struct RawFile {
  int fd = -1;
  explicit RawFile(const std::string& path, bool create) {
    fd = create ? ::open(path.c_str(), O_RDWR | O_CREAT, 0644) : ::open(path.c_str(), O_RDWR);
    if (fd < 0) throw IoError("io: cannot open " + path);
  }
  ~RawFile() {
    if (fd >= 0) ::close(fd);
  }
  void pwrite_all(const void* data, size_t len, int64_t offset) const {
    const auto* p = static_cast<const uint8_t*>(data);
    while (len > 0) {
      const ssize_t w = ::pwrite(fd, p, len, offset);
      if (w <= 0) throw IoError("io: write failed");
      p += w;
      offset += w;
      len -= static_cast<size_t>(w);
    }
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Per-cube codec.

std::vector<uint8_t> compress_cube(std::span<const double> values, int ext, int n_components,
                                   CompressionMode mode, double q) {
  const int64_t per_comp = static_cast<int64_t>(ext) * ext * ext;
  if (static_cast<int64_t>(values.size()) != per_comp * n_components)
    throw Error("compress_cube: size mismatch");
  if (mode == CompressionMode::lossy && !(q > 0.0))
    throw Error("compress_cube: lossy mode needs a positive quantization step");

  std::vector<int64_t> coeff(values.size());
  if (mode == CompressionMode::lossless) {
    std::memcpy(coeff.data(), values.data(), values.size() * sizeof(double));
    for (int c = 0; c < n_components; ++c)
      dwt53_forward_i64(std::span(coeff.data() + c * per_comp, per_comp), ext);
  } else {
    std::vector<double> work(values.begin(), values.end());
    const int half = ext / 2;
    for (int c = 0; c < n_components; ++c) {
      auto block = std::span(work.data() + c * per_comp, per_comp);
      dwt53_forward(block, ext);
      for (int i = 0; i < ext; ++i)
        for (int j = 0; j < ext; ++j)
          for (int k = 0; k < ext; ++k) {
            const int64_t idx = (static_cast<int64_t>(i) * ext + j) * ext + k;
            const double v = block[idx];
            int64_t enc;
            if (i < half && j < half && k < half)
              std::memcpy(&enc, &v, 8);  // approximation band kept exact
            else
              enc = static_cast<int64_t>(std::llround(v / q));
            coeff[c * per_comp + idx] = enc;
          }
    }
  }

  const auto* raw = reinterpret_cast<const uint8_t*>(coeff.data());
  const auto packed = deflate_bytes(std::span(raw, coeff.size() * sizeof(int64_t)));

  std::vector<uint8_t> out;
  out.reserve(24 + packed.size());
  put<uint8_t>(out, static_cast<uint8_t>(mode));
  put<uint8_t>(out, 0);
  put<uint16_t>(out, static_cast<uint16_t>(ext));
  put<uint32_t>(out, static_cast<uint32_t>(n_components));
  put<double>(out, q);
  put<uint64_t>(out, coeff.size() * sizeof(int64_t));
  out.insert(out.end(), packed.begin(), packed.end());
  return out;
}

std::vector<double> decompress_cube(std::span<const uint8_t> stream, int ext, int n_components) {
  if (stream.size() < 24) throw Error("decompress_cube: truncated stream");
  const uint8_t* p = stream.data();
  const auto mode = static_cast<CompressionMode>(get<uint8_t>(p));
  get<uint8_t>(p);
  const int sext = get<uint16_t>(p);
  const int sncomp = static_cast<int>(get<uint32_t>(p));
  const double q = get<double>(p);
  const uint64_t raw_bytes = get<uint64_t>(p);
  if (sext != ext || sncomp != n_components) throw Error("decompress_cube: shape mismatch");

  const int64_t per_comp = static_cast<int64_t>(ext) * ext * ext;
  const auto raw =
      inflate_bytes(std::span(p, stream.size() - 24), static_cast<size_t>(raw_bytes));
  std::vector<int64_t> coeff(raw_bytes / sizeof(int64_t));
  std::memcpy(coeff.data(), raw.data(), raw.size());
  if (static_cast<int64_t>(coeff.size()) != per_comp * n_components)
    throw Error("decompress_cube: corrupt stream");

  std::vector<double> out(coeff.size());
  if (mode == CompressionMode::lossless) {
    for (int c = 0; c < n_components; ++c)
      dwt53_inverse_i64(std::span(coeff.data() + c * per_comp, per_comp), ext);
    std::memcpy(out.data(), coeff.data(), out.size() * sizeof(double));
  } else {
    const int half = ext / 2;
    for (int c = 0; c < n_components; ++c) {
      auto block = std::span(out.data() + c * per_comp, per_comp);
      for (int i = 0; i < ext; ++i)
        for (int j = 0; j < ext; ++j)
          for (int k = 0; k < ext; ++k) {
            const int64_t idx = (static_cast<int64_t>(i) * ext + j) * ext + k;
            const int64_t enc = coeff[c * per_comp + idx];
            if (i < half && j < half && k < half)
              std::memcpy(&block[idx], &enc, 8);
            else
              block[idx] = static_cast<double>(enc) * q;
          }
      dwt53_inverse(block, ext);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container.

namespace {

struct HeaderLayout {
  int64_t header_bytes = 0;
  std::vector<int64_t> cube_offsets;      // payload start per cube (gid order)
  std::vector<int64_t> particle_offsets;  // particle chunk start per cube
  int64_t particle_section = 0;
  int64_t checksum_offset = 0;
  int64_t total_bytes = 0;
};

HeaderLayout compute_layout(int n_cubes, int n_fields,
                            const std::vector<std::vector<int64_t>>& stream_lens,
                            const std::vector<int64_t>& particle_bytes) {
  HeaderLayout lay;
  lay.header_bytes = 8 + 4 * 6 + 3 * 8 + 6 * 8 + 8 + 8 + 8 + 8 + 8 + 8 +
                     n_fields * 24 + static_cast<int64_t>(n_cubes) * (8 + 24 + 8 * n_fields + 8);
  int64_t pos = lay.header_bytes;
  lay.cube_offsets.resize(n_cubes);
  for (int gid = 0; gid < n_cubes; ++gid) {
    lay.cube_offsets[gid] = pos;
    for (int f = 0; f < n_fields; ++f) pos += stream_lens[f][gid];
  }
  lay.particle_section = pos;
  lay.particle_offsets.resize(n_cubes);
  for (int gid = 0; gid < n_cubes; ++gid) {
    lay.particle_offsets[gid] = pos;
    pos += particle_bytes[gid];
  }
  lay.checksum_offset = pos;
  lay.total_bytes = pos + 8;
  return lay;
}

std::vector<uint8_t> build_header(const BcmMesh& mesh, const CheckpointWriteSpec& spec,
                                  const CheckpointExtras& extras, double q,
                                  const std::vector<std::vector<int64_t>>& stream_lens,
                                  const std::vector<int64_t>& particle_bytes) {
  std::vector<uint8_t> h;
  h.insert(h.end(), kMagic, kMagic + 8);
  put<uint32_t>(h, kVersion);
  put<uint32_t>(h, static_cast<uint32_t>(spec.fields.size()));
  put<uint32_t>(h, static_cast<uint32_t>(mesh.num_cubes()));
  put<uint32_t>(h, static_cast<uint32_t>(mesh.n_cells_per_edge));
  put<uint32_t>(h, static_cast<uint32_t>(mesh.n_levels));
  put<uint32_t>(h, static_cast<uint32_t>(spec.mode));
  put<int64_t>(h, mesh.level0_tiling.x);
  put<int64_t>(h, mesh.level0_tiling.y);
  put<int64_t>(h, mesh.level0_tiling.z);
  for (int a = 0; a < 3; ++a) put<double>(h, mesh.domain.lo[a]);
  for (int a = 0; a < 3; ++a) put<double>(h, mesh.domain.hi[a]);
  put<double>(h, extras.time);
  put<int64_t>(h, extras.step);
  put<double>(h, extras.force_sum_x);
  put<int64_t>(h, extras.force_samples);
  put<int64_t>(h, extras.have_prev ? 1 : 0);
  put<double>(h, q);
  for (size_t f = 0; f < spec.fields.size(); ++f) {
    char name[16] = {};
    std::strncpy(name, spec.field_names[f].c_str(), 15);
    h.insert(h.end(), name, name + 16);
    put<uint32_t>(h, static_cast<uint32_t>(spec.fields[f]->components()));
    put<uint32_t>(h, 0);
  }
  for (const Cube& c : mesh.cubes) {
    put<uint32_t>(h, static_cast<uint32_t>(c.level));
    put<uint32_t>(h, 0);
    put<int64_t>(h, c.base_units.x);
    put<int64_t>(h, c.base_units.y);
    put<int64_t>(h, c.base_units.z);
    for (size_t f = 0; f < spec.fields.size(); ++f)
      put<uint64_t>(h, static_cast<uint64_t>(stream_lens[f][c.global_id]));
    put<uint64_t>(h, static_cast<uint64_t>(particle_bytes[c.global_id]));
  }
  return h;
}

}  // namespace

void write_checkpoint(const std::string& path, const BcmMesh& mesh, const Distribution& dist,
                      const IndexMap& imap, const CheckpointWriteSpec& spec,
                      const ParticleStore& store, const CheckpointExtras& extras,
                      Transport& transport, RankId self, WorkerPool* pool) {
  const int n_fields = static_cast<int>(spec.fields.size());
  const int N = mesh.num_cubes();
  const int n_local = static_cast<int>(imap.local_to_global.size());
  const double q = spec.mode == CompressionMode::lossy
                       ? quant_step_for_tolerance(spec.lossy_abs_tol)
                       : 0.0;

  // Compress local cubes, thread-parallel; output independent of worker count.
  std::vector<std::vector<std::vector<uint8_t>>> streams(
      n_fields, std::vector<std::vector<uint8_t>>(n_local));
  auto compress_one = [&](int64_t lc) {
    for (int f = 0; f < n_fields; ++f) {
      const Field& fld = *spec.fields[f];
      streams[f][lc] =
          compress_cube(fld.cube_span(static_cast<int>(lc)), fld.ext(), fld.components(),
                        spec.mode, q);
    }
  };
  if (pool)
    pool->parallel_for(n_local, compress_one);
  else
    for (int lc = 0; lc < n_local; ++lc) compress_one(lc);

  // Particle chunks, sorted by id.
  std::vector<std::vector<uint8_t>> particle_chunks(n_local);
  for (int lc = 0; lc < n_local; ++lc) {
    const auto sorted = store.sets[lc].sorted();
    auto& buf = particle_chunks[lc];
    buf.reserve(sorted.size() * sizeof(WireParticle));
    for (const Particle* p : sorted) {
      WireParticle w{p->global_id, p->position.x, p->position.y, p->position.z, p->dc_volume,
                     static_cast<int64_t>(p->body_id)};
      put(buf, w);
    }
  }

  // Everyone learns every stream length, so offsets agree without negotiation.
  Collectives coll(transport, self, 63);
  std::vector<std::vector<int64_t>> stream_lens(n_fields, std::vector<int64_t>(N, 0));
  for (int f = 0; f < n_fields; ++f) {
    std::vector<double> lens(n_local);
    for (int lc = 0; lc < n_local; ++lc) lens[lc] = static_cast<double>(streams[f][lc].size());
    const auto global = coll.gather_by_gid(imap.local_to_global, lens, N);
    for (int g = 0; g < N; ++g) stream_lens[f][g] = static_cast<int64_t>(global[g]);
  }
  std::vector<int64_t> particle_bytes(N, 0);
  {
    std::vector<double> lens(n_local);
    for (int lc = 0; lc < n_local; ++lc)
      lens[lc] = static_cast<double>(particle_chunks[lc].size());
    const auto global = coll.gather_by_gid(imap.local_to_global, lens, N);
    for (int g = 0; g < N; ++g) particle_bytes[g] = static_cast<int64_t>(global[g]);
  }

  const HeaderLayout lay = compute_layout(N, n_fields, stream_lens, particle_bytes);

  if (!spec.single_writer) {
    if (self == 0) {
      RawFile file(path, true);
      if (::ftruncate(file.fd, lay.total_bytes) != 0) throw IoError("io: cannot size " + path);
      const auto header = build_header(mesh, spec, extras, q, stream_lens, particle_bytes);
      file.pwrite_all(header.data(), header.size(), 0);
    }
    transport.barrier();
    {
      RawFile file(path, false);
      for (int lc = 0; lc < n_local; ++lc) {
        const int gid = imap.local_to_global[lc];
        int64_t pos = lay.cube_offsets[gid];
        for (int f = 0; f < n_fields; ++f) {
          file.pwrite_all(streams[f][lc].data(), streams[f][lc].size(), pos);
          pos += static_cast<int64_t>(streams[f][lc].size());
        }
        file.pwrite_all(particle_chunks[lc].data(), particle_chunks[lc].size(),
                        lay.particle_offsets[gid]);
      }
    }
    transport.barrier();
  } else {
    // Single-writer fallback: everyone ships (offset, bytes) chunks to rank 0.
    std::vector<uint8_t> outgoing;
    auto add_chunk = [&](int64_t off, const std::vector<uint8_t>& bytes) {
      put<int64_t>(outgoing, off);
      put<int64_t>(outgoing, static_cast<int64_t>(bytes.size()));
      outgoing.insert(outgoing.end(), bytes.begin(), bytes.end());
    };
    for (int lc = 0; lc < n_local; ++lc) {
      const int gid = imap.local_to_global[lc];
      int64_t pos = lay.cube_offsets[gid];
      for (int f = 0; f < n_fields; ++f) {
        add_chunk(pos, streams[f][lc]);
        pos += static_cast<int64_t>(streams[f][lc].size());
      }
      add_chunk(lay.particle_offsets[gid], particle_chunks[lc]);
    }
    if (self != 0) {
      transport.post_send(self, 0, kIoTagBase, std::move(outgoing));
    } else {
      RawFile file(path, true);
      if (::ftruncate(file.fd, lay.total_bytes) != 0) throw IoError("io: cannot size " + path);
      const auto header = build_header(mesh, spec, extras, q, stream_lens, particle_bytes);
      file.pwrite_all(header.data(), header.size(), 0);
      auto write_chunks = [&](const std::vector<uint8_t>& blob) {
        const uint8_t* p = blob.data();
        const uint8_t* end = p + blob.size();
        while (p < end) {
          const int64_t off = get<int64_t>(p);
          const int64_t len = get<int64_t>(p);
          file.pwrite_all(p, static_cast<size_t>(len), off);
          p += len;
        }
      };
      write_chunks(outgoing);
      for (int r = 1; r < dist.ranks(); ++r) {
        auto h = transport.post_recv(0, r, kIoTagBase);
        transport.wait(h);
        write_chunks(h->payload);
      }
    }
    transport.barrier();
  }

  // Trailing whole-file checksum, appended once everything is in place.
  if (self == 0) {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes(static_cast<size_t>(lay.checksum_offset));
    in.read(bytes.data(), lay.checksum_offset);
    if (in.gcount() != lay.checksum_offset) throw IoError("io: short read during checksum");
    const uint64_t sum = fnv1a64(bytes.data(), bytes.size());
    RawFile file(path, false);
    file.pwrite_all(&sum, 8, lay.checksum_offset);
  }
  transport.barrier();
}

CheckpointData read_checkpoint(const std::string& path, int n_ranks, RankId self) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("io: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  if (bytes.size() < 16 + 8) throw IoError("io: truncated checkpoint");
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw IoError("io: bad magic");

  // Verify the trailing checksum before trusting anything else.
  uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  const uint64_t computed = fnv1a64(bytes.data(), bytes.size() - 8);
  if (stored != computed) throw IoError("io: checksum mismatch (truncated or corrupt file)");

  const uint8_t* p = bytes.data() + 8;
  const uint32_t version = get<uint32_t>(p);
  if (version != kVersion) throw IoError("io: unsupported checkpoint version");
  const int n_fields = static_cast<int>(get<uint32_t>(p));
  const int N = static_cast<int>(get<uint32_t>(p));
  const int n_cells = static_cast<int>(get<uint32_t>(p));
  const int n_levels = static_cast<int>(get<uint32_t>(p));
  get<uint32_t>(p);  // mode
  IVec3 tiling{get<int64_t>(p), get<int64_t>(p), get<int64_t>(p)};
  Box domain;
  for (int a = 0; a < 3; ++a) domain.lo[a] = get<double>(p);
  for (int a = 0; a < 3; ++a) domain.hi[a] = get<double>(p);

  CheckpointData data;
  data.extras.time = get<double>(p);
  data.extras.step = get<int64_t>(p);
  data.extras.force_sum_x = get<double>(p);
  data.extras.force_samples = get<int64_t>(p);
  data.extras.have_prev = get<int64_t>(p) != 0;
  get<double>(p);  // q

  data.field_names.resize(n_fields);
  data.field_components.resize(n_fields);
  for (int f = 0; f < n_fields; ++f) {
    char name[16];
    std::memcpy(name, p, 16);
    p += 16;
    data.field_names[f] = std::string(name);
    data.field_components[f] = static_cast<int>(get<uint32_t>(p));
    get<uint32_t>(p);
  }

  std::vector<std::pair<int32_t, IVec3>> records(N);
  std::vector<std::vector<int64_t>> stream_lens(n_fields, std::vector<int64_t>(N));
  std::vector<int64_t> particle_bytes(N);
  for (int g = 0; g < N; ++g) {
    records[g].first = static_cast<int32_t>(get<uint32_t>(p));
    get<uint32_t>(p);
    records[g].second = {get<int64_t>(p), get<int64_t>(p), get<int64_t>(p)};
    for (int f = 0; f < n_fields; ++f) stream_lens[f][g] = static_cast<int64_t>(get<uint64_t>(p));
    particle_bytes[g] = static_cast<int64_t>(get<uint64_t>(p));
  }

  const HeaderLayout lay = compute_layout(N, n_fields, stream_lens, particle_bytes);
  if (static_cast<int64_t>(bytes.size()) != lay.total_bytes)
    throw IoError("io: checkpoint size inconsistent with header");

  data.mesh = assemble_mesh(domain, tiling, n_cells, n_levels, records);
  data.dist = Distribution::linear(N, n_ranks);
  IndexMap imap = IndexMap::build(data.dist, self);

  const int ext = n_cells + 4;
  data.fields.assign(n_fields, {});
  for (int f = 0; f < n_fields; ++f)
    data.fields[f].resize(imap.local_to_global.size());
  data.particles.sets.resize(imap.local_to_global.size());

  for (size_t lc = 0; lc < imap.local_to_global.size(); ++lc) {
    const int gid = imap.local_to_global[lc];
    int64_t pos = lay.cube_offsets[gid];
    for (int f = 0; f < n_fields; ++f) {
      const auto len = static_cast<size_t>(stream_lens[f][gid]);
      data.fields[f][lc] = decompress_cube(std::span(bytes.data() + pos, len), ext,
                                           data.field_components[f]);
      pos += static_cast<int64_t>(len);
    }
    data.particles.sets[lc].cube_gid = gid;
    const uint8_t* pp = bytes.data() + lay.particle_offsets[gid];
    const int64_t count = particle_bytes[gid] / static_cast<int64_t>(sizeof(WireParticle));
    for (int64_t i = 0; i < count; ++i) {
      const auto w = get<WireParticle>(pp);
      Particle part;
      part.global_id = w.id;
      part.position = {w.x, w.y, w.z};
      part.dc_volume = w.dc;
      part.body_id = static_cast<int32_t>(w.body_and_pad);
      data.particles.sets[lc].members.emplace(part.global_id, part);
    }
  }
  return data;
}

void export_vtk(const std::string& path, const BcmMesh& mesh, const IndexMap& imap,
                const Field& field, const std::string& name) {
  const int n = field.n();
  for (size_t lc = 0; lc < imap.local_to_global.size(); ++lc) {
    const Cube& cube = mesh.cubes[imap.local_to_global[lc]];
    const Vec3 origin = mesh.cell_center(cube, {0, 0, 0});
    const double dx = mesh.cell_spacing(cube);
    std::ofstream out(path + ".cube" + std::to_string(cube.global_id) + ".vtk");
    out << "# vtk DataFile Version 3.0\n" << name << "\nASCII\nDATASET STRUCTURED_POINTS\n";
    out << "DIMENSIONS " << n << " " << n << " " << n << "\n";
    out << "ORIGIN " << origin.x << " " << origin.y << " " << origin.z << "\n";
    out << "SPACING " << dx << " " << dx << " " << dx << "\n";
    out << "POINT_DATA " << n * n * n << "\n";
    if (field.components() == 1) {
      out << "SCALARS " << name << " double 1\nLOOKUP_TABLE default\n";
      for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j)
          for (int i = 0; i < n; ++i) out << field.at(static_cast<int>(lc), 0, i, j, k) << "\n";
    } else {
      out << "VECTORS " << name << " double\n";
      for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j)
          for (int i = 0; i < n; ++i)
            out << field.at(static_cast<int>(lc), 0, i, j, k) << " "
                << field.at(static_cast<int>(lc), 1, i, j, k) << " "
                << field.at(static_cast<int>(lc), 2, i, j, k) << "\n";
    }
  }
}

}  // namespace bcm

#pragma once

#include <string>

#include "bcm/lagrangian.hpp"
#include "bcm/wavelet.hpp"

namespace bcm {

enum class CompressionMode : uint8_t { lossless = 0, lossy = 1 };

/// Per-cube, per-field payload codec. The block includes the halo region.
/// Lossless: reversible integer-lifting wavelet of the raw bit patterns,
/// DEFLATE-coded; exact round trip. Lossy: double-precision wavelet,
/// uniform scalar quantization of the detail bands with step q (the
/// approximation band stays at full precision), DEFLATE-coded; max
/// reconstruction error bounded by kLossyAmplification * q.
std::vector<uint8_t> compress_cube(std::span<const double> values, int ext, int n_components,
                                   CompressionMode mode, double q);
std::vector<double> decompress_cube(std::span<const uint8_t> stream, int ext, int n_components);

/// Quantization step that keeps the reconstruction error within abs_tol.
inline double quant_step_for_tolerance(double abs_tol) {
  return abs_tol / kLossyAmplification;
}

struct CheckpointExtras {
  double time = 0.0;
  int64_t step = 0;
  double force_sum_x = 0.0;
  int64_t force_samples = 0;
  bool have_prev = false;
};

struct CheckpointWriteSpec {
  std::vector<std::string> field_names;
  std::vector<const Field*> fields;
  CompressionMode mode = CompressionMode::lossless;
  double lossy_abs_tol = 1e-4;  // absolute tolerance for the quantizer
  bool single_writer = false;   // fallback for filesystems without ranged writes
};

/// Writes one flat self-describing file: header (mesh geometry, cube
/// records, per-field stream lengths), concatenated per-cube streams in
/// global-id order, a particle section, and a trailing whole-file checksum.
/// Collective over the current distribution; byte-deterministic for
/// identical state. Each rank range-writes its own cubes unless
/// single_writer is set.
void write_checkpoint(const std::string& path, const BcmMesh& mesh, const Distribution& dist,
                      const IndexMap& imap, const CheckpointWriteSpec& spec,
                      const ParticleStore& store, const CheckpointExtras& extras,
                      Transport& transport, RankId self, WorkerPool* pool = nullptr);

struct CheckpointData {
  BcmMesh mesh;
  Distribution dist;  // linear over the reading rank count
  CheckpointExtras extras;
  std::vector<std::string> field_names;
  std::vector<int> field_components;
  // [field][local cube][values]: this rank's share under the linear distribution
  std::vector<std::vector<std::vector<double>>> fields;
  ParticleStore particles;
};

/// Reads the rank's share under the linear distribution recomputed from the
/// header for the given rank count. Verifies magic, version, and the
/// trailing checksum before touching any payload.
CheckpointData read_checkpoint(const std::string& path, int n_ranks, RankId self);

/// Legacy-VTK structured-points dump of one field, one file per call
/// (inspection only, not restartable).
void export_vtk(const std::string& path, const BcmMesh& mesh, const IndexMap& imap,
                const Field& field, const std::string& name);

}  // namespace bcm

#pragma once

#include <array>
#include <memory>
#include <vector>

#include "bcm/field.hpp"
#include "bcm/transport.hpp"

namespace bcm {

/// Transfer kinds across a cube face. Same-level faces copy, fine->coarse
/// averages 2x2x2 blocks, coarse->fine injects (piecewise-constant copy of
/// the coarse cell into every fine halo cell it covers).
enum class TransferKind : uint8_t { copy, average, inject };

/// 1/8-weighted (or caller-weighted) average of a 2x2x2 fine block;
/// exact for linear fields when weights are uniform.
double fine_to_coarse(std::span<const double> fine8, std::span<const double> weights8);
double fine_to_coarse(std::span<const double> fine8);

/// Piecewise-constant injection of one coarse value into a 2x2x2 block.
std::array<double, 8> coarse_to_fine(double coarse);

enum class BcKind : uint8_t { noslip, slip, inflow, outflow, neumann };

/// Fine->coarse halo averaging variant. `geometric` is the volume average of
/// the full 2x2x2 block (exact for linear fields at the halo-cell center).
/// `first_layer` averages only the four fine cells touching the shared face,
/// which pairs with a 1.5h center-distance flux to make the Poisson operator
/// conservative and symmetric across refinement interfaces.
enum class InterfaceAvg : uint8_t { geometric, first_layer };

/// Per-face boundary treatment of one field. Vector fields reflect per the
/// kind (no-slip odd, slip mixed, inflow fixed-value, outflow zero-gradient);
/// scalar fields always mirror (zero-Neumann).
struct FieldBc {
  std::array<BcKind, kNumFaces> kind{BcKind::neumann, BcKind::neumann, BcKind::neumann,
                                     BcKind::neumann, BcKind::neumann, BcKind::neumann};
  std::array<Vec3, kNumFaces> inflow_value{};

  static FieldBc all_neumann() { return {}; }
};

/// Half-open index region in a cube's cell space (halo indices allowed).
struct Region {
  std::array<int, 3> lo{0, 0, 0}, hi{0, 0, 0};
  int64_t cells() const {
    return static_cast<int64_t>(hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]);
  }
};

/// One transfer: fills `dst` region of cube dst_gid from cube src_gid.
/// The source index of a dst cell follows the kind:
///   copy     src = dst + t
///   inject   src = floor((dst + t) / 2)
///   average  src block base = 2*dst + t   (2x2x2, clamped to available cells)
struct Recipe {
  int32_t src_gid = -1, dst_gid = -1;
  TransferKind kind = TransferKind::copy;
  uint8_t face = 0;   // dst face being filled
  uint8_t round = 0;  // 0: faces; 1: y-sweep edges; 2: z-sweep edges/corners
  IVec3 t;
  Region dst;
};

/// Everything one rank needs to run an exchange at one multigrid depth:
/// recipes split into local transfers, per-peer send/receive batches (both
/// sides enumerate them in the same canonical order, so message layout is
/// agreed without negotiation), boundary-condition regions, the reverse
/// (transpose) walk, and the internal/external zone split.
struct ExchangePlan {
  int n = 0;      // cells per edge at this depth
  int depth = 0;

  std::array<std::vector<Recipe>, 3> local;
  struct Batch {
    RankId peer = 0;
    std::vector<Recipe> items;
    int64_t n_cells = 0;
  };
  std::array<std::vector<Batch>, 3> send, recv;
  std::array<std::vector<Recipe>, 3> bc;

  // Reverse pass: accumulate halo images back into owning interiors.
  // Items whose source cube is local, in canonical order; batch < 0 means the
  // halo data is local, else it arrives in rev_recv[round][batch] at
  // cell_offset (in cells; multiply by n_components at run time).
  struct RevItem {
    Recipe r;
    int batch = -1;
    int64_t cell_offset = 0;
  };
  std::array<std::vector<RevItem>, 3> rev_apply;
  std::array<std::vector<Batch>, 3> rev_send, rev_recv;

  std::vector<int32_t> internal_locals, external_locals;  // local cube indices
  std::vector<uint8_t> zone_of_local;                     // 0 internal, 1 external
};

/// External-zone labels: a cube is external iff at least one face neighbor
/// lives on another rank. Indexed by global id.
std::vector<uint8_t> classify_zones(const BcmMesh& mesh, const Distribution& dist);

/// Pending exchange token. A field admits one outstanding exchange.
struct ExchangeToken {
  Field* field = nullptr;
  const FieldBc* bc = nullptr;
  int depth = 0;
  int stage = 0;  // rounds completed
  uint64_t epoch = 0;
  InterfaceAvg avg = InterfaceAvg::geometric;
  std::vector<Handle> recvs;  // round-0 receives, batch order
};

/// Multithreaded overlapped halo exchange bound to (mesh, distribution).
///
/// begin() posts receives, packs and sends off-rank faces (one worker claims
/// the packer role, the rest run the on-rank transfers), and returns with all
/// face halos whose source is on-rank valid -- enough for straight stencils
/// on internal-zone cubes. finalize() drains arrivals first come first
/// served, then runs the edge/corner sweeps. When a rank has no off-rank
/// neighbor the whole exchange completes inside begin().
///
/// reverse() is the exact transpose: halo contributions are summed back into
/// the cells that forward transfers read, in a fixed canonical order, and
/// halos are zeroed. Boundary-condition ghost regions have no transpose and
/// are dropped.
class HaloExchanger {
public:
  /// tag_stream separates the message tags of successive exchanger
  /// generations (the distribution changes on rebalance); all ranks must
  /// pass the same value.
  HaloExchanger(const BcmMesh& mesh, const Distribution& dist, Transport& transport, RankId self,
                std::array<bool, 3> periodic = {false, false, false}, int tag_stream = 0);

  int depths() const { return static_cast<int>(plans_.size()); }
  const ExchangePlan& plan(int depth = 0) const { return *plans_[depth]; }
  const IndexMap& index_map() const { return imap_; }

  ExchangeToken begin(Field& f, const FieldBc& bc, int depth = 0, WorkerPool* pool = nullptr,
                      InterfaceAvg avg = InterfaceAvg::geometric);
  void finalize(ExchangeToken& token, WorkerPool* pool = nullptr);
  void exchange(Field& f, const FieldBc& bc, int depth = 0, WorkerPool* pool = nullptr,
                InterfaceAvg avg = InterfaceAvg::geometric);

  void reverse(Field& f, int depth = 0);

private:
  void build_plan(int depth);
  void run_local_round(Field& f, const FieldBc& bc, const ExchangePlan& plan, int round,
                       WorkerPool* pool, InterfaceAvg avg);
  void post_round_recvs(ExchangeToken& t, const ExchangePlan& plan, int round,
                        std::vector<Handle>& out);
  void pack_send_round(Field& f, const ExchangePlan& plan, int round, InterfaceAvg avg);
  void unpack_batch(Field& f, const ExchangePlan::Batch& batch,
                    const std::vector<uint8_t>& bytes);
  void run_rounds_12(ExchangeToken& t, WorkerPool* pool);

  const BcmMesh& mesh_;
  const Distribution& dist_;
  Transport& transport_;
  RankId self_;
  std::array<bool, 3> periodic_;
  int tag_stream_ = 0;
  IndexMap imap_;
  std::vector<std::unique_ptr<ExchangePlan>> plans_;
  uint64_t epoch_ = 0;
  uint64_t current_pack_epoch_ = 0;
};

}  // namespace bcm

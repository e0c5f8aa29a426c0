#pragma once

#include <optional>

#include "bcm/field.hpp"
#include "bcm/lagrangian.hpp"

namespace bcm {

struct BalanceConfig {
  double kappa = 1.04;  // rebalance when W_max / W_avg exceeds this
  double gamma = 3.0;   // particle cost factor, sensible range 1-4
  int cadence = 100;    // steps between checks
};

/// Weighted dual graph of the mesh: one node per cube, an edge per shared
/// face. Node weights: cell count and gamma * particle count. Edge weight:
/// halo cells exchanged across the face. A node's total weight folds in its
/// incident edge weights.
struct DualGraph {
  struct Edge {
    int32_t to = -1;
    double weight = 0.0;
  };
  std::vector<double> w_cells;      // w^v1
  std::vector<double> w_particles;  // w^v2 = gamma * n_particles
  std::vector<std::vector<Edge>> edges;

  int nodes() const { return static_cast<int>(w_cells.size()); }
  double node_total(int i) const;
};

DualGraph build_graph(const BcmMesh& mesh, const std::vector<int64_t>& particles_per_cube,
                      const BalanceConfig& cfg);

struct ImbalanceEstimate {
  std::vector<double> per_rank;  // W(q)
  double ratio = 1.0;            // W_max / W_avg (empty ranks count in the average)
};

ImbalanceEstimate estimate_imbalance(const DualGraph& graph, const Distribution& assignment);

/// Built-in k-way partitioner: recursive weighted bisection along the
/// Z-order, then a boundary-refinement pass that shifts border cubes when
/// that lowers the worst deviation without raising the edge cut by more
/// than 10%. Returns part index per node. Throws if k > nodes.
std::vector<int> partition_graph(const DualGraph& graph, int k);

double edge_cut(const DualGraph& graph, const std::vector<int>& part);

/// S[old_rank][new_part] = cell-count weight already resident on old_rank
/// if that part is assigned to it.
std::vector<std::vector<double>> construct_similarity(const DualGraph& graph,
                                                      const Distribution& old_assignment,
                                                      const std::vector<int>& new_parts, int k);

/// Greedy maximum-weight bipartite matching: entries in descending weight,
/// accepted iff both endpoints are free. Retains at least half the optimal
/// weight. Returns rank assigned to each new part.
std::vector<int> remap_mwbg(const std::vector<std::vector<double>>& S);

struct BalanceDecision {
  bool fired = false;
  double pre_ratio = 1.0;
  double post_ratio = 1.0;
  double cut = 0.0;
  int cubes_moved = 0;
  Distribution new_dist;
};

/// The balance step up to (but not including) data movement: estimate, and
/// if the threshold trips, partition + similarity + remap into an explicit
/// distribution relabeled for minimal movement. Deterministic, so every rank
/// computes the same decision from the replicated graph.
BalanceDecision plan_rebalance(const DualGraph& graph, const Distribution& current,
                               const BalanceConfig& cfg);

struct RedistributedState {
  std::vector<std::vector<double>> field_payloads;  // per field, new-local-order cube arrays
  ParticleStore particles;
  int64_t bytes_moved = 0;
};

/// Moves per-cube field payloads and particle sets to their new owners.
/// Collective; the global state is preserved up to ownership relabeling.
RedistributedState redistribute(const Distribution& old_dist, const Distribution& new_dist,
                                const std::vector<const Field*>& fields,
                                const ParticleStore& store, Transport& transport, RankId self,
                                uint64_t epoch);

}  // namespace bcm

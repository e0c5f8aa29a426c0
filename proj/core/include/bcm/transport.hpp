#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

#include "bcm/decomp.hpp"
#include "bcm/types.hpp"

namespace bcm {

/// One posted send or receive. Completes exactly once; payload immutable
/// after posting. Receives carry the delivered bytes after completion.
struct MessageHandle {
  RankId owner = 0;  // rank that posted the handle
  RankId peer = 0;
  int64_t tag = 0;
  bool is_recv = false;
  std::atomic<bool> complete{false};
  std::vector<uint8_t> payload;
};
using Handle = std::shared_ptr<MessageHandle>;

/// Rank-addressed non-blocking message passing, fully in one process.
/// Matching is FIFO per (peer, tag) channel; there is no ordering guarantee
/// across distinct channels. Sends are buffered and complete at post time.
///
/// An optional seeded delay mode holds arrived messages back for a random
/// number of polls, to exercise overlap logic under reordering.
class Transport {
public:
  explicit Transport(int n_ranks, uint64_t delay_seed = 0, int max_delay_polls = 0);

  int ranks() const { return n_ranks_; }

  Handle post_send(RankId self, RankId peer, int64_t tag, std::vector<uint8_t> payload);
  Handle post_recv(RankId self, RankId peer, int64_t tag);

  /// Non-blocking: indices of handles newly observed complete. Repeated
  /// polling returns every handle whose match has been posted.
  std::vector<int> test_some(const std::vector<Handle>& handles);

  /// Poll until the handle completes.
  void wait(const Handle& h);

  /// Collective: returns after all ranks have entered. Generation-counted,
  /// so back-to-back barriers do not interfere.
  void barrier();

  void close();
  bool closed() const { return closed_.load(); }

private:
  struct Channel {
    std::deque<std::pair<std::vector<uint8_t>, uint64_t>> arrived;  // payload, visible_after
    std::deque<Handle> waiting;
  };
  struct Mailbox {
    std::mutex mtx;
    std::map<std::pair<RankId, int64_t>, Channel> channels;
    uint64_t poll_count = 0;
  };

  void match_locked(Mailbox& mb, Channel& ch);

  int n_ranks_;
  std::vector<std::unique_ptr<Mailbox>> mail_;
  std::atomic<bool> closed_{false};

  std::mutex barrier_mtx_;
  std::condition_variable barrier_cv_;
  int barrier_in_ = 0;
  uint64_t barrier_gen_ = 0;

  int max_delay_polls_ = 0;
  std::mutex rng_mtx_;
  std::mt19937_64 rng_;
};

/// Intra-rank worker pool. parallel_for distributes iterations dynamically;
/// run_workers invokes fn once per worker (fn decides roles itself, as the
/// halo exchange does with its first-arrival packer claim).
class WorkerPool {
public:
  explicit WorkerPool(int n_workers);
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;

  int size() const { return n_workers_; }

  void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);
  void run_workers(const std::function<void(int)>& fn);  // fn(worker_index)

private:
  void entry(int idx);

  int n_workers_;
  std::vector<std::thread> threads_;
  std::mutex mtx_;
  std::condition_variable cv_start_, cv_done_;
  uint64_t job_gen_ = 0;
  int done_count_ = 0;
  bool stop_ = false;
  std::function<void(int)> job_;
};

/// Per-rank context handed to the SPMD body.
struct RankContext {
  RankId rank = 0;
  int n_ranks = 1;
  Transport* transport = nullptr;
  WorkerPool* pool = nullptr;
};

/// Runs fn(ctx) on P rank threads, each with its own T-worker pool.
/// Exceptions from rank threads are collected and the first is rethrown.
void run_ranks(int n_ranks, int n_workers, Transport& transport,
               const std::function<void(RankContext&)>& fn);

/// Deterministic collectives built on the transport. Reductions gather
/// per-element contributions to rank 0, combine them in a fixed global
/// order, and broadcast, so results are independent of rank count and
/// arrival order.
class Collectives {
public:
  /// All ranks must construct their Collectives with the same stream id and
  /// issue the same sequence of calls; distinct streams never cross-match.
  Collectives(Transport& t, RankId self, int stream = 0) : t_(t), self_(self), stream_(stream) {}

  /// Sum of per-cube partials in ascending global-id order.
  double sum_ordered(const std::vector<int32_t>& gids, const std::vector<double>& values,
                     int64_t n_global);
  double max_all(double v);
  double min_all(double v);
  int64_t sum_int(int64_t v);

  /// Gathers each rank's (gid, value) pairs into a global array on every rank.
  std::vector<double> gather_by_gid(const std::vector<int32_t>& gids,
                                    const std::vector<double>& values, int64_t n_global);
  std::vector<uint8_t> broadcast(std::vector<uint8_t> bytes, RankId root);

private:
  int64_t next_tag();
  Transport& t_;
  RankId self_;
  int stream_ = 0;
  int64_t seq_ = 0;
};

}  // namespace bcm

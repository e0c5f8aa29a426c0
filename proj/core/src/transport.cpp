#include "bcm/transport.hpp"

#include <algorithm>
#include <cstring>

namespace bcm {

Transport::Transport(int n_ranks, uint64_t delay_seed, int max_delay_polls)
    : n_ranks_(n_ranks), max_delay_polls_(max_delay_polls), rng_(delay_seed) {
  if (n_ranks < 1) throw Error("Transport: rank count must be >= 1");
  mail_.reserve(n_ranks);
  for (int i = 0; i < n_ranks; ++i) mail_.push_back(std::make_unique<Mailbox>());
}

void Transport::match_locked(Mailbox& mb, Channel& ch) {
  while (!ch.arrived.empty() && !ch.waiting.empty()) {
    if (ch.arrived.front().second > mb.poll_count) break;  // still delayed
    Handle h = ch.waiting.front();
    ch.waiting.pop_front();
    h->payload = std::move(ch.arrived.front().first);
    ch.arrived.pop_front();
    h->complete.store(true, std::memory_order_release);
  }
}

Handle Transport::post_send(RankId self, RankId peer, int64_t tag, std::vector<uint8_t> payload) {
  if (closed_.load()) throw Error("Transport: post_send after close");
  if (peer < 0 || peer >= n_ranks_) throw Error("Transport: invalid peer rank");
  auto h = std::make_shared<MessageHandle>();
  h->owner = self;
  h->peer = peer;
  h->tag = tag;
  h->is_recv = false;
  h->payload = std::move(payload);

  uint64_t delay = 0;
  if (max_delay_polls_ > 0) {
    std::lock_guard lk(rng_mtx_);
    delay = rng_() % static_cast<uint64_t>(max_delay_polls_ + 1);
  }

  Mailbox& mb = *mail_[peer];
  {
    std::lock_guard lk(mb.mtx);
    const auto key = std::make_pair(self, tag);
    Channel& ch = mb.channels[key];
    ch.arrived.emplace_back(h->payload, mb.poll_count + delay);
    match_locked(mb, ch);
    if (ch.arrived.empty() && ch.waiting.empty()) mb.channels.erase(key);
  }
  // Buffered semantics: the send completes once the payload is enqueued.
  h->complete.store(true, std::memory_order_release);
  return h;
}

Handle Transport::post_recv(RankId self, RankId peer, int64_t tag) {
  if (closed_.load()) throw Error("Transport: post_recv after close");
  if (peer < 0 || peer >= n_ranks_) throw Error("Transport: invalid peer rank");
  auto h = std::make_shared<MessageHandle>();
  h->owner = self;
  h->peer = peer;
  h->tag = tag;
  h->is_recv = true;
  Mailbox& mb = *mail_[self];
  std::lock_guard lk(mb.mtx);
  const auto key = std::make_pair(peer, tag);
  Channel& ch = mb.channels[key];
  ch.waiting.push_back(h);
  match_locked(mb, ch);
  if (ch.arrived.empty() && ch.waiting.empty()) mb.channels.erase(key);
  return h;
}

std::vector<int> Transport::test_some(const std::vector<Handle>& handles) {
  // One poll tick per involved mailbox, advancing delayed deliveries.
  bool ticked[64] = {};
  for (const Handle& h : handles) {
    if (!h || !h->is_recv || h->complete.load(std::memory_order_acquire)) continue;
    const int owner = h->owner;
    if (owner < 64 && ticked[owner]) continue;
    if (owner < 64) ticked[owner] = true;
    Mailbox& mb = *mail_[owner];
    std::lock_guard lk(mb.mtx);
    mb.poll_count++;
    for (auto it = mb.channels.begin(); it != mb.channels.end();) {
      match_locked(mb, it->second);
      if (it->second.arrived.empty() && it->second.waiting.empty())
        it = mb.channels.erase(it);
      else
        ++it;
    }
  }
  std::vector<int> done;
  for (size_t i = 0; i < handles.size(); ++i)
    if (handles[i] && handles[i]->complete.load(std::memory_order_acquire))
      done.push_back(static_cast<int>(i));
  return done;
}

void Transport::wait(const Handle& h) {
  std::vector<Handle> hs{h};
  while (!h->complete.load(std::memory_order_acquire)) {
    test_some(hs);
    if (!h->complete.load(std::memory_order_acquire)) std::this_thread::yield();
  }
}

void Transport::barrier() {
  std::unique_lock lk(barrier_mtx_);
  const uint64_t gen = barrier_gen_;
  if (++barrier_in_ == n_ranks_) {
    barrier_in_ = 0;
    barrier_gen_++;
    barrier_cv_.notify_all();
  } else {
    barrier_cv_.wait(lk, [&] { return barrier_gen_ != gen; });
  }
}

void Transport::close() { closed_.store(true); }

// ---------------------------------------------------------------------------

WorkerPool::WorkerPool(int n_workers) : n_workers_(n_workers) {
  if (n_workers < 1) throw Error("WorkerPool: need at least one worker");
  for (int i = 1; i < n_workers; ++i) threads_.emplace_back([this, i] { entry(i); });
}

WorkerPool::~WorkerPool() {
  {
    std::lock_guard lk(mtx_);
    stop_ = true;
    job_gen_++;
  }
  cv_start_.notify_all();
  for (auto& t : threads_) t.join();
}

void WorkerPool::entry(int idx) {
  uint64_t seen = 0;
  for (;;) {
    std::function<void(int)> job;
    {
      std::unique_lock lk(mtx_);
      cv_start_.wait(lk, [&] { return stop_ || job_gen_ != seen; });
      if (stop_) return;
      seen = job_gen_;
      job = job_;
    }
    job(idx);
    {
      std::lock_guard lk(mtx_);
      if (++done_count_ == n_workers_ - 1) cv_done_.notify_all();
    }
  }
}

void WorkerPool::run_workers(const std::function<void(int)>& fn) {
  if (n_workers_ == 1) {
    fn(0);
    return;
  }
  {
    std::lock_guard lk(mtx_);
    job_ = fn;
    done_count_ = 0;
    job_gen_++;
  }
  cv_start_.notify_all();
  fn(0);
  std::unique_lock lk(mtx_);
  cv_done_.wait(lk, [&] { return done_count_ == n_workers_ - 1; });
}

void WorkerPool::parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  if (n <= 0) return;
  if (n_workers_ == 1 || n == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  run_workers([&](int) {
    for (;;) {
      const int64_t i = next.fetch_add(1, std::memory_order_relaxed);
      if (i >= n) return;
      fn(i);
    }
  });
}

// ---------------------------------------------------------------------------

void run_ranks(int n_ranks, int n_workers, Transport& transport,
               const std::function<void(RankContext&)>& fn) {
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(n_ranks);
  for (int r = 0; r < n_ranks; ++r) {
    threads.emplace_back([&, r] {
      try {
        WorkerPool pool(n_workers);
        RankContext ctx{r, n_ranks, &transport, &pool};
        fn(ctx);
      } catch (...) {
        errors[r] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------

namespace {
// Collective tags live above the halo-exchange tag space.
constexpr int64_t kCollectiveTagBase = int64_t{1} << 56;
constexpr int64_t kReplyFlag = int64_t{1} << 40;

template <class T>
std::vector<uint8_t> to_bytes(const std::vector<T>& v) {
  std::vector<uint8_t> out(v.size() * sizeof(T));
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}
template <class T>
std::vector<T> from_bytes(const std::vector<uint8_t>& b) {
  std::vector<T> out(b.size() / sizeof(T));
  std::memcpy(out.data(), b.data(), b.size());
  return out;
}
}  // namespace

int64_t Collectives::next_tag() {
  return kCollectiveTagBase + (static_cast<int64_t>(stream_) << 41) + seq_++;
}

std::vector<double> Collectives::gather_by_gid(const std::vector<int32_t>& gids,
                                               const std::vector<double>& values,
                                               int64_t n_global) {
  const int64_t tag = next_tag();
  std::vector<double> global(n_global, 0.0);
  if (t_.ranks() == 1) {
    for (size_t i = 0; i < gids.size(); ++i) global[gids[i]] = values[i];
    return global;
  }
  if (self_ != 0) {
    std::vector<double> packed;
    packed.reserve(gids.size() * 2);
    for (size_t i = 0; i < gids.size(); ++i) {
      packed.push_back(static_cast<double>(gids[i]));
      packed.push_back(values[i]);
    }
    t_.post_send(self_, 0, tag, to_bytes(packed));
    auto h = t_.post_recv(self_, 0, tag + kReplyFlag);
    t_.wait(h);
    return from_bytes<double>(h->payload);
  }
  for (size_t i = 0; i < gids.size(); ++i) global[gids[i]] = values[i];
  for (int r = 1; r < t_.ranks(); ++r) {
    auto h = t_.post_recv(0, r, tag);
    t_.wait(h);
    const auto packed = from_bytes<double>(h->payload);
    for (size_t i = 0; i + 1 < packed.size(); i += 2)
      global[static_cast<int64_t>(packed[i])] = packed[i + 1];
  }
  const auto bytes = to_bytes(global);
  for (int r = 1; r < t_.ranks(); ++r) t_.post_send(0, r, tag + kReplyFlag, bytes);
  return global;
}

double Collectives::sum_ordered(const std::vector<int32_t>& gids,
                                const std::vector<double>& values, int64_t n_global) {
  const auto global = gather_by_gid(gids, values, n_global);
  double s = 0.0;
  for (double v : global) s += v;
  return s;
}

double Collectives::max_all(double v) {
  const auto all = gather_by_gid({self_}, {v}, t_.ranks());
  double m = all[0];
  for (double x : all) m = std::max(m, x);
  return m;
}

double Collectives::min_all(double v) {
  const auto all = gather_by_gid({self_}, {v}, t_.ranks());
  double m = all[0];
  for (double x : all) m = std::min(m, x);
  return m;
}

int64_t Collectives::sum_int(int64_t v) {
  const auto all = gather_by_gid({self_}, {static_cast<double>(v)}, t_.ranks());
  int64_t s = 0;
  for (double x : all) s += static_cast<int64_t>(x);
  return s;
}

std::vector<uint8_t> Collectives::broadcast(std::vector<uint8_t> bytes, RankId root) {
  const int64_t tag = next_tag();
  if (t_.ranks() == 1) return bytes;
  if (self_ == root) {
    for (int r = 0; r < t_.ranks(); ++r)
      if (r != root) t_.post_send(self_, r, tag, bytes);
    return bytes;
  }
  auto h = t_.post_recv(self_, root, tag);
  t_.wait(h);
  return h->payload;
}

}  // namespace bcm

#include "sim/threading.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

#include "sim/error.hpp"

namespace sim {

namespace {

int resolve_default_threads() {
  if (const char* env = std::getenv("SIM_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

int g_thread_count = resolve_default_threads();

// Set while a thread is executing pool chunks; nested parallel_for calls run
// inline instead of re-entering the pool.
thread_local bool tl_in_pool = false;

// Lazily started pool; the calling thread participates, so a count of 1 is
// inline execution. Chunk boundaries depend only on (n, nchunks), never on
// scheduling, which keeps partitioned ops deterministic.
class Pool {
 public:
  static Pool& instance() {
    static Pool pool;
    return pool;
  }

  void run(int64_t nchunks, int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    std::lock_guard run_lock(run_mu_);
    ensure_workers(static_cast<int>(nchunks) - 1);
    {
      std::lock_guard lock(mu_);
      job_fn_ = &fn;
      job_n_ = n;
      job_chunks_ = nchunks;
      next_chunk_.store(0, std::memory_order_relaxed);
      pending_ = nchunks;
      ++generation_;
    }
    cv_.notify_all();
    drain_chunks();
    std::unique_lock lock(mu_);
    done_cv_.wait(lock, [&] { return pending_ == 0; });
    job_fn_ = nullptr;
  }

 private:
  Pool() = default;
  ~Pool() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  void ensure_workers(int wanted) {
    std::lock_guard lock(mu_);
    while (static_cast<int>(workers_.size()) < wanted) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void drain_chunks() {
    const auto* fn = job_fn_;
    int64_t n = job_n_;
    int64_t chunks = job_chunks_;
    tl_in_pool = true;
    for (;;) {
      int64_t c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
      if (c >= chunks) break;
      (*fn)(c * n / chunks, (c + 1) * n / chunks);
      std::lock_guard lock(mu_);
      if (--pending_ == 0) done_cv_.notify_all();
    }
    tl_in_pool = false;
  }

  void worker_loop() {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int64_t, int64_t)>* fn;
      int64_t n, chunks;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return stop_ || (generation_ != seen && job_fn_ != nullptr); });
        if (stop_) return;
        seen = generation_;
        fn = job_fn_;
        n = job_n_;
        chunks = job_chunks_;
      }
      tl_in_pool = true;
      for (;;) {
        int64_t c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
        if (c >= chunks) break;
        (*fn)(c * n / chunks, (c + 1) * n / chunks);
        std::lock_guard lock(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
      tl_in_pool = false;
    }
  }

  std::mutex run_mu_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> workers_;
  const std::function<void(int64_t, int64_t)>* job_fn_ = nullptr;
  int64_t job_n_ = 0;
  int64_t job_chunks_ = 0;
  std::atomic<int64_t> next_chunk_{0};
  int64_t pending_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
};

}  // namespace

int thread_count() { return g_thread_count; }

void set_thread_count(int n) {
  SIM_CHECK(n >= 1, "thread count must be >= 1, got " << n);
  g_thread_count = n;
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk_fn) {
  if (n <= 0) return;
  int64_t nchunks = std::min<int64_t>(g_thread_count, n);
  if (nchunks <= 1 || tl_in_pool) {
    chunk_fn(0, n);
    return;
  }
  Pool::instance().run(nchunks, n, chunk_fn);
}

void parallel_for_each(int64_t n, const std::function<void(int64_t)>& body) {
  parallel_for(n, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) body(i);
  });
}

}  // namespace sim

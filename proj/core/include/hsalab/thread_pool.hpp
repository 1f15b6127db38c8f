#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace hsalab {

// Fixed-size worker pool with a deterministic contract: parallel_for splits
// [0, n) into per-item tasks whose outputs must be disjoint, so results never
// depend on the worker count. Nested parallel_for calls run inline on the
// calling worker instead of deadlocking the pool.
class ThreadPool {
 public:
  explicit ThreadPool(unsigned workers) { start(workers == 0 ? 1 : workers); }

  ~ThreadPool() { stop(); }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  unsigned workers() const { return static_cast<unsigned>(threads_.size()) + 1; }

  // Runs fn(i) for every i in [0, n). Blocks until all items finish. The
  // caller participates, so a pool with 1 worker degenerates to a plain loop.
  void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    if (inside_worker() || threads_.empty() || n == 1) {
      for (std::size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    auto job = std::make_shared<Job>();
    job->fn = &fn;
    job->n = n;
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_ = job;
      ++epoch_;
    }
    cv_.notify_all();
    inside_worker() = true;
    run_job(*job);
    inside_worker() = false;
    {
      std::unique_lock<std::mutex> lk(job->done_mu);
      job->done_cv.wait(lk, [&] { return job->active.load() == 0; });
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (job_ == job) job_ = nullptr;
    }
  }

  // Global pool used by the library. Worker count can be set once up front
  // (CLI --workers); defaults to the hardware concurrency.
  static ThreadPool& global() {
    static ThreadPool pool(default_workers());
    return pool;
  }

  static void set_global_workers(unsigned workers) { requested_workers() = workers; }

  static unsigned default_workers() {
    if (requested_workers() != 0) return requested_workers();
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : hc;
  }

 private:
  struct Job {
    const std::function<void(std::size_t)>* fn = nullptr;
    std::size_t n = 0;
    std::atomic<std::size_t> next{0};
    std::atomic<int> active{0};
    std::mutex done_mu;
    std::condition_variable done_cv;
  };

  static unsigned& requested_workers() {
    static unsigned w = 0;
    return w;
  }

  static bool& inside_worker() {
    thread_local bool inside = false;
    return inside;
  }

  // Items are claimed through an atomic counter. A worker arriving after the
  // job drained exits without ever touching fn, so the caller may return as
  // soon as all claimed items completed.
  void run_job(Job& job) {
    job.active.fetch_add(1);
    for (;;) {
      const std::size_t i = job.next.fetch_add(1);
      if (i >= job.n) break;
      (*job.fn)(i);
    }
    if (job.active.fetch_sub(1) == 1) {
      std::lock_guard<std::mutex> lk(job.done_mu);
      job.done_cv.notify_all();
    }
  }

  void start(unsigned workers) {
    const unsigned extra = workers > 1 ? workers - 1 : 0;
    for (unsigned w = 0; w < extra; ++w) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  void worker_loop() {
    inside_worker() = true;
    std::uint64_t seen = 0;
    for (;;) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stopping_ || (job_ != nullptr && epoch_ != seen); });
        if (stopping_) return;
        seen = epoch_;
        job = job_;
      }
      if (job) run_job(*job);
    }
  }

  void stop() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::shared_ptr<Job> job_;
  std::uint64_t epoch_ = 0;
  bool stopping_ = false;
};

// Convenience wrapper over the global pool.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  ThreadPool::global().parallel_for(n, fn);
}

}  // namespace hsalab

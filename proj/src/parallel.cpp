#include "stni/parallel.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace stni {

namespace {

class WorkerPool {
 public:
  explicit WorkerPool(int n_workers) : n_workers_(n_workers) {
    for (int i = 0; i < n_workers_; ++i) {
      threads_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  ~WorkerPool() {
    {
      std::lock_guard lock(mu_);
      shutdown_ = true;
      ++generation_;
    }
    cv_start_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    std::unique_lock lock(mu_);
    task_ = &fn;
    task_n_ = n;
    pending_ = n_workers_;
    ++generation_;
    cv_start_.notify_all();
    cv_done_.wait(lock, [this] { return pending_ == 0; });
    task_ = nullptr;
  }

  int size() const { return n_workers_; }

 private:
  void worker_loop(int index) {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int64_t, int64_t)>* fn = nullptr;
      int64_t n = 0;
      {
        std::unique_lock lock(mu_);
        cv_start_.wait(lock, [&] { return generation_ != seen; });
        seen = generation_;
        if (shutdown_) return;
        fn = task_;
        n = task_n_;
      }
      if (fn) {
        auto [b, e] = chunk(n, index);
        if (b < e) (*fn)(b, e);
      }
      {
        std::lock_guard lock(mu_);
        if (--pending_ == 0) cv_done_.notify_all();
      }
    }
  }

  std::pair<int64_t, int64_t> chunk(int64_t n, int index) const {
    int64_t per = (n + n_workers_ - 1) / n_workers_;
    int64_t b = std::min<int64_t>(n, per * index);
    int64_t e = std::min<int64_t>(n, b + per);
    return {b, e};
  }

  int n_workers_;
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_start_;
  std::condition_variable cv_done_;
  const std::function<void(int64_t, int64_t)>* task_ = nullptr;
  int64_t task_n_ = 0;
  int pending_ = 0;
  uint64_t generation_ = 0;
  bool shutdown_ = false;
};

int configured_workers() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* env = std::getenv("STN_ICNN_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, cap);
  }
  return n;
}

WorkerPool& pool() {
  static WorkerPool p(configured_workers());
  return p;
}

}  // namespace

int worker_count() { return pool().size(); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  if (worker_count() == 1 || n == 1) {
    fn(0, n);
    return;
  }
  pool().run(n, fn);
}

}  // namespace stni

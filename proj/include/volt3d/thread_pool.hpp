#pragma once

#include <condition_variable>
#include <cstddef>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace volt3d {

// Persistent worker pool for data-parallel kernels. Work is always split into
// static, disjoint index ranges; a given output element is computed by exactly
// one worker with a fixed inner order, so results are bitwise identical for
// any thread count.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    void resize(std::size_t n) {
        if (n < 1) n = 1;
        std::lock_guard<std::mutex> api_lock(api_mutex_);
        stop_workers();
        n_threads_ = n;
        start_workers();
    }

    std::size_t size() const { return n_threads_; }

    // Calls fn(begin, end) on disjoint chunks covering [0, count).
    void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn) {
        if (count == 0) return;
        std::lock_guard<std::mutex> api_lock(api_mutex_);
        const std::size_t workers = std::min(n_threads_, count);
        if (workers <= 1) {
            fn(0, count);
            return;
        }
        const std::size_t chunk = (count + workers - 1) / workers;
        {
            std::unique_lock<std::mutex> lock(mutex_);
            task_ = &fn;
            task_count_ = count;
            task_chunk_ = chunk;
            task_workers_ = workers;
            pending_ = workers - 1;  // chunk 0 runs on the calling thread
            ++generation_;
        }
        wake_.notify_all();
        fn(0, std::min(chunk, count));
        std::unique_lock<std::mutex> lock(mutex_);
        done_.wait(lock, [&] { return pending_ == 0; });
        task_ = nullptr;
    }

    ~ThreadPool() { stop_workers(); }

private:
    ThreadPool() {
        n_threads_ = std::thread::hardware_concurrency();
        if (n_threads_ < 1) n_threads_ = 1;
        start_workers();
    }

    void start_workers() {
        shutdown_ = false;
        threads_.clear();
        for (std::size_t t = 1; t < n_threads_; ++t) {
            threads_.emplace_back([this, t] { worker_loop(t); });
        }
    }

    void stop_workers() {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            shutdown_ = true;
            ++generation_;
        }
        wake_.notify_all();
        for (auto& th : threads_) th.join();
        threads_.clear();
    }

    void worker_loop(std::size_t worker_index) {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(std::size_t, std::size_t)>* task = nullptr;
            std::size_t count = 0, chunk = 0, workers = 0;
            {
                std::unique_lock<std::mutex> lock(mutex_);
                wake_.wait(lock, [&] { return shutdown_ || generation_ != seen; });
                seen = generation_;
                if (shutdown_) return;
                task = task_;
                count = task_count_;
                chunk = task_chunk_;
                workers = task_workers_;
            }
            if (task != nullptr && worker_index < workers) {
                const std::size_t begin = worker_index * chunk;
                const std::size_t end = std::min(begin + chunk, count);
                if (begin < end) (*task)(begin, end);
            }
            {
                std::lock_guard<std::mutex> lock(mutex_);
                if (task != nullptr && worker_index < workers && pending_ > 0) {
                    if (--pending_ == 0) done_.notify_one();
                }
            }
        }
    }

    std::mutex api_mutex_;
    std::mutex mutex_;
    std::condition_variable wake_;
    std::condition_variable done_;
    std::vector<std::thread> threads_;
    std::size_t n_threads_ = 1;
    bool shutdown_ = false;

    const std::function<void(std::size_t, std::size_t)>* task_ = nullptr;
    std::size_t task_count_ = 0;
    std::size_t task_chunk_ = 0;
    std::size_t task_workers_ = 0;
    std::size_t pending_ = 0;
    std::uint64_t generation_ = 0;
};

inline void set_num_threads(std::size_t n) { ThreadPool::instance().resize(n); }
inline std::size_t num_threads() { return ThreadPool::instance().size(); }

template <typename Fn>
inline void parallel_for(std::size_t count, Fn&& fn) {
    const std::function<void(std::size_t, std::size_t)> wrapped = std::forward<Fn>(fn);
    ThreadPool::instance().parallel_for(count, wrapped);
}

}  // namespace volt3d

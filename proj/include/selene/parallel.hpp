#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <vector>

namespace selene {

// Process-wide worker pool for data-parallel loops. Work is split into
// contiguous index ranges with fixed ownership, so results are bit-identical
// for any thread count: every index is computed by exactly one thread and
// each thread accumulates in ascending index order.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    void set_num_threads(int n) {
        if (n < 1) throw std::invalid_argument("set_num_threads: n must be >= 1");
        std::unique_lock lk(m_);
        desired_ = n;
    }

    int num_threads() {
        std::unique_lock lk(m_);
        return desired_;
    }

    // fn(begin, end) over [0, total) split into one chunk per thread.
    void run(std::int64_t total, const std::function<void(std::int64_t, std::int64_t)>& fn) {
        int n;
        {
            std::unique_lock lk(m_);
            n = desired_;
            ensure_workers(n - 1);
        }
        if (total <= 0) return;
        if (n == 1 || total == 1) {
            fn(0, total);
            return;
        }
        const int chunks = static_cast<int>(std::min<std::int64_t>(n, total));
        const std::int64_t step = (total + chunks - 1) / chunks;
        {
            std::unique_lock lk(m_);
            task_ = &fn;
            task_total_ = total;
            task_step_ = step;
            task_chunks_ = chunks;
            next_chunk_ = 1;  // chunk 0 runs on the caller
            pending_ = chunks - 1;
            ++generation_;
        }
        cv_.notify_all();
        fn(0, std::min<std::int64_t>(step, total));
        std::unique_lock lk(m_);
        done_cv_.wait(lk, [&] { return pending_ == 0; });
        task_ = nullptr;
    }

    ~ThreadPool() {
        {
            std::unique_lock lk(m_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

private:
    ThreadPool() = default;

    void ensure_workers(int n) {
        while (static_cast<int>(workers_.size()) < n) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        while (true) {
            std::function<void(std::int64_t, std::int64_t)> const* task = nullptr;
            std::int64_t total = 0, step = 0;
            int chunk = -1;
            {
                std::unique_lock lk(m_);
                cv_.wait(lk, [&] { return stop_ || (task_ && generation_ != seen && next_chunk_ < task_chunks_); });
                if (stop_) return;
                seen = generation_;
                chunk = next_chunk_++;
                task = task_;
                total = task_total_;
                step = task_step_;
            }
            const std::int64_t b = chunk * step;
            const std::int64_t e = std::min<std::int64_t>(b + step, total);
            if (b < e) (*task)(b, e);
            {
                std::unique_lock lk(m_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::mutex m_;
    std::condition_variable cv_, done_cv_;
    std::vector<std::thread> workers_;
    const std::function<void(std::int64_t, std::int64_t)>* task_ = nullptr;
    std::int64_t task_total_ = 0, task_step_ = 0;
    int task_chunks_ = 0, next_chunk_ = 0, pending_ = 0, desired_ = 1;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

inline void set_num_threads(int n) { ThreadPool::instance().set_num_threads(n); }
inline int num_threads() { return ThreadPool::instance().num_threads(); }

// Chunked parallel loop; fn receives a half-open index range.
inline void parallel_for(std::int64_t total, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    ThreadPool::instance().run(total, fn);
}

}  // namespace selene

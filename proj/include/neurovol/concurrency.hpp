#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <thread>
#include <vector>

namespace neurovol {

/// Unbounded multi-producer queue feeding a single consumer.
template <typename T>
class Channel {
public:
    void send(T value) {
        {
            std::lock_guard lock(mu_);
            items_.push_back(std::move(value));
        }
        cv_.notify_one();
    }

    /// Blocks until an item is available.
    T receive() {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return !items_.empty(); });
        T v = std::move(items_.front());
        items_.pop_front();
        return v;
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<T> items_;
};

/// Scheduling backend for independent tasks. A cluster scheduler could
/// implement this; the local pool is the only backend here.
class Executor {
public:
    virtual ~Executor() = default;
    [[nodiscard]] virtual std::size_t workers() const noexcept = 0;
    /// Runs task(i) once for every i in [0, n) and returns when all finished.
    /// The first exception thrown by a task is rethrown after the others finish.
    virtual void run(std::size_t n, const std::function<void(std::size_t)>& task) = 0;
};

/// Fixed-size pool of threads pulling task indices from a shared queue.
class LocalPoolExecutor final : public Executor {
public:
    explicit LocalPoolExecutor(std::size_t workers) : workers_(workers) {
        if (workers == 0) throw std::invalid_argument("worker count must be at least 1");
    }

    [[nodiscard]] std::size_t workers() const noexcept override { return workers_; }

    void run(std::size_t n, const std::function<void(std::size_t)>& task) override {
        std::mutex mu;
        std::deque<std::size_t> queue;
        for (std::size_t i = 0; i < n; ++i) queue.push_back(i);
        std::exception_ptr first_error;

        auto worker = [&] {
            for (;;) {
                std::size_t i;
                {
                    std::lock_guard lock(mu);
                    if (queue.empty()) return;
                    i = queue.front();
                    queue.pop_front();
                }
                try {
                    task(i);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        };
        {
            std::vector<std::jthread> threads;
            threads.reserve(workers_);
            for (std::size_t w = 0; w < workers_; ++w) threads.emplace_back(worker);
        }
        if (first_error) std::rethrow_exception(first_error);
    }

private:
    std::size_t workers_;
};

/// Convenience: run `fn(i)` for i in [0, n) on `workers` threads.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    LocalPoolExecutor(workers).run(n, fn);
}

}  // namespace neurovol

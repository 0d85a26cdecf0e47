#ifndef S4M_PARALLEL_HPP
#define S4M_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace s4m {

// Process-wide override of the worker cap; 0 means "use S4M_THREADS".
inline std::atomic<std::size_t>& thread_override()
{
    static std::atomic<std::size_t> value{0};
    return value;
}

// Worker cap from S4M_THREADS; defaults to 1 so results never depend on
// the host core count unless asked.
inline std::size_t thread_limit()
{
    if (const std::size_t forced = thread_override().load()) {
        return forced;
    }
    if (const char* env = std::getenv("S4M_THREADS")) {
        try {
            long v = std::stol(env);
            if (v >= 1) {
                return static_cast<std::size_t>(v);
            }
        } catch (...) {
        }
    }
    return 1;
}

// Runs fn(i) for i in [0, n). Each index must write only to its own outputs;
// the partition into threads then has no effect on the result bits.
template<typename Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t threads = thread_limit())
{
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < n; i += threads) {
                    fn(i);
                }
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

// Forces a worker count for the lifetime of the guard.
class ScopedThreadLimit {
public:
    explicit ScopedThreadLimit(std::size_t n) : previous_(thread_override().exchange(n)) {}
    ~ScopedThreadLimit() { thread_override().store(previous_); }
    ScopedThreadLimit(const ScopedThreadLimit&) = delete;
    ScopedThreadLimit& operator=(const ScopedThreadLimit&) = delete;

private:
    std::size_t previous_;
};

} // namespace s4m

#endif

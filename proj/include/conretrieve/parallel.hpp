#pragma once

#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace conretrieve {

// Runs fn(i) for i in [0, n) across `jobs` threads with static slot
// assignment (thread t handles i where i % jobs == t). Work per slot is
// independent of thread count, so results land in caller-owned slots
// deterministically. The first exception thrown by any slot is rethrown.
inline void parallel_for(size_t n, size_t jobs, const std::function<void(size_t)>& fn) {
    if (jobs == 0) jobs = 1;
    if (jobs == 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    if (jobs > n) jobs = n;
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(jobs);
    workers.reserve(jobs);
    for (size_t t = 0; t < jobs; ++t) {
        workers.emplace_back([&, t]() {
            try {
                for (size_t i = t; i < n; i += jobs) fn(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace conretrieve

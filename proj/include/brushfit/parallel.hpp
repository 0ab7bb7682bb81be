#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace brushfit {

/// Number of worker threads for data-parallel loops. BRUSHFIT_THREADS caps it.
inline std::size_t worker_count() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("BRUSHFIT_THREADS")) {
        try {
            long cap = std::stol(env);
            if (cap >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
        } catch (...) {
        }
    }
    return n;
}

/// Calls fn(block) for block in [0, blocks). Blocks are distributed over
/// worker threads; callers that reduce per-block results in block order get
/// results independent of the thread count.
template <typename Fn>
void for_each_block(std::size_t blocks, Fn&& fn) {
    const std::size_t workers = std::min(worker_count(), blocks);
    if (workers <= 1) {
        for (std::size_t b = 0; b < blocks; ++b) fn(b);
        return;
    }
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t b = w; b < blocks; b += workers) {
                try {
                    fn(b);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

/// Splits [0, n) into `blocks` contiguous ranges; returns [begin, end) of block b.
inline std::pair<std::size_t, std::size_t> block_range(std::size_t n, std::size_t blocks, std::size_t b) {
    return {n * b / blocks, n * (b + 1) / blocks};
}

} // namespace brushfit

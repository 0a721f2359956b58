#pragma once

#include <atomic>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace ghnn {

/// Runs fn(0..nblocks-1) on up to nthreads workers. Work is partitioned into a
/// thread-count-independent block structure; callers combine per-block results
/// in block order, so outputs do not depend on the number of threads.
inline void parallel_blocks(int nblocks, int nthreads, const std::function<void(int)>& fn) {
    if (nblocks <= 0) return;
    const int workers = std::max(1, std::min(nthreads, nblocks));
    if (workers == 1) {
        for (int b = 0; b < nblocks; ++b) fn(b);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    std::exception_ptr err;
    std::mutex err_mu;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
            for (;;) {
                const int b = next.fetch_add(1);
                if (b >= nblocks) return;
                try {
                    fn(b);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(err_mu);
                    if (!err) err = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace ghnn

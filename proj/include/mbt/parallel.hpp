#pragma once

// Deterministic data parallelism: work is split into contiguous index
// ranges with disjoint outputs, so results are bit-identical to the serial
// order at any thread count. MBT_THREADS caps the worker count.

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

#include "mbt/common.hpp"

namespace mbt {

inline int max_threads() {
    static const int cached = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw < 1) hw = 1;
        hw = std::min(hw, 16);
        if (const char* env = std::getenv("MBT_THREADS")) {
            const long cap = std::strtol(env, nullptr, 10);
            if (cap >= 1) hw = std::min<long>(hw, cap);
        }
        return hw;
    }();
    return cached;
}

/// Runs fn(begin, end) over [0, n) in contiguous chunks. `work_per_item` is
/// a rough operation count used to skip threading for small jobs.
template <typename Fn>
void parallel_for(i64 n, i64 work_per_item, Fn&& fn) {
    const int threads = std::min<i64>(max_threads(), n);
    if (threads <= 1 || n * work_per_item < (i64(1) << 17)) {
        fn(i64(0), n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads - 1));
    const i64 chunk = (n + threads - 1) / threads;
    for (int t = 1; t < threads; ++t) {
        const i64 begin = t * chunk;
        const i64 end = std::min<i64>(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&fn, begin, end]() { fn(begin, end); });
    }
    fn(i64(0), std::min<i64>(n, chunk));
    for (auto& th : pool) th.join();
}

}  // namespace mbt

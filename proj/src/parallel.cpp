#include "bandprobe/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace bandprobe {

namespace {

int initial_thread_count() {
    if (const char* env = std::getenv("BANDPROBE_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

std::atomic<int>& thread_cap() {
    static std::atomic<int> cap{initial_thread_count()};
    return cap;
}

thread_local bool g_inside_parallel = false;

}  // namespace

int max_threads() { return thread_cap().load(std::memory_order_relaxed); }

void set_max_threads(int n) { thread_cap().store(n < 1 ? 1 : n, std::memory_order_relaxed); }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body) {
    if (n <= 0) return;
    const int workers = g_inside_parallel ? 1 : std::min<std::int64_t>(max_threads(), n);
    if (workers <= 1) {
        body(0, n);
        return;
    }
    // Fixed chunking: worker w owns [w*chunk, min(n, (w+1)*chunk)).
    const std::int64_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers) - 1);
    for (int w = 1; w < workers; ++w) {
        const std::int64_t begin = w * chunk;
        const std::int64_t end = std::min<std::int64_t>(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&body, begin, end] {
            g_inside_parallel = true;
            body(begin, end);
        });
    }
    g_inside_parallel = true;
    body(0, std::min<std::int64_t>(n, chunk));
    g_inside_parallel = false;
    for (auto& t : pool) t.join();
}

}  // namespace bandprobe

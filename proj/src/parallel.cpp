#include "paramdelta/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace paramdelta {

int default_threads() {
    if (const char* env = std::getenv("PARAMDELTA_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 1;
}

void parallel_for(size_t count, int threads,
                  const std::function<void(size_t, size_t, int)>& fn) {
    if (count == 0) return;
    size_t workers = std::min<size_t>(std::max(threads, 1), count);
    if (workers == 1) {
        fn(0, count, 0);
        return;
    }

    // contiguous blocks, remainder spread over the first workers
    size_t base = count / workers;
    size_t extra = count % workers;

    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto run = [&](int w) {
        size_t begin = static_cast<size_t>(w) * base + std::min<size_t>(w, extra);
        size_t end = begin + base + (static_cast<size_t>(w) < extra ? 1 : 0);
        try {
            fn(begin, end, w);
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
        }
    };

    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (size_t w = 1; w < workers; ++w) pool.emplace_back(run, static_cast<int>(w));
    run(0);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace paramdelta

#pragma once

#include <cstddef>
#include <functional>

namespace paramdelta {

/// Resolved default for --threads: PARAMDELTA_THREADS if set and positive,
/// otherwise 1.
int default_threads();

/// Runs fn over a contiguous partition of [0, count) on up to `threads`
/// workers. fn(begin, end, worker) receives the worker's slice; worker 0 runs
/// on the calling thread. Work assignment depends only on (count, threads),
/// never on scheduling, so results written to disjoint slots are
/// deterministic. The first exception thrown by any worker is rethrown.
void parallel_for(size_t count, int threads,
                  const std::function<void(size_t, size_t, int)>& fn);

} // namespace paramdelta

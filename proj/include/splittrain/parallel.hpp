#pragma once

#include <cstddef>
#include <functional>

namespace splittrain {

// Worker count from SPLITTRAIN_THREADS (default: hardware concurrency).
// 1 runs everything on the calling thread.
std::size_t thread_count();
void set_thread_count(std::size_t n);

// Runs body(i) for i in [0, n). Each index is handled by exactly one
// worker; callers keep results index-addressed so the outcome does not
// depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace splittrain

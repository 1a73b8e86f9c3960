#pragma once

#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace autoloss {

// Parallel map over [0, n). fn(i) must touch only per-index state so the
// result is identical for every worker count; workers == 1 takes a plain
// serial loop, kept as the reference path for reproducibility runs and for
// the thread benchmark.
template <typename Fn>
void parallel_for_index(int n, int workers, Fn&& fn) {
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(workers)
  for (int i = 0; i < n; ++i) fn(i);
#else
  for (int i = 0; i < n; ++i) fn(i);
#endif
}

// Worker-count default: AUTOLOSS_WORKERS when set to a positive integer,
// otherwise 1 (the reproducibility mode).
inline int default_workers() {
  if (const char* env = std::getenv("AUTOLOSS_WORKERS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0 && v < 1024) return static_cast<int>(v);
  }
  return 1;
}

inline int hardware_workers() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace autoloss

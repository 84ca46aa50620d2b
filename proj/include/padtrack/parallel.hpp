#pragma once

#include <cstddef>

namespace padtrack::par {

// Worker-pool width for all OpenMP regions. Every parallel loop in the
// project writes disjoint outputs (or reduces in a fixed serial order), so
// any jobs value yields byte-identical artifacts to jobs == 1.
void set_jobs(int jobs);
int jobs();

// Parallel loop over [0, n). fn(i) must only write state owned by index i.
template <typename Fn>
void for_each_index(std::ptrdiff_t n, Fn&& fn);

}  // namespace padtrack::par

#include <omp.h>

namespace padtrack::par {

namespace detail {
inline int& jobs_ref() {
  static int value = 0;  // 0 = library default (omp_get_max_threads)
  return value;
}
}  // namespace detail

inline void set_jobs(int j) { detail::jobs_ref() = j > 0 ? j : 0; }

inline int jobs() {
  const int j = detail::jobs_ref();
  return j > 0 ? j : omp_get_max_threads();
}

template <typename Fn>
void for_each_index(std::ptrdiff_t n, Fn&& fn) {
  const int nthreads = jobs();
  if (nthreads <= 1 || n <= 1) {
    for (std::ptrdiff_t i = 0; i < n; ++i) fn(i);
    return;
  }
#pragma omp parallel for schedule(static) num_threads(nthreads)
  for (std::ptrdiff_t i = 0; i < n; ++i) fn(i);
}

}  // namespace padtrack::par

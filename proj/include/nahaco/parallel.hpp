#pragma once

#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace nahaco {

// Kernel execution selector. Serial is the reference path; OpenMP runs the
// same per-element body across threads. Every kernel in this codebase
// computes each output element independently (reductions are arranged
// per-output-element), so both paths give bitwise-identical results for any
// thread count.
enum class Exec { Serial, OpenMP };

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

template <class F>
void for_each_index(Exec exec, std::ptrdiff_t n, F&& body) {
    if (exec == Exec::OpenMP) {
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t i = 0; i < n; ++i) body(i);
    } else {
        for (std::ptrdiff_t i = 0; i < n; ++i) body(i);
    }
}

}  // namespace nahaco

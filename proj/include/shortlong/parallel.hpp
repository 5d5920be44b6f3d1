#pragma once

#include <cstddef>
#include <exception>
#include <mutex>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace shortlong {

/// Every batch kernel takes one of these. `serial` is the reference path the
/// tests compare the OpenMP path against; both write results into
/// index-addressed slots so they agree bit for bit.
enum class Exec { serial, parallel };

/// Worker cap: SHORTLONG_WORKERS if set and positive, else the OpenMP default.
int worker_count();

/// Calls fn(i) for i in [0, n). Exceptions thrown by fn are captured and the
/// one from the lowest index is rethrown after the loop, as in a serial run.
template <class Fn>
void for_each_index(std::size_t n, Fn&& fn, Exec exec = Exec::parallel) {
    if (exec == Exec::serial || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::exception_ptr first;
    std::size_t first_index = n;
    std::mutex guard;
    const long long count = static_cast<long long>(n);
#if defined(_OPENMP)
#pragma omp parallel for schedule(dynamic, 1) num_threads(worker_count())
#endif
    for (long long i = 0; i < count; ++i) {
        try {
            fn(static_cast<std::size_t>(i));
        } catch (...) {
            std::lock_guard<std::mutex> lock(guard);
            if (static_cast<std::size_t>(i) < first_index) {
                first_index = static_cast<std::size_t>(i);
                first = std::current_exception();
            }
        }
    }
    if (first) std::rethrow_exception(first);
}

}  // namespace shortlong

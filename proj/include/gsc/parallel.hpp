#ifndef GSC_PARALLEL_HPP
#define GSC_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace gsc {

/// Runs fn(i) for i in [0, n) on `workers` threads pulling task indices from a
/// shared counter. The first exception (lowest task index) is rethrown after
/// all workers joined.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  workers = std::max(1, workers);
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  std::size_t err_index = n;
  auto body = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (i < err_index) {
          err_index = i;
          err = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  const int nthreads = static_cast<int>(std::min<std::size_t>(n, static_cast<std::size_t>(workers)));
  pool.reserve(nthreads);
  for (int t = 0; t < nthreads; ++t) pool.emplace_back(body);
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace gsc

#endif  // GSC_PARALLEL_HPP

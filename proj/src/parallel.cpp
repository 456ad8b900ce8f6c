#include "poolbert/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace poolbert {
namespace {

std::size_t threads_from_env() {
  const char* value = std::getenv("POOLBERT_THREADS");
  if (value == nullptr || *value == '\0') return 0;
  char* end = nullptr;
  const long parsed = std::strtol(value, &end, 10);
  if (end == value || parsed < 0) return 0;
  return static_cast<std::size_t>(parsed);
}

std::atomic<std::size_t>& thread_setting() {
  static std::atomic<std::size_t> setting{threads_from_env()};
  return setting;
}

}  // namespace

std::size_t intra_op_threads() { return thread_setting().load(std::memory_order_relaxed); }

void set_intra_op_threads(std::size_t threads) {
  thread_setting().store(threads, std::memory_order_relaxed);
}

void parallel_for(std::size_t n, std::size_t min_chunk,
                  const std::function<void(std::size_t, std::size_t)>& body) {
  if (n == 0) return;
  const std::size_t threads = intra_op_threads();
  const std::size_t chunk_floor = std::max<std::size_t>(min_chunk, 1);
  const std::size_t max_workers = (n + chunk_floor - 1) / chunk_floor;
  const std::size_t workers = std::min(threads, max_workers);
  if (workers <= 1) {
    body(0, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  body(0, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace poolbert

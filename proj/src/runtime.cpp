#include "ickd/runtime.hpp"

#include <Eigen/Core>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ickd/errors.hpp"

namespace ickd {

namespace {
int g_threads = 1;

// Eigen defaults to every OpenMP thread; results must not depend on the host.
const bool g_threads_pinned = (Eigen::setNbThreads(1), true);

// Activation and im2col buffers are tens of MB and recycled every step.
// glibc hands blocks that size to mmap and returns them on free, so each step
// would fault its pages in again.
#if defined(__GLIBC__)
const bool g_malloc_tuned = (mallopt(M_MMAP_THRESHOLD, 1 << 30), mallopt(M_TRIM_THRESHOLD, 1 << 30), true);
#endif

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}
}  // namespace

void set_num_threads(int threads) {
  if (threads < 1) throw ConfigError("threads must be >= 1");
  g_threads = threads;
  Eigen::setNbThreads(threads);
}

int num_threads() { return g_threads; }

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  // FNV-1a over the stream name, mixed with the parent seed.
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return splitmix64(seed ^ splitmix64(h));
}

}  // namespace ickd

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dcnseg {

/// Raised when a configuration violates a documented invariant.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised on file-system or serialization failures; carries the offending path.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Integer voxel triple, x fastest-varying in memory.
struct Vec3i {
  int x = 0, y = 0, z = 0;

  friend Vec3i operator+(Vec3i a, Vec3i b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3i operator-(Vec3i a, Vec3i b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend bool operator==(Vec3i a, Vec3i b) { return a.x == b.x && a.y == b.y && a.z == b.z; }
  friend bool operator!=(Vec3i a, Vec3i b) { return !(a == b); }

  bool all_le(Vec3i o) const { return x <= o.x && y <= o.y && z <= o.z; }
  bool all_ge(Vec3i o) const { return x >= o.x && y >= o.y && z >= o.z; }
  std::int64_t count() const {
    return std::int64_t(x) * std::int64_t(y) * std::int64_t(z);
  }
};

inline std::string to_string(Vec3i v) {
  return "(" + std::to_string(v.x) + "," + std::to_string(v.y) + "," + std::to_string(v.z) + ")";
}

/// Linear index with x fastest, matching NIfTI storage order.
inline std::int64_t flat_index(Vec3i p, Vec3i shape) {
  return (std::int64_t(p.z) * shape.y + p.y) * shape.x + p.x;
}

/// Worker cap: DCNSEG_THREADS if set, else the hardware count.
inline int worker_threads() {
  static const int n = [] {
    int hw = 1;
#ifdef _OPENMP
    hw = omp_get_max_threads();
#endif
    if (const char* env = std::getenv("DCNSEG_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return std::min(v, 256);
    }
    return std::max(1, hw);
  }();
  return n;
}

/// Runs fn(i) for i in [0, n). Work items must write disjoint outputs; the
/// result must not depend on the thread schedule.
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  const int nt = worker_threads();
  if (nt <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1) num_threads(nt)
  for (std::int64_t i = 0; i < n; ++i) fn(i);
#else
  for (std::int64_t i = 0; i < n; ++i) fn(i);
#endif
}

}  // namespace dcnseg

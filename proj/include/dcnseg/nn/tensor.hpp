#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcnseg/common.hpp"

namespace dcnseg::nn {

/// Dense 5D tensor, layout (n, d, h, w, c) with channels fastest.
struct Shape5 {
  int n = 0, d = 0, h = 0, w = 0, c = 0;

  std::int64_t count() const {
    return std::int64_t(n) * d * h * w * c;
  }
  std::int64_t voxels() const { return std::int64_t(n) * d * h * w; }
  std::int64_t voxels_per_sample() const { return std::int64_t(d) * h * w; }
  Vec3i spatial() const { return {w, h, d}; }

  friend bool operator==(const Shape5& a, const Shape5& b) {
    return a.n == b.n && a.d == b.d && a.h == b.h && a.w == b.w && a.c == b.c;
  }
  friend bool operator!=(const Shape5& a, const Shape5& b) { return !(a == b); }
};

inline std::string to_string(const Shape5& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.d) + "," + std::to_string(s.h) +
         "," + std::to_string(s.w) + "," + std::to_string(s.c) + ")";
}

struct Tensor {
  Shape5 shape{};
  std::vector<float> v;

  Tensor() = default;
  explicit Tensor(Shape5 s) : shape(s), v(size_t(s.count()), 0.f) {}

  bool empty() const { return v.empty(); }
  float* data() { return v.data(); }
  const float* data() const { return v.data(); }

  /// Pointer to the channel vector of one voxel.
  float* row(std::int64_t voxel) { return v.data() + voxel * shape.c; }
  const float* row(std::int64_t voxel) const { return v.data() + voxel * shape.c; }
};

}  // namespace dcnseg::nn

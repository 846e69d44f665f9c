#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dcnseg/common.hpp"

namespace dcnseg {

/// A 3D scalar intensity field with isotropic voxel spacing in mm.
struct Volume3D {
  Vec3i shape;
  double spacing_mm = 1.0;
  std::vector<float> data;

  Volume3D() = default;
  Volume3D(Vec3i s, double spacing, float fill = 0.f)
      : shape(s), spacing_mm(spacing), data(size_t(s.count()), fill) {}

  float& at(int x, int y, int z) { return data[size_t(flat_index({x, y, z}, shape))]; }
  float at(int x, int y, int z) const { return data[size_t(flat_index({x, y, z}, shape))]; }
  std::int64_t voxels() const { return shape.count(); }
};

/// Per-voxel integer labels: 0 background, 1 dentate-analog, 2 interposed-analog.
struct LabelMap {
  Vec3i shape;
  double spacing_mm = 1.0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(Vec3i s, double spacing, std::uint8_t fill = 0)
      : shape(s), spacing_mm(spacing), data(size_t(s.count()), fill) {}

  std::uint8_t& at(int x, int y, int z) { return data[size_t(flat_index({x, y, z}, shape))]; }
  std::uint8_t at(int x, int y, int z) const { return data[size_t(flat_index({x, y, z}, shape))]; }
  std::int64_t voxels() const { return shape.count(); }

  std::int64_t count_label(std::uint8_t c) const {
    std::int64_t n = 0;
    for (auto v : data) n += (v == c);
    return n;
  }
};

/// Per-voxel class probabilities for one softmax head, channels-last.
struct ProbabilityField {
  Vec3i shape;
  int channels = 2;
  std::vector<float> data;

  ProbabilityField() = default;
  ProbabilityField(Vec3i s, int c) : shape(s), channels(c), data(size_t(s.count()) * c, 0.f) {}

  float& at(int x, int y, int z, int c) {
    return data[size_t(flat_index({x, y, z}, shape)) * channels + c];
  }
  float at(int x, int y, int z, int c) const {
    return data[size_t(flat_index({x, y, z}, shape)) * channels + c];
  }
};

/// Tight axis-aligned bounds of nonzero labels; nullopt when the map is empty.
inline std::optional<std::pair<Vec3i, Vec3i>> nonzero_extent(const LabelMap& m) {
  Vec3i lo = m.shape, hi = {-1, -1, -1};
  for (int z = 0; z < m.shape.z; ++z)
    for (int y = 0; y < m.shape.y; ++y)
      for (int x = 0; x < m.shape.x; ++x)
        if (m.at(x, y, z) != 0) {
          lo.x = std::min(lo.x, x); lo.y = std::min(lo.y, y); lo.z = std::min(lo.z, z);
          hi.x = std::max(hi.x, x); hi.y = std::max(hi.y, y); hi.z = std::max(hi.z, z);
        }
  if (hi.x < 0) return std::nullopt;
  return std::make_pair(lo, hi);
}

}  // namespace dcnseg

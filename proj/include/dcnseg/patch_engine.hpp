#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcnseg/volume.hpp"

namespace dcnseg {

struct BoundingBox {
  Vec3i origin;
  Vec3i shape;

  nlohmann::ordered_json to_json() const {
    return {{"origin", {origin.x, origin.y, origin.z}}, {"shape", {shape.x, shape.y, shape.z}}};
  }
  static BoundingBox from_json(const nlohmann::json& j) {
    auto o = j.at("origin"), s = j.at("shape");
    return {{o[0].get<int>(), o[1].get<int>(), o[2].get<int>()},
            {s[0].get<int>(), s[1].get<int>(), s[2].get<int>()}};
  }
  friend bool operator==(const BoundingBox& a, const BoundingBox& b) {
    return a.origin == b.origin && a.shape == b.shape;
  }
};

namespace detail {

struct MinMax {
  float lo, hi;
};

inline MinMax intensity_range(const Volume3D& v) {
  float lo = v.data[0], hi = v.data[0];
  for (float x : v.data) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  return {lo, hi};
}

inline int bin_of(float x, MinMax r, int bins) {
  if (r.hi <= r.lo) return 0;  // constant image: degenerate histogram
  int b = int((x - r.lo) / (r.hi - r.lo) * float(bins));
  return std::min(bins - 1, std::max(0, b));
}

/// MI in nats over the overlap of `a` and `b` translated by `shift`
/// (translated b compared against a: b(x - shift) vs a(x)).
inline double mi_overlap(const Volume3D& a, const Volume3D& b, Vec3i shift, MinMax ra,
                         MinMax rb, int bins) {
  std::vector<std::int64_t> joint(static_cast<size_t>(bins) * bins, 0);
  Vec3i lo = {std::max(0, shift.x), std::max(0, shift.y), std::max(0, shift.z)};
  Vec3i hi = {std::min(a.shape.x, b.shape.x + shift.x), std::min(a.shape.y, b.shape.y + shift.y),
              std::min(a.shape.z, b.shape.z + shift.z)};
  std::int64_t n = 0;
  for (int z = lo.z; z < hi.z; ++z)
    for (int y = lo.y; y < hi.y; ++y)
      for (int x = lo.x; x < hi.x; ++x) {
        const int ba = bin_of(a.at(x, y, z), ra, bins);
        const int bb = bin_of(b.at(x - shift.x, y - shift.y, z - shift.z), rb, bins);
        ++joint[size_t(ba * bins + bb)];
        ++n;
      }
  if (n == 0) return 0.0;
  std::vector<double> pa(static_cast<size_t>(bins), 0.0);
  std::vector<double> pb(static_cast<size_t>(bins), 0.0);
  for (int i = 0; i < bins; ++i)
    for (int j = 0; j < bins; ++j) {
      const double p = double(joint[size_t(i * bins + j)]) / double(n);
      pa[size_t(i)] += p;
      pb[size_t(j)] += p;
    }
  double mi = 0.0;
  for (int i = 0; i < bins; ++i)
    for (int j = 0; j < bins; ++j) {
      const double p = double(joint[size_t(i * bins + j)]) / double(n);
      if (p > 0.0) mi += p * std::log(p / (pa[size_t(i)] * pb[size_t(j)]));
    }
  return mi;
}

}  // namespace detail

/// Mutual information in nats from the 2D histogram of min-max-normalized
/// intensities. Symmetric; 0 for constant inputs.
inline double mutual_information(const Volume3D& a, const Volume3D& b, int bins = 32) {
  if (a.shape != b.shape)
    throw std::invalid_argument("mutual_information: shape mismatch " + to_string(a.shape) +
                                " vs " + to_string(b.shape));
  if (bins < 2) throw std::invalid_argument("mutual_information: bins must be >= 2");
  return detail::mi_overlap(a, b, {0, 0, 0}, detail::intensity_range(a),
                            detail::intensity_range(b), bins);
}

struct RoiReference {
  const Volume3D* image;
  BoundingBox box;
};

/// Clamps a box into the volume and grows it, as centered as bounds allow,
/// to at least `min_shape`.
inline BoundingBox fit_box(BoundingBox box, Vec3i volume_shape, Vec3i min_shape) {
  const int vol[3] = {volume_shape.x, volume_shape.y, volume_shape.z};
  int org[3] = {box.origin.x, box.origin.y, box.origin.z};
  int shp[3] = {box.shape.x, box.shape.y, box.shape.z};
  const int want[3] = {min_shape.x, min_shape.y, min_shape.z};
  for (int k = 0; k < 3; ++k) {
    if (want[k] > vol[k])
      throw std::invalid_argument("fit_box: requested extent exceeds volume");
    if (shp[k] < want[k]) {
      org[k] -= (want[k] - shp[k]) / 2;
      shp[k] = want[k];
    }
    org[k] = std::max(0, std::min(org[k], vol[k] - shp[k]));
  }
  return {{org[0], org[1], org[2]}, {shp[0], shp[1], shp[2]}};
}

/// Picks the reference with maximal MI against the test volume, recovers the
/// best integer translation within +-max_shift per axis (coarse stride 2,
/// then +-1 refinement), and returns the reference box translated by it,
/// clamped to bounds and expanded to hold a patch.
inline BoundingBox localize_roi(const Volume3D& test, const std::vector<RoiReference>& refs,
                                Vec3i patch_size = {32, 32, 32}, int max_shift = 8,
                                int bins = 32) {
  if (refs.empty()) throw std::invalid_argument("localize_roi: empty reference list");
  const auto range_test = detail::intensity_range(test);
  size_t best_ref = 0;
  double best_mi = -1.0;
  for (size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].image->shape != test.shape)
      throw std::invalid_argument("localize_roi: reference shape mismatch");
    const double mi = mutual_information(test, *refs[i].image, bins);
    if (mi > best_mi) {
      best_mi = mi;
      best_ref = i;
    }
  }
  const Volume3D& ref = *refs[best_ref].image;
  const auto range_ref = detail::intensity_range(ref);

  std::vector<Vec3i> candidates;
  for (int z = -max_shift; z <= max_shift; z += 2)
    for (int y = -max_shift; y <= max_shift; y += 2)
      for (int x = -max_shift; x <= max_shift; x += 2) candidates.push_back({x, y, z});
  auto search = [&](const std::vector<Vec3i>& ts, Vec3i init, double init_mi) {
    Vec3i best = init;
    double best_v = init_mi;
    std::vector<double> scores(ts.size());
    parallel_for(std::int64_t(ts.size()), [&](std::int64_t i) {
      scores[size_t(i)] =
          detail::mi_overlap(test, ref, ts[size_t(i)], range_test, range_ref, bins);
    });
    for (size_t i = 0; i < ts.size(); ++i)
      if (scores[i] > best_v) {
        best_v = scores[i];
        best = ts[i];
      }
    return std::make_pair(best, best_v);
  };
  auto [coarse, coarse_mi] = search(candidates, {0, 0, 0},
                                    -std::numeric_limits<double>::infinity());
  std::vector<Vec3i> fine;
  for (int z = -1; z <= 1; ++z)
    for (int y = -1; y <= 1; ++y)
      for (int x = -1; x <= 1; ++x) {
        Vec3i t = coarse + Vec3i{x, y, z};
        t.x = std::max(-max_shift, std::min(max_shift, t.x));
        t.y = std::max(-max_shift, std::min(max_shift, t.y));
        t.z = std::max(-max_shift, std::min(max_shift, t.z));
        fine.push_back(t);
      }
  auto [t_best, mi_best] = search(fine, coarse, coarse_mi);
  (void)mi_best;

  BoundingBox box = refs[best_ref].box;
  box.origin = box.origin + t_best;
  return fit_box(box, test.shape, patch_size);
}

struct PatchGrid {
  Vec3i patch_size = {32, 32, 32};
  Vec3i step = {5, 5, 5};
  std::vector<Vec3i> positions;  // lexicographically sorted (z, y, x)
};

/// Regular grid positions: per axis multiples of the step, plus a final
/// boundary-clamped position ending exactly at the ROI border.
inline PatchGrid make_patch_grid(Vec3i roi_shape, Vec3i patch_size = {32, 32, 32},
                                 Vec3i step = {5, 5, 5}) {
  if (!(patch_size.all_le(roi_shape)))
    throw std::invalid_argument("make_patch_grid: patch " + to_string(patch_size) +
                                " larger than ROI " + to_string(roi_shape));
  if (step.x < 1 || step.y < 1 || step.z < 1)
    throw std::invalid_argument("make_patch_grid: step must be >= 1");
  auto axis_positions = [](int dim, int patch, int s) {
    std::vector<int> pos;
    const int last = dim - patch;
    for (int p = 0; p <= last; p += s) pos.push_back(p);
    if (pos.back() != last) pos.push_back(last);
    return pos;
  };
  const auto px = axis_positions(roi_shape.x, patch_size.x, step.x);
  const auto py = axis_positions(roi_shape.y, patch_size.y, step.y);
  const auto pz = axis_positions(roi_shape.z, patch_size.z, step.z);
  PatchGrid g;
  g.patch_size = patch_size;
  g.step = step;
  for (int z : pz)
    for (int y : py)
      for (int x : px) g.positions.push_back({x, y, z});
  return g;
}

/// One extracted sub-volume; origin is grid-relative (within the ROI).
struct Patch {
  Vec3i origin;
  Vec3i size;
  std::vector<float> data;

  float at(int x, int y, int z) const { return data[size_t(flat_index({x, y, z}, size))]; }
};

inline std::vector<Patch> extract_patches(const Volume3D& vol, const BoundingBox& roi,
                                          const PatchGrid& grid) {
  if (!(roi.origin.all_ge({0, 0, 0})) || !((roi.origin + roi.shape).all_le(vol.shape)))
    throw std::invalid_argument("extract_patches: ROI outside volume");
  std::vector<Patch> out(grid.positions.size());
  parallel_for(std::int64_t(grid.positions.size()), [&](std::int64_t i) {
    const Vec3i p = grid.positions[size_t(i)];
    Patch& patch = out[size_t(i)];
    patch.origin = p;
    patch.size = grid.patch_size;
    patch.data.resize(size_t(grid.patch_size.count()));
    std::int64_t k = 0;
    for (int z = 0; z < grid.patch_size.z; ++z)
      for (int y = 0; y < grid.patch_size.y; ++y)
        for (int x = 0; x < grid.patch_size.x; ++x, ++k)
          patch.data[size_t(k)] =
              vol.at(roi.origin.x + p.x + x, roi.origin.y + p.y + y, roi.origin.z + p.z + z);
  });
  return out;
}

/// Average-pooled pyramid: level k (1-based) is the 2^k-factor box average.
inline std::vector<Patch> pyramid_downsample(const Patch& patch, int levels = 2) {
  const int div = 1 << levels;
  if (patch.size.x % div || patch.size.y % div || patch.size.z % div)
    throw std::invalid_argument("pyramid_downsample: patch " + to_string(patch.size) +
                                " not divisible by " + std::to_string(div));
  std::vector<Patch> out;
  const Patch* prev = &patch;
  for (int k = 0; k < levels; ++k) {
    Patch next;
    next.origin = patch.origin;
    next.size = {prev->size.x / 2, prev->size.y / 2, prev->size.z / 2};
    next.data.resize(size_t(next.size.count()));
    std::int64_t i = 0;
    for (int z = 0; z < next.size.z; ++z)
      for (int y = 0; y < next.size.y; ++y)
        for (int x = 0; x < next.size.x; ++x, ++i) {
          float s = 0.f;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                s += prev->at(2 * x + dx, 2 * y + dy, 2 * z + dz);
          next.data[size_t(i)] = s / 8.f;
        }
    out.push_back(std::move(next));
    prev = &out.back();
  }
  return out;
}

/// Overlap-averaged fusion of per-patch probability fields back onto the ROI
/// grid. Every ROI voxel is covered at least once by construction of the
/// boundary-clamped grid.
inline ProbabilityField reconstruct_probability(const std::vector<ProbabilityField>& patches,
                                                const PatchGrid& grid, Vec3i roi_shape) {
  if (patches.size() != grid.positions.size())
    throw std::invalid_argument("reconstruct_probability: patch count " +
                                std::to_string(patches.size()) + " != grid positions " +
                                std::to_string(grid.positions.size()));
  const int channels = patches.empty() ? 2 : patches[0].channels;
  for (const auto& p : patches)
    if (p.shape != grid.patch_size || p.channels != channels)
      throw std::invalid_argument("reconstruct_probability: patch shape mismatch");
  ProbabilityField sum(roi_shape, channels);
  std::vector<std::int32_t> count(static_cast<size_t>(roi_shape.count()), 0);
  for (size_t i = 0; i < patches.size(); ++i) {
    const Vec3i p = grid.positions[i];
    for (int z = 0; z < grid.patch_size.z; ++z)
      for (int y = 0; y < grid.patch_size.y; ++y)
        for (int x = 0; x < grid.patch_size.x; ++x) {
          const std::int64_t dst = flat_index({p.x + x, p.y + y, p.z + z}, roi_shape);
          const std::int64_t src = flat_index({x, y, z}, grid.patch_size);
          for (int c = 0; c < channels; ++c)
            sum.data[size_t(dst * channels + c)] +=
                patches[i].data[size_t(src * channels + c)];
          ++count[size_t(dst)];
        }
  }
  for (std::int64_t v = 0; v < roi_shape.count(); ++v) {
    if (count[size_t(v)] == 0)
      throw std::logic_error("reconstruct_probability: uncovered ROI voxel");
    for (int c = 0; c < channels; ++c)
      sum.data[size_t(v * channels + c)] /= float(count[size_t(v)]);
  }
  return sum;
}

}  // namespace dcnseg

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcnseg/volume.hpp"

namespace dcnseg {

/// Raised when a distance metric is requested on an empty structure.
class MetricUndefined : public std::runtime_error {
 public:
  explicit MetricUndefined(const std::string& msg) : std::runtime_error(msg) {}
};

using Mask = std::vector<std::uint8_t>;

inline Mask label_mask(const LabelMap& m, std::uint8_t cls) {
  Mask out(m.data.size(), 0);
  for (size_t i = 0; i < m.data.size(); ++i) out[i] = (m.data[i] == cls) ? 1 : 0;
  return out;
}

inline std::int64_t mask_count(const Mask& a) {
  std::int64_t n = 0;
  for (auto v : a) n += v != 0;
  return n;
}

/// 2|A∩B| / (|A|+|B|). Both masks empty -> 1, exactly one empty -> 0.
inline double dice_coefficient(const Mask& a, const Mask& b) {
  std::int64_t na = 0, nb = 0, ni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    na += a[i] != 0;
    nb += b[i] != 0;
    ni += (a[i] != 0) && (b[i] != 0);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(ni) / double(na + nb);
}

/// Euclidean distance between unweighted binary centroids, in mm.
inline double center_of_mass_distance(const Mask& a, const Mask& b, Vec3i shape,
                                      double spacing_mm, const std::string& name = "mask") {
  double ca[3] = {0, 0, 0}, cb[3] = {0, 0, 0};
  std::int64_t na = 0, nb = 0;
  std::int64_t i = 0;
  for (int z = 0; z < shape.z; ++z)
    for (int y = 0; y < shape.y; ++y)
      for (int x = 0; x < shape.x; ++x, ++i) {
        if (a[size_t(i)]) { ca[0] += x; ca[1] += y; ca[2] += z; ++na; }
        if (b[size_t(i)]) { cb[0] += x; cb[1] += y; cb[2] += z; ++nb; }
      }
  if (na == 0 || nb == 0)
    throw MetricUndefined("center-of-mass distance undefined: empty " + name);
  double d2 = 0;
  for (int k = 0; k < 3; ++k) {
    const double d = ca[k] / double(na) - cb[k] / double(nb);
    d2 += d * d;
  }
  return std::sqrt(d2) * spacing_mm;
}

namespace detail {

/// Surface voxels: foreground with at least one six-connected background
/// neighbor; the volume border counts as background.
inline Mask surface_voxels(const Mask& m, Vec3i s) {
  Mask out(m.size(), 0);
  std::int64_t i = 0;
  for (int z = 0; z < s.z; ++z)
    for (int y = 0; y < s.y; ++y)
      for (int x = 0; x < s.x; ++x, ++i) {
        if (!m[size_t(i)]) continue;
        const bool edge = x == 0 || x == s.x - 1 || y == 0 || y == s.y - 1 || z == 0 ||
                          z == s.z - 1;
        if (edge || !m[size_t(flat_index({x - 1, y, z}, s))] ||
            !m[size_t(flat_index({x + 1, y, z}, s))] ||
            !m[size_t(flat_index({x, y - 1, z}, s))] ||
            !m[size_t(flat_index({x, y + 1, z}, s))] ||
            !m[size_t(flat_index({x, y, z - 1}, s))] ||
            !m[size_t(flat_index({x, y, z + 1}, s))])
          out[size_t(i)] = 1;
      }
  return out;
}

/// 1D squared-distance transform (lower envelope of parabolas).
inline void edt_1d(const double* f, double* d, int n, int* v, double* zbuf) {
  int k = 0;
  v[0] = 0;
  zbuf[0] = -std::numeric_limits<double>::infinity();
  zbuf[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    if (f[q] == std::numeric_limits<double>::infinity()) continue;
    double s;
    while (true) {
      if (f[v[k]] == std::numeric_limits<double>::infinity()) {
        // no finite parabola yet; replace
        if (k == 0) { v[0] = q; zbuf[1] = std::numeric_limits<double>::infinity(); break; }
        --k;
        continue;
      }
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * (q - v[k]));
      if (s <= zbuf[k]) {
        --k;
      } else {
        ++k;
        v[k] = q;
        zbuf[k] = s;
        zbuf[k + 1] = std::numeric_limits<double>::infinity();
        break;
      }
    }
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (zbuf[k + 1] < q) ++k;
    const double dq = double(q) - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

/// Exact squared Euclidean distance (in voxels) to the nearest set voxel.
inline std::vector<double> edt_squared(const Mask& sites, Vec3i s) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(sites.size());
  for (size_t i = 0; i < sites.size(); ++i) d[i] = sites[i] ? 0.0 : inf;

  const int nmax = std::max({s.x, s.y, s.z});
  std::vector<double> f(static_cast<size_t>(nmax));
  std::vector<double> tmp(static_cast<size_t>(nmax));
  std::vector<int> v(static_cast<size_t>(nmax));
  std::vector<double> z(static_cast<size_t>(nmax) + 1);

  // x pass
  for (int zz = 0; zz < s.z; ++zz)
    for (int y = 0; y < s.y; ++y) {
      double* row = &d[size_t(flat_index({0, y, zz}, s))];
      edt_1d(row, tmp.data(), s.x, v.data(), z.data());
      std::copy(tmp.begin(), tmp.begin() + s.x, row);
    }
  // y pass
  for (int zz = 0; zz < s.z; ++zz)
    for (int x = 0; x < s.x; ++x) {
      for (int y = 0; y < s.y; ++y) f[size_t(y)] = d[size_t(flat_index({x, y, zz}, s))];
      edt_1d(f.data(), tmp.data(), s.y, v.data(), z.data());
      for (int y = 0; y < s.y; ++y) d[size_t(flat_index({x, y, zz}, s))] = tmp[size_t(y)];
    }
  // z pass
  for (int y = 0; y < s.y; ++y)
    for (int x = 0; x < s.x; ++x) {
      for (int zz = 0; zz < s.z; ++zz) f[size_t(zz)] = d[size_t(flat_index({x, y, zz}, s))];
      edt_1d(f.data(), tmp.data(), s.z, v.data(), z.data());
      for (int zz = 0; zz < s.z; ++zz) d[size_t(flat_index({x, y, zz}, s))] = tmp[size_t(zz)];
    }
  return d;
}

inline double directed_mean_surface_distance(const Mask& from_surf,
                                             const std::vector<double>& to_dt2, double spacing) {
  double sum = 0;
  std::int64_t n = 0;
  for (size_t i = 0; i < from_surf.size(); ++i)
    if (from_surf[i]) {
      sum += std::sqrt(to_dt2[i]) * spacing;
      ++n;
    }
  return sum / double(n);
}

}  // namespace detail

/// Symmetrized mean surface distance in mm over six-connected surfaces,
/// using an exact Euclidean distance transform.
inline double mean_surface_distance(const Mask& a, const Mask& b, Vec3i shape, double spacing_mm,
                                    const std::string& name = "mask") {
  if (mask_count(a) == 0 || mask_count(b) == 0)
    throw MetricUndefined("mean surface distance undefined: empty " + name);
  const Mask sa = detail::surface_voxels(a, shape);
  const Mask sb = detail::surface_voxels(b, shape);
  const auto dt_a = detail::edt_squared(sa, shape);
  const auto dt_b = detail::edt_squared(sb, shape);
  return 0.5 * (detail::directed_mean_surface_distance(sa, dt_b, spacing_mm) +
                detail::directed_mean_surface_distance(sb, dt_a, spacing_mm));
}

struct StructureMetrics {
  double dc = 0.0;
  std::optional<double> cmd_mm;
  std::optional<double> msd_mm;
  double volume_mm3 = 0.0;
  double gt_volume_mm3 = 0.0;
};

/// DC, CMD, MSD and volumes for both structures of one case.
struct MetricsReport {
  std::string case_id;
  StructureMetrics dentate;
  StructureMetrics interposed;
};

inline StructureMetrics evaluate_structure(const Mask& pred, const Mask& gt, Vec3i shape,
                                           double spacing_mm, const std::string& name) {
  StructureMetrics r;
  r.dc = dice_coefficient(pred, gt);
  const double vox_mm3 = spacing_mm * spacing_mm * spacing_mm;
  r.volume_mm3 = double(mask_count(pred)) * vox_mm3;
  r.gt_volume_mm3 = double(mask_count(gt)) * vox_mm3;
  try {
    r.cmd_mm = center_of_mass_distance(pred, gt, shape, spacing_mm, name);
    r.msd_mm = mean_surface_distance(pred, gt, shape, spacing_mm, name);
  } catch (const MetricUndefined&) {
    r.cmd_mm.reset();
    r.msd_mm.reset();
  }
  return r;
}

inline MetricsReport evaluate_case(const LabelMap& pred, const LabelMap& gt, double spacing_mm,
                                   const std::string& case_id = "") {
  if (pred.shape != gt.shape)
    throw std::invalid_argument("evaluate_case: shape mismatch " + to_string(pred.shape) +
                                " vs " + to_string(gt.shape));
  MetricsReport rep;
  rep.case_id = case_id;
  rep.dentate = evaluate_structure(label_mask(pred, 1), label_mask(gt, 1), pred.shape,
                                   spacing_mm, "dentate");
  rep.interposed = evaluate_structure(label_mask(pred, 2), label_mask(gt, 2), pred.shape,
                                      spacing_mm, "interposed");
  return rep;
}

struct MetricAggregate {
  double mean = 0.0;
  double stddev = 0.0;
  int n = 0;
};

/// Sample mean and standard deviation, skipping undefined entries.
inline MetricAggregate aggregate(const std::vector<std::optional<double>>& xs) {
  MetricAggregate a;
  double sum = 0;
  for (const auto& x : xs)
    if (x) {
      sum += *x;
      ++a.n;
    }
  if (a.n == 0) return a;
  a.mean = sum / a.n;
  if (a.n > 1) {
    double ss = 0;
    for (const auto& x : xs)
      if (x) ss += (*x - a.mean) * (*x - a.mean);
    a.stddev = std::sqrt(ss / (a.n - 1));
  }
  return a;
}

inline nlohmann::ordered_json structure_metrics_json(const StructureMetrics& s) {
  nlohmann::ordered_json j;
  j["dc"] = s.dc;
  if (s.cmd_mm) j["cmd_mm"] = *s.cmd_mm; else j["cmd_mm"] = nullptr;
  if (s.msd_mm) j["msd_mm"] = *s.msd_mm; else j["msd_mm"] = nullptr;
  j["cmd_defined"] = bool(s.cmd_mm);
  j["msd_defined"] = bool(s.msd_mm);
  j["volume_mm3"] = s.volume_mm3;
  j["gt_volume_mm3"] = s.gt_volume_mm3;
  return j;
}

inline nlohmann::ordered_json report_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["case_id"] = r.case_id;
  j["dentate"] = structure_metrics_json(r.dentate);
  j["interposed"] = structure_metrics_json(r.interposed);
  return j;
}

/// CSV rows matching the table layout: structure, CMD, MSD, DC, volume, gt_volume.
inline std::string reports_csv(const std::vector<MetricsReport>& reports) {
  std::string out = "case_id,structure,cmd_mm,msd_mm,dc,volume_mm3,gt_volume_mm3\n";
  auto fmt = [](const std::optional<double>& v) {
    if (!v) return std::string("nan");
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", *v);
    return std::string(buf);
  };
  for (const auto& r : reports) {
    for (const auto& [name, s] :
         {std::pair<const char*, const StructureMetrics&>{"dentate", r.dentate},
          {"interposed", r.interposed}}) {
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%s,%s,%s,%s,%.6f,%.6f,%.6f\n", r.case_id.c_str(), name,
                    fmt(s.cmd_mm).c_str(), fmt(s.msd_mm).c_str(), s.dc, s.volume_mm3,
                    s.gt_volume_mm3);
      out += buf;
    }
  }
  return out;
}

}  // namespace dcnseg

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcnseg/nifti.hpp"
#include "dcnseg/rng.hpp"
#include "dcnseg/volume.hpp"

namespace dcnseg {

/// Reference background intensity of generated phantoms (arbitrary units).
constexpr float kBackgroundMean = 100.f;

struct PhantomConfig {
  Vec3i volume_shape = {64, 64, 64};
  double spacing_mm = 1.25;
  int dentate_volume_voxels = 600;
  double imbalance_ratio = 12.6;
  double contrast = 0.25;      // (bg_mean - fg_mean) / bg_mean
  double noise_sigma = 0.08;   // relative to bg_mean
  int confounder_count = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (imbalance_ratio <= 1.0) throw ConfigError("phantom: imbalance_ratio must be > 1");
    if (contrast <= 0.0 || contrast >= 1.0)
      throw ConfigError("phantom: contrast must be in (0,1)");
    if (noise_sigma < 0.0) throw ConfigError("phantom: noise_sigma must be >= 0");
    if (dentate_volume_voxels < 16)
      throw ConfigError("phantom: dentate_volume_voxels must be >= 16");
    if (confounder_count < 0) throw ConfigError("phantom: confounder_count must be >= 0");
    if (volume_shape.x < 48 || volume_shape.y < 48 || volume_shape.z < 48)
      throw ConfigError("phantom: volume_shape entries must be >= 48 (32^3 patch + margin)");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["volume_shape"] = {volume_shape.x, volume_shape.y, volume_shape.z};
    j["spacing_mm"] = spacing_mm;
    j["dentate_volume_voxels"] = dentate_volume_voxels;
    j["imbalance_ratio"] = imbalance_ratio;
    j["contrast"] = contrast;
    j["noise_sigma"] = noise_sigma;
    j["confounder_count"] = confounder_count;
    j["seed"] = seed;
    return j;
  }

  static PhantomConfig from_json(const nlohmann::json& j) {
    PhantomConfig c;
    if (j.contains("volume_shape")) {
      auto v = j.at("volume_shape").get<std::vector<int>>();
      if (v.size() != 3) throw ConfigError("phantom: volume_shape must have 3 entries");
      c.volume_shape = {v[0], v[1], v[2]};
    }
    if (j.contains("spacing_mm")) c.spacing_mm = j.at("spacing_mm").get<double>();
    if (j.contains("dentate_volume_voxels"))
      c.dentate_volume_voxels = j.at("dentate_volume_voxels").get<int>();
    if (j.contains("imbalance_ratio")) c.imbalance_ratio = j.at("imbalance_ratio").get<double>();
    if (j.contains("contrast")) c.contrast = j.at("contrast").get<double>();
    if (j.contains("noise_sigma")) c.noise_sigma = j.at("noise_sigma").get<double>();
    if (j.contains("confounder_count"))
      c.confounder_count = j.at("confounder_count").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  }
};

struct PhantomMeta {
  std::uint64_t seed = 0;
  std::int64_t dentate_voxels = 0;
  std::int64_t interposed_voxels = 0;
  Vec3i translation;
  int gap_voxels = 0;  // Chebyshev gap between the two structures
};

struct PhantomCase {
  Volume3D image;
  LabelMap labels;
  PhantomMeta meta;
};

namespace detail {

struct Rot3 {
  std::array<double, 9> m;  // row-major

  std::array<double, 3> apply_t(double x, double y, double z) const {
    // transpose (inverse) application
    return {m[0] * x + m[3] * y + m[6] * z, m[1] * x + m[4] * y + m[7] * z,
            m[2] * x + m[5] * y + m[8] * z};
  }
  std::array<double, 3> apply(double x, double y, double z) const {
    return {m[0] * x + m[1] * y + m[2] * z, m[3] * x + m[4] * y + m[5] * z,
            m[6] * x + m[7] * y + m[8] * z};
  }
};

inline Rot3 euler_rotation(double ax, double ay, double az) {
  const double ca = std::cos(ax), sa = std::sin(ax);
  const double cb = std::cos(ay), sb = std::sin(ay);
  const double cc = std::cos(az), sc = std::sin(az);
  // Rz * Ry * Rx
  return {{cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa,
           sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa,
           -sb, cb * sa, cb * ca}};
}

struct ScoredVoxel {
  double score;
  Vec3i pos;
};

inline void sort_scored(std::vector<ScoredVoxel>& v, Vec3i shape) {
  std::sort(v.begin(), v.end(), [shape](const ScoredVoxel& a, const ScoredVoxel& b) {
    if (a.score != b.score) return a.score < b.score;
    return flat_index(a.pos, shape) < flat_index(b.pos, shape);
  });
}

inline int chebyshev_distance(Vec3i a, Vec3i b) {
  return std::max({std::abs(a.x - b.x), std::abs(a.y - b.y), std::abs(a.z - b.z)});
}

inline int min_chebyshev(const std::vector<Vec3i>& a, const std::vector<Vec3i>& b) {
  int best = INT32_MAX;
  for (const auto& p : a)
    for (const auto& q : b) best = std::min(best, chebyshev_distance(p, q));
  return best;
}

}  // namespace detail

/// Deterministic synthetic case: a crescent (half-ellipsoidal shell) dentate
/// analog with a small solid interposed analog in its mouth at a 1-2 voxel
/// gap, plus unlabeled hypo-intense confounder blobs.
inline PhantomCase generate_phantom(const PhantomConfig& config) {
  config.validate();
  Rng rng(splitmix64(config.seed ^ 0x7068616eULL));
  const Vec3i dims = config.volume_shape;

  // Per-seed size jitter so case volumes form a nontrivial distribution.
  const double u1 = rng.uniform(0.92, 1.08);
  const double u2 = rng.uniform(0.92, 1.08);
  const std::int64_t target_d = std::llround(config.dentate_volume_voxels * u1);
  const std::int64_t target_i =
      std::max<std::int64_t>(4, std::llround(double(target_d) / config.imbalance_ratio * u2));

  const double j1 = rng.uniform(0.9, 1.1);
  const double j2 = rng.uniform(0.9, 1.1);
  const double abar = std::sqrt(double(target_d) / 10.0);
  const std::array<double, 3> axes_d = {abar * j1, abar * j2, abar / (j1 * j2)};
  const auto rot = detail::euler_rotation(rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25),
                                          rng.uniform(-0.25, 0.25));
  const std::array<double, 3> c0 = {dims.x / 2.0 + rng.uniform(-0.49, 0.49),
                                    dims.y / 2.0 + rng.uniform(-0.49, 0.49),
                                    dims.z / 2.0 + rng.uniform(-0.49, 0.49)};

  // Crescent: voxels nearest the mid-shell surface (rho ~ 0.85) on the
  // closed half of the ellipsoid; the open half faces local +x.
  const int reach = int(std::ceil(abar * 1.4)) + 3;
  std::vector<detail::ScoredVoxel> cand;
  for (int z = int(c0[2]) - reach; z <= int(c0[2]) + reach; ++z)
    for (int y = int(c0[1]) - reach; y <= int(c0[1]) + reach; ++y)
      for (int x = int(c0[0]) - reach; x <= int(c0[0]) + reach; ++x) {
        if (x < 0 || y < 0 || z < 0 || x >= dims.x || y >= dims.y || z >= dims.z) continue;
        const auto q = rot.apply_t(x - c0[0], y - c0[1], z - c0[2]);
        if (q[0] > 0.0) continue;  // open side
        const double rho = std::sqrt(q[0] * q[0] / (axes_d[0] * axes_d[0]) +
                                     q[1] * q[1] / (axes_d[1] * axes_d[1]) +
                                     q[2] * q[2] / (axes_d[2] * axes_d[2]));
        cand.push_back({std::abs(rho - 0.85), {x, y, z}});
      }
  if (std::int64_t(cand.size()) < target_d)
    throw ConfigError("phantom: dentate-analog does not fit the volume (candidates " +
                      std::to_string(cand.size()) + " < target " + std::to_string(target_d) +
                      ")");
  detail::sort_scored(cand, dims);
  std::vector<Vec3i> dentate(static_cast<size_t>(target_d));
  for (std::int64_t i = 0; i < target_d; ++i) dentate[size_t(i)] = cand[size_t(i)].pos;

  std::vector<std::uint8_t> taken(static_cast<size_t>(dims.count()), 0);
  for (const auto& p : dentate) taken[size_t(flat_index(p, dims))] = 1;

  // Interposed: slide a small solid ellipsoid along the opening axis from the
  // mouth toward the bowl until the Chebyshev gap lands in [1, 2].
  const double k1 = rng.uniform(0.9, 1.1);
  const double k2 = rng.uniform(0.9, 1.1);
  const double r_i = std::cbrt(3.0 * double(target_i) / (4.0 * 3.14159265358979324));
  const std::array<double, 3> axes_i = {r_i * k1, r_i * k2, r_i / (k1 * k2)};
  const auto u_open = rot.apply(1.0, 0.0, 0.0);

  std::vector<Vec3i> interposed;
  int gap = -1;
  for (double delta = 0.3 * abar; delta >= -0.9 * abar; delta -= 0.5) {
    const std::array<double, 3> ci = {c0[0] + u_open[0] * delta, c0[1] + u_open[1] * delta,
                                      c0[2] + u_open[2] * delta};
    const int r2 = int(std::ceil(r_i)) + 3;
    std::vector<detail::ScoredVoxel> icand;
    for (int z = int(ci[2]) - r2; z <= int(ci[2]) + r2; ++z)
      for (int y = int(ci[1]) - r2; y <= int(ci[1]) + r2; ++y)
        for (int x = int(ci[0]) - r2; x <= int(ci[0]) + r2; ++x) {
          if (x < 0 || y < 0 || z < 0 || x >= dims.x || y >= dims.y || z >= dims.z) continue;
          if (taken[size_t(flat_index({x, y, z}, dims))]) continue;
          const auto q = rot.apply_t(x - ci[0], y - ci[1], z - ci[2]);
          const double rho = std::sqrt(q[0] * q[0] / (axes_i[0] * axes_i[0]) +
                                       q[1] * q[1] / (axes_i[1] * axes_i[1]) +
                                       q[2] * q[2] / (axes_i[2] * axes_i[2]));
          icand.push_back({rho, {x, y, z}});
        }
    if (std::int64_t(icand.size()) < target_i) continue;
    detail::sort_scored(icand, dims);
    std::vector<Vec3i> blob(static_cast<size_t>(target_i));
    for (std::int64_t i = 0; i < target_i; ++i) blob[size_t(i)] = icand[size_t(i)].pos;
    const int d = detail::min_chebyshev(blob, dentate);
    const int g = d - 1;
    if (g >= 1 && g <= 2) {
      interposed = std::move(blob);
      gap = g;
      break;
    }
  }
  if (gap < 0)
    throw ConfigError(
        "phantom: cannot place interposed-analog at a 1-2 voxel gap from the dentate-analog");

  // Joint rigid translation of both structures.
  const Vec3i t = {int(rng.uniform_int(-6, 6)), int(rng.uniform_int(-6, 6)),
                   int(rng.uniform_int(-6, 6))};
  auto translate = [&](std::vector<Vec3i>& pts) {
    for (auto& p : pts) {
      p = p + t;
      if (p.x < 1 || p.y < 1 || p.z < 1 || p.x >= dims.x - 1 || p.y >= dims.y - 1 ||
          p.z >= dims.z - 1)
        throw ConfigError("phantom: translated structure exceeds volume bounds");
    }
  };
  translate(dentate);
  translate(interposed);

  LabelMap labels(dims, config.spacing_mm, 0);
  for (const auto& p : dentate) labels.at(p.x, p.y, p.z) = 1;
  for (const auto& p : interposed) labels.at(p.x, p.y, p.z) = 2;

  // Isointense confounder blobs, kept well away from the labeled structures.
  std::vector<Vec3i> structure_voxels = dentate;
  structure_voxels.insert(structure_voxels.end(), interposed.begin(), interposed.end());
  std::vector<Vec3i> confounder_voxels;
  std::vector<Vec3i> confounder_centers;
  for (int k = 0; k < config.confounder_count; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const Vec3i c = {int(rng.uniform_int(6, dims.x - 7)), int(rng.uniform_int(6, dims.y - 7)),
                       int(rng.uniform_int(6, dims.z - 7))};
      const double r = rng.uniform(1.8, 3.0);
      bool ok = true;
      for (const auto& p : structure_voxels)
        if (detail::chebyshev_distance(p, c) < 8 + int(std::ceil(r))) {
          ok = false;
          break;
        }
      for (const auto& p : confounder_centers)
        if (ok && detail::chebyshev_distance(p, c) < 4 + 2 * int(std::ceil(r))) ok = false;
      if (!ok) continue;
      const int ir = int(std::ceil(r));
      for (int z = c.z - ir; z <= c.z + ir; ++z)
        for (int y = c.y - ir; y <= c.y + ir; ++y)
          for (int x = c.x - ir; x <= c.x + ir; ++x) {
            const double dx = x - c.x, dy = y - c.y, dz = z - c.z;
            if (dx * dx + dy * dy + dz * dz <= r * r)
              confounder_voxels.push_back({x, y, z});
          }
      confounder_centers.push_back(c);
      placed = true;
    }
  }

  // Intensities: exact foreground/background means, optional Gaussian noise.
  Volume3D image(dims, config.spacing_mm, kBackgroundMean);
  const float fg = kBackgroundMean * float(1.0 - config.contrast);
  for (const auto& p : structure_voxels) image.at(p.x, p.y, p.z) = fg;
  for (const auto& p : confounder_voxels) image.at(p.x, p.y, p.z) = fg;
  if (config.noise_sigma > 0.0) {
    const double s = config.noise_sigma * kBackgroundMean;
    for (auto& v : image.data) v += float(rng.normal(0.0, s));
  }

  PhantomCase out;
  out.image = std::move(image);
  out.labels = std::move(labels);
  out.meta = {config.seed, target_d, target_i, t, gap};

  const double ratio = double(target_d) / double(target_i);
  if (ratio < 0.8 * config.imbalance_ratio || ratio > 1.2 * config.imbalance_ratio)
    throw ConfigError("phantom: realized class ratio " + std::to_string(ratio) +
                      " breaches the +-20% imbalance band");
  return out;
}

struct ManifestCase {
  std::string id;
  std::string image;  // path relative to the manifest directory
  std::string label;  // empty when unlabeled
  std::int64_t seed = 0;
  bool labeled = false;
  bool auxiliary = false;  // label produced by self-training, not manual
};

struct DatasetManifest {
  std::vector<ManifestCase> cases;
  double spacing_mm = 1.25;
  std::string version = "1";
  std::string dir;  // directory holding the manifest (for path resolution)

  std::string resolve(const std::string& rel) const {
    return (std::filesystem::path(dir) / rel).string();
  }

  std::vector<const ManifestCase*> labeled_cases() const {
    std::vector<const ManifestCase*> out;
    for (const auto& c : cases)
      if (c.labeled) out.push_back(&c);
    return out;
  }
  std::vector<const ManifestCase*> unlabeled_cases() const {
    std::vector<const ManifestCase*> out;
    for (const auto& c : cases)
      if (!c.labeled) out.push_back(&c);
    return out;
  }
};

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  nlohmann::ordered_json j;
  j["version"] = m.version;
  j["spacing_mm"] = m.spacing_mm;
  nlohmann::ordered_json cases = nlohmann::ordered_json::array();
  for (const auto& c : m.cases) {
    nlohmann::ordered_json cj;
    cj["id"] = c.id;
    cj["image"] = c.image;
    cj["label"] = c.labeled || c.auxiliary ? nlohmann::ordered_json(c.label)
                                           : nlohmann::ordered_json(nullptr);
    cj["seed"] = c.seed;
    cj["labeled"] = c.labeled;
    cj["auxiliary"] = c.auxiliary;
    cases.push_back(cj);
  }
  j["cases"] = cases;
  std::ofstream f(path);
  if (!f) throw IoError("cannot write manifest: " + path);
  f << j.dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read manifest: " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  DatasetManifest m;
  m.version = j.at("version").get<std::string>();
  m.spacing_mm = j.at("spacing_mm").get<double>();
  m.dir = std::filesystem::path(path).parent_path().string();
  for (const auto& cj : j.at("cases")) {
    ManifestCase c;
    c.id = cj.at("id").get<std::string>();
    c.image = cj.at("image").get<std::string>();
    if (!cj.at("label").is_null()) c.label = cj.at("label").get<std::string>();
    c.seed = cj.at("seed").get<std::int64_t>();
    c.labeled = cj.at("labeled").get<bool>();
    if (cj.contains("auxiliary")) c.auxiliary = cj.at("auxiliary").get<bool>();
    m.cases.push_back(c);
  }
  return m;
}

/// Writes n cases (case i seeded base_seed + i) and a manifest. The last
/// n_unlabeled cases get no label file and are flagged unlabeled.
inline DatasetManifest generate_dataset(int n, std::int64_t base_seed,
                                        const PhantomConfig& config, const std::string& out_dir,
                                        int n_unlabeled = 0) {
  if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  if (n_unlabeled < 0 || n_unlabeled > n)
    throw std::invalid_argument("generate_dataset: invalid unlabeled count");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  DatasetManifest m;
  m.spacing_mm = config.spacing_mm;
  m.dir = out_dir;
  for (int i = 0; i < n; ++i) {
    PhantomConfig ci = config;
    ci.seed = std::uint64_t(base_seed + i);
    const PhantomCase pc = generate_phantom(ci);
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "case_%03d", i);
    ManifestCase c;
    c.id = idbuf;
    c.seed = base_seed + i;
    c.labeled = i < n - n_unlabeled;
    c.image = std::string(idbuf) + ".nii.gz";
    write_nifti((fs::path(out_dir) / c.image).string(), pc.image);
    if (c.labeled) {
      c.label = std::string(idbuf) + "_label.nii.gz";
      write_nifti((fs::path(out_dir) / c.label).string(), pc.labels);
    }
    m.cases.push_back(c);
  }
  save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
  return m;
}

}  // namespace dcnseg

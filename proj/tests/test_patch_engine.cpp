#include <gtest/gtest.h>

#include <cmath>

#include "dcnseg/patch_engine.hpp"
#include "dcnseg/phantom.hpp"
#include "dcnseg/rng.hpp"

using namespace dcnseg;

namespace {

Volume3D random_volume(Rng& rng, Vec3i s) {
  Volume3D v(s, 1.0);
  for (auto& x : v.data) x = float(rng.uniform());
  return v;
}

Volume3D rolled(const Volume3D& v, Vec3i t) {
  Volume3D out(v.shape, v.spacing_mm);
  for (int z = 0; z < v.shape.z; ++z)
    for (int y = 0; y < v.shape.y; ++y)
      for (int x = 0; x < v.shape.x; ++x) {
        const int nx = ((x + t.x) % v.shape.x + v.shape.x) % v.shape.x;
        const int ny = ((y + t.y) % v.shape.y + v.shape.y) % v.shape.y;
        const int nz = ((z + t.z) % v.shape.z + v.shape.z) % v.shape.z;
        out.at(nx, ny, nz) = v.at(x, y, z);
      }
  return out;
}

}  // namespace

TEST(MutualInformation, SelfIsMarginalEntropy) {
  Rng rng(1);
  const auto v = random_volume(rng, {16, 16, 16});
  const double mi = mutual_information(v, v, 32);
  // Entropy of the marginal histogram, computed independently.
  float lo = v.data[0], hi = v.data[0];
  for (float x : v.data) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  std::vector<std::int64_t> hist(32, 0);
  for (float x : v.data)
    ++hist[size_t(std::min(31, int((x - lo) / (hi - lo) * 32)))];
  double ent = 0;
  for (auto h : hist)
    if (h) {
      const double p = double(h) / double(v.voxels());
      ent -= p * std::log(p);
    }
  EXPECT_NEAR(mi, ent, 1e-9);
  EXPECT_GT(mi, 0.0);
}

TEST(MutualInformation, Symmetric) {
  Rng rng(2);
  const auto a = random_volume(rng, {16, 16, 16});
  const auto b = random_volume(rng, {16, 16, 16});
  EXPECT_NEAR(mutual_information(a, b), mutual_information(b, a), 1e-12);
}

TEST(MutualInformation, ConstantInputIsZero) {
  Volume3D a({8, 8, 8}, 1.0, 3.f);
  Volume3D b({8, 8, 8}, 1.0, 5.f);
  EXPECT_DOUBLE_EQ(mutual_information(a, b), 0.0);
}

TEST(MutualInformation, IndependentNoiseNearZero) {
  // Independent uniform volumes: MI concentrates near the small-sample bias.
  for (int seed = 0; seed < 20; ++seed) {
    Rng ra(1000 + seed), rb(2000 + seed);
    const auto a = random_volume(ra, {32, 32, 32});
    const auto b = random_volume(rb, {32, 32, 32});
    EXPECT_LT(mutual_information(a, b, 32), 0.05);
  }
}

TEST(LocalizeRoi, SelfMatchReturnsReferenceBox) {
  PhantomConfig cfg;
  cfg.seed = 5;
  const auto c = generate_phantom(cfg);
  const BoundingBox box{{10, 12, 14}, {32, 32, 32}};
  const auto got = localize_roi(c.image, {{&c.image, box}}, {32, 32, 32});
  EXPECT_EQ(got, box);
}

TEST(LocalizeRoi, RecoversRolledTranslation) {
  PhantomConfig cfg;
  cfg.seed = 6;
  cfg.noise_sigma = 0.0;
  const auto c = generate_phantom(cfg);
  const Vec3i t{3, -2, 0};
  const auto test = rolled(c.image, t);
  const BoundingBox box{{14, 14, 14}, {32, 32, 32}};
  const auto got = localize_roi(test, {{&c.image, box}}, {32, 32, 32});
  EXPECT_EQ(got.origin, box.origin + t);
  EXPECT_EQ(got.shape, box.shape);
}

TEST(LocalizeRoi, PrefersTranslatedTwin) {
  PhantomConfig cfg;
  cfg.seed = 7;
  const auto a = generate_phantom(cfg);
  cfg.seed = 8;
  cfg.contrast = 0.6;  // visually different case
  const auto b = generate_phantom(cfg);
  const auto test = rolled(a.image, {2, 1, 0});
  EXPECT_GT(mutual_information(test, a.image), mutual_information(test, b.image));
  const BoundingBox box_a{{8, 8, 8}, {32, 32, 32}};
  const BoundingBox box_b{{0, 0, 0}, {32, 32, 32}};
  const auto got = localize_roi(test, {{&a.image, box_a}, {&b.image, box_b}}, {32, 32, 32});
  EXPECT_EQ(got.origin, (box_a.origin + Vec3i{2, 1, 0}));
}

TEST(LocalizeRoi, EmptyReferenceListThrows) {
  Volume3D v({48, 48, 48}, 1.0, 0.f);
  EXPECT_THROW(localize_roi(v, {}), std::invalid_argument);
}

TEST(PatchGrid, ExactFitSinglePosition) {
  const auto g = make_patch_grid({32, 32, 32}, {32, 32, 32}, {5, 5, 5});
  ASSERT_EQ(g.positions.size(), 1u);
  EXPECT_EQ(g.positions[0], (Vec3i{0, 0, 0}));
}

TEST(PatchGrid, Count729NoClamp) {
  const auto g = make_patch_grid({72, 72, 72}, {32, 32, 32}, {5, 5, 5});
  EXPECT_EQ(g.positions.size(), 729u);  // 9 per axis, 40/5 + 1
}

TEST(PatchGrid, Count729WithBoundaryClamp) {
  const auto g = make_patch_grid({70, 70, 70}, {32, 32, 32}, {5, 5, 5});
  EXPECT_EQ(g.positions.size(), 729u);
  // per-axis positions {0,5,...,35,38}
  std::vector<int> xs;
  for (const auto& p : g.positions)
    if (p.y == 0 && p.z == 0) xs.push_back(p.x);
  const std::vector<int> want = {0, 5, 10, 15, 20, 25, 30, 35, 38};
  EXPECT_EQ(xs, want);
}

TEST(PatchGrid, CountFormulaMatchesEnumeration) {
  for (int dim : {64, 70, 72, 48}) {
    for (int step : {3, 5, 7, 9}) {
      const auto g = make_patch_grid({dim, 64, 64}, {32, 32, 32}, {step, 5, 5});
      const int last = dim - 32;
      int count = last / step + 1 + (last % step ? 1 : 0);
      std::vector<int> xs;
      for (const auto& p : g.positions)
        if (p.y == 0 && p.z == 0) xs.push_back(p.x);
      EXPECT_EQ(int(xs.size()), count) << dim << " step " << step;
    }
  }
}

TEST(PatchGrid, MonotoneInStep) {
  size_t prev = SIZE_MAX;
  for (int step : {3, 5, 7, 9}) {
    const auto g = make_patch_grid({72, 72, 72}, {32, 32, 32}, {step, step, step});
    EXPECT_LE(g.positions.size(), prev);
    prev = g.positions.size();
  }
}

TEST(PatchGrid, StepRatioDirection) {
  // Step 5 vs step 9 on a 72^3 ROI: the smaller step yields several times
  // more training samples (boundary clamp adds a sixth position at step 9).
  const auto g5 = make_patch_grid({72, 72, 72}, {32, 32, 32}, {5, 5, 5});
  const auto g9 = make_patch_grid({72, 72, 72}, {32, 32, 32}, {9, 9, 9});
  EXPECT_EQ(g5.positions.size(), 729u);
  EXPECT_EQ(g9.positions.size(), 216u);
  EXPECT_GT(double(g5.positions.size()) / double(g9.positions.size()), 3.0);
}

TEST(PatchGrid, PatchLargerThanRoiThrows) {
  EXPECT_THROW(make_patch_grid({24, 32, 32}, {32, 32, 32}, {5, 5, 5}),
               std::invalid_argument);
}

TEST(ExtractPatches, SinglePatchEqualsCrop) {
  Rng rng(11);
  const auto v = random_volume(rng, {48, 48, 48});
  const BoundingBox roi{{8, 9, 10}, {16, 16, 16}};
  const auto grid = make_patch_grid(roi.shape, {16, 16, 16}, {5, 5, 5});
  const auto patches = extract_patches(v, roi, grid);
  ASSERT_EQ(patches.size(), 1u);
  for (int z = 0; z < 16; ++z)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        EXPECT_EQ(patches[0].at(x, y, z), v.at(8 + x, 9 + y, 10 + z));
}

TEST(ExtractPatches, RandomProbes) {
  Rng rng(13);
  const auto v = random_volume(rng, {64, 64, 64});
  const BoundingBox roi{{4, 4, 4}, {48, 48, 48}};
  const auto grid = make_patch_grid(roi.shape, {32, 32, 32}, {5, 5, 5});
  const auto patches = extract_patches(v, roi, grid);
  ASSERT_EQ(patches.size(), grid.positions.size());
  for (int probe = 0; probe < 100; ++probe) {
    const size_t i = size_t(rng.uniform_int(0, std::int64_t(patches.size()) - 1));
    const Vec3i p = grid.positions[i];
    const Vec3i off{int(rng.uniform_int(0, 31)), int(rng.uniform_int(0, 31)),
                    int(rng.uniform_int(0, 31))};
    EXPECT_EQ(patches[i].at(off.x, off.y, off.z),
              v.at(roi.origin.x + p.x + off.x, roi.origin.y + p.y + off.y,
                   roi.origin.z + p.z + off.z));
  }
}

TEST(Pyramid, ConstantStaysConstant) {
  Patch p;
  p.origin = {0, 0, 0};
  p.size = {16, 16, 16};
  p.data.assign(size_t(p.size.count()), 4.25f);
  const auto pyr = pyramid_downsample(p, 2);
  ASSERT_EQ(pyr.size(), 2u);
  for (const auto& lvl : pyr)
    for (float v : lvl.data) EXPECT_EQ(v, 4.25f);
}

TEST(Pyramid, Shapes) {
  Patch p;
  p.origin = {0, 0, 0};
  p.size = {32, 32, 32};
  p.data.assign(size_t(p.size.count()), 0.f);
  const auto pyr = pyramid_downsample(p, 2);
  EXPECT_EQ(pyr[0].size, (Vec3i{16, 16, 16}));
  EXPECT_EQ(pyr[1].size, (Vec3i{8, 8, 8}));
}

TEST(Pyramid, CheckerboardAveragesToHalf) {
  Patch p;
  p.origin = {0, 0, 0};
  p.size = {8, 8, 8};
  p.data.resize(size_t(p.size.count()));
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        p.data[size_t(flat_index({x, y, z}, p.size))] = float((x + y + z) % 2);
  const auto pyr = pyramid_downsample(p, 1);
  for (float v : pyr[0].data) EXPECT_EQ(v, 0.5f);
}

TEST(Pyramid, NonDivisibleThrows) {
  Patch p;
  p.origin = {0, 0, 0};
  p.size = {10, 10, 10};
  p.data.assign(1000, 0.f);
  EXPECT_THROW(pyramid_downsample(p, 2), std::invalid_argument);
}

namespace {

ProbabilityField crop_field(const ProbabilityField& f, Vec3i origin, Vec3i size) {
  ProbabilityField out(size, f.channels);
  for (int z = 0; z < size.z; ++z)
    for (int y = 0; y < size.y; ++y)
      for (int x = 0; x < size.x; ++x)
        for (int c = 0; c < f.channels; ++c)
          out.at(x, y, z, c) = f.at(origin.x + x, origin.y + y, origin.z + z, c);
  return out;
}

}  // namespace

TEST(Reconstruct, CropsOfGlobalFieldReproduceIt) {
  Rng rng(17);
  const Vec3i roi{20, 20, 20};
  ProbabilityField global(roi, 2);
  for (std::int64_t v = 0; v < roi.count(); ++v) {
    const float p = float(rng.uniform());
    global.data[size_t(v * 2)] = 1.f - p;
    global.data[size_t(v * 2 + 1)] = p;
  }
  const auto grid = make_patch_grid(roi, {8, 8, 8}, {3, 3, 3});
  std::vector<ProbabilityField> patches;
  for (const auto& pos : grid.positions) patches.push_back(crop_field(global, pos, {8, 8, 8}));
  const auto rec = reconstruct_probability(patches, grid, roi);
  for (size_t i = 0; i < global.data.size(); ++i)
    EXPECT_NEAR(rec.data[i], global.data[i], 1e-6);
}

TEST(Reconstruct, SinglePatchIdentity) {
  Rng rng(19);
  const Vec3i roi{8, 8, 8};
  ProbabilityField f(roi, 2);
  for (auto& v : f.data) v = float(rng.uniform());
  const auto grid = make_patch_grid(roi, roi, {5, 5, 5});
  const auto rec = reconstruct_probability({f}, grid, roi);
  EXPECT_EQ(rec.data, f.data);
}

TEST(Reconstruct, HalfOverlapAverages) {
  // Two patches along x with constant foreground 0.2 and 0.6: overlap = 0.4.
  const Vec3i roi{6, 1, 1};
  const Vec3i ps{4, 1, 1};
  const auto grid = make_patch_grid(roi, ps, {2, 1, 1});
  ASSERT_EQ(grid.positions.size(), 2u);
  ProbabilityField a(ps, 2), b(ps, 2);
  for (int x = 0; x < 4; ++x) {
    a.at(x, 0, 0, 1) = 0.2f;
    a.at(x, 0, 0, 0) = 0.8f;
    b.at(x, 0, 0, 1) = 0.6f;
    b.at(x, 0, 0, 0) = 0.4f;
  }
  const auto rec = reconstruct_probability({a, b}, grid, roi);
  EXPECT_FLOAT_EQ(rec.at(0, 0, 0, 1), 0.2f);
  EXPECT_FLOAT_EQ(rec.at(2, 0, 0, 1), 0.4f);
  EXPECT_FLOAT_EQ(rec.at(3, 0, 0, 1), 0.4f);
  EXPECT_FLOAT_EQ(rec.at(5, 0, 0, 1), 0.6f);
}

TEST(Reconstruct, RoundTripOnOneHotFields) {
  // Extract-then-reconstruct is exact on ground-truth one-hot fields.
  PhantomConfig cfg;
  cfg.seed = 21;
  const auto c = generate_phantom(cfg);
  const Vec3i roi_shape{40, 40, 40};
  const BoundingBox roi{{12, 12, 12}, roi_shape};
  ProbabilityField gt(roi_shape, 2);
  for (int z = 0; z < roi_shape.z; ++z)
    for (int y = 0; y < roi_shape.y; ++y)
      for (int x = 0; x < roi_shape.x; ++x) {
        const bool fg =
            c.labels.at(roi.origin.x + x, roi.origin.y + y, roi.origin.z + z) == 1;
        gt.at(x, y, z, 1) = fg ? 1.f : 0.f;
        gt.at(x, y, z, 0) = fg ? 0.f : 1.f;
      }
  const auto grid = make_patch_grid(roi_shape, {32, 32, 32}, {5, 5, 5});
  std::vector<ProbabilityField> patches;
  for (const auto& pos : grid.positions) patches.push_back(crop_field(gt, pos, {32, 32, 32}));
  const auto rec = reconstruct_probability(patches, grid, roi_shape);
  for (size_t i = 0; i < gt.data.size(); ++i) ASSERT_EQ(rec.data[i], gt.data[i]);
}

TEST(Reconstruct, ShapeMismatchThrows) {
  const auto grid = make_patch_grid({8, 8, 8}, {8, 8, 8}, {5, 5, 5});
  ProbabilityField wrong({4, 4, 4}, 2);
  EXPECT_THROW(reconstruct_probability({wrong}, grid, {8, 8, 8}), std::invalid_argument);
}

TEST(FitBox, ClampAndExpand) {
  const auto b = fit_box({{60, -3, 10}, {10, 10, 40}}, {64, 64, 64}, {32, 32, 32});
  EXPECT_GE(b.origin.x, 0);
  EXPECT_LE(b.origin.x + b.shape.x, 64);
  EXPECT_GE(b.shape.x, 32);
  EXPECT_GE(b.shape.y, 32);
  EXPECT_EQ(b.shape.z, 40);
}

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dcnseg/phantom.hpp"

using namespace dcnseg;
namespace fs = std::filesystem;

namespace {

int min_chebyshev_between(const LabelMap& m) {
  std::vector<Vec3i> a, b;
  for (int z = 0; z < m.shape.z; ++z)
    for (int y = 0; y < m.shape.y; ++y)
      for (int x = 0; x < m.shape.x; ++x) {
        if (m.at(x, y, z) == 1) a.push_back({x, y, z});
        if (m.at(x, y, z) == 2) b.push_back({x, y, z});
      }
  int best = INT32_MAX;
  for (const auto& p : a)
    for (const auto& q : b)
      best = std::min(best, std::max({std::abs(p.x - q.x), std::abs(p.y - q.y),
                                      std::abs(p.z - q.z)}));
  return best;
}

std::string file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(Phantom, DeterministicForSameSeed) {
  PhantomConfig cfg;
  cfg.seed = 7;
  const auto a = generate_phantom(cfg);
  const auto b = generate_phantom(cfg);
  EXPECT_EQ(a.image.data, b.image.data);
  EXPECT_EQ(a.labels.data, b.labels.data);
}

TEST(Phantom, ImbalanceRatioWithinBand) {
  PhantomConfig cfg;
  cfg.seed = 1;
  const auto c = generate_phantom(cfg);
  const double ratio =
      double(c.labels.count_label(1)) / double(c.labels.count_label(2));
  EXPECT_GE(ratio, 0.8 * cfg.imbalance_ratio);  // [10.08, 15.12]
  EXPECT_LE(ratio, 1.2 * cfg.imbalance_ratio);
}

TEST(Phantom, ImbalanceBandAcrossSeeds) {
  PhantomConfig cfg;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    cfg.seed = seed;
    const auto c = generate_phantom(cfg);
    const double ratio =
        double(c.labels.count_label(1)) / double(c.labels.count_label(2));
    EXPECT_GE(ratio, 0.8 * cfg.imbalance_ratio) << "seed " << seed;
    EXPECT_LE(ratio, 1.2 * cfg.imbalance_ratio) << "seed " << seed;
  }
}

TEST(Phantom, NoiselessForegroundMeanExact) {
  PhantomConfig cfg;
  cfg.seed = 3;
  cfg.noise_sigma = 0.0;
  const auto c = generate_phantom(cfg);
  const float expected = kBackgroundMean * float(1.0 - cfg.contrast);
  for (std::int64_t i = 0; i < c.labels.voxels(); ++i)
    if (c.labels.data[size_t(i)] == 1) ASSERT_EQ(c.image.data[size_t(i)], expected);
}

TEST(Phantom, StructuresAdjacentAndDisjoint) {
  PhantomConfig cfg;
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    cfg.seed = seed;
    const auto c = generate_phantom(cfg);
    EXPECT_GE(c.meta.gap_voxels, 1);
    EXPECT_LE(c.meta.gap_voxels, 2);
    const int d = min_chebyshev_between(c.labels);
    EXPECT_EQ(d - 1, c.meta.gap_voxels);
  }
}

TEST(Phantom, HypoIntensity) {
  PhantomConfig cfg;
  for (std::uint64_t seed = 30; seed < 40; ++seed) {
    cfg.seed = seed;
    const auto c = generate_phantom(cfg);
    double fg = 0, bg = 0;
    std::int64_t nfg = 0, nbg = 0;
    for (std::int64_t i = 0; i < c.labels.voxels(); ++i) {
      if (c.labels.data[size_t(i)] != 0) {
        fg += c.image.data[size_t(i)];
        ++nfg;
      } else {
        bg += c.image.data[size_t(i)];
        ++nbg;
      }
    }
    EXPECT_LT(fg / double(nfg), bg / double(nbg)) << "seed " << seed;
  }
}

TEST(Phantom, TranslationWithinRange) {
  PhantomConfig cfg;
  cfg.seed = 42;
  const auto c = generate_phantom(cfg);
  for (int t : {c.meta.translation.x, c.meta.translation.y, c.meta.translation.z}) {
    EXPECT_GE(t, -6);
    EXPECT_LE(t, 6);
  }
}

TEST(Phantom, InfeasibleGeometryNamesConstraint) {
  PhantomConfig cfg;
  cfg.dentate_volume_voxels = 500000;  // cannot fit in 64^3
  try {
    generate_phantom(cfg);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("fit"), std::string::npos);
  }
}

TEST(Phantom, InvalidConfigRejected) {
  PhantomConfig cfg;
  cfg.imbalance_ratio = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = PhantomConfig{};
  cfg.contrast = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = PhantomConfig{};
  cfg.volume_shape = {32, 64, 64};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Dataset, SingleCaseCardinality) {
  const auto dir = fs::temp_directory_path() / "dcnseg_ds1";
  fs::remove_all(dir);
  PhantomConfig cfg;
  const auto m = generate_dataset(1, 50, cfg, dir.string());
  ASSERT_EQ(m.cases.size(), 1u);
  EXPECT_TRUE(fs::exists(dir / m.cases[0].image));
  EXPECT_TRUE(fs::exists(dir / m.cases[0].label));
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
}

TEST(Dataset, SeedsFollowBase) {
  const auto dir = fs::temp_directory_path() / "dcnseg_ds8";
  fs::remove_all(dir);
  PhantomConfig cfg;
  const auto m = generate_dataset(8, 100, cfg, dir.string());
  for (int i = 0; i < 8; ++i) EXPECT_EQ(m.cases[size_t(i)].seed, 100 + i);
}

TEST(Dataset, RegenerationIsByteIdentical) {
  const auto d1 = fs::temp_directory_path() / "dcnseg_regenA";
  const auto d2 = fs::temp_directory_path() / "dcnseg_regenB";
  fs::remove_all(d1);
  fs::remove_all(d2);
  PhantomConfig cfg;
  const auto m1 = generate_dataset(4, 500, cfg, d1.string());
  const auto m2 = generate_dataset(4, 500, cfg, d2.string());
  for (size_t i = 0; i < m1.cases.size(); ++i) {
    EXPECT_EQ(file_bytes((d1 / m1.cases[i].label).string()),
              file_bytes((d2 / m2.cases[i].label).string()));
    EXPECT_EQ(file_bytes((d1 / m1.cases[i].image).string()),
              file_bytes((d2 / m2.cases[i].image).string()));
  }
}

TEST(Dataset, UnlabeledTailFlagged) {
  const auto dir = fs::temp_directory_path() / "dcnseg_dsu";
  fs::remove_all(dir);
  PhantomConfig cfg;
  const auto m = generate_dataset(6, 200, cfg, dir.string(), 2);
  EXPECT_EQ(m.labeled_cases().size(), 4u);
  EXPECT_EQ(m.unlabeled_cases().size(), 2u);
  EXPECT_TRUE(m.cases[5].label.empty());
  EXPECT_FALSE(fs::exists(dir / "case_005_label.nii.gz"));
  const auto loaded = load_manifest((dir / "manifest.json").string());
  EXPECT_EQ(loaded.cases.size(), 6u);
  EXPECT_FALSE(loaded.cases[5].labeled);
  EXPECT_EQ(loaded.cases[2].id, "case_002");
}

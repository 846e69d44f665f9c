#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dcnseg/nifti.hpp"
#include "dcnseg/rng.hpp"

using namespace dcnseg;
namespace fs = std::filesystem;

TEST(Rng, DeterministicStreams) {
  Rng a(12345), b(12345);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.uniform(), b.uniform());
    EXPECT_EQ(a.normal(), b.normal());
    EXPECT_EQ(a.uniform_int(-5, 17), b.uniform_int(-5, 17));
  }
}

TEST(Rng, UniformIntBounds) {
  Rng r(9);
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.uniform_int(-3, 3);
    EXPECT_GE(v, -3);
    EXPECT_LE(v, 3);
  }
}

TEST(Rng, ForkProducesIndependentStream) {
  Rng a(1);
  Rng f1 = a.fork(10);
  Rng f2 = a.fork(11);
  EXPECT_NE(f1.uniform(), f2.uniform());
  Rng b(1);
  Rng f1b = b.fork(10);
  EXPECT_EQ(Rng(1).fork(10).uniform(), f1b.uniform());
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(4);
  std::vector<int> v(20);
  for (int i = 0; i < 20; ++i) v[size_t(i)] = i;
  auto w = v;
  r.shuffle(w);
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

TEST(Rng, NormalMoments) {
  Rng r(5);
  double s = 0, ss = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    ss += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.03);
  EXPECT_NEAR(ss / n, 1.0, 0.05);
}

TEST(Nifti, VolumeRoundTrip) {
  const auto path = (fs::temp_directory_path() / "dcnseg_vol.nii.gz").string();
  Volume3D v({12, 10, 8}, 1.25);
  Rng r(2);
  for (auto& x : v.data) x = float(r.uniform(-5, 5));
  write_nifti(path, v);
  const auto back = read_nifti_volume(path);
  EXPECT_EQ(back.shape, v.shape);
  EXPECT_DOUBLE_EQ(back.spacing_mm, 1.25);
  EXPECT_EQ(back.data, v.data);
}

TEST(Nifti, LabelRoundTrip) {
  const auto path = (fs::temp_directory_path() / "dcnseg_lab.nii.gz").string();
  LabelMap m({9, 9, 9}, 1.25);
  Rng r(3);
  for (auto& x : m.data) x = std::uint8_t(r.uniform_int(0, 2));
  write_nifti(path, m);
  const auto back = read_nifti_labels(path);
  EXPECT_EQ(back.shape, m.shape);
  EXPECT_EQ(back.data, m.data);
}

TEST(Nifti, RewriteIsByteIdentical) {
  const auto p1 = (fs::temp_directory_path() / "dcnseg_a.nii.gz").string();
  const auto p2 = (fs::temp_directory_path() / "dcnseg_b.nii.gz").string();
  Volume3D v({8, 8, 8}, 1.0);
  Rng r(7);
  for (auto& x : v.data) x = float(r.uniform());
  write_nifti(p1, v);
  write_nifti(p2, v);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), {});
  const std::string b2((std::istreambuf_iterator<char>(f2)), {});
  EXPECT_EQ(b1, b2);
}

TEST(Nifti, MissingFileThrows) {
  EXPECT_THROW(read_nifti_volume("/nonexistent/nowhere.nii.gz"), IoError);
}

TEST(Nifti, CorruptMagicThrows) {
  const auto path = (fs::temp_directory_path() / "dcnseg_bad.nii.gz").string();
  std::ofstream f(path, std::ios::binary);
  f << "this is not a nifti file, not even close, padding padding padding";
  f.close();
  EXPECT_THROW(read_nifti_volume(path), IoError);
}

TEST(Nifti, FeatureStack4D) {
  const auto path = (fs::temp_directory_path() / "dcnseg_feat.nii.gz").string();
  std::vector<Volume3D> ch(3, Volume3D({6, 6, 6}, 1.0));
  for (int c = 0; c < 3; ++c) std::fill(ch[size_t(c)].data.begin(), ch[size_t(c)].data.end(), float(c));
  write_nifti_stack(path, ch);
  EXPECT_TRUE(fs::exists(path));
}

TEST(ParallelFor, CoversAllIndices) {
  std::vector<int> hits(1000, 0);
  parallel_for(1000, [&](std::int64_t i) { hits[size_t(i)] = 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <random>

#include "mscl/synthdata.hpp"

using namespace mscl;
namespace fs = std::filesystem;

namespace {

LatentSpec small_spec() {
  LatentSpec s;
  s.shared_dim = 4;
  s.unique_dim = {2, 2};
  s.n_classes = 2;
  s.volume_side = 16;
  s.seed = 7;
  return s;
}

Volume random_volume(std::size_t side, std::uint64_t seed, float lo = -3.0f, float hi = 5.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Volume v = Volume::cube(side);
  for (auto& x : v.data) x = u(rng);
  return v;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mscl_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Synth, FortySubjectsFiveFoldsBalanced) {
  auto ds = generate_dataset(small_spec(), 40);
  ASSERT_EQ(ds.pairs.size(), 40u);
  std::map<int, int> per_class;
  for (const auto& p : ds.pairs) per_class[p.label]++;
  EXPECT_EQ(per_class[0], 20);
  EXPECT_EQ(per_class[1], 20);
  for (int f = 0; f < 5; ++f) {
    auto m = ds.splits.members(f);
    EXPECT_EQ(m.size(), 8u);
    int ones = 0;
    for (auto i : m) ones += ds.pairs[i].label;
    EXPECT_EQ(ones, 4);
  }
  for (const auto& p : ds.pairs) {
    EXPECT_TRUE(p.m1.same_shape(p.m2));
    for (float v : p.m1.data) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    for (float v : p.m2.data) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(Synth, TooFewSubjectsNamesMinimum) {
  try {
    generate_dataset(small_spec(), 9);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("10"), std::string::npos);
  }
}

TEST(Synth, DeterministicGivenSeed) {
  auto spec = small_spec();
  spec.noise_sigma = 0;
  auto a = generate_dataset(spec, 10), b = generate_dataset(spec, 10);
  for (std::size_t i = 0; i < a.pairs.size(); ++i) {
    EXPECT_EQ(a.pairs[i].m1.data, b.pairs[i].m1.data);
    EXPECT_EQ(a.pairs[i].m2.data, b.pairs[i].m2.data);
  }
  spec.noise_sigma = 0.1;
  auto c = generate_dataset(spec, 10), d = generate_dataset(spec, 10);
  EXPECT_EQ(c.pairs[3].m1.data, d.pairs[3].m1.data);
  EXPECT_EQ(c.splits.fold_of, d.splits.fold_of);
}

TEST(Synth, PrefixStableSubjects) {
  auto spec = small_spec();
  auto a = generate_dataset(spec, 10), b = generate_dataset(spec, 20);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(a.pairs[i].label, b.pairs[i].label);
    EXPECT_EQ(a.pairs[i].m2.data, b.pairs[i].m2.data);
  }
}

TEST(Synth, TrueFactorsSeparateLabelsExactly) {
  // Sign-pattern decoder as the exact linear separator: class 0 has every signal
  // factor negative, class k has factor k-1 positive.
  for (int classes : {2, 3}) {
    auto spec = small_spec();
    spec.noise_sigma = 0;
    spec.n_classes = classes;
    spec.class_signal_dims = classes == 2 ? std::vector<int>{0} : std::vector<int>{0, 2};
    auto ds = generate_dataset(spec, 30);
    int correct = 0;
    for (const auto& p : ds.pairs) {
      int pred = 0;
      for (std::size_t k = 0; k < spec.class_signal_dims.size(); ++k)
        if (p.factors[std::size_t(spec.class_signal_dims[k])] > 0) pred = int(k) + 1;
      correct += pred == p.label;
    }
    EXPECT_EQ(correct, 30) << classes << " classes";
  }
}

TEST(Synth, LabelBalanceWithinOne) {
  auto spec = small_spec();
  spec.n_classes = 3;
  spec.class_signal_dims = {0, 1};
  for (std::size_t n : {15u, 16u, 17u, 31u}) {
    auto ds = generate_dataset(spec, n);
    std::map<int, int> counts;
    for (const auto& p : ds.pairs) counts[p.label]++;
    for (auto [l, c] : counts) EXPECT_LE(std::abs(double(c) - double(n) / 3.0), 1.0) << n;
  }
}

TEST(Synth, UnlabeledFractionExact) {
  auto spec = small_spec();
  spec.unlabeled_fraction = 0.25;
  auto ds = generate_dataset(spec, 40);
  int unl = 0;
  for (const auto& p : ds.pairs) unl += p.label == kUnlabeled;
  EXPECT_EQ(unl, 10);
}

TEST(Synth, InvalidSpecsRejected) {
  auto s = small_spec();
  s.shared_dim = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.class_signal_dims = {4};
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.volume_side = 24;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Synth, AtlasContiguousAndShaped) {
  auto ds = generate_dataset(small_spec(), 10);
  EXPECT_NO_THROW(ds.atlas.validate());
  EXPECT_EQ(ds.atlas.labels.dims, (std::array<std::size_t, 3>{16, 16, 16}));
  EXPECT_EQ(ds.atlas.n_rois(), 8);
  EXPECT_EQ(ds.atlas.roi_names.front(), "roi_01");
}

TEST(MinMax, Examples) {
  Volume v(1, 1, 4);
  v.data = {2, 4, 6, 3};
  auto r = minmax_rescale(v);
  EXPECT_FLOAT_EQ(r.data[0], 0.0f);
  EXPECT_FLOAT_EQ(r.data[2], 1.0f);
  EXPECT_FLOAT_EQ(r.data[1], 0.5f);
  Volume c = Volume::cube(4, 3.5f);
  for (float x : minmax_rescale(c).data) EXPECT_EQ(x, 0.0f);
  v.data[1] = std::nanf("");
  EXPECT_THROW(minmax_rescale(v), DataError);
  v.data[1] = INFINITY;
  EXPECT_THROW(minmax_rescale(v), DataError);
}

TEST(MinMax, MatchesFormulaAndIdempotent) {
  auto v = random_volume(8, 1);
  const float lo = *std::min_element(v.data.begin(), v.data.end());
  const float hi = *std::max_element(v.data.begin(), v.data.end());
  auto r = minmax_rescale(v);
  for (std::size_t i = 0; i < v.size(); ++i)
    EXPECT_NEAR(r.data[i], (double(v.data[i]) - lo) / (double(hi) - lo), 1e-6);
  auto rr = minmax_rescale(r);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(rr.data[i], r.data[i], 1e-6);
}

TEST(Augment, MirrorOracleAtOrigin) {
  auto v = random_volume(16, 2);
  auto out = reflect_pad_crop_at(v, 8, 16, {0, 0, 0});
  // Independent mirror: padded index p maps to |p - pad| reflected at the far edge.
  auto mirror = [](int p, int pad, int n) {
    int i = p - pad;
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
    return i;
  };
  for (int z = 0; z < 16; ++z)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        ASSERT_EQ(out(z, y, x), v(mirror(z, 8, 16), mirror(y, 8, 16), mirror(x, 8, 16)));
  // First 8 planes equal the mirrored input planes 8..1.
  for (int z = 0; z < 8; ++z) EXPECT_EQ(out(z, 8, 8), v(8 - z, 0, 0));
}

TEST(Augment, ShapeRangeIdentityAndErrors) {
  Rng rng = make_rng(3, 0);
  auto v = minmax_rescale(random_volume(16, 4));
  for (int t = 0; t < 20; ++t) {
    auto out = reflect_pad_crop(v, 2, 16, rng);
    EXPECT_EQ(out.dims, v.dims);
    for (float x : out.data) ASSERT_TRUE(x >= 0.0f && x <= 1.0f);
  }
  EXPECT_EQ(reflect_pad_crop(v, 0, 16, rng).data, v.data);
  EXPECT_THROW(reflect_pad_crop(v, 2, 21, rng), ConfigError);
}

TEST(Augment, OffsetsCoverFullRange) {
  // side 64 pad 8 crop 64: every offset in 0..16 appears; check via the voxel it copies.
  Volume v = Volume::cube(64);
  for (std::size_t z = 0; z < 64; ++z)
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) v(z, y, x) = float(z);
  Rng rng = make_rng(5, 0);
  std::set<int> seen;
  for (int t = 0; t < 400; ++t) {
    auto out = reflect_pad_crop(v, 8, 64, rng);
    ASSERT_EQ(out.dims[0], 64u);
    const int offset = int(out(20, 0, 0)) - 20 + 8;  // z=20 lies in the unmirrored interior
    ASSERT_GE(offset, 0);
    ASSERT_LE(offset, 16);
    seen.insert(offset);
  }
  EXPECT_EQ(seen.size(), 17u);
}

TEST(Split, TenSubjectsOnePerClassPerFold) {
  std::vector<int> labels{0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  auto s = stratified_split(labels, 5, 0.0, 11);
  for (int f = 0; f < 5; ++f) {
    auto m = s.members(f);
    ASSERT_EQ(m.size(), 2u);
    EXPECT_NE(labels[m[0]], labels[m[1]]);
  }
}

TEST(Split, StratificationProportionsAndDeterminism) {
  std::vector<int> labels;
  for (int i = 0; i < 43; ++i) labels.push_back(i % 3 == 0 ? 2 : (i % 3 == 1 ? 0 : (i % 7 == 0 ? kUnlabeled : 1)));
  auto s = stratified_split(labels, 5, 0.2, 99);
  EXPECT_EQ(s.fold_of, stratified_split(labels, 5, 0.2, 99).fold_of);
  const auto hold = s.holdout();
  EXPECT_GT(hold.size(), 0u);
  std::size_t assigned = hold.size();
  std::vector<std::size_t> sizes;
  for (int f = 0; f < 5; ++f) {
    auto m = s.members(f);
    sizes.push_back(m.size());
    assigned += m.size();
  }
  EXPECT_EQ(assigned, labels.size());
  EXPECT_LE(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()), 1u);

  std::map<int, int> global;
  std::size_t pool = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (s.fold_of[i] != kHoldout) {
      global[labels[i]]++;
      pool++;
    }
  for (int f = 0; f < 5; ++f) {
    auto m = s.members(f);
    std::map<int, int> local;
    for (auto i : m) local[labels[i]]++;
    for (auto [cls, cnt] : global) {
      const double diff = std::abs(double(local[cls]) / double(m.size()) - double(cnt) / double(pool));
      EXPECT_LE(diff, 1.0 / double(m.size()) + 1e-12) << "fold " << f << " class " << cls;
    }
  }
}

TEST(Split, TooFewMembersRejected) {
  EXPECT_THROW(stratified_split({0, 0, 0, 0, 0, 1, 1, 1, 1}, 5, 0.0, 1), ConfigError);
}

TEST(VolumeIO, RoundTripAndCorruption) {
  auto dir = temp_dir("volio");
  auto v = random_volume(5, 6);
  write_volume(dir / "a.mscv", v);
  auto r = read_volume(dir / "a.mscv");
  EXPECT_EQ(r.dims, v.dims);
  EXPECT_EQ(r.data, v.data);
  {
    std::fstream f(dir / "a.mscv", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  EXPECT_THROW(read_volume(dir / "a.mscv"), DataError);
}

TEST(Manifest, RoundTripAndMissingFiles) {
  auto dir = temp_dir("manifest");
  auto ds = generate_dataset(small_spec(), 10);
  write_dataset(dir, ds);
  auto back = load_dataset(dir / "manifest.json");
  ASSERT_EQ(back.pairs.size(), 10u);
  EXPECT_EQ(back.splits.fold_of, ds.splits.fold_of);
  EXPECT_EQ(back.pairs[4].m1.data, ds.pairs[4].m1.data);
  EXPECT_EQ(back.atlas.labels.data, ds.atlas.labels.data);
  EXPECT_EQ(back.generator_spec.seed, ds.generator_spec.seed);

  fs::remove(dir / "volumes" / (ds.pairs[2].subject_id + "_m2.mscv"));
  try {
    load_dataset(dir / "manifest.json");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(ds.pairs[2].subject_id), std::string::npos);
  }
  EXPECT_THROW(load_dataset(dir / "nope.json"), DependencyError);
}

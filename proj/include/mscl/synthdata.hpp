#pragma once

// Paired synthetic volumes with a known shared / modality-unique latent
// structure, plus normalization, augmentation, stratified splits and a labeled
// atlas. Each latent factor owns one Gaussian blob per modality; blob centres
// are drawn once per dataset and differ between modalities.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mscl/error.hpp"
#include "mscl/rng.hpp"
#include "mscl/volume.hpp"

namespace mscl {

inline constexpr int kUnlabeled = -1;
inline constexpr int kHoldout = -1;

struct LatentSpec {
  int shared_dim = 4;
  std::array<int, 2> unique_dim{2, 2};
  int n_classes = 2;
  std::vector<int> class_signal_dims{0};
  double noise_sigma = 0.1;
  int volume_side = 16;
  std::uint64_t seed = 0;

  double factor_amplitude = 0.3;
  double unique_scale = 1.0;
  double blob_sigma = 0.0;  // 0 -> side / 8
  double class_margin = 0.25;
  double unlabeled_fraction = 0.0;
  int n_rois = 8;

  int total_factors() const { return shared_dim + unique_dim[0] + unique_dim[1]; }
  double effective_blob_sigma() const { return blob_sigma > 0 ? blob_sigma : volume_side / 8.0; }

  void validate() const {
    if (shared_dim < 1) throw ConfigError("LatentSpec: shared_dim must be >= 1");
    if (unique_dim[0] < 0 || unique_dim[1] < 0) throw ConfigError("LatentSpec: unique dims must be >= 0");
    if (n_classes != 2 && n_classes != 3) throw ConfigError("LatentSpec: n_classes must be 2 or 3");
    std::set<int> seen;
    for (int d : class_signal_dims) {
      if (d < 0 || d >= shared_dim)
        throw ConfigError("LatentSpec: class_signal_dims must index shared factors (0.." +
                          std::to_string(shared_dim - 1) + "), got " + std::to_string(d));
      if (!seen.insert(d).second) throw ConfigError("LatentSpec: duplicate class signal dim");
    }
    if (int(class_signal_dims.size()) < n_classes - 1)
      throw ConfigError("LatentSpec: " + std::to_string(n_classes) + " classes need at least " +
                        std::to_string(n_classes - 1) + " class_signal_dims");
    if (volume_side < 16 || (volume_side & (volume_side - 1)) != 0)
      throw ConfigError("LatentSpec: volume_side must be a power of two >= 16, got " +
                        std::to_string(volume_side));
    if (noise_sigma < 0) throw ConfigError("LatentSpec: noise_sigma must be >= 0");
    if (unlabeled_fraction < 0 || unlabeled_fraction >= 1)
      throw ConfigError("LatentSpec: unlabeled_fraction must be in [0,1)");
    if (n_rois < 1) throw ConfigError("LatentSpec: n_rois must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const LatentSpec& s) {
  j = nlohmann::json{{"shared_dim", s.shared_dim},
                     {"unique_dim", s.unique_dim},
                     {"n_classes", s.n_classes},
                     {"class_signal_dims", s.class_signal_dims},
                     {"noise_sigma", s.noise_sigma},
                     {"volume_side", s.volume_side},
                     {"seed", s.seed},
                     {"factor_amplitude", s.factor_amplitude},
                     {"unique_scale", s.unique_scale},
                     {"blob_sigma", s.blob_sigma},
                     {"class_margin", s.class_margin},
                     {"unlabeled_fraction", s.unlabeled_fraction},
                     {"n_rois", s.n_rois}};
}

inline void from_json(const nlohmann::json& j, LatentSpec& s) {
  LatentSpec d;
  s.shared_dim = j.value("shared_dim", d.shared_dim);
  s.unique_dim = j.value("unique_dim", d.unique_dim);
  s.n_classes = j.value("n_classes", d.n_classes);
  s.class_signal_dims = j.value("class_signal_dims", d.class_signal_dims);
  s.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  s.volume_side = j.value("volume_side", d.volume_side);
  s.seed = j.value("seed", d.seed);
  s.factor_amplitude = j.value("factor_amplitude", d.factor_amplitude);
  s.unique_scale = j.value("unique_scale", d.unique_scale);
  s.blob_sigma = j.value("blob_sigma", d.blob_sigma);
  s.class_margin = j.value("class_margin", d.class_margin);
  s.unlabeled_fraction = j.value("unlabeled_fraction", d.unlabeled_fraction);
  s.n_rois = j.value("n_rois", d.n_rois);
}

struct VolumePair {
  std::string subject_id;
  Volume m1;
  Volume m2;
  int label = kUnlabeled;
  /// Generating factors: shared, then unique for modality 1, then modality 2.
  std::vector<double> factors;

  const Volume& modality(int m) const { return m == 0 ? m1 : m2; }
};

struct SplitSpec {
  int folds = 5;
  std::vector<int> fold_of;  // kHoldout for hold-out subjects

  std::vector<std::size_t> members(int fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i)
      if (fold_of[i] == fold) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> holdout() const { return members(kHoldout); }
  /// Every non-holdout subject outside `val_fold`.
  std::vector<std::size_t> training(int val_fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i)
      if (fold_of[i] != kHoldout && fold_of[i] != val_fold) out.push_back(i);
    return out;
  }
};

struct AtlasVolume {
  LabelVolume labels;
  std::vector<std::string> roi_names;

  int n_rois() const { return int(roi_names.size()); }
  Mask brain_mask() const {
    Mask m(labels.dims[0], labels.dims[1], labels.dims[2]);
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = labels.data[i] > 0 ? 1 : 0;
    return m;
  }
  Mask roi_mask(int roi) const {
    Mask m(labels.dims[0], labels.dims[1], labels.dims[2]);
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = labels.data[i] == roi ? 1 : 0;
    return m;
  }
  void validate() const {
    std::vector<bool> present(roi_names.size() + 1, false);
    for (int l : labels.data) {
      if (l < 0 || l > n_rois()) throw DataError("atlas label " + std::to_string(l) + " outside 0.." +
                                                 std::to_string(n_rois()));
      present[std::size_t(l)] = true;
    }
    for (int r = 1; r <= n_rois(); ++r)
      if (!present[std::size_t(r)]) throw DataError("atlas ROI " + std::to_string(r) + " is empty");
  }
};

struct DatasetManifest {
  std::vector<VolumePair> pairs;
  SplitSpec splits;
  AtlasVolume atlas;
  LatentSpec generator_spec;
};

struct DatasetOptions {
  int folds = 5;
  double holdout_frac = 0.0;
};

// ---------------------------------------------------------------------------
// Normalization and augmentation

inline Volume minmax_rescale(const Volume& vol) {
  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (float v : vol.data) {
    if (!std::isfinite(v)) throw DataError("minmax_rescale: non-finite intensity");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Volume out(vol.dims[0], vol.dims[1], vol.dims[2], 0.0f);
  if (vol.size() == 0 || !(hi > lo)) return out;
  const double range = double(hi) - double(lo);
  for (std::size_t i = 0; i < vol.size(); ++i)
    out.data[i] = static_cast<float>(std::clamp((double(vol.data[i]) - lo) / range, 0.0, 1.0));
  return out;
}

/// Mirror index without repeating the edge voxel: -1 -> 1, n -> n-2.
inline std::size_t reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return std::size_t(i < n ? i : period - i);
}

inline Volume reflect_pad_crop_at(const Volume& vol, int pad, int crop, std::array<int, 3> offset) {
  const auto c = std::size_t(crop);
  Volume out(c, c, c);
  for (int z = 0; z < crop; ++z) {
    const std::size_t sz = reflect_index(long(offset[0]) + z - pad, long(vol.dims[0]));
    for (int y = 0; y < crop; ++y) {
      const std::size_t sy = reflect_index(long(offset[1]) + y - pad, long(vol.dims[1]));
      for (int x = 0; x < crop; ++x) {
        const std::size_t sx = reflect_index(long(offset[2]) + x - pad, long(vol.dims[2]));
        out(std::size_t(z), std::size_t(y), std::size_t(x)) = vol(sz, sy, sx);
      }
    }
  }
  return out;
}

/// Reflect-pads by `pad` on every face, then cuts a random crop^3 window.
inline Volume reflect_pad_crop(const Volume& vol, int pad, int crop, Rng& rng) {
  std::array<int, 3> offset{};
  for (int a = 0; a < 3; ++a) {
    const int span = int(vol.dims[std::size_t(a)]) + 2 * pad - crop;
    if (pad < 0 || span < 0)
      throw ConfigError("reflect_pad_crop: crop " + std::to_string(crop) + " exceeds padded side " +
                        std::to_string(int(vol.dims[std::size_t(a)]) + 2 * pad));
    if (pad >= int(vol.dims[std::size_t(a)]) && pad > 0)
      throw ConfigError("reflect_pad_crop: pad must be smaller than the volume side");
    offset[std::size_t(a)] = std::uniform_int_distribution<int>(0, span)(rng);
  }
  return reflect_pad_crop_at(vol, pad, crop, offset);
}

// ---------------------------------------------------------------------------
// Splits

/// Hold-out first, then label-stratified folds. Unlabeled subjects form their own stratum.
inline SplitSpec stratified_split(const std::vector<int>& labels, int folds, double holdout_frac,
                                  std::uint64_t seed) {
  if (folds < 1) throw ConfigError("stratified_split: folds must be >= 1");
  if (holdout_frac < 0 || holdout_frac >= 1) throw ConfigError("stratified_split: holdout_frac must be in [0,1)");
  std::map<int, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < labels.size(); ++i) strata[labels[i]].push_back(i);

  Rng rng = make_rng(seed, 0x5b117);
  SplitSpec split;
  split.folds = folds;
  split.fold_of.assign(labels.size(), kHoldout);
  std::size_t cursor = 0;
  for (auto& [label, members] : strata) {
    std::shuffle(members.begin(), members.end(), rng);
    const auto n_hold = std::size_t(std::lround(holdout_frac * double(members.size())));
    const std::size_t remaining = members.size() - n_hold;
    if (label != kUnlabeled && remaining < std::size_t(folds))
      throw ConfigError("stratified_split: class " + std::to_string(label) + " has " +
                        std::to_string(remaining) + " members outside the hold-out, fewer than " +
                        std::to_string(folds) + " folds");
    for (std::size_t k = n_hold; k < members.size(); ++k)
      split.fold_of[members[k]] = int(cursor++ % std::size_t(folds));
  }
  return split;
}

// ---------------------------------------------------------------------------
// Generator

struct GeneratorLayout {
  /// Blob centre (z,y,x) per factor, per modality. Indexing follows VolumePair::factors.
  std::array<std::vector<std::array<double, 3>>, 2> centers;
  Mask brain;
};

namespace synth_detail {

inline bool inside_ellipsoid(double z, double y, double x, int side, double scale) {
  const double c = (side - 1) / 2.0;
  const double az = 0.45 * side * scale, ay = 0.40 * side * scale, ax = 0.42 * side * scale;
  const double dz = (z - c) / az, dy = (y - c) / ay, dx = (x - c) / ax;
  return dz * dz + dy * dy + dx * dx <= 1.0;
}

}  // namespace synth_detail

inline GeneratorLayout make_layout(const LatentSpec& spec) {
  const int side = spec.volume_side;
  GeneratorLayout layout;
  layout.brain = Mask::cube(std::size_t(side), 0);
  for (int z = 0; z < side; ++z)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        layout.brain(z, y, x) = synth_detail::inside_ellipsoid(z, y, x, side, 1.0) ? 1 : 0;

  // Shared factors and each modality's own unique factors get blobs; factors
  // unique to the other modality have no footprint (amplitude 0).
  for (int m = 0; m < 2; ++m) {
    Rng rng = make_rng(spec.seed, 0xb10b0 + std::uint64_t(m));
    std::uniform_real_distribution<double> u(0.0, double(side - 1));
    auto& centers = layout.centers[std::size_t(m)];
    for (int f = 0; f < spec.total_factors(); ++f) {
      std::array<double, 3> c{};
      do {
        c = {u(rng), u(rng), u(rng)};
      } while (!synth_detail::inside_ellipsoid(c[0], c[1], c[2], side, 0.7));
      centers.push_back(c);
    }
  }
  return layout;
}

/// Voronoi partition of the brain ellipsoid into n_rois contiguous ids 1..K.
inline AtlasVolume make_atlas(const LatentSpec& spec, const GeneratorLayout& layout) {
  const int side = spec.volume_side;
  std::vector<std::array<int, 3>> brain_voxels;
  for (int z = 0; z < side; ++z)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        if (layout.brain(z, y, x)) brain_voxels.push_back({z, y, x});
  if (int(brain_voxels.size()) < spec.n_rois) throw ConfigError("make_atlas: more ROIs than brain voxels");
  Rng rng = make_rng(spec.seed, 0xa71a5);
  std::vector<std::array<int, 3>> seeds;
  std::sample(brain_voxels.begin(), brain_voxels.end(), std::back_inserter(seeds), spec.n_rois, rng);

  AtlasVolume atlas;
  atlas.labels = LabelVolume::cube(std::size_t(side), 0);
  for (const auto& v : brain_voxels) {
    int best = 0;
    long best_d = std::numeric_limits<long>::max();
    for (int r = 0; r < int(seeds.size()); ++r) {
      const long dz = v[0] - seeds[r][0], dy = v[1] - seeds[r][1], dx = v[2] - seeds[r][2];
      const long dist = dz * dz + dy * dy + dx * dx;
      if (dist < best_d) {
        best_d = dist;
        best = r;
      }
    }
    atlas.labels(v[0], v[1], v[2]) = best + 1;
  }
  for (int r = 1; r <= spec.n_rois; ++r) {
    char name[32];
    std::snprintf(name, sizeof(name), "roi_%02d", r);
    atlas.roi_names.emplace_back(name);
  }
  return atlas;
}

/// Class-conditional label for subject `index`: balanced blocks of n_classes, with an
/// exact, prefix-stable fraction of subjects left unlabeled.
inline int subject_label(const LatentSpec& spec, std::size_t index) {
  const double f = spec.unlabeled_fraction;
  if (f > 0 && std::floor(double(index + 1) * f) > std::floor(double(index) * f)) return kUnlabeled;
  const std::size_t block = index / std::size_t(spec.n_classes);
  Rng rng = make_rng(spec.seed, 0x1abe1000 + block);
  std::vector<int> perm(std::size_t(spec.n_classes));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm[index % std::size_t(spec.n_classes)];
}

/// Sign pattern over class_signal_dims: class 0 all negative, class k >= 1 positive at position k-1.
inline int sign_for_class(int label, int position) { return (label >= 1 && position == label - 1) ? 1 : -1; }

inline VolumePair generate_subject(const LatentSpec& spec, const GeneratorLayout& layout, std::size_t index) {
  const int side = spec.volume_side;
  Rng rng = make_rng(spec.seed, 0x5b1ec7000ULL + index);
  std::normal_distribution<double> normal(0.0, 1.0);

  VolumePair pair;
  char id[32];
  std::snprintf(id, sizeof(id), "sub-%04zu", index);
  pair.subject_id = id;
  pair.label = subject_label(spec, index);

  const int n_f = spec.total_factors();
  pair.factors.assign(std::size_t(n_f), 0.0);
  for (int f = 0; f < n_f; ++f) pair.factors[std::size_t(f)] = normal(rng);
  for (int f = spec.shared_dim; f < n_f; ++f) pair.factors[std::size_t(f)] *= spec.unique_scale;
  if (pair.label != kUnlabeled)
    for (std::size_t p = 0; p < spec.class_signal_dims.size(); ++p) {
      auto& s = pair.factors[std::size_t(spec.class_signal_dims[p])];
      s = sign_for_class(pair.label, int(p)) * (std::abs(s) + spec.class_margin);
    }

  const double sigma = spec.effective_blob_sigma();
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (int m = 0; m < 2; ++m) {
    Volume vol = Volume::cube(std::size_t(side));
    const int u_begin = spec.shared_dim + (m == 0 ? 0 : spec.unique_dim[0]);
    const int u_end = u_begin + spec.unique_dim[std::size_t(m)];
    for (int z = 0; z < side; ++z)
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
          double v = layout.brain(z, y, x) ? 0.5 : 0.0;
          for (int f = 0; f < n_f; ++f) {
            const bool active = f < spec.shared_dim || (f >= u_begin && f < u_end);
            if (!active) continue;
            const auto& c = layout.centers[std::size_t(m)][std::size_t(f)];
            const double dz = z - c[0], dy = y - c[1], dx = x - c[2];
            v += spec.factor_amplitude * pair.factors[std::size_t(f)] * std::exp(-(dz * dz + dy * dy + dx * dx) * inv2s2);
          }
          vol(z, y, x) = static_cast<float>(v);
        }
    if (spec.noise_sigma > 0)
      for (auto& v : vol.data) v += static_cast<float>(spec.noise_sigma * normal(rng));
    (m == 0 ? pair.m1 : pair.m2) = minmax_rescale(vol);
  }
  return pair;
}

inline DatasetManifest generate_dataset(const LatentSpec& spec, std::size_t n_subjects,
                                        const DatasetOptions& opts = {}) {
  spec.validate();
  const std::size_t minimum = std::size_t(spec.n_classes) * std::size_t(std::max(opts.folds, 1));
  if (n_subjects < minimum)
    throw ConfigError("generate_dataset: need at least " + std::to_string(minimum) + " subjects (n_classes x folds), got " +
                      std::to_string(n_subjects));
  DatasetManifest ds;
  ds.generator_spec = spec;
  const GeneratorLayout layout = make_layout(spec);
  ds.atlas = make_atlas(spec, layout);
  std::vector<int> labels;
  for (std::size_t i = 0; i < n_subjects; ++i) {
    ds.pairs.push_back(generate_subject(spec, layout, i));
    labels.push_back(ds.pairs.back().label);
  }
  ds.splits = stratified_split(labels, opts.folds, opts.holdout_frac, spec.seed);
  return ds;
}

// ---------------------------------------------------------------------------
// On-disk manifest

inline void write_dataset(const std::filesystem::path& dir, const DatasetManifest& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "volumes");
  write_volume(dir / "atlas.mscv", to_volume(ds.atlas.labels));
  nlohmann::json j;
  j["format"] = "mscl-manifest";
  j["version"] = 1;
  j["generator"] = ds.generator_spec;
  j["atlas"] = "atlas.mscv";
  j["roi_names"] = ds.atlas.roi_names;
  j["folds"] = ds.splits.folds;
  j["subjects"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    const auto& p = ds.pairs[i];
    const std::string f1 = "volumes/" + p.subject_id + "_m1.mscv";
    const std::string f2 = "volumes/" + p.subject_id + "_m2.mscv";
    write_volume(dir / f1, p.m1);
    write_volume(dir / f2, p.m2);
    j["subjects"].push_back({{"id", p.subject_id},
                             {"m1", f1},
                             {"m2", f2},
                             {"label", p.label},
                             {"fold", ds.splits.fold_of[i]},
                             {"factors", p.factors}});
  }
  std::ofstream os(dir / "manifest.json");
  os << j.dump(2) << '\n';
  if (!os) throw DataError("cannot write manifest in " + dir.string());
}

inline DatasetManifest load_dataset(const std::filesystem::path& manifest_path) {
  namespace fs = std::filesystem;
  if (!fs::exists(manifest_path)) throw DependencyError("manifest not found: " + manifest_path.string());
  std::ifstream is(manifest_path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + manifest_path.string() + ": " + e.what());
  }
  const fs::path root = manifest_path.parent_path();
  DatasetManifest ds;
  ds.generator_spec = j.at("generator").get<LatentSpec>();
  ds.atlas.labels = to_labels(read_volume(root / j.at("atlas").get<std::string>()));
  ds.atlas.roi_names = j.at("roi_names").get<std::vector<std::string>>();
  ds.atlas.validate();
  ds.splits.folds = j.at("folds").get<int>();
  std::vector<std::string> missing;
  for (const auto& s : j.at("subjects")) {
    VolumePair p;
    p.subject_id = s.at("id").get<std::string>();
    p.label = s.at("label").get<int>();
    p.factors = s.value("factors", std::vector<double>{});
    const fs::path f1 = root / s.at("m1").get<std::string>(), f2 = root / s.at("m2").get<std::string>();
    if (!fs::exists(f1) || !fs::exists(f2)) {
      missing.push_back(p.subject_id);
      continue;
    }
    p.m1 = read_volume(f1);
    p.m2 = read_volume(f2);
    if (!p.m1.same_shape(p.m2)) throw DataError("subject " + p.subject_id + ": modality shapes differ");
    ds.splits.fold_of.push_back(s.at("fold").get<int>());
    ds.pairs.push_back(std::move(p));
  }
  if (!missing.empty()) {
    std::string msg = "missing volumes for subjects:";
    for (const auto& m : missing) msg += " " + m;
    throw DataError(msg);
  }
  return ds;
}

}  // namespace mscl

#pragma once

// Per-dimension integrated gradients, saliency post-processing, voxel-wise
// Mann-Whitney group statistics, clusterization, atlas DICE and cross-modal
// link graphs.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "mscl/autograd.hpp"
#include "mscl/error.hpp"
#include "mscl/model.hpp"
#include "mscl/synthdata.hpp"
#include "mscl/volume.hpp"

namespace mscl {

// ---------------------------------------------------------------------------
// Integrated gradients

struct IgConfig {
  int steps = 64;
  int chunk = 16;  // interpolation points per forward pass
};

/// Map from an input batch [n,1,s,s,s] to representations [n,d].
template <class T>
using RepresentationFn = std::function<ag::Var<T>(const ag::Var<T>&)>;

/// (x - x') * mean over t=1..steps of grad_x z_dim(x' + t/steps (x - x')); right Riemann sum.
template <class T>
Volume integrated_gradients(const RepresentationFn<T>& f, const Volume& x, int dim, const IgConfig& cfg = {},
                            const Volume* baseline = nullptr) {
  if (cfg.steps < 8) throw ConfigError("integrated gradients: steps must be >= 8, got " + std::to_string(cfg.steps));
  if (baseline && !baseline->same_shape(x)) throw ConfigError("integrated gradients: baseline shape mismatch");
  const std::size_t nv = x.size();
  std::vector<double> acc(nv, 0.0);
  const ag::Shape one{1, 1, x.dims[0], x.dims[1], x.dims[2]};
  for (int t0 = 1; t0 <= cfg.steps; t0 += std::max(cfg.chunk, 1)) {
    const int t1 = std::min(cfg.steps, t0 + std::max(cfg.chunk, 1) - 1);
    const std::size_t n = std::size_t(t1 - t0 + 1);
    std::vector<T> buf(n * nv);
    for (std::size_t k = 0; k < n; ++k) {
      const double alpha = double(t0 + int(k)) / double(cfg.steps);
      for (std::size_t i = 0; i < nv; ++i) {
        const double base = baseline ? double(baseline->data[i]) : 0.0;
        buf[k * nv + i] = static_cast<T>(base + alpha * (double(x.data[i]) - base));
      }
    }
    auto in = ag::Var<T>::leaf({n, one[1], one[2], one[3], one[4]}, std::move(buf));
    auto z = f(in);
    if (z.rank() != 2 || z.dim(0) != n) throw ConfigError("integrated gradients: representation must be [n,d]");
    if (dim < 0 || std::size_t(dim) >= z.dim(1))
      throw ConfigError("integrated gradients: dim " + std::to_string(dim) + " outside 0.." +
                        std::to_string(z.dim(1) - 1));
    std::vector<T> seed(z.size(), T(0));
    for (std::size_t k = 0; k < n; ++k) seed[k * z.dim(1) + std::size_t(dim)] = T(1);
    ag::backward(z, std::span<const T>(seed));
    const auto g = in.grad();
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < nv; ++i) acc[i] += double(g[k * nv + i]);
  }
  Volume out(x.dims[0], x.dims[1], x.dims[2]);
  for (std::size_t i = 0; i < nv; ++i) {
    const double base = baseline ? double(baseline->data[i]) : 0.0;
    const double v = (double(x.data[i]) - base) * acc[i] / double(cfg.steps);
    if (!std::isfinite(v)) throw NumericError("integrated gradients: non-finite attribution");
    out.data[i] = float(v);
  }
  return out;
}

/// Attribution of encoder dimension `dim` for one volume; parameter gradients are cleared afterwards.
template <class T>
Volume integrated_gradients_dim(const Encoder<T>& enc, const Volume& x, int dim, const IgConfig& cfg = {},
                                const Volume* baseline = nullptr) {
  RepresentationFn<T> f = [&](const ag::Var<T>& in) { return enc.forward(in).z; };
  Volume out = integrated_gradients<T>(f, x, dim, cfg, baseline);
  for (auto v : {&enc.conv_w, &enc.conv_b})
    for (auto& p : *v) const_cast<ag::Var<T>&>(p).zero_grad();
  const_cast<ag::Var<T>&>(enc.fc.weight).zero_grad();
  const_cast<ag::Var<T>&>(enc.fc.bias).zero_grad();
  return out;
}

// ---------------------------------------------------------------------------
// Post-processing

/// Normalized 1-D Gaussian weights on offsets -r..r, r = ceil(truncate * sigma).
inline std::vector<double> gaussian_kernel(double sigma, double truncate = 4.0) {
  const int r = int(std::ceil(truncate * sigma));
  std::vector<double> w(std::size_t(2 * r + 1));
  for (int k = -r; k <= r; ++k) w[std::size_t(k + r)] = std::exp(-0.5 * double(k * k) / (sigma * sigma));
  return w;
}

/// Separable Gaussian smoothing; weights are renormalized over in-bounds taps.
inline Volume gaussian_smooth(const Volume& in, double sigma, double truncate = 4.0) {
  if (!(sigma > 0)) return in;
  const auto w = gaussian_kernel(sigma, truncate);
  const long r = long(w.size() / 2);
  std::vector<double> cur(in.data.begin(), in.data.end()), next(in.size());
  for (int axis = 0; axis < 3; ++axis) {
    const long n = long(in.dims[std::size_t(axis)]);
    const std::size_t stride = axis == 0 ? in.dims[1] * in.dims[2] : (axis == 1 ? in.dims[2] : 1);
    for (std::size_t base = 0; base < in.size(); ++base) {
      const long pos = long((base / stride) % std::size_t(n));
      double s = 0, ws = 0;
      for (long k = -r; k <= r; ++k) {
        const long q = pos + k;
        if (q < 0 || q >= n) continue;
        const double wk = w[std::size_t(k + r)];
        s += wk * cur[std::size_t(long(base) + k * long(stride))];
        ws += wk;
      }
      next[base] = s / ws;
    }
    std::swap(cur, next);
  }
  Volume out(in.dims[0], in.dims[1], in.dims[2]);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = float(cur[i]);
  return out;
}

/// Clamp negatives, mask, min-max rescale to [0,1], smooth, and zero the mask complement again.
inline Volume postprocess(const Volume& raw, const Mask& brain_mask, double sigma = 1.5) {
  if (raw.dims != brain_mask.dims) throw ConfigError("postprocess: mask shape does not match saliency volume");
  if (std::none_of(brain_mask.data.begin(), brain_mask.data.end(), [](auto v) { return v != 0; }))
    throw DataError("postprocess: empty brain mask");
  Volume v(raw.dims[0], raw.dims[1], raw.dims[2]);
  for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = brain_mask.data[i] ? std::max(raw.data[i], 0.0f) : 0.0f;
  const auto [lo, hi] = std::minmax_element(v.data.begin(), v.data.end());
  const float mn = *lo, range = *hi - *lo;
  for (auto& x : v.data) x = range > 0 ? (x - mn) / range : 0.0f;
  v = gaussian_smooth(v, sigma);
  for (std::size_t i = 0; i < v.size(); ++i)
    v.data[i] = brain_mask.data[i] ? std::clamp(v.data[i], 0.0f, 1.0f) : 0.0f;
  return v;
}

// ---------------------------------------------------------------------------
// Mann-Whitney U and rank-biserial correlation

struct MannWhitney {
  double u = 0;    // pairs with a > b, plus half of ties
  double rbc = 0;  // 1 - 2U / (n1 n2)
  double p = 1;    // two-sided
  bool exact = false;
};

inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

/// Exact null distributions of the doubled rank sum, keyed by (n1, doubled midranks).
using RankSumCache = std::map<std::pair<std::size_t, std::vector<long>>, std::vector<double>>;

inline std::vector<double> rank_sum_distribution(const std::vector<long>& rank2, std::size_t n1) {
  const long total = std::accumulate(rank2.begin(), rank2.end(), 0L);
  // count[k][s]: subsets of size k with doubled rank sum s.
  std::vector<std::vector<double>> count(n1 + 1, std::vector<double>(std::size_t(total + 1), 0.0));
  count[0][0] = 1;
  for (std::size_t i = 0; i < rank2.size(); ++i)
    for (std::size_t k = std::min(i + 1, n1); k >= 1; --k)
      for (long s = total; s >= rank2[i]; --s) count[k][std::size_t(s)] += count[k - 1][std::size_t(s - rank2[i])];
  return count[n1];
}

/// Two-sided test of group a against group b. Exact (conditional on ties) when n1*n2 <= 400,
/// tie-corrected normal approximation with continuity correction otherwise.
inline MannWhitney mann_whitney(const std::vector<double>& a, const std::vector<double>& b,
                                RankSumCache* cache = nullptr) {
  const std::size_t n1 = a.size(), n2 = b.size(), n = n1 + n2;
  if (n1 < 2 || n2 < 2) throw DataError("mann_whitney: each group needs at least 2 samples");
  std::vector<std::pair<double, int>> all;
  for (double v : a) all.push_back({v, 0});
  for (double v : b) all.push_back({v, 1});
  std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  // Doubled midranks are integers.
  std::vector<long> rank2(n);
  double tie_term = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && all[j + 1].first == all[i].first) ++j;
    for (std::size_t k = i; k <= j; ++k) rank2[k] = long(i + j + 2);
    const double t = double(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  long r1x2 = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (all[i].second == 0) r1x2 += rank2[i];
  const double nn = double(n1) * double(n2);
  MannWhitney out;
  out.u = double(r1x2) / 2.0 - double(n1) * double(n1 + 1) / 2.0;
  out.rbc = 1.0 - 2.0 * out.u / nn;
  if (tie_term == double(n) * double(n) * double(n) - double(n)) {  // every value identical
    out.rbc = 0;
    out.p = 1;
    return out;
  }
  const double mu = nn / 2.0;
  if (nn <= 400) {
    std::vector<double> local;
    const std::vector<double>* dist = &local;
    if (cache) {
      auto key = std::pair{n1, rank2};
      auto it = cache->find(key);
      if (it == cache->end()) it = cache->emplace(std::move(key), rank_sum_distribution(rank2, n1)).first;
      dist = &it->second;
    } else {
      local = rank_sum_distribution(rank2, n1);
    }
    double le = 0, ge = 0, all_sets = 0;
    for (long s = 0; s < long(dist->size()); ++s) {
      const double c = (*dist)[std::size_t(s)];
      all_sets += c;
      if (s <= r1x2) le += c;
      if (s >= r1x2) ge += c;
    }
    out.p = std::min(1.0, 2.0 * std::min(le, ge) / all_sets);
    out.exact = true;
  } else {
    const double var = nn / 12.0 * (double(n + 1) - tie_term / (double(n) * double(n - 1)));
    const double dev = std::max(std::abs(out.u - mu) - 0.5, 0.0);
    out.p = std::min(1.0, 2.0 * normal_sf(dev / std::sqrt(var)));
  }
  return out;
}

struct GroupStatMap {
  Field3<double> u, p, rbc;
  int n1 = 0, n2 = 0;
};

/// Voxel-wise Mann-Whitney of group A against group B.
inline GroupStatMap group_stats(const std::vector<Volume>& group_a, const std::vector<Volume>& group_b) {
  if (group_a.size() < 2 || group_b.size() < 2)
    throw DataError("group_stats: each group needs at least 2 subjects (got " + std::to_string(group_a.size()) + " and " +
                    std::to_string(group_b.size()) + ")");
  const auto dims = group_a.front().dims;
  for (const auto* g : {&group_a, &group_b})
    for (const auto& v : *g)
      if (v.dims != dims) throw ConfigError("group_stats: saliency volumes differ in shape");
  GroupStatMap m;
  m.n1 = int(group_a.size());
  m.n2 = int(group_b.size());
  m.u = Field3<double>(dims[0], dims[1], dims[2]);
  m.p = Field3<double>(dims[0], dims[1], dims[2], 1.0);
  m.rbc = Field3<double>(dims[0], dims[1], dims[2]);
  std::vector<double> a(group_a.size()), b(group_b.size());
  RankSumCache cache;
  for (std::size_t i = 0; i < m.u.size(); ++i) {
    for (std::size_t s = 0; s < a.size(); ++s) a[s] = group_a[s].data[i];
    for (std::size_t s = 0; s < b.size(); ++s) b[s] = group_b[s].data[i];
    const auto r = mann_whitney(a, b, &cache);
    m.u.data[i] = r.u;
    m.p.data[i] = r.p;
    m.rbc.data[i] = r.rbc;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Clusterization

/// Connected components of nonzero voxels; labels 1..k in raster order of first voxel, 0 for background.
inline LabelVolume connected_components(const Mask& mask, int connectivity = 26) {
  if (connectivity != 6 && connectivity != 26) throw ConfigError("connectivity must be 6 or 26");
  const auto& d = mask.dims;
  std::vector<std::size_t> parent(mask.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[2]; ++x) {
        const std::size_t i = mask.index(z, y, x);
        if (!mask.data[i]) continue;
        for (int dz = -1; dz <= 0; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              // Only neighbours already visited in raster order.
              if (dz == 0 && (dy > 0 || (dy == 0 && dx >= 0))) continue;
              if (connectivity == 6 && std::abs(dz) + std::abs(dy) + std::abs(dx) != 1) continue;
              const long nz = long(z) + dz, ny = long(y) + dy, nx = long(x) + dx;
              if (nz < 0 || ny < 0 || nx < 0 || ny >= long(d[1]) || nx >= long(d[2])) continue;
              const std::size_t j = mask.index(std::size_t(nz), std::size_t(ny), std::size_t(nx));
              if (!mask.data[j]) continue;
              const std::size_t ri = find(i), rj = find(j);
              if (ri != rj) parent[std::max(ri, rj)] = std::min(ri, rj);
            }
      }
  LabelVolume labels(d[0], d[1], d[2]);
  std::map<std::size_t, int> ids;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask.data[i]) continue;
    const auto root = find(i);
    auto it = ids.find(root);
    if (it == ids.end()) it = ids.emplace(root, int(ids.size()) + 1).first;
    labels.data[i] = it->second;
  }
  return labels;
}

struct Cluster {
  std::vector<std::size_t> voxels;  // flat indices, ascending
  int sign = 1;                     // +1 where group A saliency ranks higher (rbc < 0), -1 otherwise
  double peak_abs_rbc = 0;
  std::array<double, 3> centroid{0, 0, 0};  // (z, y, x)
  int best_roi = 0;
  double best_dice = 0;

  std::size_t size() const { return voxels.size(); }
};

struct ClusterReport {
  std::array<std::size_t, 3> dims{0, 0, 0};
  std::vector<Cluster> clusters;
  std::size_t selected_voxels = 0;
  std::size_t discarded_voxels = 0;

  Mask cluster_mask(std::size_t c) const {
    Mask m(dims[0], dims[1], dims[2]);
    for (auto i : clusters.at(c).voxels) m.data[i] = 1;
    return m;
  }
};

struct ClusterConfig {
  double p_threshold = 0.05;  // two-sided; split by effect sign
  std::size_t min_size = 200;
  int connectivity = 26;
};

/// Significant voxels split by rbc sign, labeled separately, small components dropped.
inline ClusterReport threshold_and_clusterize(const GroupStatMap& stat, const ClusterConfig& cfg = {}) {
  ClusterReport rep;
  rep.dims = stat.p.dims;
  for (int sign : {1, -1}) {
    Mask sel(rep.dims[0], rep.dims[1], rep.dims[2]);
    for (std::size_t i = 0; i < sel.size(); ++i) {
      const double r = stat.rbc.data[i];
      const bool side = sign > 0 ? r < 0 : r > 0;
      if (stat.p.data[i] <= cfg.p_threshold && side) {
        sel.data[i] = 1;
        ++rep.selected_voxels;
      }
    }
    const auto labels = connected_components(sel, cfg.connectivity);
    std::map<int, Cluster> found;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels.data[i]) found[labels.data[i]].voxels.push_back(i);
    for (auto& [id, c] : found) {
      if (c.size() < cfg.min_size) {
        rep.discarded_voxels += c.size();
        continue;
      }
      c.sign = sign;
      for (auto i : c.voxels) {
        c.peak_abs_rbc = std::max(c.peak_abs_rbc, std::abs(stat.rbc.data[i]));
        const std::size_t x = i % rep.dims[2], y = (i / rep.dims[2]) % rep.dims[1], z = i / (rep.dims[1] * rep.dims[2]);
        c.centroid[0] += double(z);
        c.centroid[1] += double(y);
        c.centroid[2] += double(x);
      }
      for (auto& v : c.centroid) v /= double(c.size());
      rep.clusters.push_back(std::move(c));
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Atlas overlap

inline double dice(const Mask& a, const Mask& b) {
  if (a.dims != b.dims) throw ConfigError("dice: mask shapes differ");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    inter += x && y;
    na += x;
    nb += y;
  }
  return na + nb == 0 ? 0.0 : 2.0 * double(inter) / double(na + nb);
}

struct DiceEntry {
  int dim = 0;
  int roi = 0;
  double dice = 0;
};

/// Best ROI per cluster (stored on the clusters), then max DICE per ROI across clusters for this dimension.
inline std::vector<DiceEntry> atlas_overlap(ClusterReport& report, const AtlasVolume& atlas, int dim) {
  if (atlas.labels.dims != report.dims) throw ConfigError("atlas_overlap: atlas shape does not match clusters");
  std::map<int, double> best;
  for (std::size_t c = 0; c < report.clusters.size(); ++c) {
    const Mask cm = report.cluster_mask(c);
    auto& cl = report.clusters[c];
    cl.best_roi = 0;
    cl.best_dice = 0;
    for (int r = 1; r <= atlas.n_rois(); ++r) {
      const double d = dice(cm, atlas.roi_mask(r));
      if (d > cl.best_dice) {
        cl.best_dice = d;
        cl.best_roi = r;
      }
    }
    if (cl.best_roi > 0) best[cl.best_roi] = std::max(best[cl.best_roi], cl.best_dice);
  }
  std::vector<DiceEntry> out;
  for (const auto& [roi, d] : best) out.push_back({dim, roi, d});
  return out;
}

// ---------------------------------------------------------------------------
// Cross-modal link graph

/// Pearson correlation between every column of a (rows) and every column of b (cols); NaN for constant columns.
inline Eigen::MatrixXd cross_correlation(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows()) throw ConfigError("cross_correlation: row counts differ");
  auto standardize = [](Eigen::MatrixXd m) {
    m.rowwise() -= m.colwise().mean();
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double nrm = m.col(c).norm();
      if (nrm > 0)
        m.col(c) /= nrm;
      else
        m.col(c).setConstant(std::numeric_limits<double>::quiet_NaN());
    }
    return m;
  };
  Eigen::MatrixXd r = standardize(a).transpose() * standardize(b);
  for (Eigen::Index i = 0; i < r.size(); ++i)
    if (std::isfinite(r.data()[i])) r.data()[i] = std::clamp(r.data()[i], -1.0, 1.0);
  return r;
}

struct LinkEdge {
  int roi_m1 = 0, roi_m2 = 0;
  double weight = 0;
  int rank = 0;
};

struct LinkGraph {
  std::vector<LinkEdge> edges;
  std::vector<std::string> warnings;
};

/// Seed ROI -> best-DICE dimension -> most positively and most negatively correlated partner
/// dimension in the other modality -> every ROI attributed to that partner. Keeps the top_k edges by |weight|.
inline LinkGraph crossmodal_links(const Eigen::MatrixXd& z_m1, const Eigen::MatrixXd& z_m2,
                                  const std::array<std::vector<DiceEntry>, 2>& tables, int top_k = 64) {
  LinkGraph g;
  const Eigen::MatrixXd r = cross_correlation(z_m1, z_m2);  // rows: m1 dims, cols: m2 dims
  for (int m = 0; m < 2; ++m) {
    const auto& cols = m == 0 ? z_m1 : z_m2;
    for (Eigen::Index c = 0; c < cols.cols(); ++c)
      if ((cols.col(c).array() == cols(0, c)).all())
        g.warnings.push_back("modality " + std::to_string(m + 1) + " dimension " + std::to_string(c) +
                             " is constant; correlations skipped");
  }
  auto corr = [&](int m, int dim, int partner) { return m == 0 ? r(dim, partner) : r(partner, dim); };
  std::map<std::pair<int, int>, double> best;
  for (int m = 0; m < 2; ++m) {
    const auto& seeds = tables[std::size_t(m)];
    const auto& others = tables[std::size_t(1 - m)];
    const Eigen::Index n_partner = m == 0 ? r.cols() : r.rows();
    std::map<int, DiceEntry> seed_dim;  // roi -> best entry
    for (const auto& e : seeds) {
      auto it = seed_dim.find(e.roi);
      if (it == seed_dim.end() || e.dice > it->second.dice || (e.dice == it->second.dice && e.dim < it->second.dim))
        seed_dim[e.roi] = e;
    }
    for (const auto& [roi, e] : seed_dim) {
      int pos = -1, neg = -1;
      double vpos = 0, vneg = 0;
      for (int p = 0; p < int(n_partner); ++p) {
        const double v = corr(m, e.dim, p);
        if (!std::isfinite(v)) continue;
        if (v > vpos) vpos = v, pos = p;
        if (v < vneg) vneg = v, neg = p;
      }
      for (auto [partner, w] : {std::pair{pos, vpos}, std::pair{neg, vneg}}) {
        if (partner < 0) continue;
        for (const auto& o : others) {
          if (o.dim != partner) continue;
          const auto key = m == 0 ? std::pair{roi, o.roi} : std::pair{o.roi, roi};
          auto it = best.find(key);
          if (it == best.end() || std::abs(w) > std::abs(it->second)) best[key] = w;
        }
      }
    }
  }
  for (const auto& [k, w] : best) g.edges.push_back({k.first, k.second, w, 0});
  std::stable_sort(g.edges.begin(), g.edges.end(),
                   [](const auto& a, const auto& b) { return std::abs(a.weight) > std::abs(b.weight); });
  if (int(g.edges.size()) > top_k) g.edges.resize(std::size_t(std::max(top_k, 0)));
  for (std::size_t i = 0; i < g.edges.size(); ++i) g.edges[i].rank = int(i) + 1;
  return g;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const ClusterReport& rep, const std::vector<std::string>& roi_names = {}) {
  nlohmann::json j;
  j["dims"] = rep.dims;
  j["selected_voxels"] = rep.selected_voxels;
  j["discarded_voxels"] = rep.discarded_voxels;
  j["clusters"] = nlohmann::json::array();
  for (const auto& c : rep.clusters) {
    nlohmann::json e{{"size", c.size()},          {"sign", c.sign},         {"peak_abs_rbc", c.peak_abs_rbc},
                     {"centroid", c.centroid},    {"best_roi", c.best_roi}, {"best_dice", c.best_dice}};
    if (c.best_roi > 0 && std::size_t(c.best_roi) <= roi_names.size()) e["best_roi_name"] = roi_names[std::size_t(c.best_roi - 1)];
    j["clusters"].push_back(std::move(e));
  }
  return j;
}

inline nlohmann::json to_json(const LinkGraph& g) {
  nlohmann::json j;
  j["edges"] = nlohmann::json::array();
  for (const auto& e : g.edges)
    j["edges"].push_back({{"roi_m1", e.roi_m1}, {"roi_m2", e.roi_m2}, {"weight", e.weight}, {"rank", e.rank}});
  j["warnings"] = g.warnings;
  return j;
}

inline void write_link_csv(const std::filesystem::path& path, const LinkGraph& g) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << "roi_m1,roi_m2,weight,rank\n";
  char buf[64];
  for (const auto& e : g.edges) {
    std::snprintf(buf, sizeof(buf), "%.9g", e.weight);
    os << e.roi_m1 << ',' << e.roi_m2 << ',' << buf << ',' << e.rank << '\n';
  }
}

}  // namespace mscl

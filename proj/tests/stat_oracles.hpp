#pragma once

// Quadratic pair counting and breadth-first flood fill, used as references for the
// rank statistics and the clusterizer.

#include <array>
#include <cstdlib>
#include <queue>
#include <vector>

#include "mscl/volume.hpp"

namespace oracle {

/// Pairs with a > b, ties counted half.
inline double brute_u(const std::vector<double>& a, const std::vector<double>& b) {
  double u = 0;
  for (double x : a)
    for (double y : b) u += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  return u;
}

/// (#(a < b) - #(a > b)) / (n1 n2)
inline double brute_rbc(const std::vector<double>& a, const std::vector<double>& b) {
  double lt = 0, gt = 0;
  for (double x : a)
    for (double y : b) {
      lt += x < y;
      gt += x > y;
    }
  return (lt - gt) / double(a.size() * b.size());
}

inline double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double acc = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        acc += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        pairs += 1;
      }
  return acc / pairs;
}

/// Components numbered in raster order of their first voxel.
inline mscl::LabelVolume flood_fill(const mscl::Mask& m, int connectivity) {
  mscl::LabelVolume out(m.dims[0], m.dims[1], m.dims[2]);
  int next = 0;
  const long d0 = long(m.dims[0]), d1 = long(m.dims[1]), d2 = long(m.dims[2]);
  for (long z = 0; z < d0; ++z)
    for (long y = 0; y < d1; ++y)
      for (long x = 0; x < d2; ++x) {
        if (!m(z, y, x) || out(z, y, x)) continue;
        out(z, y, x) = ++next;
        std::queue<std::array<long, 3>> q;
        q.push({z, y, x});
        while (!q.empty()) {
          auto [cz, cy, cx] = q.front();
          q.pop();
          for (long dz = -1; dz <= 1; ++dz)
            for (long dy = -1; dy <= 1; ++dy)
              for (long dx = -1; dx <= 1; ++dx) {
                const long manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
                if (manhattan == 0 || (connectivity == 6 && manhattan != 1)) continue;
                const long nz = cz + dz, ny = cy + dy, nx = cx + dx;
                if (nz < 0 || ny < 0 || nx < 0 || nz >= d0 || ny >= d1 || nx >= d2) continue;
                if (!m(nz, ny, nx) || out(nz, ny, nx)) continue;
                out(nz, ny, nx) = next;
                q.push({nz, ny, nx});
              }
        }
      }
  return out;
}

}  // namespace oracle

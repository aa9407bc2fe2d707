// Path dumps for plotting and the hull-area statistic used to compare them.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "bridgepath/bridge.hpp"
#include "bridgepath/corpus.hpp"
#include "bridgepath/model.hpp"

namespace bridgepath {

// K paths over the bridge built on the dialogue's mapper expectations.
inline std::vector<LatentPath> dialogue_paths(const DialogueModel& m, const ParameterStore& store, const Dialogue& d,
                                              int K, std::uint64_t seed, double delta = 0.5) {
  if (d.utterances.size() < 2) throw std::invalid_argument("sample-paths: dialogue needs at least 2 utterances");
  if (K < 1) throw std::invalid_argument("sample-paths: K must be >= 1");
  const Matrix mus = dialogue_mus(m, store, d);
  std::vector<Vector> rows;
  for (Eigen::Index t = 0; t < mus.rows(); ++t) rows.push_back(mus.row(t).transpose());
  return sample_paths(BridgeParams(std::move(rows), delta), K, seed);
}

// Min-max scaling per dimension over every point of every path. A constant
// dimension maps to 0.
inline std::vector<LatentPath> normalize_paths(std::vector<LatentPath> paths) {
  if (paths.empty() || paths.front().zs.empty()) return paths;
  const Eigen::Index d = paths.front().zs.front().size();
  Vector lo = Vector::Constant(d, std::numeric_limits<double>::infinity());
  Vector hi = Vector::Constant(d, -std::numeric_limits<double>::infinity());
  for (const auto& p : paths) {
    for (const auto& z : p.zs) {
      lo = lo.cwiseMin(z);
      hi = hi.cwiseMax(z);
    }
  }
  for (auto& p : paths) {
    for (auto& z : p.zs) {
      for (Eigen::Index i = 0; i < d; ++i) {
        const double span = hi(i) - lo(i);
        z(i) = span > 0.0 ? std::clamp((z(i) - lo(i)) / span, 0.0, 1.0) : 0.0;
      }
    }
  }
  return paths;
}

inline void write_paths_csv(std::ostream& os, const std::vector<LatentPath>& paths) {
  if (paths.empty()) return;
  const Eigen::Index d = paths.front().zs.front().size();
  os << "path,t";
  for (Eigen::Index i = 0; i < d; ++i) os << ",dim" << i;
  os << '\n';
  os.precision(17);
  for (const auto& p : paths) {
    for (std::size_t t = 0; t < p.zs.size(); ++t) {
      os << p.path_index << ',' << t;
      for (Eigen::Index i = 0; i < d; ++i) os << ',' << p.zs[t](i);
      os << '\n';
    }
  }
}

struct PathRow {
  int path = 0;
  int t = 0;
  std::vector<double> values;
};

inline std::vector<PathRow> read_paths_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("path,t", 0) != 0) throw std::invalid_argument("paths csv: bad header");
  std::vector<PathRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    PathRow r;
    std::getline(ss, cell, ',');
    r.path = std::stoi(cell);
    std::getline(ss, cell, ',');
    r.t = std::stoi(cell);
    while (std::getline(ss, cell, ',')) r.values.push_back(std::stod(cell));
    rows.push_back(std::move(r));
  }
  return rows;
}

using Point2 = std::array<double, 2>;

// Area of the convex hull (monotone chain); 0 for fewer than 3 points or
// collinear input.
inline double convex_hull_area(std::vector<Point2> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return 0.0;
  auto cross = [](const Point2& o, const Point2& a, const Point2& b) {
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
  };
  std::vector<Point2> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  double area = 0.0;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const auto& a = hull[i];
    const auto& b = hull[(i + 1) % hull.size()];
    area += a[0] * b[1] - b[0] * a[1];
  }
  return std::abs(area) / 2.0;
}

}  // namespace bridgepath

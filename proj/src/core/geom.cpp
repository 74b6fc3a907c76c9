#include "geom.hpp"

#include <algorithm>
#include <cmath>

namespace jigsaw::geom {

namespace {
constexpr double kDeg = M_PI / 180.0;

double wrap_deg(double d) {
  d = std::fmod(d, 360.0);
  if (d > 180.0) d -= 360.0;
  if (d <= -180.0) d += 360.0;
  return d;
}
}  // namespace

RigidTransform::RigidTransform(const Mat3& r, const Vec3& t) : r_(r), t_(t) {
  const Mat3 err = r.transpose() * r - Mat3::Identity();
  if (err.cwiseAbs().maxCoeff() >= 1e-9 || r.determinant() <= 0.0) {
    throw GeomError("rotation is not orthonormal with det +1");
  }
}

RigidTransform RigidTransform::from_quat(double w, double x, double y, double z,
                                         const Vec3& t) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (n < 1e-12) throw GeomError("zero quaternion");
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return RigidTransform(r, t);
}

std::vector<Vec3> RigidTransform::apply(const std::vector<Vec3>& pts) const {
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const Vec3& p : pts) out.push_back(apply(p));
  return out;
}

RigidTransform RigidTransform::compose(const RigidTransform& other) const {
  return RigidTransform(r_ * other.r_, r_ * other.t_ + t_);
}

RigidTransform RigidTransform::inverse() const {
  return RigidTransform(r_.transpose(), -(r_.transpose() * t_));
}

std::array<double, 4> RigidTransform::quaternion() const {
  const Mat3& m = r_;
  double w, x, y, z;
  const double tr = m.trace();
  if (tr > 0.0) {
    double s = std::sqrt(tr + 1.0) * 2.0;
    w = 0.25 * s;
    x = (m(2, 1) - m(1, 2)) / s;
    y = (m(0, 2) - m(2, 0)) / s;
    z = (m(1, 0) - m(0, 1)) / s;
  } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
    double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
    w = (m(2, 1) - m(1, 2)) / s;
    x = 0.25 * s;
    y = (m(0, 1) + m(1, 0)) / s;
    z = (m(0, 2) + m(2, 0)) / s;
  } else if (m(1, 1) > m(2, 2)) {
    double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
    w = (m(0, 2) - m(2, 0)) / s;
    x = (m(0, 1) + m(1, 0)) / s;
    y = 0.25 * s;
    z = (m(1, 2) + m(2, 1)) / s;
  } else {
    double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
    w = (m(1, 0) - m(0, 1)) / s;
    x = (m(0, 2) + m(2, 0)) / s;
    y = (m(1, 2) + m(2, 1)) / s;
    z = 0.25 * s;
  }
  double n = std::sqrt(w * w + x * x + y * y + z * z);
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  if (w < 0.0) {
    w = -w;
    x = -x;
    y = -y;
    z = -z;
  }
  return {w, x, y, z};
}

Mat3 rot_x(double deg) {
  const double c = std::cos(deg * kDeg), s = std::sin(deg * kDeg);
  Mat3 r;
  r << 1, 0, 0, 0, c, -s, 0, s, c;
  return r;
}

Mat3 rot_y(double deg) {
  const double c = std::cos(deg * kDeg), s = std::sin(deg * kDeg);
  Mat3 r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

Mat3 rot_z(double deg) {
  const double c = std::cos(deg * kDeg), s = std::sin(deg * kDeg);
  Mat3 r;
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

Mat3 rotation_from_euler(double rx_deg, double ry_deg, double rz_deg) {
  return rot_x(rx_deg) * rot_y(ry_deg) * rot_z(rz_deg);
}

EulerAngles euler_from_rotation(const Mat3& r) {
  EulerAngles e;
  const double sb = std::clamp(r(0, 2), -1.0, 1.0);
  if (std::abs(r(0, 2)) >= 1.0 - 1e-15) {
    // cos(ry) == 0: only rx+rz (or rx-rz) is defined; fix rz = 0.
    e.gimbal = true;
    e.ry = sb > 0.0 ? 90.0 : -90.0;
    const double a = std::atan2(r(1, 0), r(1, 1)) / kDeg;
    e.rx = wrap_deg(sb > 0.0 ? a : -a);
    e.rz = 0.0;
    return e;
  }
  e.ry = std::asin(sb) / kDeg;
  e.rx = wrap_deg(std::atan2(-r(1, 2), r(2, 2)) / kDeg);
  e.rz = wrap_deg(std::atan2(-r(0, 1), r(0, 0)) / kDeg);
  return e;
}

Mat3 random_rotation(Rng& rng) {
  double q[4];
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (double& v : q) {
      v = rng.normal();
      n2 += v * v;
    }
  } while (n2 < 1e-12);
  const double n = std::sqrt(n2);
  return RigidTransform::from_quat(q[0] / n, q[1] / n, q[2] / n, q[3] / n,
                                   Vec3::Zero())
      .rotation();
}

double rotation_angle_deg(const Mat3& r) {
  const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) / kDeg;
}

// ---------------------------------------------------------------------------
// KnnIndex
// ---------------------------------------------------------------------------

KnnIndex::KnnIndex(std::vector<Vec3> points) : points_(std::move(points)) {
  if (points_.empty()) {
    cells_.resize(1);
    origin_ = Vec3::Zero();
    return;
  }
  Vec3 lo = points_[0], hi = points_[0];
  for (const Vec3& p : points_) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  origin_ = lo;
  const Vec3 ext = hi - lo;
  const double max_ext = std::max({ext.x(), ext.y(), ext.z(), 1e-9});
  const int target = std::clamp(
      static_cast<int>(std::cbrt(static_cast<double>(points_.size()) * 2.0)), 1, 64);
  cell_ = max_ext / static_cast<double>(target);
  nx_ = std::max(1, std::min(64, static_cast<int>(ext.x() / cell_) + 1));
  ny_ = std::max(1, std::min(64, static_cast<int>(ext.y() / cell_) + 1));
  nz_ = std::max(1, std::min(64, static_cast<int>(ext.z() / cell_) + 1));
  cells_.resize(static_cast<size_t>(nx_) * ny_ * nz_);
  for (size_t i = 0; i < points_.size(); ++i) {
    const Vec3 rel = points_[i] - origin_;
    const int cx = std::clamp(static_cast<int>(rel.x() / cell_), 0, nx_ - 1);
    const int cy = std::clamp(static_cast<int>(rel.y() / cell_), 0, ny_ - 1);
    const int cz = std::clamp(static_cast<int>(rel.z() / cell_), 0, nz_ - 1);
    cells_[static_cast<size_t>(cell_index(cx, cy, cz))].push_back(static_cast<int>(i));
  }
}

std::vector<KnnIndex::Hit> KnnIndex::query(const Vec3& q, int k) const {
  if (points_.empty()) throw GeomError("knn: empty reference set");
  if (k < 1) throw GeomError("knn: k must be >= 1");
  const int want = std::min<int>(k, static_cast<int>(points_.size()));

  const Vec3 rel = q - origin_;
  const int qx = std::clamp(static_cast<int>(std::floor(rel.x() / cell_)), 0, nx_ - 1);
  const int qy = std::clamp(static_cast<int>(std::floor(rel.y() / cell_)), 0, ny_ - 1);
  const int qz = std::clamp(static_cast<int>(std::floor(rel.z() / cell_)), 0, nz_ - 1);

  std::vector<std::pair<double, int>> cand;  // (squared dist, index)
  const int max_ring = std::max({nx_, ny_, nz_});
  double kth = std::numeric_limits<double>::infinity();
  for (int ring = 0; ring <= max_ring; ++ring) {
    // Points in rings > ring are at least (ring)*cell - cell away.
    if (static_cast<int>(cand.size()) >= want) {
      const double bound = (static_cast<double>(ring) - 1.0) * cell_;
      if (bound > 0.0 && kth <= bound * bound) break;
    }
    for (int cz = std::max(0, qz - ring); cz <= std::min(nz_ - 1, qz + ring); ++cz) {
      for (int cy = std::max(0, qy - ring); cy <= std::min(ny_ - 1, qy + ring); ++cy) {
        for (int cx = std::max(0, qx - ring); cx <= std::min(nx_ - 1, qx + ring); ++cx) {
          const int cheb = std::max({std::abs(cx - qx), std::abs(cy - qy), std::abs(cz - qz)});
          if (cheb != ring) continue;
          for (int idx : cells_[static_cast<size_t>(cell_index(cx, cy, cz))]) {
            const double d2 = (points_[static_cast<size_t>(idx)] - q).squaredNorm();
            cand.emplace_back(d2, idx);
          }
        }
      }
    }
    if (static_cast<int>(cand.size()) >= want) {
      std::nth_element(cand.begin(), cand.begin() + (want - 1), cand.end());
      kth = cand[static_cast<size_t>(want - 1)].first;
    }
  }
  std::sort(cand.begin(), cand.end());
  cand.resize(static_cast<size_t>(want));
  std::vector<Hit> out;
  out.reserve(cand.size());
  for (const auto& [d2, idx] : cand) out.push_back({idx, std::sqrt(d2)});
  return out;
}

std::vector<int64_t> knn_neighbor_table(const std::vector<Vec3>& pts, int k) {
  KnnIndex index(pts);
  std::vector<int64_t> out;
  out.reserve(pts.size() * static_cast<size_t>(k));
  for (const Vec3& p : pts) {
    auto hits = index.query(p, k);
    for (int j = 0; j < k; ++j) {
      const size_t jj = std::min<size_t>(static_cast<size_t>(j), hits.size() - 1);
      out.push_back(hits[jj].index);
    }
  }
  return out;
}

double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b,
               bool squared) {
  if (a.empty() || b.empty()) throw GeomError("chamfer: empty input");
  auto side = [squared](const std::vector<Vec3>& from, const KnnIndex& to) {
    double s = 0.0;
    for (const Vec3& p : from) {
      const double d = to.query(p, 1)[0].dist;
      s += squared ? d * d : d;
    }
    return s / static_cast<double>(from.size());
  };
  KnnIndex ia(a), ib(b);
  return 0.5 * (side(a, ib) + side(b, ia));
}

}  // namespace jigsaw::geom

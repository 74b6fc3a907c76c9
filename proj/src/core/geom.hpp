#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <stdexcept>
#include <vector>

#include "rng.hpp"

namespace jigsaw::geom {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct GeomError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Proper rigid motion: x -> R x + t. Construction rejects anything that is
// not orthonormal with det +1 (tolerance 1e-9).
class RigidTransform {
 public:
  RigidTransform() : r_(Mat3::Identity()), t_(Vec3::Zero()) {}
  RigidTransform(const Mat3& r, const Vec3& t);

  static RigidTransform identity() { return {}; }
  static RigidTransform from_quat(double w, double x, double y, double z,
                                  const Vec3& t);

  const Mat3& rotation() const { return r_; }
  const Vec3& translation() const { return t_; }

  Vec3 apply(const Vec3& p) const { return r_ * p + t_; }
  std::vector<Vec3> apply(const std::vector<Vec3>& pts) const;

  // this after other: (this*other)(p) == this(other(p))
  RigidTransform compose(const RigidTransform& other) const;
  RigidTransform inverse() const;

  // (w, x, y, z), unit norm, w >= 0
  std::array<double, 4> quaternion() const;

 private:
  Mat3 r_;
  Vec3 t_;
};

// Euler angles in degrees, intrinsic XYZ convention: R = Rx(rx)·Ry(ry)·Rz(rz).
// Angles are reported in (-180, 180]. In the gimbal-lock region (|ry| = 90°)
// the split between rx and rz is fixed by rz = 0, and `gimbal` is set.
struct EulerAngles {
  double rx = 0.0, ry = 0.0, rz = 0.0;
  bool gimbal = false;
};

EulerAngles euler_from_rotation(const Mat3& r);
Mat3 rotation_from_euler(double rx_deg, double ry_deg, double rz_deg);

Mat3 rot_x(double deg);
Mat3 rot_y(double deg);
Mat3 rot_z(double deg);

// Haar-uniform rotation (uniform quaternion on S^3).
Mat3 random_rotation(Rng& rng);

// Geodesic rotation angle in degrees.
double rotation_angle_deg(const Mat3& r);

// Exact k-nearest-neighbor index over a fixed point set (uniform grid).
// Results are sorted by ascending distance, ties broken by lower index.
class KnnIndex {
 public:
  struct Hit {
    int index;
    double dist;
  };

  explicit KnnIndex(std::vector<Vec3> points);

  std::vector<Hit> query(const Vec3& q, int k) const;
  size_t size() const { return points_.size(); }
  const std::vector<Vec3>& points() const { return points_; }

 private:
  std::vector<Vec3> points_;
  Vec3 origin_;
  double cell_ = 1.0;
  int nx_ = 1, ny_ = 1, nz_ = 1;
  std::vector<std::vector<int>> cells_;

  int cell_index(int cx, int cy, int cz) const {
    return (cz * ny_ + cy) * nx_ + cx;
  }
};

// Flattened k-NN neighbor lists for every point of `pts` against itself
// (each point is its own nearest neighbor). Row r holds indices
// [r*k, (r+1)*k). If pts.size() < k, neighbors repeat the last valid hit.
std::vector<int64_t> knn_neighbor_table(const std::vector<Vec3>& pts, int k);

// Symmetric Chamfer distance: 0.5*(mean_a min_b d + mean_b min_a d),
// unsquared by default; `squared` switches to squared distances.
double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b,
               bool squared = false);

}  // namespace jigsaw::geom

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "core/geom.hpp"
#include "support.hpp"

using namespace jigsaw;
using namespace jigsaw::geom;

namespace {

Vec3 rand_vec(Rng& rng, double s = 1.0) {
  return Vec3(rng.uniform(-s, s), rng.uniform(-s, s), rng.uniform(-s, s));
}

std::vector<Vec3> rand_cloud(Rng& rng, int n, double s = 1.0) {
  std::vector<Vec3> pts;
  pts.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) pts.push_back(rand_vec(rng, s));
  return pts;
}

}  // namespace

TEST_CASE("rigid transform basics") {
  Rng rng(3);
  const Vec3 p = rand_vec(rng);

  CHECK((RigidTransform::identity().apply(p) - p).norm() == 0.0);

  const RigidTransform t(random_rotation(rng), rand_vec(rng));
  CHECK((t.apply(t.inverse().apply(p)) - p).norm() < 1e-9);
  CHECK((t.compose(t.inverse()).apply(p) - p).norm() < 1e-9);

  const Vec3 q = rot_z(90.0) * Vec3(1, 0, 0);
  CHECK((q - Vec3(0, 1, 0)).norm() < 1e-12);
}

TEST_CASE("transforms are isometries") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const RigidTransform t(random_rotation(rng), rand_vec(rng, 2.0));
    const Vec3 p = rand_vec(rng), q = rand_vec(rng);
    CHECK(std::abs((t.apply(p) - t.apply(q)).norm() - (p - q).norm()) < 1e-9);
  }
}

TEST_CASE("non-orthonormal rotations rejected") {
  Mat3 bad = Mat3::Identity();
  bad(0, 0) = 1.5;
  CHECK_THROWS_AS(RigidTransform(bad, Vec3::Zero()), GeomError);
  Mat3 reflect = Mat3::Identity();
  reflect(2, 2) = -1.0;
  CHECK_THROWS_AS(RigidTransform(reflect, Vec3::Zero()), GeomError);
}

TEST_CASE("quaternion round trip") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const RigidTransform t(random_rotation(rng), rand_vec(rng));
    const auto q = t.quaternion();
    CHECK(std::abs(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3] - 1.0) < 1e-9);
    CHECK(q[0] >= 0.0);
    const RigidTransform back =
        RigidTransform::from_quat(q[0], q[1], q[2], q[3], t.translation());
    CHECK((back.rotation() - t.rotation()).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("euler angles") {
  SUBCASE("identity and single axis") {
    const EulerAngles e0 = euler_from_rotation(Mat3::Identity());
    CHECK(e0.rx == doctest::Approx(0.0));
    CHECK(e0.ry == doctest::Approx(0.0));
    CHECK(e0.rz == doctest::Approx(0.0));
    CHECK_FALSE(e0.gimbal);

    const EulerAngles ez = euler_from_rotation(rot_z(30.0));
    CHECK(ez.rx == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(ez.ry == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(ez.rz == doctest::Approx(30.0));
  }
  SUBCASE("round trip on random rotations") {
    Rng rng(6);
    for (int trial = 0; trial < 1000; ++trial) {
      const Mat3 r = random_rotation(rng);
      const EulerAngles e = euler_from_rotation(r);
      if (e.gimbal) continue;  // measure-zero; convention checked below
      CHECK(e.rx > -180.0 + 1e-12);
      CHECK(e.rx <= 180.0);
      CHECK(e.rz <= 180.0);
      const Mat3 back = rotation_from_euler(e.rx, e.ry, e.rz);
      CHECK((back - r).cwiseAbs().maxCoeff() < 1e-7);
    }
  }
  SUBCASE("gimbal lock resolved by rz = 0") {
    const Mat3 r = rotation_from_euler(25.0, 90.0, 13.0);
    const EulerAngles e = euler_from_rotation(r);
    CHECK(e.gimbal);
    CHECK(e.ry == doctest::Approx(90.0));
    CHECK(e.rz == 0.0);
    CHECK(e.rx == doctest::Approx(38.0));  // rx + rz combined
    const Mat3 back = rotation_from_euler(e.rx, e.ry, e.rz);
    CHECK((back - r).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("knn exactness against brute force") {
  Rng rng(7);
  auto pts = rand_cloud(rng, 1000);
  KnnIndex index(pts);

  std::vector<std::array<double, 3>> ref;
  for (const Vec3& p : pts) ref.push_back({p.x(), p.y(), p.z()});

  for (int trial = 0; trial < 200; ++trial) {
    const Vec3 q = trial % 2 == 0 ? pts[static_cast<size_t>(rng.uniform_int(0, 999))]
                                  : rand_vec(rng, 1.2);
    auto hits = index.query(q, 16);
    auto expect = testsupport::brute_knn(ref, {q.x(), q.y(), q.z()}, 16);
    REQUIRE(hits.size() == expect.size());
    for (size_t i = 0; i < hits.size(); ++i) CHECK(hits[i].index == expect[i]);
  }
}

TEST_CASE("knn edge cases") {
  Rng rng(8);
  auto pts = rand_cloud(rng, 5);
  KnnIndex index(pts);

  SUBCASE("query equal to a reference point") {
    auto hits = index.query(pts[3], 2);
    CHECK(hits[0].index == 3);
    CHECK(hits[0].dist == 0.0);
  }
  SUBCASE("k > n returns n results") {
    auto hits = index.query(Vec3::Zero(), 50);
    CHECK(hits.size() == 5);
  }
  SUBCASE("empty reference set") {
    KnnIndex empty(std::vector<Vec3>{});
    CHECK_THROWS_AS(empty.query(Vec3::Zero(), 1), GeomError);
  }
  SUBCASE("ties broken by lower index") {
    std::vector<Vec3> dup = {Vec3(1, 0, 0), Vec3(0, 0, 0), Vec3(1, 0, 0)};
    KnnIndex di(dup);
    auto hits = di.query(Vec3(1, 0, 0), 3);
    CHECK(hits[0].index == 0);
    CHECK(hits[1].index == 2);
    CHECK(hits[2].index == 1);
  }
}

TEST_CASE("knn invariant under rigid transform") {
  Rng rng(9);
  auto pts = rand_cloud(rng, 300);
  const RigidTransform t(random_rotation(rng), rand_vec(rng, 3.0));
  auto moved = t.apply(pts);
  KnnIndex a(pts), b(moved);
  for (int trial = 0; trial < 50; ++trial) {
    const Vec3 q = rand_vec(rng);
    auto ha = a.query(q, 8);
    auto hb = b.query(t.apply(q), 8);
    for (size_t i = 0; i < ha.size(); ++i) {
      CHECK(ha[i].index == hb[i].index);
      CHECK(std::abs(ha[i].dist - hb[i].dist) < 1e-9);
    }
  }
}

TEST_CASE("chamfer") {
  Rng rng(10);
  SUBCASE("identical sets give zero") {
    auto a = rand_cloud(rng, 100);
    CHECK(chamfer(a, a) == doctest::Approx(0.0));
  }
  SUBCASE("two single points") {
    std::vector<Vec3> a = {Vec3(0, 0, 0)}, b = {Vec3(0, 0, 1)};
    CHECK(chamfer(a, b) == doctest::Approx(1.0));
    CHECK(chamfer(a, b, true) == doctest::Approx(1.0));
    b[0] = Vec3(0, 0, 2);
    CHECK(chamfer(a, b) == doctest::Approx(2.0));
    CHECK(chamfer(a, b, true) == doctest::Approx(4.0));
  }
  SUBCASE("matches brute-force double loop") {
    auto a = rand_cloud(rng, 60);
    auto b = rand_cloud(rng, 45);
    double sa = 0.0;
    for (const Vec3& p : a) {
      double best = 1e300;
      for (const Vec3& q : b) best = std::min(best, (p - q).norm());
      sa += best;
    }
    double sb = 0.0;
    for (const Vec3& q : b) {
      double best = 1e300;
      for (const Vec3& p : a) best = std::min(best, (p - q).norm());
      sb += best;
    }
    const double expect = 0.5 * (sa / 60.0 + sb / 45.0);
    CHECK(chamfer(a, b) == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("symmetry") {
    auto a = rand_cloud(rng, 40);
    auto b = rand_cloud(rng, 70);
    CHECK(chamfer(a, b) == doctest::Approx(chamfer(b, a)));
  }
  SUBCASE("empty input rejected") {
    std::vector<Vec3> a = {Vec3(0, 0, 0)}, empty;
    CHECK_THROWS_AS(chamfer(a, empty), GeomError);
  }
}

TEST_CASE("uniform rotation statistics") {
  Rng rng(11);
  double sum = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) sum += rotation_angle_deg(random_rotation(rng));
  const double mean = sum / n;
  // Uniform SO(3) mean geodesic angle is 90 + 360/pi^2 deg ~ 126.5
  CHECK(std::abs(mean - 126.9) < 2.0);
}

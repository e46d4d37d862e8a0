#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "lcpr/projection.hpp"
#include "lcpr/rng.hpp"

using namespace lcpr;
using namespace lcpr::proj;

namespace {

PointCloud random_cloud(int n, const ProjectionParams& p, uint64_t seed) {
  Rng rng(seed);
  PointCloud cloud;
  for (int i = 0; i < n; ++i) {
    double azim = rng.uniform(-M_PI, M_PI);
    double elev =
        rng.uniform(-p.fov_up_deg + 0.5, p.fov_deg() - p.fov_up_deg - 0.5) * M_PI / 180.0;
    double r = rng.uniform(2.0, 80.0);
    Point pt;
    pt.x = static_cast<float>(r * std::cos(elev) * std::cos(azim));
    pt.y = static_cast<float>(r * std::cos(elev) * std::sin(azim));
    pt.z = static_cast<float>(r * std::sin(elev));
    cloud.points.push_back(pt);
  }
  return cloud;
}

}  // namespace

TEST_CASE("projection: the worked pixel coordinates of the two axis points") {
  ProjectionParams p{32, 1056, 10.0, 30.0};
  double u, v;
  REQUIRE(project_point(Point{10, 0, 0, 0}, p, &u, &v));
  CHECK(u == doctest::Approx(528.0));
  CHECK(v == doctest::Approx(24.0));
  REQUIRE(project_point(Point{0, 10, 0, 0}, p, &u, &v));
  CHECK(u == doctest::Approx(264.0));
  CHECK(v == doctest::Approx(24.0));
}

TEST_CASE("projection: u decreases with azimuth, v decreases with elevation") {
  ProjectionParams p{32, 1056, 10.0, 30.0};
  double u1, v1, u2, v2;
  REQUIRE(project_point(Point{10, 1, 0, 0}, p, &u1, &v1));   // small positive azimuth
  REQUIRE(project_point(Point{10, -1, 0, 0}, p, &u2, &v2));  // small negative azimuth
  CHECK(u1 < u2);
  REQUIRE(project_point(Point{10, 0, 1, 0}, p, &u1, &v1));
  REQUIRE(project_point(Point{10, 0, -1, 0}, p, &u2, &v2));
  CHECK(v1 < v2);
}

TEST_CASE("projection: empty cloud gives an all-zero image; FOV outliers dropped") {
  ProjectionParams p{16, 64, 10.0, 30.0};
  RangeImage ri = spherical_project(PointCloud{}, p);
  for (float v : ri.grid.data) CHECK(v == 0.0f);
  PointCloud above;
  above.points.push_back(Point{10, 0, 10, 0});  // elevation 45 deg > 10 deg
  ri = spherical_project(above, p);
  for (float v : ri.grid.data) CHECK(v == 0.0f);
}

TEST_CASE("projection: collisions keep the smaller range") {
  ProjectionParams p{16, 64, 10.0, 30.0};
  PointCloud cloud;
  cloud.points.push_back(Point{20, 0, 0, 0});
  cloud.points.push_back(Point{10, 0, 0, 0});  // same direction, nearer
  RangeImage ri = spherical_project(cloud, p);
  double u, v;
  project_point(cloud.points[0], p, &u, &v);
  CHECK(ri.grid.at(static_cast<int>(v), static_cast<int>(u)) == doctest::Approx(10.0));
}

TEST_CASE("projection: occupied cell centers re-project into the same cell") {
  ProjectionParams p{32, 256, 10.0, 30.0};
  PointCloud cloud = random_cloud(1000, p, 200);
  RangeImage ri = spherical_project(cloud, p);
  int checked = 0;
  for (int v = 0; v < p.h; ++v)
    for (int u = 0; u < p.w; ++u) {
      float r = ri.grid.at(v, u);
      if (r == 0.0f) continue;
      // Back-project the cell center to (azimuth, elevation) at range r.
      double azim = M_PI * (1.0 - (2.0 * u + 1.0) / p.w);
      double elev_deg = p.fov_deg() * (1.0 - (v + 0.5) / p.h) - p.fov_up_deg;
      double elev = elev_deg * M_PI / 180.0;
      Point pt;
      pt.x = static_cast<float>(r * std::cos(elev) * std::cos(azim));
      pt.y = static_cast<float>(r * std::cos(elev) * std::sin(azim));
      pt.z = static_cast<float>(r * std::sin(elev));
      double uu, vv;
      REQUIRE(project_point(pt, p, &uu, &vv));
      CHECK(static_cast<int>(std::floor(uu)) == u);
      CHECK(static_cast<int>(std::floor(vv)) == v);
      ++checked;
    }
  CHECK(checked > 500);
}

TEST_CASE("yaw_rotate_cloud: full turn is the identity, half turn flips, norms preserved") {
  ProjectionParams p{16, 64, 10.0, 30.0};
  PointCloud cloud = random_cloud(200, p, 201);
  PointCloud full = yaw_rotate_cloud(cloud, 360.0);
  for (size_t i = 0; i < cloud.points.size(); ++i) {
    CHECK(std::abs(full.points[i].x - cloud.points[i].x) <= 1e-4f);
    CHECK(std::abs(full.points[i].y - cloud.points[i].y) <= 1e-4f);
  }
  PointCloud half = yaw_rotate_cloud(PointCloud{{Point{1, 0, 0, 0}}}, 180.0);
  CHECK(half.points[0].x == doctest::Approx(-1.0));
  CHECK(half.points[0].y == doctest::Approx(0.0).epsilon(1e-6));
  PointCloud rot = yaw_rotate_cloud(cloud, 77.3);
  for (size_t i = 0; i < cloud.points.size(); ++i) {
    double n0 = std::hypot(cloud.points[i].x, cloud.points[i].y);
    double n1 = std::hypot(rot.points[i].x, rot.points[i].y);
    CHECK(n0 == doctest::Approx(n1).epsilon(1e-5));
  }
}

TEST_CASE("circular_shift_columns: identity at width, composition, inverse") {
  nd::Tensor<float> img({3, 4, 8});
  Rng rng(202);
  for (auto& v : img.data) v = static_cast<float>(rng.gaussian());
  CHECK(nd::max_abs_diff(circular_shift_columns(img, 8), img) == 0.0);
  CHECK(nd::max_abs_diff(circular_shift_columns(circular_shift_columns(img, 1), -1), img) == 0.0);
  auto a = circular_shift_columns(circular_shift_columns(img, 3), 6);
  auto b = circular_shift_columns(img, 9 % 8);
  CHECK(nd::max_abs_diff(a, b) == 0.0);
}

TEST_CASE("yaw_to_column_shift: worked values") {
  CHECK(yaw_to_column_shift(180.0, 1056) == 528);
  CHECK(yaw_to_column_shift(360.0, 1056) == 0);
  CHECK(yaw_to_column_shift(360.0, 77) == 0);
  CHECK(yaw_to_column_shift(55.0, 1056) == 161);  // 1056*55/360 = 161.33
}

TEST_CASE("projection: rotating the cloud matches shifting the range image") {
  ProjectionParams p{32, 256, 10.0, 30.0};
  PointCloud cloud = random_cloud(1000, p, 203);
  RangeImage base = spherical_project(cloud, p);
  // Grid-aligned angles: k * 360/w.
  for (int k : {16, 100, 255}) {
    double angle = 360.0 * k / p.w;
    RangeImage rotated = spherical_project(yaw_rotate_cloud(cloud, angle), p);
    nd::Tensor<float> shifted = circular_shift_columns(base.grid, yaw_to_column_shift(angle, p.w));
    int occupied = 0, mismatched = 0;
    for (size_t i = 0; i < shifted.data.size(); ++i) {
      if (shifted.data[i] != 0.0f || rotated.grid.data[i] != 0.0f) {
        ++occupied;
        if (std::abs(shifted.data[i] - rotated.grid.data[i]) > 1e-3f) ++mismatched;
      }
    }
    REQUIRE(occupied > 0);
    CHECK(static_cast<double>(mismatched) / occupied <= 0.02);
  }
}

TEST_CASE("panorama_concat: single view, paper widths, rotation equivalence") {
  Rng rng(204);
  std::vector<Image> views;
  for (int i = 0; i < 6; ++i) {
    Image v({3, 8, 16});
    for (auto& x : v.data) x = static_cast<float>(rng.uniform());
    views.push_back(v);
  }
  Image one = panorama_concat({views[0]});
  CHECK(nd::max_abs_diff(one, views[0]) == 0.0);

  Image pano = panorama_concat(views);
  CHECK(pano.shape == nd::Shape{3, 8, 96});

  // Concatenating a rotated view order equals a circular shift by the view width.
  std::vector<Image> rotated(views.begin() + 1, views.end());
  rotated.push_back(views[0]);
  Image pano_rot = panorama_concat(rotated);
  CHECK(nd::max_abs_diff(pano_rot, circular_shift_columns(pano, 16)) == 0.0);

  std::vector<Image> mixed = views;
  mixed[2] = Image({3, 8, 17});
  CHECK_THROWS_AS(panorama_concat(mixed), DataError);

  // Paper-scale width bookkeeping: 6 x 704 = 4224.
  CHECK(6 * 704 == 4224);
}

TEST_CASE("file formats: cloud, range image, ppm round-trip") {
  namespace fs = std::filesystem;
  fs::create_directories("/tmp/lcpr_io_test");
  ProjectionParams p{16, 64, 10.0, 30.0};
  PointCloud cloud = random_cloud(100, p, 205);
  save_cloud(cloud, "/tmp/lcpr_io_test/c.bin");
  PointCloud back = load_cloud("/tmp/lcpr_io_test/c.bin");
  REQUIRE(back.points.size() == cloud.points.size());
  for (size_t i = 0; i < cloud.points.size(); ++i) {
    CHECK(back.points[i].x == cloud.points[i].x);
    CHECK(back.points[i].z == cloud.points[i].z);
  }

  RangeImage ri = spherical_project(cloud, p);
  save_range_image(ri, "/tmp/lcpr_io_test/r.bin");
  RangeImage ri2 = load_range_image("/tmp/lcpr_io_test/r.bin", p);
  CHECK(nd::max_abs_diff(ri.grid, ri2.grid) == 0.0);

  Image img({3, 5, 7});
  Rng rng(206);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  save_ppm(img, "/tmp/lcpr_io_test/i.ppm");
  Image img2 = load_ppm("/tmp/lcpr_io_test/i.ppm");
  CHECK(nd::max_abs_diff(img, img2) <= 0.5 / 255.0 + 1e-6);

  CHECK_THROWS_AS(load_cloud("/tmp/lcpr_io_test/missing.bin"), DataError);
  CHECK_THROWS_AS(load_range_image("/tmp/lcpr_io_test/c.bin", p), DataError);
}

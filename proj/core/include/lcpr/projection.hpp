#pragma once

#include <string>
#include <vector>

#include "lcpr/tensor.hpp"

namespace lcpr::proj {

using Image = nd::Tensor<float>;  // [C,H,W], values in [0,1]

struct Point {
  float x = 0, y = 0, z = 0, intensity = 0;
};

struct PointCloud {
  std::vector<Point> points;
};

struct ProjectionParams {
  int h = 32, w = 1056;
  double fov_up_deg = 10.0, fov_down_deg = 30.0;

  double fov_deg() const { return fov_up_deg + fov_down_deg; }
  void validate() const;
};

// Spherical projection grid; 0 marks cells without a return.
struct RangeImage {
  ProjectionParams params;
  nd::Tensor<float> grid;  // [h,w], meters

  RangeImage() = default;
  explicit RangeImage(ProjectionParams p) : params(p), grid({p.h, p.w}) {}
};

// Each point maps to (u,v) floored and clamped; collisions keep the smaller
// range; points outside the vertical FOV are dropped.
RangeImage spherical_project(const PointCloud& cloud, const ProjectionParams& params);

// Continuous pixel coordinates of one point (before flooring). Returns false
// when the point is outside the vertical FOV or has zero range.
bool project_point(const Point& p, const ProjectionParams& params, double* u, double* v);

PointCloud yaw_rotate_cloud(const PointCloud& cloud, double angle_deg);

// out[..., c] = in[..., (c + k) mod w] on the last axis.
template <typename T>
nd::Tensor<T> circular_shift_columns(const nd::Tensor<T>& image, int k) {
  return nd::shift_columns(image, k);
}

// round(width * angle / 360) mod width.
int yaw_to_column_shift(double angle_deg, int width);

// Width-wise concatenation in rig yaw order; all views must agree in C,H,W.
Image panorama_concat(const std::vector<Image>& views);

// --------------------------------------------------------------------------
// Sensor file formats
// --------------------------------------------------------------------------

// Raw little-endian f32 quadruples (x,y,z,intensity).
void save_cloud(const PointCloud& cloud, const std::string& path);
PointCloud load_cloud(const std::string& path);

// Magic "LCPRRI01", u32 h, u32 w, h*w f32 row-major.
void save_range_image(const RangeImage& ri, const std::string& path);
RangeImage load_range_image(const std::string& path, const ProjectionParams& params);

// Binary PPM (P6), 8-bit, one file per camera view.
void save_ppm(const Image& img, const std::string& path);
Image load_ppm(const std::string& path);

}  // namespace lcpr::proj

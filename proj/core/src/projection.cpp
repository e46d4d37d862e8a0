#include "lcpr/projection.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "lcpr/errors.hpp"

namespace lcpr::proj {

namespace {
constexpr double kDegToRad = M_PI / 180.0;
}

void ProjectionParams::validate() const {
  if (h < 1 || w < 1) throw DataError("projection: grid must be at least 1x1");
  if (fov_deg() <= 0.0) throw DataError("projection: fov_up + fov_down must be positive");
}

bool project_point(const Point& p, const ProjectionParams& params, double* u, double* v) {
  double r = std::sqrt(static_cast<double>(p.x) * p.x + static_cast<double>(p.y) * p.y +
                       static_cast<double>(p.z) * p.z);
  if (!(r > 0.0)) return false;
  double azimuth = std::atan2(static_cast<double>(p.y), static_cast<double>(p.x));
  double elev_deg = std::asin(static_cast<double>(p.z) / r) / kDegToRad;
  // The vertical band the projection maps onto [0,h): row 0 at
  // fov - fov_up, row h at -fov_up. Elevations outside it are dropped.
  if (elev_deg > params.fov_deg() - params.fov_up_deg || elev_deg < -params.fov_up_deg)
    return false;
  *u = 0.5 * (1.0 - azimuth / M_PI) * params.w;
  *v = (1.0 - (elev_deg + params.fov_up_deg) / params.fov_deg()) * params.h;
  return true;
}

RangeImage spherical_project(const PointCloud& cloud, const ProjectionParams& params) {
  params.validate();
  RangeImage ri(params);
  for (const Point& p : cloud.points) {
    double u, v;
    if (!project_point(p, params, &u, &v)) continue;
    int ui = static_cast<int>(std::floor(u));
    int vi = static_cast<int>(std::floor(v));
    ui = std::clamp(ui, 0, params.w - 1);
    vi = std::clamp(vi, 0, params.h - 1);
    float r = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
    float& cell = ri.grid.at(vi, ui);
    if (cell == 0.0f || r < cell) cell = r;
  }
  return ri;
}

PointCloud yaw_rotate_cloud(const PointCloud& cloud, double angle_deg) {
  double a = angle_deg * kDegToRad;
  double c = std::cos(a), s = std::sin(a);
  PointCloud out;
  out.points.reserve(cloud.points.size());
  for (const Point& p : cloud.points) {
    Point q;
    q.x = static_cast<float>(c * p.x - s * p.y);
    q.y = static_cast<float>(s * p.x + c * p.y);
    q.z = p.z;
    q.intensity = p.intensity;
    out.points.push_back(q);
  }
  return out;
}

int yaw_to_column_shift(double angle_deg, int width) {
  if (width < 1) throw DataError("yaw_to_column_shift: width must be >= 1");
  long long k = std::llround(static_cast<double>(width) * angle_deg / 360.0);
  long long m = k % width;
  if (m < 0) m += width;
  return static_cast<int>(m);
}

Image panorama_concat(const std::vector<Image>& views) {
  if (views.empty()) throw DataError("panorama_concat: no views");
  const nd::Shape& s0 = views[0].shape;
  if (s0.size() != 3) throw DataError("panorama_concat: views must be [C,H,W]");
  for (const Image& v : views)
    if (v.shape != s0)
      throw DataError("panorama_concat: mixed view shapes " + nd::shape_str(s0) + " vs " +
                      nd::shape_str(v.shape));
  int C = s0[0], H = s0[1], W = s0[2];
  int N = static_cast<int>(views.size());
  Image out({C, H, N * W});
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < H; ++h)
      for (int n = 0; n < N; ++n)
        std::memcpy(out.ptr() + (static_cast<int64_t>(c) * H + h) * N * W + n * W,
                    views[static_cast<size_t>(n)].ptr() + (static_cast<int64_t>(c) * H + h) * W,
                    sizeof(float) * static_cast<size_t>(W));
  return out;
}

// --------------------------------------------------------------------------
// File formats
// --------------------------------------------------------------------------

void save_cloud(const PointCloud& cloud, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cloud: cannot open " + path + " for writing");
  for (const Point& p : cloud.points) {
    float v[4] = {p.x, p.y, p.z, p.intensity};
    os.write(reinterpret_cast<const char*>(v), sizeof(v));
  }
  if (!os) throw DataError("cloud: write failed for " + path);
}

PointCloud load_cloud(const std::string& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw DataError("cloud: cannot open " + path);
  auto bytes = static_cast<int64_t>(is.tellg());
  if (bytes % (4 * sizeof(float)) != 0)
    throw DataError("cloud: " + path + " is not a whole number of xyzi records");
  is.seekg(0);
  PointCloud out;
  out.points.resize(static_cast<size_t>(bytes / (4 * sizeof(float))));
  for (Point& p : out.points) {
    float v[4];
    is.read(reinterpret_cast<char*>(v), sizeof(v));
    p = Point{v[0], v[1], v[2], v[3]};
  }
  if (!is) throw DataError("cloud: read failed for " + path);
  return out;
}

void save_range_image(const RangeImage& ri, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("range image: cannot open " + path + " for writing");
  os.write("LCPRRI01", 8);
  uint32_t h = static_cast<uint32_t>(ri.params.h), w = static_cast<uint32_t>(ri.params.w);
  os.write(reinterpret_cast<const char*>(&h), 4);
  os.write(reinterpret_cast<const char*>(&w), 4);
  os.write(reinterpret_cast<const char*>(ri.grid.ptr()),
           static_cast<std::streamsize>(ri.grid.size() * sizeof(float)));
  if (!os) throw DataError("range image: write failed for " + path);
}

RangeImage load_range_image(const std::string& path, const ProjectionParams& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("range image: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "LCPRRI01", 8) != 0)
    throw DataError("range image: bad magic in " + path);
  uint32_t h, w;
  is.read(reinterpret_cast<char*>(&h), 4);
  is.read(reinterpret_cast<char*>(&w), 4);
  RangeImage ri;
  ri.params = params;
  ri.params.h = static_cast<int>(h);
  ri.params.w = static_cast<int>(w);
  ri.grid = nd::Tensor<float>({static_cast<int>(h), static_cast<int>(w)});
  is.read(reinterpret_cast<char*>(ri.grid.ptr()),
          static_cast<std::streamsize>(ri.grid.size() * sizeof(float)));
  if (!is) throw DataError("range image: truncated " + path);
  return ri;
}

void save_ppm(const Image& img, const std::string& path) {
  if (img.rank() != 3 || img.shape[0] != 3)
    throw DataError("ppm: want [3,H,W], got " + nd::shape_str(img.shape));
  int H = img.shape[1], W = img.shape[2];
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("ppm: cannot open " + path + " for writing");
  os << "P6\n" << W << " " << H << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(W) * 3);
  for (int h = 0; h < H; ++h) {
    for (int w = 0; w < W; ++w)
      for (int c = 0; c < 3; ++c) {
        float v = img.at(c, h, w);
        v = std::clamp(v, 0.0f, 1.0f);
        row[static_cast<size_t>(w) * 3 + static_cast<size_t>(c)] =
            static_cast<uint8_t>(std::lround(v * 255.0f));
      }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw DataError("ppm: write failed for " + path);
}

Image load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("ppm: cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw DataError("ppm: " + path + " is not binary P6");
  int W, H, maxval;
  is >> W >> H >> maxval;
  if (!is || W < 1 || H < 1 || maxval != 255) throw DataError("ppm: bad header in " + path);
  is.get();  // single whitespace after header
  Image img({3, H, W});
  std::vector<uint8_t> row(static_cast<size_t>(W) * 3);
  for (int h = 0; h < H; ++h) {
    is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!is) throw DataError("ppm: truncated " + path);
    for (int w = 0; w < W; ++w)
      for (int c = 0; c < 3; ++c)
        img.at(c, h, w) = static_cast<float>(row[static_cast<size_t>(w) * 3 + static_cast<size_t>(c)]) / 255.0f;
  }
  return img;
}

}  // namespace lcpr::proj

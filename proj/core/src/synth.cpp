#include "lcpr/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "lcpr/kv.hpp"

namespace lcpr::synth {

namespace fs = std::filesystem;

namespace {

constexpr double kDegToRad = M_PI / 180.0;

void hsv_to_rgb(double h, double s, double v, float* r, float* g, float* b) {
  double i = std::floor(h * 6.0);
  double f = h * 6.0 - i;
  double p = v * (1.0 - s), q = v * (1.0 - f * s), t = v * (1.0 - (1.0 - f) * s);
  double rr, gg, bb;
  switch (static_cast<int>(i) % 6) {
    case 0: rr = v; gg = t; bb = p; break;
    case 1: rr = q; gg = v; bb = p; break;
    case 2: rr = p; gg = v; bb = t; break;
    case 3: rr = p; gg = q; bb = v; break;
    case 4: rr = t; gg = p; bb = v; break;
    default: rr = v; gg = p; bb = q; break;
  }
  *r = static_cast<float>(rr);
  *g = static_cast<float>(gg);
  *b = static_cast<float>(bb);
}

struct LocalLandmark {
  double cx, cy;   // sensor frame
  double radius;
  double z0, z1;   // sensor frame vertical extent
  float r, g, b;
  double dist, azimuth, half_angle;
};

// Nearest forward intersection of a unit ray from the origin with a vertical
// cylinder (no caps). Returns range or a negative value.
double ray_cylinder(const LocalLandmark& lm, double dx, double dy, double dz) {
  double a = dx * dx + dy * dy;
  if (a < 1e-12) return -1.0;
  double b = -2.0 * (lm.cx * dx + lm.cy * dy);
  double c = lm.cx * lm.cx + lm.cy * lm.cy - lm.radius * lm.radius;
  double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return -1.0;
  double root = std::sqrt(disc);
  for (double t : {(-b - root) / (2.0 * a), (-b + root) / (2.0 * a)}) {
    if (t < 0.5) continue;  // blind zone / behind
    double z = t * dz;
    if (z >= lm.z0 && z <= lm.z1) return t;
  }
  return -1.0;
}

double wrap_pi(double a) {
  while (a > M_PI) a -= 2.0 * M_PI;
  while (a < -M_PI) a += 2.0 * M_PI;
  return a;
}

}  // namespace

World world_generate(uint64_t seed, double extent_x, double extent_y, int landmark_count) {
  if (extent_x <= 0.0 || extent_y <= 0.0) throw DataError("world: extent must be positive");
  if (landmark_count < 1) throw DataError("world: need at least one landmark");
  World w;
  w.seed = seed;
  w.extent_x = extent_x;
  w.extent_y = extent_y;
  Rng rng(seed);
  w.landmarks.reserve(static_cast<size_t>(landmark_count));
  for (int i = 0; i < landmark_count; ++i) {
    Landmark lm;
    lm.x = static_cast<float>(rng.uniform(0.0, extent_x));
    lm.y = static_cast<float>(rng.uniform(0.0, extent_y));
    lm.radius = static_cast<float>(rng.uniform(0.4, 1.5));
    lm.height = static_cast<float>(rng.uniform(3.0, 10.0));
    hsv_to_rgb(rng.uniform(), rng.uniform(0.6, 0.95), rng.uniform(0.7, 1.0), &lm.r, &lm.g, &lm.b);
    w.landmarks.push_back(lm);
  }
  return w;
}

void SensorRig::validate() const {
  if (cameras.empty()) throw DataError("rig: no cameras");
  lidar.validate();
  // Camera FOVs must tile the full circle: the gap to the next camera in
  // panorama order must not exceed the horizontal FOV.
  for (size_t i = 0; i < cameras.size(); ++i) {
    double a = cameras[i].yaw_deg;
    double b = cameras[(i + 1) % cameras.size()].yaw_deg;
    double gap = std::abs(wrap_pi((a - b) * kDegToRad)) / kDegToRad;
    if (gap > cameras[i].hfov_deg + 1e-9)
      throw DataError("rig: camera gap " + std::to_string(gap) + " deg exceeds fov");
  }
}

SensorRig default_rig() {
  SensorRig rig;
  // Panorama order: descending azimuth from the rear.
  for (double yaw : {180.0, 110.0, 55.0, 0.0, -55.0, -110.0})
    rig.cameras.push_back(CameraSpec{yaw, 70.0, 704, 256});
  rig.lidar = proj::ProjectionParams{32, 1056, 10.0, 30.0};
  return rig;
}

SensorRig desk_rig() {
  SensorRig rig = default_rig();
  for (auto& cam : rig.cameras) {
    cam.width = 128;
    cam.height = 64;
  }
  rig.lidar = proj::ProjectionParams{16, 256, 10.0, 30.0};
  return rig;
}

data::DataSample render_sample(const World& world, const data::Pose& pose, const SensorRig& rig,
                               uint64_t id, double timestamp) {
  rig.validate();
  data::DataSample out;
  out.id = id;
  out.pose = pose;
  out.timestamp = timestamp;

  // Landmarks in the sensor frame, culled by range.
  double cy = std::cos(-pose.yaw_deg * kDegToRad), sy = std::sin(-pose.yaw_deg * kDegToRad);
  std::vector<LocalLandmark> local;
  local.reserve(world.landmarks.size());
  for (const Landmark& lm : world.landmarks) {
    double wx = lm.x - pose.x, wy = lm.y - pose.y;
    LocalLandmark ll;
    ll.cx = cy * wx - sy * wy;
    ll.cy = sy * wx + cy * wy;
    ll.dist = std::hypot(ll.cx, ll.cy);
    if (ll.dist > rig.lidar_max_range + lm.radius || ll.dist < 1e-6) continue;
    ll.radius = lm.radius;
    ll.z0 = -rig.sensor_height;
    ll.z1 = lm.height - rig.sensor_height;
    ll.r = lm.r;
    ll.g = lm.g;
    ll.b = lm.b;
    ll.azimuth = std::atan2(ll.cy, ll.cx);
    ll.half_angle = ll.dist > ll.radius ? std::asin(ll.radius / ll.dist) : M_PI;
    local.push_back(ll);
  }

  auto fade = [](double t) { return 0.35 + 0.65 * std::exp(-t / 60.0); };

  // LiDAR: rays through cell centers so re-projection is bin-stable.
  const proj::ProjectionParams& lp = rig.lidar;
  for (int v = 0; v < lp.h; ++v) {
    double elev_deg = lp.fov_deg() * (1.0 - (v + 0.5) / lp.h) - lp.fov_up_deg;
    double ce = std::cos(elev_deg * kDegToRad), se = std::sin(elev_deg * kDegToRad);
    for (int u = 0; u < lp.w; ++u) {
      double azim = M_PI * (1.0 - (2.0 * u + 1.0) / lp.w);
      double dx = ce * std::cos(azim), dy = ce * std::sin(azim), dz = se;
      double best = -1.0;
      for (const LocalLandmark& lm : local) {
        if (std::abs(wrap_pi(azim - lm.azimuth)) > lm.half_angle) continue;
        double t = ray_cylinder(lm, dx, dy, dz);
        if (t > 0.0 && (best < 0.0 || t < best)) best = t;
      }
      if (best < 0.0 && dz < -1e-9) {
        double t = -rig.sensor_height / dz;  // ground plane
        if (t <= rig.lidar_max_range) best = t;
      }
      if (best < 0.0 || best > rig.lidar_max_range) continue;
      proj::Point p;
      p.x = static_cast<float>(best * dx);
      p.y = static_cast<float>(best * dy);
      p.z = static_cast<float>(best * dz);
      out.cloud.points.push_back(p);
    }
  }
  out.range = proj::spherical_project(out.cloud, lp).grid;
  out.range = nd::Tensor<float>({1, lp.h, lp.w}, out.range.data);

  // Cameras: pinhole ray cast against the same scene.
  for (const CameraSpec& cam : rig.cameras) {
    proj::Image img({3, cam.height, cam.width});
    double yaw = (pose.yaw_deg + cam.yaw_deg) * kDegToRad;
    double fx = (cam.width / 2.0) / std::tan(cam.hfov_deg * 0.5 * kDegToRad);
    double cx = cam.width / 2.0, cyy = cam.height / 2.0;
    double fwdx = std::cos(cam.yaw_deg * kDegToRad), fwdy = std::sin(cam.yaw_deg * kDegToRad);
    double rightx = std::sin(cam.yaw_deg * kDegToRad), righty = -std::cos(cam.yaw_deg * kDegToRad);
    (void)yaw;
    for (int py = 0; py < cam.height; ++py) {
      double ycam = (py + 0.5 - cyy) / fx;
      for (int px = 0; px < cam.width; ++px) {
        double xcam = (px + 0.5 - cx) / fx;
        double dx = fwdx + xcam * rightx;
        double dy = fwdy + xcam * righty;
        double dz = -ycam;
        double n = std::sqrt(dx * dx + dy * dy + dz * dz);
        dx /= n;
        dy /= n;
        dz /= n;
        double azim = std::atan2(dy, dx);
        double best = -1.0;
        const LocalLandmark* hit = nullptr;
        for (const LocalLandmark& lm : local) {
          if (std::abs(wrap_pi(azim - lm.azimuth)) > lm.half_angle) continue;
          double t = ray_cylinder(lm, dx, dy, dz);
          if (t > 0.0 && (best < 0.0 || t < best)) {
            best = t;
            hit = &lm;
          }
        }
        float r, g, b;
        if (hit) {
          double f = fade(best);
          r = static_cast<float>(hit->r * f);
          g = static_cast<float>(hit->g * f);
          b = static_cast<float>(hit->b * f);
        } else if (dz < -1e-9) {
          double t = -rig.sensor_height / dz;
          double f = fade(std::min(t, 300.0));
          r = static_cast<float>(0.20 * f + 0.05);
          g = static_cast<float>(0.20 * f + 0.05);
          b = static_cast<float>(0.23 * f + 0.05);
        } else {
          r = 0.58f;
          g = 0.72f;
          b = 0.90f;
        }
        img.at(0, py, px) = std::clamp(r, 0.0f, 1.0f);
        img.at(1, py, px) = std::clamp(g, 0.0f, 1.0f);
        img.at(2, py, px) = std::clamp(b, 0.0f, 1.0f);
      }
    }
    out.views.push_back(std::move(img));
  }
  return out;
}

std::vector<data::Pose> traversal_poses(const TraversalConfig& cfg, int traversal, Rng& rng) {
  if (cfg.places < 1 || cfg.spacing <= 0.0) throw DataError("route: bad traversal config");
  int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.places))));
  std::vector<data::Pose> poses;
  poses.reserve(static_cast<size_t>(cfg.places));
  for (int p = 0; p < cfg.places; ++p) {
    int row = p / cols;
    int col = p % cols;
    bool reversed = row % 2 == 1;
    int c = reversed ? cols - 1 - col : col;
    data::Pose pose;
    pose.x = cfg.margin + c * cfg.spacing;
    pose.y = cfg.margin + row * cfg.spacing;
    pose.yaw_deg = reversed ? 180.0 : 0.0;
    if (col == cols - 1) pose.yaw_deg = 90.0;  // turning up at row ends
    if (traversal > 0) {
      pose.x += rng.uniform(-cfg.lateral_jitter, cfg.lateral_jitter);
      pose.y += rng.uniform(-cfg.lateral_jitter, cfg.lateral_jitter);
      pose.yaw_deg += rng.uniform(-cfg.yaw_jitter_deg, cfg.yaw_jitter_deg);
    }
    poses.push_back(pose);
  }
  return poses;
}

void route_extent(const TraversalConfig& cfg, double* ex, double* ey) {
  int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.places))));
  int rows = (cfg.places + cols - 1) / cols;
  *ex = 2.0 * cfg.margin + (cols - 1) * cfg.spacing;
  *ey = 2.0 * cfg.margin + (rows - 1) * cfg.spacing;
}

data::DatasetSplit split_dataset(const std::vector<data::DataSample>& samples,
                                 const SplitRatios& ratios, double positive_radius, Rng& rng) {
  if (samples.empty()) throw DataError("split: no samples");
  // Group by place.
  std::map<int, std::vector<const data::DataSample*>> places;
  for (const auto& s : samples) {
    if (s.place < 0) throw DataError("split: sample " + std::to_string(s.id) + " has no place id");
    places[s.place].push_back(&s);
  }
  data::DatasetSplit split;
  std::vector<const data::DataSample*> queries;
  for (auto& [place, group] : places) {
    size_t pick = static_cast<size_t>(rng.below(group.size()));
    for (size_t i = 0; i < group.size(); ++i) {
      if (i == pick)
        split.database.push_back(group[i]->id);
      else
        queries.push_back(group[i]);
    }
  }
  // Drop queries with no database ground truth inside the positive radius.
  std::vector<const data::DataSample*> kept;
  for (const data::DataSample* q : queries) {
    bool has_gt = false;
    for (uint64_t db_id : split.database) {
      for (const auto& s : samples)
        if (s.id == db_id && data::distance_2d(s.pose, q->pose) <= positive_radius) {
          has_gt = true;
          break;
        }
      if (has_gt) break;
    }
    if (has_gt) kept.push_back(q);
  }
  rng.shuffle(kept);
  double total = ratios.train + ratios.val + ratios.test;
  if (total <= 0.0) throw DataError("split: ratios must be positive");
  size_t n = kept.size();
  size_t n_train = static_cast<size_t>(std::llround(ratios.train / total * n));
  size_t n_val = static_cast<size_t>(std::llround(ratios.val / total * n));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);
  for (size_t i = 0; i < n; ++i) {
    uint64_t id = kept[i]->id;
    if (i < n_train)
      split.train.push_back(id);
    else if (i < n_train + n_val)
      split.val.push_back(id);
    else
      split.test.push_back(id);
  }
  if (split.test.empty()) throw DataError("split: test query set is empty after removals");
  std::sort(split.database.begin(), split.database.end());
  return split;
}

data::Dataset generate_dataset(const GenerateConfig& cfg) {
  double ex, ey;
  route_extent(cfg.route, &ex, &ey);
  World world = world_generate(cfg.seed, ex, ey, cfg.landmarks);
  SensorRig rig = cfg.desk_scale ? desk_rig() : default_rig();

  data::Dataset ds;
  ds.lidar = rig.lidar;
  Rng pose_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  for (int t = 0; t < cfg.route.traversals; ++t) {
    auto poses = traversal_poses(cfg.route, t, pose_rng);
    for (int p = 0; p < cfg.route.places; ++p) {
      uint64_t id = static_cast<uint64_t>(t) * cfg.route.places + p;
      data::DataSample s = render_sample(world, poses[static_cast<size_t>(p)], rig, id,
                                         t * 10000.0 + p * 10.0);
      s.place = p;
      ds.samples.push_back(std::move(s));
    }
  }
  Rng split_rng(cfg.seed ^ 0x2545f4914f6cdd1dull);
  ds.split = split_dataset(ds.samples, cfg.ratios, /*positive_radius=*/9.0, split_rng);
  return ds;
}

void save_dataset(const data::Dataset& ds, const GenerateConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  kv::Map m;
  m["seed"] = std::to_string(cfg.seed);
  m["landmarks"] = std::to_string(cfg.landmarks);
  m["places"] = std::to_string(cfg.route.places);
  m["traversals"] = std::to_string(cfg.route.traversals);
  m["spacing"] = kv::format_double(cfg.route.spacing);
  m["lateral_jitter"] = kv::format_double(cfg.route.lateral_jitter);
  m["yaw_jitter_deg"] = kv::format_double(cfg.route.yaw_jitter_deg);
  m["margin"] = kv::format_double(cfg.route.margin);
  m["desk_scale"] = cfg.desk_scale ? "1" : "0";
  m["lidar_h"] = std::to_string(ds.lidar.h);
  m["lidar_w"] = std::to_string(ds.lidar.w);
  m["lidar_fov_up"] = kv::format_double(ds.lidar.fov_up_deg);
  m["lidar_fov_down"] = kv::format_double(ds.lidar.fov_down_deg);
  kv::save(m, dir + "/world.cfg");

  for (const auto& s : ds.samples) data::save_sample(s, dir + "/samples/" + std::to_string(s.id));
  data::save_splits(ds.split, dir + "/splits.txt");
}

}  // namespace lcpr::synth

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lcpr/dataset.hpp"
#include "lcpr/rng.hpp"

namespace lcpr::synth {

struct Landmark {
  float x = 0, y = 0;
  float radius = 0.5f, height = 4.0f;
  float r = 1, g = 1, b = 1;
};

// Deterministic landmark field; regeneration from the same seed is
// bit-identical.
struct World {
  uint64_t seed = 0;
  double extent_x = 0, extent_y = 0;
  std::vector<Landmark> landmarks;
};

World world_generate(uint64_t seed, double extent_x, double extent_y, int landmark_count);
inline World world_generate(uint64_t seed, double extent, int landmark_count) {
  return world_generate(seed, extent, extent, landmark_count);
}

struct CameraSpec {
  double yaw_deg = 0;   // optical axis azimuth in the vehicle frame
  double hfov_deg = 70;
  int width = 704, height = 256;
};

// Six cameras tiling the full circle in panorama order (descending azimuth
// from the rear), plus the spinning LiDAR geometry.
struct SensorRig {
  std::vector<CameraSpec> cameras;
  proj::ProjectionParams lidar;
  double lidar_max_range = 120.0;
  double sensor_height = 1.8;

  void validate() const;
};

SensorRig default_rig();  // 6 x 256x704 views, 32x1056 range image
SensorRig desk_rig();     // 6 x 64x128 views, 16x256 range image

// Ray-casts the LiDAR grid and renders each pinhole camera against the
// landmark cylinders and ground plane. Pure function of (world, pose, rig).
data::DataSample render_sample(const World& world, const data::Pose& pose, const SensorRig& rig,
                               uint64_t id = 0, double timestamp = 0.0);

struct TraversalConfig {
  int places = 200;
  int traversals = 2;
  double spacing = 20.0;           // meters between consecutive places
  double lateral_jitter = 1.5;     // per-traversal pose perturbation
  double yaw_jitter_deg = 5.0;
  double margin = 30.0;            // world border around the path
};

// Serpentine route over a grid of places; traversal 0 is the nominal pass,
// later traversals revisit every place with jittered poses.
std::vector<data::Pose> traversal_poses(const TraversalConfig& cfg, int traversal, Rng& rng);

// World extent that fits the route.
void route_extent(const TraversalConfig& cfg, double* ex, double* ey);

struct SplitRatios {
  double train = 0.68, val = 0.08, test = 0.24;  // fractions of the query pool
};

// Database takes one sample per place drawn from a random traversal; the
// remaining samples form the query pool, partitioned by the ratios. Queries
// without a database record inside `positive_radius` are removed.
data::DatasetSplit split_dataset(const std::vector<data::DataSample>& samples,
                                 const SplitRatios& ratios, double positive_radius, Rng& rng);

struct GenerateConfig {
  uint64_t seed = 7;
  int landmarks = 600;
  TraversalConfig route;
  SplitRatios ratios;
  bool desk_scale = true;
};

// Full pipeline: world, rig, renders, split; returns the in-memory dataset.
data::Dataset generate_dataset(const GenerateConfig& cfg);

// Writes world.cfg, samples/, splits.txt under dir.
void save_dataset(const data::Dataset& ds, const GenerateConfig& cfg, const std::string& dir);

}  // namespace lcpr::synth

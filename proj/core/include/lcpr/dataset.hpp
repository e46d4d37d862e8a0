#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lcpr/projection.hpp"

namespace lcpr::data {

struct Pose {
  double x = 0, y = 0, yaw_deg = 0;
};

inline double distance_2d(const Pose& a, const Pose& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

// One multimodal observation as the model consumes it. The raw cloud is kept
// alongside the projected range image so yaw experiments can re-project.
struct DataSample {
  uint64_t id = 0;
  Pose pose;
  double timestamp = 0;
  int place = -1;                    // generator-assigned place index, -1 if unknown
  std::vector<proj::Image> views;    // N x [3,H,W]
  proj::PointCloud cloud;
  nd::Tensor<float> range;           // [1,h,w] meters

  int cameras() const { return static_cast<int>(views.size()); }
};

struct DatasetSplit {
  std::vector<uint64_t> database, train, val, test;

  std::vector<uint64_t> all_queries() const {
    std::vector<uint64_t> q = train;
    q.insert(q.end(), val.begin(), val.end());
    q.insert(q.end(), test.begin(), test.end());
    return q;
  }
};

// Flattens per-sample views into a model batch [B*N,3,H,W] / ranges [B,1,h,w].
nd::Tensor<float> stack_views(const std::vector<const DataSample*>& samples);
nd::Tensor<float> stack_ranges(const std::vector<const DataSample*>& samples);

// --------------------------------------------------------------------------
// Dataset directory layout:
//   world.cfg                    key=value generation parameters
//   samples/<id>/cloud.bin       raw f32 xyzi
//   samples/<id>/cam_{0..5}.ppm  binary P6
//   samples/<id>/meta.txt        key=value pose/timestamp/place
//   splits.txt                   [partition] sections listing ids
// --------------------------------------------------------------------------

void save_sample(const DataSample& s, const std::string& sample_dir);
DataSample load_sample(const std::string& sample_dir, const proj::ProjectionParams& lidar);

void save_splits(const DatasetSplit& split, const std::string& path);
DatasetSplit load_splits(const std::string& path);

struct Dataset {
  proj::ProjectionParams lidar;
  std::vector<DataSample> samples;
  DatasetSplit split;

  const DataSample& by_id(uint64_t id) const;
  int index_of(uint64_t id) const;
};

Dataset load_dataset(const std::string& dir);

}  // namespace lcpr::data

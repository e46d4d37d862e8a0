#include "lcpr/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "lcpr/kv.hpp"

namespace lcpr::data {

namespace fs = std::filesystem;

nd::Tensor<float> stack_views(const std::vector<const DataSample*>& samples) {
  if (samples.empty()) throw DataError("stack_views: no samples");
  int n = samples[0]->cameras();
  const nd::Shape& vs = samples[0]->views[0].shape;
  int B = static_cast<int>(samples.size());
  nd::Tensor<float> out({B * n, vs[0], vs[1], vs[2]});
  int64_t view_sz = nd::numel(vs);
  for (int b = 0; b < B; ++b) {
    if (samples[static_cast<size_t>(b)]->cameras() != n)
      throw DataError("stack_views: inconsistent camera counts");
    for (int v = 0; v < n; ++v) {
      const proj::Image& img = samples[static_cast<size_t>(b)]->views[static_cast<size_t>(v)];
      if (img.shape != vs) throw DataError("stack_views: inconsistent view shapes");
      std::memcpy(out.ptr() + (static_cast<int64_t>(b) * n + v) * view_sz, img.ptr(),
                  sizeof(float) * static_cast<size_t>(view_sz));
    }
  }
  return out;
}

nd::Tensor<float> stack_ranges(const std::vector<const DataSample*>& samples) {
  if (samples.empty()) throw DataError("stack_ranges: no samples");
  const nd::Shape& rs = samples[0]->range.shape;
  int B = static_cast<int>(samples.size());
  nd::Tensor<float> out({B, rs[0], rs[1], rs[2]});
  int64_t sz = nd::numel(rs);
  for (int b = 0; b < B; ++b) {
    if (samples[static_cast<size_t>(b)]->range.shape != rs)
      throw DataError("stack_ranges: inconsistent range shapes");
    std::memcpy(out.ptr() + b * sz, samples[static_cast<size_t>(b)]->range.ptr(),
                sizeof(float) * static_cast<size_t>(sz));
  }
  return out;
}

void save_sample(const DataSample& s, const std::string& sample_dir) {
  fs::create_directories(sample_dir);
  proj::save_cloud(s.cloud, sample_dir + "/cloud.bin");
  for (size_t v = 0; v < s.views.size(); ++v)
    proj::save_ppm(s.views[v], sample_dir + "/cam_" + std::to_string(v) + ".ppm");
  kv::Map m;
  m["id"] = std::to_string(s.id);
  m["pose_x"] = kv::format_double(s.pose.x);
  m["pose_y"] = kv::format_double(s.pose.y);
  m["pose_yaw"] = kv::format_double(s.pose.yaw_deg);
  m["timestamp"] = kv::format_double(s.timestamp);
  m["place"] = std::to_string(s.place);
  kv::save(m, sample_dir + "/meta.txt");
}

DataSample load_sample(const std::string& sample_dir, const proj::ProjectionParams& lidar) {
  DataSample s;
  kv::Map m = kv::load(sample_dir + "/meta.txt");
  s.id = static_cast<uint64_t>(kv::to_int(m, "id"));
  s.pose.x = kv::to_double(m, "pose_x");
  s.pose.y = kv::to_double(m, "pose_y");
  s.pose.yaw_deg = kv::to_double(m, "pose_yaw");
  s.timestamp = kv::to_double(m, "timestamp");
  s.place = static_cast<int>(kv::to_int(m, "place"));
  s.cloud = proj::load_cloud(sample_dir + "/cloud.bin");
  for (int v = 0;; ++v) {
    std::string path = sample_dir + "/cam_" + std::to_string(v) + ".ppm";
    if (!fs::exists(path)) break;
    s.views.push_back(proj::load_ppm(path));
  }
  if (s.views.empty()) throw DataError("sample " + sample_dir + ": no camera views");
  proj::RangeImage ri = proj::spherical_project(s.cloud, lidar);
  s.range = nd::Tensor<float>({1, lidar.h, lidar.w}, ri.grid.data);
  return s;
}

void save_splits(const DatasetSplit& split, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("splits: cannot open " + path + " for writing");
  auto section = [&](const char* name, const std::vector<uint64_t>& ids) {
    os << "[" << name << "]\n";
    for (uint64_t id : ids) os << id << "\n";
  };
  section("database", split.database);
  section("query_train", split.train);
  section("query_val", split.val);
  section("query_test", split.test);
  if (!os) throw DataError("splits: write failed for " + path);
}

DatasetSplit load_splits(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("splits: cannot open " + path);
  DatasetSplit split;
  std::vector<uint64_t>* current = nullptr;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line == "[database]")
        current = &split.database;
      else if (line == "[query_train]")
        current = &split.train;
      else if (line == "[query_val]")
        current = &split.val;
      else if (line == "[query_test]")
        current = &split.test;
      else
        throw DataError(path + ":" + std::to_string(lineno) + ": unknown section " + line);
      continue;
    }
    if (!current) throw DataError(path + ":" + std::to_string(lineno) + ": id outside a section");
    current->push_back(std::stoull(line));
  }
  return split;
}

const DataSample& Dataset::by_id(uint64_t id) const {
  int i = index_of(id);
  if (i < 0) throw DataError("dataset: unknown sample id " + std::to_string(id));
  return samples[static_cast<size_t>(i)];
}

int Dataset::index_of(uint64_t id) const {
  for (size_t i = 0; i < samples.size(); ++i)
    if (samples[i].id == id) return static_cast<int>(i);
  return -1;
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  kv::Map world = kv::load(dir + "/world.cfg");
  ds.lidar.h = static_cast<int>(kv::to_int(world, "lidar_h"));
  ds.lidar.w = static_cast<int>(kv::to_int(world, "lidar_w"));
  ds.lidar.fov_up_deg = kv::to_double(world, "lidar_fov_up");
  ds.lidar.fov_down_deg = kv::to_double(world, "lidar_fov_down");
  ds.split = load_splits(dir + "/splits.txt");

  std::vector<uint64_t> ids;
  for (const auto& entry : fs::directory_iterator(dir + "/samples"))
    if (entry.is_directory()) ids.push_back(std::stoull(entry.path().filename().string()));
  std::sort(ids.begin(), ids.end());
  ds.samples.reserve(ids.size());
  for (uint64_t id : ids)
    ds.samples.push_back(load_sample(dir + "/samples/" + std::to_string(id), ds.lidar));
  return ds;
}

}  // namespace lcpr::data

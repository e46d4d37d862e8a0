#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lcpr/dataset.hpp"

namespace lcpr::ret {

// Maps one sample to its global descriptor.
using Embedder = std::function<std::vector<float>(const data::DataSample&)>;

struct DbRecord {
  uint64_t id = 0;
  float x = 0, y = 0;
  double timestamp = 0;
};

// Persisted unit-norm embeddings with poses; insertion order is stable.
struct DescriptorDatabase {
  int dim = 0;
  std::vector<DbRecord> records;
  std::vector<float> descriptors;  // row-major [records.size(), dim]

  size_t size() const { return records.size(); }
  const float* row(size_t i) const { return descriptors.data() + i * static_cast<size_t>(dim); }
  void add(const DbRecord& rec, const float* descriptor);
  void validate() const;  // unique ids, unit norms
};

struct Neighbor {
  uint64_t id = 0;
  int index = -1;
  double distance = 0;
};

// Exact Euclidean top-k, ascending distance, ties broken by lower id.
// Distances accumulate in double so results are shard- and order-stable.
std::vector<Neighbor> knn_query(const DescriptorDatabase& db, const float* query, int k,
                                int shards = 1);

// --------------------------------------------------------------------------
// Evaluation
// --------------------------------------------------------------------------

struct QueryResult {
  uint64_t query_id = 0;
  double qx = 0, qy = 0;
  std::vector<Neighbor> topk;
};

// Fraction of queries whose top-N contains a database record within `radius`
// meters of the query pose. Every query is expected to have ground truth.
std::vector<double> recall_at_n(const std::vector<QueryResult>& results,
                                const DescriptorDatabase& db, double radius,
                                const std::vector<int>& ns);

// Threshold sweep over top-1 distances: predicted-positive iff d <= tau,
// true-positive iff also within `radius`; returns the maximum F1.
double max_f1(const std::vector<QueryResult>& results, const DescriptorDatabase& db,
              double radius);

struct EvalReport {
  std::vector<int> ns;
  std::vector<double> recall;
  double max_f1 = 0;
  int queries = 0;
  int removed_queries = 0;  // dropped for missing ground truth
  double mean_embed_ms = -1, mean_search_ms = -1;
  std::vector<QueryResult> per_query;
};

struct EvalOptions {
  std::vector<int> ns = {1, 5, 10, 20};
  double radius = 9.0;
  bool timing = false;
  int warmup_queries = 100;  // excluded from the timing averages
};

DescriptorDatabase db_build(const std::vector<const data::DataSample*>& samples,
                            const Embedder& embed);

EvalReport evaluate(const std::vector<const data::DataSample*>& queries,
                    const DescriptorDatabase& db, const Embedder& embed,
                    const EvalOptions& opts = {});

void write_report(const EvalReport& rep, const std::string& report_path,
                  const std::string& topk_csv_path);

// --------------------------------------------------------------------------
// Degradations (applied to query samples)
// --------------------------------------------------------------------------

struct DegradationSpec {
  enum class Mode { kCameraOcclusion, kRangeOcclusion, kBrightness };
  Mode mode = Mode::kBrightness;
  int camera_index = 0;     // kCameraOcclusion
  double factor = 1.0;      // kBrightness, > 0

  static DegradationSpec parse(const std::string& text);  // "camera:3" etc.
};

data::DataSample degrade(const data::DataSample& sample, const DegradationSpec& spec);

// --------------------------------------------------------------------------
// Yaw-rotation experiment: rotate the cloud, circularly shift the panorama,
// query the unrotated database.
// --------------------------------------------------------------------------

data::DataSample yaw_transform_query(const data::DataSample& sample, double angle_deg,
                                     const proj::ProjectionParams& lidar);

struct YawResult {
  double angle_deg = 0;
  double recall1 = 0;
};

std::vector<YawResult> yaw_experiment(const std::vector<const data::DataSample*>& queries,
                                      const DescriptorDatabase& db, const Embedder& embed,
                                      const proj::ProjectionParams& lidar,
                                      const std::vector<double>& angles = {55, 110, 180, 250, 305,
                                                                           360},
                                      double radius = 9.0);

// --------------------------------------------------------------------------
// Database file: magic "LCPRDB01", u32 count, u32 dim, per record u64 id and
// f32[dim]; poses in a sidecar text file "id,x,y,timestamp".
// --------------------------------------------------------------------------

void save_database(const DescriptorDatabase& db, const std::string& db_path,
                   const std::string& pose_path);
DescriptorDatabase load_database(const std::string& db_path, const std::string& pose_path);

}  // namespace lcpr::ret

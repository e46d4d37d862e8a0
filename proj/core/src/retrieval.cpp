#include "lcpr/retrieval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lcpr::ret {

void DescriptorDatabase::add(const DbRecord& rec, const float* descriptor) {
  for (const DbRecord& r : records)
    if (r.id == rec.id) throw DataError("database: duplicate id " + std::to_string(rec.id));
  records.push_back(rec);
  descriptors.insert(descriptors.end(), descriptor, descriptor + dim);
}

void DescriptorDatabase::validate() const {
  if (dim < 1) throw DataError("database: dimension not set");
  if (descriptors.size() != records.size() * static_cast<size_t>(dim))
    throw DataError("database: descriptor storage out of sync");
  for (size_t i = 0; i < records.size(); ++i) {
    double n = 0;
    const float* r = row(i);
    for (int d = 0; d < dim; ++d) n += static_cast<double>(r[d]) * r[d];
    if (std::abs(std::sqrt(n) - 1.0) > 1e-4)
      throw DataError("database: record " + std::to_string(records[i].id) + " is not unit norm");
  }
}

namespace {

inline double sq_distance(const float* a, const float* b, int dim) {
  double acc = 0.0;
  for (int i = 0; i < dim; ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

struct Scored {
  double d2;
  uint64_t id;
  int index;
  bool operator<(const Scored& o) const { return d2 != o.d2 ? d2 < o.d2 : id < o.id; }
};

}  // namespace

std::vector<Neighbor> knn_query(const DescriptorDatabase& db, const float* query, int k,
                                int shards) {
  size_t n = db.size();
  if (n == 0) throw DataError("knn: empty database");
  if (k < 1 || static_cast<size_t>(k) > n)
    throw DataError("knn: k=" + std::to_string(k) + " out of range for " + std::to_string(n) +
                    " records");
  if (shards < 1) shards = 1;
  // Per-shard exact top-k then an ordered merge; the result is identical for
  // any shard count because per-record distances do not depend on the shard.
  std::vector<Scored> merged;
  merged.reserve(static_cast<size_t>(k) * static_cast<size_t>(shards));
  for (int s = 0; s < shards; ++s) {
    size_t lo = n * static_cast<size_t>(s) / static_cast<size_t>(shards);
    size_t hi = n * static_cast<size_t>(s + 1) / static_cast<size_t>(shards);
    std::vector<Scored> shard;
    shard.reserve(hi - lo);
    for (size_t i = lo; i < hi; ++i)
      shard.push_back(Scored{sq_distance(db.row(i), query, db.dim), db.records[i].id,
                             static_cast<int>(i)});
    size_t keep = std::min(static_cast<size_t>(k), shard.size());
    std::partial_sort(shard.begin(), shard.begin() + static_cast<long>(keep), shard.end());
    merged.insert(merged.end(), shard.begin(), shard.begin() + static_cast<long>(keep));
  }
  std::sort(merged.begin(), merged.end());
  std::vector<Neighbor> out;
  out.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i)
    out.push_back(Neighbor{merged[static_cast<size_t>(i)].id, merged[static_cast<size_t>(i)].index,
                           std::sqrt(merged[static_cast<size_t>(i)].d2)});
  return out;
}

std::vector<double> recall_at_n(const std::vector<QueryResult>& results,
                                const DescriptorDatabase& db, double radius,
                                const std::vector<int>& ns) {
  if (results.empty()) throw DataError("recall: no queries");
  std::vector<double> recall(ns.size(), 0.0);
  for (const QueryResult& q : results) {
    int first_match = -1;
    for (size_t r = 0; r < q.topk.size(); ++r) {
      const DbRecord& rec = db.records[static_cast<size_t>(q.topk[r].index)];
      double d = std::hypot(rec.x - q.qx, rec.y - q.qy);
      if (d <= radius) {
        first_match = static_cast<int>(r);
        break;
      }
    }
    for (size_t i = 0; i < ns.size(); ++i)
      if (first_match >= 0 && first_match < ns[i]) recall[i] += 1.0;
  }
  for (double& v : recall) v /= static_cast<double>(results.size());
  return recall;
}

double max_f1(const std::vector<QueryResult>& results, const DescriptorDatabase& db,
              double radius) {
  if (results.empty()) throw DataError("max_f1: no queries");
  struct Top1 {
    double d;
    bool match;
  };
  std::vector<Top1> tops;
  tops.reserve(results.size());
  for (const QueryResult& q : results) {
    if (q.topk.empty()) throw DataError("max_f1: query without candidates");
    const DbRecord& rec = db.records[static_cast<size_t>(q.topk[0].index)];
    bool match = std::hypot(rec.x - q.qx, rec.y - q.qy) <= radius;
    tops.push_back(Top1{q.topk[0].distance, match});
  }
  std::sort(tops.begin(), tops.end(), [](const Top1& a, const Top1& b) { return a.d < b.d; });
  double n_queries = static_cast<double>(tops.size());
  double best = 0.0;
  int tp = 0;
  for (size_t i = 0; i < tops.size(); ++i) {
    if (tops[i].match) ++tp;
    // Threshold at this distance accepts entries [0..i].
    if (i + 1 < tops.size() && tops[i + 1].d == tops[i].d) continue;
    double predicted = static_cast<double>(i + 1);
    if (tp == 0) continue;
    double precision = tp / predicted;
    double recall = tp / n_queries;
    best = std::max(best, 2.0 * precision * recall / (precision + recall));
  }
  return best;
}

DescriptorDatabase db_build(const std::vector<const data::DataSample*>& samples,
                            const Embedder& embed) {
  DescriptorDatabase db;
  for (const data::DataSample* s : samples) {
    std::vector<float> d = embed(*s);
    if (db.dim == 0) {
      db.dim = static_cast<int>(d.size());
    } else if (static_cast<int>(d.size()) != db.dim) {
      throw DataError("db_build: inconsistent descriptor dimension");
    }
    db.add(DbRecord{s->id, static_cast<float>(s->pose.x), static_cast<float>(s->pose.y),
                    s->timestamp},
           d.data());
  }
  db.validate();
  return db;
}

EvalReport evaluate(const std::vector<const data::DataSample*>& queries,
                    const DescriptorDatabase& db, const Embedder& embed,
                    const EvalOptions& opts) {
  if (db.size() == 0) throw DataError("evaluate: empty database");
  EvalReport rep;
  rep.ns = opts.ns;
  int max_n = 1;
  for (int n : opts.ns) max_n = std::max(max_n, n);
  max_n = std::min<int>(max_n, static_cast<int>(db.size()));

  // Queries lacking any ground truth inside the radius are removed up front.
  std::vector<const data::DataSample*> kept;
  for (const data::DataSample* q : queries) {
    bool has_gt = false;
    for (const DbRecord& r : db.records)
      if (std::hypot(r.x - q->pose.x, r.y - q->pose.y) <= opts.radius) {
        has_gt = true;
        break;
      }
    if (has_gt)
      kept.push_back(q);
    else
      ++rep.removed_queries;
  }
  if (kept.empty()) throw DataError("evaluate: no queries with ground truth");
  rep.queries = static_cast<int>(kept.size());

  int warmup = opts.timing ? std::min<int>(opts.warmup_queries, static_cast<int>(kept.size()) - 1)
                           : 0;
  double embed_ms = 0, search_ms = 0;
  int timed = 0;
  using Clock = std::chrono::steady_clock;
  for (size_t i = 0; i < kept.size(); ++i) {
    auto t0 = Clock::now();
    std::vector<float> d = embed(*kept[i]);
    auto t1 = Clock::now();
    auto topk = knn_query(db, d.data(), max_n);
    auto t2 = Clock::now();
    if (static_cast<int>(i) >= warmup) {
      embed_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
      search_ms += std::chrono::duration<double, std::milli>(t2 - t1).count();
      ++timed;
    }
    rep.per_query.push_back(
        QueryResult{kept[i]->id, kept[i]->pose.x, kept[i]->pose.y, std::move(topk)});
  }
  rep.recall = recall_at_n(rep.per_query, db, opts.radius, opts.ns);
  rep.max_f1 = ret::max_f1(rep.per_query, db, opts.radius);
  if (opts.timing && timed > 0) {
    rep.mean_embed_ms = embed_ms / timed;
    rep.mean_search_ms = search_ms / timed;
  }
  return rep;
}

void write_report(const EvalReport& rep, const std::string& report_path,
                  const std::string& topk_csv_path) {
  std::ofstream os(report_path);
  if (!os) throw DataError("report: cannot open " + report_path);
  os << "queries=" << rep.queries << "\n";
  os << "removed_queries=" << rep.removed_queries << "\n";
  for (size_t i = 0; i < rep.ns.size(); ++i) os << "recall@" << rep.ns[i] << "=" << rep.recall[i] << "\n";
  os << "max_f1=" << rep.max_f1 << "\n";
  if (rep.mean_embed_ms >= 0) {
    os << "mean_descriptor_ms=" << rep.mean_embed_ms << "\n";
    os << "mean_search_ms=" << rep.mean_search_ms << "\n";
  }
  if (!topk_csv_path.empty()) {
    std::ofstream cs(topk_csv_path);
    if (!cs) throw DataError("report: cannot open " + topk_csv_path);
    cs << "query_id,rank,db_id,distance\n";
    for (const QueryResult& q : rep.per_query)
      for (size_t r = 0; r < q.topk.size(); ++r)
        cs << q.query_id << "," << r + 1 << "," << q.topk[r].id << "," << q.topk[r].distance
           << "\n";
  }
}

DegradationSpec DegradationSpec::parse(const std::string& text) {
  DegradationSpec spec;
  auto colon = text.find(':');
  std::string mode = text.substr(0, colon);
  std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  if (mode == "camera") {
    spec.mode = Mode::kCameraOcclusion;
    if (arg.empty()) throw DataError("degrade: camera mode needs an index, e.g. camera:2");
    spec.camera_index = std::stoi(arg);
  } else if (mode == "range") {
    spec.mode = Mode::kRangeOcclusion;
  } else if (mode == "brightness") {
    spec.mode = Mode::kBrightness;
    if (arg.empty()) throw DataError("degrade: brightness mode needs a factor, e.g. brightness:0.4");
    spec.factor = std::stod(arg);
  } else {
    throw DataError("degrade: unknown mode '" + mode + "'");
  }
  return spec;
}

data::DataSample degrade(const data::DataSample& sample, const DegradationSpec& spec) {
  data::DataSample out = sample;
  switch (spec.mode) {
    case DegradationSpec::Mode::kCameraOcclusion: {
      if (spec.camera_index < 0 || spec.camera_index >= sample.cameras())
        throw DataError("degrade: camera index " + std::to_string(spec.camera_index) +
                        " out of range for " + std::to_string(sample.cameras()) + " views");
      proj::Image& img = out.views[static_cast<size_t>(spec.camera_index)];
      std::fill(img.data.begin(), img.data.end(), 0.0f);
      break;
    }
    case DegradationSpec::Mode::kRangeOcclusion: {
      int h = out.range.shape[1], w = out.range.shape[2];
      for (int r = 0; r < h / 4; ++r)
        for (int c = 0; c < w; ++c) out.range.at(0, r, c) = 0.0f;
      break;
    }
    case DegradationSpec::Mode::kBrightness: {
      if (!(spec.factor > 0.0)) throw DataError("degrade: brightness factor must be positive");
      for (proj::Image& img : out.views)
        for (float& v : img.data) v = std::clamp(v * static_cast<float>(spec.factor), 0.0f, 1.0f);
      break;
    }
  }
  return out;
}

data::DataSample yaw_transform_query(const data::DataSample& sample, double angle_deg,
                                     const proj::ProjectionParams& lidar) {
  data::DataSample out = sample;
  out.cloud = proj::yaw_rotate_cloud(sample.cloud, angle_deg);
  proj::RangeImage ri = proj::spherical_project(out.cloud, lidar);
  out.range = nd::Tensor<float>({1, lidar.h, lidar.w}, ri.grid.data);

  proj::Image pano = proj::panorama_concat(sample.views);
  int full_w = pano.shape[2];
  int shift = proj::yaw_to_column_shift(angle_deg, full_w);
  pano = proj::circular_shift_columns(pano, shift);
  int view_w = full_w / sample.cameras();
  int C = pano.shape[0], H = pano.shape[1];
  for (int v = 0; v < sample.cameras(); ++v) {
    proj::Image img({C, H, view_w});
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        std::memcpy(img.ptr() + (static_cast<int64_t>(c) * H + h) * view_w,
                    pano.ptr() + (static_cast<int64_t>(c) * H + h) * full_w + v * view_w,
                    sizeof(float) * static_cast<size_t>(view_w));
    out.views[static_cast<size_t>(v)] = std::move(img);
  }
  return out;
}

std::vector<YawResult> yaw_experiment(const std::vector<const data::DataSample*>& queries,
                                      const DescriptorDatabase& db, const Embedder& embed,
                                      const proj::ProjectionParams& lidar,
                                      const std::vector<double>& angles, double radius) {
  std::vector<YawResult> out;
  for (double angle : angles) {
    std::vector<QueryResult> results;
    for (const data::DataSample* q : queries) {
      data::DataSample rotated = yaw_transform_query(*q, angle, lidar);
      std::vector<float> d = embed(rotated);
      results.push_back(QueryResult{q->id, q->pose.x, q->pose.y, knn_query(db, d.data(), 1)});
    }
    double r1 = recall_at_n(results, db, radius, {1})[0];
    out.push_back(YawResult{angle, r1});
  }
  return out;
}

void save_database(const DescriptorDatabase& db, const std::string& db_path,
                   const std::string& pose_path) {
  std::ofstream os(db_path, std::ios::binary);
  if (!os) throw DataError("database: cannot open " + db_path + " for writing");
  os.write("LCPRDB01", 8);
  uint32_t count = static_cast<uint32_t>(db.size()), dim = static_cast<uint32_t>(db.dim);
  os.write(reinterpret_cast<const char*>(&count), 4);
  os.write(reinterpret_cast<const char*>(&dim), 4);
  for (size_t i = 0; i < db.size(); ++i) {
    os.write(reinterpret_cast<const char*>(&db.records[i].id), 8);
    os.write(reinterpret_cast<const char*>(db.row(i)), sizeof(float) * static_cast<size_t>(db.dim));
  }
  if (!os) throw DataError("database: write failed for " + db_path);

  std::ofstream ps(pose_path);
  if (!ps) throw DataError("database: cannot open " + pose_path + " for writing");
  ps << "id,x,y,timestamp\n";
  ps.precision(17);
  for (const DbRecord& r : db.records)
    ps << r.id << "," << r.x << "," << r.y << "," << r.timestamp << "\n";
}

DescriptorDatabase load_database(const std::string& db_path, const std::string& pose_path) {
  std::ifstream is(db_path, std::ios::binary);
  if (!is) throw DataError("database: cannot open " + db_path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "LCPRDB01", 8) != 0)
    throw DataError("database: bad magic in " + db_path);
  uint32_t count, dim;
  is.read(reinterpret_cast<char*>(&count), 4);
  is.read(reinterpret_cast<char*>(&dim), 4);
  DescriptorDatabase db;
  db.dim = static_cast<int>(dim);
  db.records.resize(count);
  db.descriptors.resize(static_cast<size_t>(count) * dim);
  for (uint32_t i = 0; i < count; ++i) {
    is.read(reinterpret_cast<char*>(&db.records[i].id), 8);
    is.read(reinterpret_cast<char*>(db.descriptors.data() + static_cast<size_t>(i) * dim),
            sizeof(float) * dim);
  }
  if (!is) throw DataError("database: truncated " + db_path);

  std::ifstream ps(pose_path);
  if (!ps) throw DataError("database: cannot open " + pose_path);
  std::string line;
  std::getline(ps, line);  // header
  size_t idx = 0;
  while (std::getline(ps, line)) {
    if (line.empty()) continue;
    if (idx >= db.records.size()) throw DataError("database: more poses than records");
    std::istringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    if (std::stoull(field) != db.records[idx].id)
      throw DataError("database: pose sidecar id mismatch at row " + std::to_string(idx));
    std::getline(ss, field, ',');
    db.records[idx].x = std::stof(field);
    std::getline(ss, field, ',');
    db.records[idx].y = std::stof(field);
    std::getline(ss, field, ',');
    db.records[idx].timestamp = std::stod(field);
    ++idx;
  }
  if (idx != db.records.size()) throw DataError("database: pose sidecar is missing rows");
  db.validate();
  return db;
}

}  // namespace lcpr::ret

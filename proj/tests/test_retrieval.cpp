#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "lcpr/retrieval.hpp"
#include "lcpr/rng.hpp"

using namespace lcpr;
using namespace lcpr::ret;

namespace {

std::vector<float> unit_vec(int dim, Rng& rng) {
  std::vector<float> v(static_cast<size_t>(dim));
  double n = 0;
  for (auto& x : v) {
    x = static_cast<float>(rng.gaussian());
    n += double(x) * x;
  }
  n = std::sqrt(n);
  for (auto& x : v) x = static_cast<float>(x / n);
  return v;
}

DescriptorDatabase random_db(int n, int dim, uint64_t seed, double spacing = 30.0) {
  Rng rng(seed);
  DescriptorDatabase db;
  db.dim = dim;
  for (int i = 0; i < n; ++i) {
    auto v = unit_vec(dim, rng);
    db.add(DbRecord{static_cast<uint64_t>(i), static_cast<float>(i * spacing), 0.0f, double(i)},
           v.data());
  }
  return db;
}

// Independent O(N*D) oracle with its own distance accumulation and ordering.
std::vector<Neighbor> knn_oracle(const DescriptorDatabase& db, const float* q, int k) {
  struct Entry {
    double d;
    uint64_t id;
    int idx;
  };
  std::vector<Entry> all;
  for (size_t i = 0; i < db.size(); ++i) {
    long double acc = 0;
    for (int j = 0; j < db.dim; ++j) {
      long double d = static_cast<long double>(db.row(i)[j]) - q[j];
      acc += d * d;
    }
    all.push_back(Entry{static_cast<double>(acc), db.records[i].id, static_cast<int>(i)});
  }
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) {
    return a.d != b.d ? a.d < b.d : a.id < b.id;
  });
  std::vector<Neighbor> out;
  for (int i = 0; i < k; ++i) out.push_back(Neighbor{all[static_cast<size_t>(i)].id,
                                                     all[static_cast<size_t>(i)].idx,
                                                     std::sqrt(all[static_cast<size_t>(i)].d)});
  return out;
}

}  // namespace

TEST_CASE("knn: stored descriptor retrieves itself at distance zero") {
  DescriptorDatabase db = random_db(50, 16, 300);
  auto top = knn_query(db, db.row(17), 3);
  CHECK(top[0].id == 17);
  CHECK(top[0].distance == 0.0);
}

TEST_CASE("knn: k equal to the database size gives the full ranking") {
  DescriptorDatabase db = random_db(40, 8, 301);
  Rng rng(302);
  auto q = unit_vec(8, rng);
  auto all = knn_query(db, q.data(), 40);
  CHECK(all.size() == 40);
  for (size_t i = 1; i < all.size(); ++i) CHECK(all[i - 1].distance <= all[i].distance);
}

TEST_CASE("knn: matches the exhaustive oracle exactly on 1000 random descriptors") {
  DescriptorDatabase db = random_db(1000, 256, 303);
  Rng rng(304);
  for (int trial = 0; trial < 5; ++trial) {
    auto q = unit_vec(256, rng);
    for (int k : {1, 5, 10, 20}) {
      auto got = knn_query(db, q.data(), k);
      auto expect = knn_oracle(db, q.data(), k);
      REQUIRE(got.size() == expect.size());
      for (size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].id == expect[i].id);
        CHECK(got[i].distance == doctest::Approx(expect[i].distance).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("knn: identical results for any shard count") {
  DescriptorDatabase db = random_db(137, 32, 305);
  Rng rng(306);
  auto q = unit_vec(32, rng);
  auto base = knn_query(db, q.data(), 20, 1);
  for (int shards : {2, 3, 7, 64}) {
    auto sharded = knn_query(db, q.data(), 20, shards);
    for (size_t i = 0; i < base.size(); ++i) {
      CHECK(sharded[i].id == base[i].id);
      CHECK(sharded[i].distance == base[i].distance);
    }
  }
}

TEST_CASE("knn: exact ties break toward the lower id") {
  DescriptorDatabase db;
  db.dim = 4;
  float v[4] = {0.5f, 0.5f, 0.5f, 0.5f};
  db.add(DbRecord{7, 0, 0, 0}, v);
  db.add(DbRecord{3, 10, 0, 0}, v);
  db.add(DbRecord{9, 20, 0, 0}, v);
  float q[4] = {1, 0, 0, 0};
  auto top = knn_query(db, q, 3);
  CHECK(top[0].id == 3);
  CHECK(top[1].id == 7);
  CHECK(top[2].id == 9);
}

TEST_CASE("knn: empty database and bad k are rejected") {
  DescriptorDatabase empty;
  empty.dim = 4;
  float q[4] = {1, 0, 0, 0};
  CHECK_THROWS_AS(knn_query(empty, q, 1), DataError);
  DescriptorDatabase db = random_db(5, 4, 307);
  CHECK_THROWS_AS(knn_query(db, q, 0), DataError);
  CHECK_THROWS_AS(knn_query(db, q, 6), DataError);
}

TEST_CASE("database: duplicate ids rejected; file round-trip is exact") {
  DescriptorDatabase db = random_db(20, 8, 308);
  Rng rng(309);
  auto v = unit_vec(8, rng);
  CHECK_THROWS_AS(db.add(DbRecord{5, 0, 0, 0}, v.data()), DataError);

  std::filesystem::create_directories("/tmp/lcpr_db_test");
  save_database(db, "/tmp/lcpr_db_test/d.bin", "/tmp/lcpr_db_test/d.poses");
  DescriptorDatabase back = load_database("/tmp/lcpr_db_test/d.bin", "/tmp/lcpr_db_test/d.poses");
  REQUIRE(back.size() == db.size());
  CHECK(back.dim == db.dim);
  for (size_t i = 0; i < db.size(); ++i) {
    CHECK(back.records[i].id == db.records[i].id);
    CHECK(back.records[i].x == db.records[i].x);
    for (int j = 0; j < db.dim; ++j) CHECK(back.row(i)[j] == db.row(i)[j]);
  }
}

TEST_CASE("recall: rank positions count exactly as specified") {
  DescriptorDatabase db = random_db(10, 4, 310, /*spacing=*/30.0);
  // One query whose true match (within 9 m) sits at rank 2.
  QueryResult q;
  q.query_id = 100;
  q.qx = 5 * 30.0;
  q.qy = 0.0;
  q.topk = {Neighbor{2, 2, 0.1}, Neighbor{5, 5, 0.2}, Neighbor{7, 7, 0.3}};
  auto recall = recall_at_n({q}, db, 9.0, {1, 2, 3});
  CHECK(recall[0] == 0.0);
  CHECK(recall[1] == 1.0);
  CHECK(recall[2] == 1.0);
}

TEST_CASE("recall: self-matched queries give recall@1 of one; monotone in N") {
  DescriptorDatabase db = random_db(30, 16, 311, 30.0);
  Rng rng(312);
  std::vector<QueryResult> results;
  for (int i = 0; i < 30; ++i) {
    QueryResult q;
    q.query_id = 1000 + static_cast<uint64_t>(i);
    q.qx = static_cast<double>(i) * 30.0;
    q.qy = 0.0;
    q.topk = knn_query(db, db.row(static_cast<size_t>(i)), 20);
    results.push_back(q);
  }
  auto recall = recall_at_n(results, db, 9.0, {1, 5, 10, 20});
  CHECK(recall[0] == 1.0);
  for (size_t i = 1; i < recall.size(); ++i) CHECK(recall[i] >= recall[i - 1]);
  // Recall@|db| is 1 for valid query sets.
  CHECK(recall.back() == 1.0);
}

TEST_CASE("recall: random small case agrees with hand enumeration") {
  DescriptorDatabase db = random_db(6, 4, 313, 30.0);
  Rng rng(314);
  std::vector<QueryResult> results;
  int expect_hits_at1 = 0, expect_hits_at3 = 0;
  for (int i = 0; i < 12; ++i) {
    QueryResult q;
    q.query_id = 500 + static_cast<uint64_t>(i);
    int true_rec = static_cast<int>(rng.below(6));
    q.qx = true_rec * 30.0 + rng.uniform(-4.0, 4.0);
    q.qy = rng.uniform(-4.0, 4.0);
    auto qd = unit_vec(4, rng);
    q.topk = knn_query(db, qd.data(), 3);
    // Hand enumeration.
    bool hit1 = std::hypot(db.records[static_cast<size_t>(q.topk[0].index)].x - q.qx,
                           db.records[static_cast<size_t>(q.topk[0].index)].y - q.qy) <= 9.0;
    bool hit3 = false;
    for (int r = 0; r < 3; ++r)
      if (std::hypot(db.records[static_cast<size_t>(q.topk[static_cast<size_t>(r)].index)].x - q.qx,
                     db.records[static_cast<size_t>(q.topk[static_cast<size_t>(r)].index)].y - q.qy) <=
          9.0)
        hit3 = true;
    expect_hits_at1 += hit1 ? 1 : 0;
    expect_hits_at3 += hit3 ? 1 : 0;
    results.push_back(q);
  }
  auto recall = recall_at_n(results, db, 9.0, {1, 3});
  CHECK(recall[0] == doctest::Approx(expect_hits_at1 / 12.0));
  CHECK(recall[1] == doctest::Approx(expect_hits_at3 / 12.0));
}

TEST_CASE("max F1: all-correct gives 1; the worked two-query case gives 2/3") {
  DescriptorDatabase db = random_db(4, 4, 315, 30.0);
  auto make = [&](int rec, double dist, bool match) {
    QueryResult q;
    q.query_id = static_cast<uint64_t>(900 + rec);
    q.qx = db.records[static_cast<size_t>(rec)].x + (match ? 1.0 : 15.0);
    q.qy = 0.0;
    q.topk = {Neighbor{db.records[static_cast<size_t>(rec)].id, rec, dist}};
    return q;
  };
  CHECK(max_f1({make(0, 0.2, true), make(1, 0.4, true)}, db, 9.0) == doctest::Approx(1.0));
  // q1 correct at d=0.1, q2 wrong at d=0.9 -> max F1 = 2/3.
  CHECK(max_f1({make(0, 0.1, true), make(1, 0.9, false)}, db, 9.0) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("max F1: matches an exhaustive threshold sweep on 100 random queries") {
  DescriptorDatabase db = random_db(50, 8, 316, 30.0);
  Rng rng(317);
  std::vector<QueryResult> results;
  for (int i = 0; i < 100; ++i) {
    QueryResult q;
    q.query_id = static_cast<uint64_t>(i);
    int rec = static_cast<int>(rng.below(50));
    bool match = rng.uniform() < 0.7;
    q.qx = db.records[static_cast<size_t>(rec)].x + (match ? rng.uniform(-6.0, 6.0) : 14.0);
    q.qy = 0.0;
    q.topk = {Neighbor{db.records[static_cast<size_t>(rec)].id, rec, rng.uniform(0.05, 1.4)}};
    results.push_back(q);
  }
  // Oracle: sweep every observed distance exhaustively.
  double best = 0.0;
  for (const auto& tau_src : results) {
    double tau = tau_src.topk[0].distance;
    int tp = 0, pred = 0;
    for (const auto& q : results) {
      if (q.topk[0].distance <= tau) {
        ++pred;
        double d = std::hypot(db.records[static_cast<size_t>(q.topk[0].index)].x - q.qx,
                              db.records[static_cast<size_t>(q.topk[0].index)].y - q.qy);
        if (d <= 9.0) ++tp;
      }
    }
    if (tp > 0) {
      double p = double(tp) / pred, r = double(tp) / results.size();
      best = std::max(best, 2 * p * r / (p + r));
    }
  }
  CHECK(max_f1(results, db, 9.0) == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("max F1: invariant under strictly monotone distance transforms") {
  DescriptorDatabase db = random_db(20, 8, 318, 30.0);
  Rng rng(319);
  std::vector<QueryResult> results;
  for (int i = 0; i < 40; ++i) {
    QueryResult q;
    q.query_id = static_cast<uint64_t>(i);
    int rec = static_cast<int>(rng.below(20));
    q.qx = db.records[static_cast<size_t>(rec)].x + (rng.uniform() < 0.6 ? 2.0 : 20.0);
    q.qy = 0.0;
    q.topk = {Neighbor{db.records[static_cast<size_t>(rec)].id, rec, rng.uniform(0.1, 1.2)}};
    results.push_back(q);
  }
  double base = max_f1(results, db, 9.0);
  std::vector<QueryResult> warped = results;
  for (auto& q : warped) q.topk[0].distance = std::exp(3.0 * q.topk[0].distance);  // monotone
  CHECK(max_f1(warped, db, 9.0) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("degrade: brightness identity, range rows, camera pixel count") {
  data::DataSample s;
  s.id = 1;
  Rng rng(320);
  for (int v = 0; v < 3; ++v) {
    proj::Image img({3, 8, 10});
    for (auto& x : img.data) x = static_cast<float>(rng.uniform(0.1, 0.9));
    s.views.push_back(img);
  }
  s.range = nd::Tensor<float>({1, 32, 12});
  for (auto& x : s.range.data) x = static_cast<float>(rng.uniform(1.0, 50.0));

  DegradationSpec identity = DegradationSpec::parse("brightness:1.0");
  data::DataSample same = degrade(s, identity);
  CHECK(nd::max_abs_diff(same.views[0], s.views[0]) == 0.0);

  DegradationSpec range_occ = DegradationSpec::parse("range");
  data::DataSample ro = degrade(s, range_occ);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 12; ++c) CHECK(ro.range.at(0, r, c) == 0.0f);
  for (int r = 8; r < 32; ++r)
    for (int c = 0; c < 12; ++c) CHECK(ro.range.at(0, r, c) == s.range.at(0, r, c));

  DegradationSpec cam = DegradationSpec::parse("camera:1");
  data::DataSample co = degrade(s, cam);
  int zeros = 0;
  for (float x : co.views[1].data)
    if (x == 0.0f) ++zeros;
  CHECK(zeros == 3 * 8 * 10);
  CHECK(nd::max_abs_diff(co.views[0], s.views[0]) == 0.0);
  CHECK_THROWS_AS(degrade(s, DegradationSpec::parse("camera:5")), DataError);

  DegradationSpec half = DegradationSpec::parse("brightness:0.5");
  data::DataSample hb = degrade(s, half);
  CHECK(hb.views[2].data[5] == doctest::Approx(0.5f * s.views[2].data[5]));
}

TEST_CASE("evaluate: self-retrieval database gives recall@1 = 1 and max F1 = 1") {
  // Fake embedder: a deterministic unit vector per sample id.
  auto embed = [](const data::DataSample& s) {
    Rng rng(s.id * 7919 + 13);
    std::vector<float> v(16);
    double n = 0;
    for (auto& x : v) {
      x = static_cast<float>(rng.gaussian());
      n += double(x) * x;
    }
    for (auto& x : v) x = static_cast<float>(x / std::sqrt(n));
    return v;
  };
  std::vector<data::DataSample> samples(12);
  for (int i = 0; i < 12; ++i) {
    samples[static_cast<size_t>(i)].id = static_cast<uint64_t>(i);
    samples[static_cast<size_t>(i)].pose.x = i * 25.0;
  }
  std::vector<const data::DataSample*> ptrs;
  for (auto& s : samples) ptrs.push_back(&s);
  DescriptorDatabase db = db_build(ptrs, embed);
  EvalOptions opts;
  opts.ns = {1, 5};
  EvalReport rep = evaluate(ptrs, db, embed, opts);
  CHECK(rep.recall[0] == 1.0);
  CHECK(rep.max_f1 == doctest::Approx(1.0));
  CHECK(rep.queries == 12);

  // Rebuild determinism: identical embedder + samples -> identical bytes.
  DescriptorDatabase db2 = db_build(ptrs, embed);
  REQUIRE(db2.descriptors.size() == db.descriptors.size());
  for (size_t i = 0; i < db.descriptors.size(); ++i)
    CHECK(db.descriptors[i] == db2.descriptors[i]);
}

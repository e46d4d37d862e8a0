#include "lcpr/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <shared_mutex>

namespace lcpr::train {

double descriptor_distance(const float* a, const float* b, int dim) {
  double acc = 0.0;
  for (int i = 0; i < dim; ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

std::optional<TripletBatch> mine_triplet(int query_index, const std::vector<int>& candidate_indices,
                                         const std::vector<data::DataSample>& samples,
                                         const DescriptorCache& cache, const MinerConfig& cfg,
                                         Rng& rng) {
  cfg.validate();
  const data::DataSample& q = samples[static_cast<size_t>(query_index)];
  std::vector<int> positives, far_pool;
  for (int idx : candidate_indices) {
    if (idx == query_index) continue;
    double d = data::distance_2d(q.pose, samples[static_cast<size_t>(idx)].pose);
    if (d <= cfg.positive_radius)
      positives.push_back(idx);
    else if (d >= cfg.negative_radius)
      far_pool.push_back(idx);
  }
  if (positives.empty()) return std::nullopt;

  TripletBatch batch;
  batch.query = query_index;
  double best = 0.0;
  for (int idx : positives) {
    double d = descriptor_distance(cache.row(query_index), cache.row(idx), cache.dim);
    if (batch.positive < 0 || d < best) {
      best = d;
      batch.positive = idx;
    }
  }
  if (far_pool.empty()) return batch;  // no negatives available; caller skips

  rng.shuffle(far_pool);
  size_t offset = 0;
  for (int attempt = 0; attempt < 2 && batch.negatives.empty(); ++attempt) {
    for (size_t i = offset; i < std::min(offset + static_cast<size_t>(cfg.n_neg), far_pool.size());
         ++i) {
      int idx = far_pool[i];
      double d = descriptor_distance(cache.row(query_index), cache.row(idx), cache.dim);
      if (d < cfg.margin) batch.negatives.push_back(idx);
    }
    offset += static_cast<size_t>(cfg.n_neg);
    if (offset >= far_pool.size()) break;
  }
  return batch;
}

double triplet_loss(double d_qp, const std::vector<double>& d_qn, double margin) {
  if (d_qn.empty()) throw DataError("triplet loss: empty negative list");
  for (double d : d_qn)
    if (d < 0.0) throw DataError("triplet loss: negative distance");
  if (d_qp < 0.0) throw DataError("triplet loss: negative distance");
  double acc = 0.0;
  for (double d : d_qn) acc += std::max(0.0, d_qp - d + margin);
  return acc / static_cast<double>(d_qn.size());
}

namespace {

struct BatchTensors {
  nd::Tensor<float> views, ranges;
  int count = 0;
};

BatchTensors gather_batch(const TripletBatch& batch, const std::vector<data::DataSample>& samples,
                          const MinerConfig& miner) {
  const data::DataSample& q = samples[static_cast<size_t>(batch.query)];
  const data::DataSample& p = samples[static_cast<size_t>(batch.positive)];
  if (data::distance_2d(q.pose, p.pose) > miner.positive_radius)
    throw DataError("batch: positive violates the geometric rule");
  std::vector<const data::DataSample*> list = {&q, &p};
  for (int n : batch.negatives) {
    const data::DataSample& s = samples[static_cast<size_t>(n)];
    if (data::distance_2d(q.pose, s.pose) < miner.negative_radius)
      throw DataError("batch: negative violates the geometric rule");
    list.push_back(&s);
  }
  BatchTensors out;
  out.views = data::stack_views(list);
  out.ranges = data::stack_ranges(list);
  out.count = static_cast<int>(list.size());
  return out;
}

double run_graph(const net::ModelConfig& cfg, nd::ParamStore<float>& params,
                 const TripletBatch& batch, const std::vector<data::DataSample>& samples,
                 const MinerConfig& miner, bool training, AdamState* adam, double lr) {
  if (batch.negatives.empty()) throw DataError("train step: batch has no negatives");
  BatchTensors tensors = gather_batch(batch, samples, miner);
  nd::Tape<float> tape;
  tape.grad_enabled = training;
  net::GraphCtx<float> ctx{tape, params, training};
  nd::Val desc = net::model_forward(ctx, tape.constant(std::move(tensors.views)),
                                    tape.constant(std::move(tensors.ranges)), cfg);
  nd::Val loss = triplet_loss_graph(tape, desc, static_cast<int>(batch.negatives.size()),
                                    miner.margin);
  double loss_value = tape.val(loss).data[0];
  if (!training) return loss_value;

  auto grads = tape.backward(loss);
  if (!std::isfinite(loss_value)) {
    for (const auto& [name, val] : ctx.bound())
      if (grads[static_cast<size_t>(val.id)] && !grads[static_cast<size_t>(val.id)]->all_finite())
        throw NumericError("train step: non-finite loss (parameter " + name + ")");
    throw NumericError("train step: non-finite loss");
  }

  // ADAM update; exclusive over the store.
  std::unique_lock lock(params.mutex());
  adam->step += 1;
  double t = static_cast<double>(adam->step);
  const OptimConfig defaults;  // beta/eps defaults shared with the config
  (void)defaults;
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  for (const auto& [name, val] : ctx.bound()) {
    if (!params.trainable(name)) continue;
    auto& slot = grads[static_cast<size_t>(val.id)];
    if (!slot) continue;
    const nd::Tensor<float>& g = *slot;
    if (!g.all_finite()) throw NumericError("train step: non-finite gradient (parameter " + name + ")");
    auto [it, fresh] = adam->moments.try_emplace(name, nd::Tensor<float>(g.shape),
                                                 nd::Tensor<float>(g.shape));
    nd::Tensor<float>& m = it->second.first;
    nd::Tensor<float>& v = it->second.second;
    nd::Tensor<float>& theta = params.get(name);
    double bc1 = 1.0 - std::pow(beta1, t);
    double bc2 = 1.0 - std::pow(beta2, t);
    for (size_t i = 0; i < g.data.size(); ++i) {
      double gi = g.data[i];
      double mi = beta1 * m.data[i] + (1.0 - beta1) * gi;
      double vi = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
      m.data[i] = static_cast<float>(mi);
      v.data[i] = static_cast<float>(vi);
      double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
      theta.data[i] = static_cast<float>(theta.data[i] - update);
    }
  }
  return loss_value;
}

}  // namespace

double train_step(const net::ModelConfig& cfg, nd::ParamStore<float>& params, AdamState& adam,
                  const TripletBatch& batch, const std::vector<data::DataSample>& samples,
                  const MinerConfig& miner, double lr) {
  return run_graph(cfg, params, batch, samples, miner, true, &adam, lr);
}

double compute_batch_loss(const net::ModelConfig& cfg, nd::ParamStore<float>& params,
                          const TripletBatch& batch, const std::vector<data::DataSample>& samples,
                          const MinerConfig& miner) {
  return run_graph(cfg, params, batch, samples, miner, false, nullptr, 0.0);
}

namespace {

// Validation Recall@1 straight from the cache: nearest database row by
// descriptor, matched by the positive-radius rule.
double cache_recall1(const DescriptorCache& cache, const std::vector<int>& db,
                     const std::vector<int>& queries,
                     const std::vector<data::DataSample>& samples, double radius) {
  if (queries.empty()) return 0.0;
  int hits = 0;
  for (int qi : queries) {
    int best = -1;
    double best_d = 0.0;
    uint64_t best_id = 0;
    for (int di : db) {
      double d = descriptor_distance(cache.row(qi), cache.row(di), cache.dim);
      uint64_t id = samples[static_cast<size_t>(di)].id;
      if (best < 0 || d < best_d || (d == best_d && id < best_id)) {
        best = di;
        best_d = d;
        best_id = id;
      }
    }
    if (data::distance_2d(samples[static_cast<size_t>(qi)].pose,
                          samples[static_cast<size_t>(best)].pose) <= radius)
      ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

}  // namespace

TrainResult train_loop(const data::Dataset& ds, const net::ModelConfig& cfg,
                       nd::ParamStore<float>& params, const MinerConfig& miner,
                       const OptimConfig& optim, const TrainOptions& opts) {
  miner.validate();
  if (ds.split.train.empty()) throw DataError("train: empty training query set");
  if (optim.epochs < 0) throw DataError("train: negative epoch count");

  auto to_indices = [&](const std::vector<uint64_t>& ids) {
    std::vector<int> out;
    for (uint64_t id : ids) {
      int idx = ds.index_of(id);
      if (idx < 0) throw DataError("train: split id " + std::to_string(id) + " not in dataset");
      out.push_back(idx);
    }
    return out;
  };
  std::vector<int> db = to_indices(ds.split.database);
  std::vector<int> train_q = to_indices(ds.split.train);
  std::vector<int> val_q = to_indices(ds.split.val);

  std::ofstream metrics;
  if (!opts.metrics_path.empty()) {
    metrics.open(opts.metrics_path, std::ios::app);
    if (!metrics) throw DataError("train: cannot open metrics log " + opts.metrics_path);
  }

  DescriptorCache cache;
  cache.dim = cfg.descriptor_dim();
  auto refresh_cache = [&]() {
    std::vector<const data::DataSample*> all;
    for (const auto& s : ds.samples) all.push_back(&s);
    nd::Tensor<float> d = batch_descriptors(params, cfg, all);
    cache.rows = d.data;
  };

  TrainResult result;
  refresh_cache();
  result.initial_val_recall1 =
      cache_recall1(cache, db, val_q, ds.samples, miner.positive_radius);
  double last_val = result.initial_val_recall1;
  result.best_val_recall1 = last_val;
  result.best_epoch = -1;
  if (!opts.checkpoint_path.empty()) nd::save_checkpoint(params, opts.checkpoint_path);

  AdamState adam;
  Rng rng(optim.seed);
  for (int epoch = 0; epoch < optim.epochs; ++epoch) {
    double lr = scheduled_lr(optim, epoch);
    std::vector<int> order = train_q;
    rng.shuffle(order);
    double loss_sum = 0.0;
    int step = 0;
    for (int qi : order) {
      auto batch = mine_triplet(qi, db, ds.samples, cache, miner, rng);
      double loss = 0.0;
      if (!batch) {
        ++result.skipped_no_positive;
        if (opts.verbose)
          std::fprintf(stderr, "epoch %d: query %llu skipped (no geometric positive)\n", epoch,
                       static_cast<unsigned long long>(ds.samples[static_cast<size_t>(qi)].id));
      } else if (batch->negatives.empty()) {
        ++result.skipped_no_negative;
      } else {
        loss = train_step(cfg, params, adam, *batch, ds.samples, miner, lr);
      }
      loss_sum += loss;
      if (metrics.is_open())
        metrics << epoch << "," << step << "," << loss << "," << lr << "," << last_val << "\n";
      ++step;
    }
    double epoch_loss = step > 0 ? loss_sum / step : 0.0;
    result.epoch_loss.push_back(epoch_loss);

    refresh_cache();
    last_val = cache_recall1(cache, db, val_q, ds.samples, miner.positive_radius);
    result.val_recall1.push_back(last_val);
    result.epochs_run = epoch + 1;
    if (opts.verbose)
      std::fprintf(stderr, "epoch %d: loss %.4f lr %.2e val recall@1 %.3f\n", epoch, epoch_loss,
                   lr, last_val);
    if (last_val >= result.best_val_recall1) {
      result.best_val_recall1 = last_val;
      result.best_epoch = epoch;
      if (!opts.checkpoint_path.empty()) nd::save_checkpoint(params, opts.checkpoint_path);
    }
    if (optim.early_stop_recall > 0.0 && last_val >= optim.early_stop_recall) break;
  }
  if (metrics.is_open()) metrics.flush();
  return result;
}

}  // namespace lcpr::train

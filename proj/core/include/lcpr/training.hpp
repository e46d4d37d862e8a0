#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lcpr/pipeline.hpp"

namespace lcpr::train {

struct MinerConfig {
  double positive_radius = 9.0;
  double negative_radius = 18.0;
  int n_neg = 6;
  double margin = 0.5;

  void validate() const {
    if (negative_radius <= positive_radius)
      throw DataError("miner: negative radius must exceed positive radius");
    if (n_neg < 1) throw DataError("miner: need at least one negative");
  }
};

struct OptimConfig {
  double lr = 1e-5;
  double decay = 0.8;
  int decay_every = 10;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int epochs = 30;
  double early_stop_recall = -1.0;  // stop once val Recall@1 reaches this; <0 disables
  uint64_t seed = 1;
};

inline double scheduled_lr(const OptimConfig& cfg, int epoch) {
  if (cfg.lr <= 0.0) throw DataError("optim: learning rate must be positive");
  return cfg.lr * std::pow(cfg.decay, epoch / cfg.decay_every);
}

// Indices into a flat sample table.
struct TripletBatch {
  int query = -1;
  int positive = -1;
  std::vector<int> negatives;
};

// Cached eval-mode descriptors aligned with the sample table.
struct DescriptorCache {
  int dim = 0;
  std::vector<float> rows;
  const float* row(int i) const { return rows.data() + static_cast<size_t>(i) * dim; }
};

double descriptor_distance(const float* a, const float* b, int dim);

// Hardest positive (smallest descriptor distance among samples within the
// positive radius), negatives drawn uniformly without replacement from the
// far pool then filtered to d < margin; one resample on an empty filter.
// nullopt when no geometric positive exists (sample skipped).
std::optional<TripletBatch> mine_triplet(int query_index, const std::vector<int>& candidate_indices,
                                         const std::vector<data::DataSample>& samples,
                                         const DescriptorCache& cache, const MinerConfig& cfg,
                                         Rng& rng);

// L = (1/N) sum_i [d_qp - d_qn_i + m]_+ over the retained negatives.
double triplet_loss(double d_qp, const std::vector<double>& d_qn, double margin);

// The same loss as a differentiable graph over a [2+n, D] descriptor batch
// ordered (query, positive, negatives...).
template <typename T>
nd::Val triplet_loss_graph(nd::Tape<T>& t, nd::Val descriptors, int n_neg, double margin) {
  auto dist = [&](nd::Val a, nd::Val b) {
    nd::Val d = nd::sub(t, a, b);
    return nd::sqrt_op(t, nd::add_scalar(t, nd::sum_all(t, nd::mul(t, d, d)), 1e-12));
  };
  nd::Val q = nd::slice_rows(t, descriptors, 0, 1);
  nd::Val p = nd::slice_rows(t, descriptors, 1, 1);
  nd::Val dqp = dist(q, p);
  nd::Val acc;
  for (int i = 0; i < n_neg; ++i) {
    nd::Val n = nd::slice_rows(t, descriptors, 2 + i, 1);
    nd::Val hinge = nd::relu(t, nd::add_scalar(t, nd::sub(t, dqp, dist(q, n)), margin));
    acc = acc.valid() ? nd::add(t, acc, hinge) : hinge;
  }
  if (!acc.valid()) throw DataError("triplet loss: empty negative list");
  return nd::scale(t, acc, 1.0 / n_neg);
}

struct AdamState {
  std::map<std::string, std::pair<nd::Tensor<float>, nd::Tensor<float>>> moments;
  int64_t step = 0;
};

// One optimizer step over a mined batch; returns the batch loss. Throws
// NumericError (naming the offending parameter) on non-finite values.
double train_step(const net::ModelConfig& cfg, nd::ParamStore<float>& params, AdamState& adam,
                  const TripletBatch& batch, const std::vector<data::DataSample>& samples,
                  const MinerConfig& miner, double lr);

// Forward-only batch loss (no update), for invariance checks.
double compute_batch_loss(const net::ModelConfig& cfg, nd::ParamStore<float>& params,
                          const TripletBatch& batch, const std::vector<data::DataSample>& samples,
                          const MinerConfig& miner);

struct TrainOptions {
  std::string checkpoint_path;  // best-validation weights; empty = don't save
  std::string metrics_path;     // append-only "epoch,step,loss,lr,recall1_val"
  bool verbose = false;
};

struct TrainResult {
  int epochs_run = 0;
  std::vector<double> epoch_loss;  // skipped steps contribute zero
  std::vector<double> val_recall1;
  double initial_val_recall1 = 0;
  double best_val_recall1 = 0;
  int best_epoch = -1;
  int skipped_no_positive = 0;
  int skipped_no_negative = 0;
};

TrainResult train_loop(const data::Dataset& ds, const net::ModelConfig& cfg,
                       nd::ParamStore<float>& params, const MinerConfig& miner,
                       const OptimConfig& optim, const TrainOptions& opts);

}  // namespace lcpr::train

#pragma once

#include "lcpr/dataset.hpp"
#include "lcpr/model.hpp"
#include "lcpr/retrieval.hpp"

namespace lcpr {

// Embedder over frozen weights; the store must outlive the closure.
inline ret::Embedder make_embedder(nd::ParamStore<float>& params, const net::ModelConfig& cfg) {
  return [&params, cfg](const data::DataSample& s) {
    nd::Tensor<float> views = data::stack_views({&s});
    nd::Tensor<float> range = data::stack_ranges({&s});
    nd::Tensor<float> d = net::compute_descriptors(params, cfg, views, range);
    return std::vector<float>(d.data.begin(), d.data.end());
  };
}

// Eval-mode descriptors for many samples, chunked to bound activation memory.
// Results are independent of the chunk size (eval-mode batchnorm).
inline nd::Tensor<float> batch_descriptors(nd::ParamStore<float>& params,
                                           const net::ModelConfig& cfg,
                                           const std::vector<const data::DataSample*>& samples,
                                           int chunk = 8) {
  int n = static_cast<int>(samples.size());
  nd::Tensor<float> out({n, cfg.descriptor_dim()});
  for (int lo = 0; lo < n; lo += chunk) {
    int hi = std::min(n, lo + chunk);
    std::vector<const data::DataSample*> part(samples.begin() + lo, samples.begin() + hi);
    nd::Tensor<float> views = data::stack_views(part);
    nd::Tensor<float> range = data::stack_ranges(part);
    nd::Tensor<float> d = net::compute_descriptors(params, cfg, views, range);
    std::copy(d.data.begin(), d.data.end(),
              out.data.begin() + static_cast<size_t>(lo) * cfg.descriptor_dim());
  }
  return out;
}

}  // namespace lcpr

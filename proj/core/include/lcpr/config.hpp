#pragma once

#include <string>

#include "lcpr/kv.hpp"
#include "lcpr/model.hpp"
#include "lcpr/synth.hpp"
#include "lcpr/training.hpp"

namespace lcpr {

// Flat key=value experiment description; round-trips exactly and rejects
// unknown keys. Command-line flags override individual entries.
struct ExperimentConfig {
  uint64_t seed = 7;
  net::ModelConfig model = net::desk_config();
  train::MinerConfig miner;
  train::OptimConfig optim;
  synth::GenerateConfig synth;
  std::string dataset_dir = "dataset";
  std::string out_dir = "out";

  static ExperimentConfig load(const std::string& path);
  void save(const std::string& path) const;

  kv::Map to_kv() const;
  static ExperimentConfig from_kv(const kv::Map& m, const std::string& origin);
};

}  // namespace lcpr

#include "lcpr/config.hpp"

#include <sstream>

namespace lcpr {

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::vector<int> split_ints(const std::string& s, const std::string& key) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    try {
      size_t pos = 0;
      out.push_back(std::stoi(tok, &pos));
      if (pos != tok.size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw DataError("config: key '" + key + "': '" + tok + "' is not an integer");
    }
  }
  return out;
}

net::Variant parse_variant(const std::string& s) {
  if (s == "fused") return net::Variant::kFused;
  if (s == "image") return net::Variant::kImageOnly;
  if (s == "lidar") return net::Variant::kLidarOnly;
  throw DataError("config: unknown variant '" + s + "' (fused|image|lidar)");
}

}  // namespace

kv::Map ExperimentConfig::to_kv() const {
  kv::Map m;
  m["seed"] = std::to_string(seed);
  m["dataset_dir"] = dataset_dir;
  m["out_dir"] = out_dir;

  m["model.variant"] = net::variant_name(model.variant);
  m["model.cameras"] = std::to_string(model.cameras);
  m["model.image_h"] = std::to_string(model.image_h);
  m["model.image_w"] = std::to_string(model.image_w);
  m["model.range_h"] = std::to_string(model.range_h);
  m["model.range_w"] = std::to_string(model.range_w);
  m["model.stem_channels"] = std::to_string(model.image_branch.stem_channels);
  m["model.stage_channels"] = join_ints(model.image_branch.stage_channels);
  m["model.units_per_stage"] = std::to_string(model.image_branch.units_per_stage);
  m["model.fusion_stages"] = join_ints(model.fusion_stages);
  m["model.heads"] = std::to_string(model.heads);
  m["model.clusters"] = std::to_string(model.clusters);
  m["model.d_sub"] = std::to_string(model.d_sub);

  m["miner.positive_radius"] = kv::format_double(miner.positive_radius);
  m["miner.negative_radius"] = kv::format_double(miner.negative_radius);
  m["miner.n_neg"] = std::to_string(miner.n_neg);
  m["miner.margin"] = kv::format_double(miner.margin);

  m["optim.lr"] = kv::format_double(optim.lr);
  m["optim.decay"] = kv::format_double(optim.decay);
  m["optim.decay_every"] = std::to_string(optim.decay_every);
  m["optim.epochs"] = std::to_string(optim.epochs);
  m["optim.early_stop_recall"] = kv::format_double(optim.early_stop_recall);

  m["synth.landmarks"] = std::to_string(synth.landmarks);
  m["synth.places"] = std::to_string(synth.route.places);
  m["synth.traversals"] = std::to_string(synth.route.traversals);
  m["synth.spacing"] = kv::format_double(synth.route.spacing);
  m["synth.lateral_jitter"] = kv::format_double(synth.route.lateral_jitter);
  m["synth.yaw_jitter_deg"] = kv::format_double(synth.route.yaw_jitter_deg);
  m["synth.desk_scale"] = synth.desk_scale ? "1" : "0";
  m["synth.ratio_train"] = kv::format_double(synth.ratios.train);
  m["synth.ratio_val"] = kv::format_double(synth.ratios.val);
  m["synth.ratio_test"] = kv::format_double(synth.ratios.test);
  return m;
}

ExperimentConfig ExperimentConfig::from_kv(const kv::Map& m, const std::string& origin) {
  ExperimentConfig cfg;
  kv::Map known = cfg.to_kv();
  for (const auto& [key, value] : m)
    if (known.find(key) == known.end())
      throw DataError(origin + ": unknown key '" + key + "'");

  auto geti = [&](const char* key, int dflt) {
    auto it = m.find(key);
    return it == m.end() ? dflt : static_cast<int>(kv::to_int(m, key));
  };
  auto getd = [&](const char* key, double dflt) {
    auto it = m.find(key);
    return it == m.end() ? dflt : kv::to_double(m, key);
  };
  auto gets = [&](const char* key, std::string dflt) {
    auto it = m.find(key);
    return it == m.end() ? dflt : it->second;
  };

  cfg.seed = static_cast<uint64_t>(geti("seed", static_cast<int>(cfg.seed)));
  cfg.dataset_dir = gets("dataset_dir", cfg.dataset_dir);
  cfg.out_dir = gets("out_dir", cfg.out_dir);

  cfg.model.variant = parse_variant(gets("model.variant", "fused"));
  cfg.model.cameras = geti("model.cameras", cfg.model.cameras);
  cfg.model.image_h = geti("model.image_h", cfg.model.image_h);
  cfg.model.image_w = geti("model.image_w", cfg.model.image_w);
  cfg.model.range_h = geti("model.range_h", cfg.model.range_h);
  cfg.model.range_w = geti("model.range_w", cfg.model.range_w);
  int stem = geti("model.stem_channels", cfg.model.image_branch.stem_channels);
  std::vector<int> stages = cfg.model.image_branch.stage_channels;
  if (auto it = m.find("model.stage_channels"); it != m.end())
    stages = split_ints(it->second, "model.stage_channels");
  int units = geti("model.units_per_stage", cfg.model.image_branch.units_per_stage);
  cfg.model.image_branch = net::BranchConfig{3, stem, stages, units};
  cfg.model.lidar_branch = net::BranchConfig{1, stem, stages, units};
  if (auto it = m.find("model.fusion_stages"); it != m.end())
    cfg.model.fusion_stages = split_ints(it->second, "model.fusion_stages");
  cfg.model.heads = geti("model.heads", cfg.model.heads);
  cfg.model.clusters = geti("model.clusters", cfg.model.clusters);
  cfg.model.d_sub = geti("model.d_sub", cfg.model.d_sub);

  cfg.miner.positive_radius = getd("miner.positive_radius", cfg.miner.positive_radius);
  cfg.miner.negative_radius = getd("miner.negative_radius", cfg.miner.negative_radius);
  cfg.miner.n_neg = geti("miner.n_neg", cfg.miner.n_neg);
  cfg.miner.margin = getd("miner.margin", cfg.miner.margin);

  cfg.optim.lr = getd("optim.lr", cfg.optim.lr);
  cfg.optim.decay = getd("optim.decay", cfg.optim.decay);
  cfg.optim.decay_every = geti("optim.decay_every", cfg.optim.decay_every);
  cfg.optim.epochs = geti("optim.epochs", cfg.optim.epochs);
  cfg.optim.early_stop_recall = getd("optim.early_stop_recall", cfg.optim.early_stop_recall);
  cfg.optim.seed = cfg.seed;

  cfg.synth.seed = cfg.seed;
  cfg.synth.landmarks = geti("synth.landmarks", cfg.synth.landmarks);
  cfg.synth.route.places = geti("synth.places", cfg.synth.route.places);
  cfg.synth.route.traversals = geti("synth.traversals", cfg.synth.route.traversals);
  cfg.synth.route.spacing = getd("synth.spacing", cfg.synth.route.spacing);
  cfg.synth.route.lateral_jitter = getd("synth.lateral_jitter", cfg.synth.route.lateral_jitter);
  cfg.synth.route.yaw_jitter_deg = getd("synth.yaw_jitter_deg", cfg.synth.route.yaw_jitter_deg);
  cfg.synth.desk_scale = geti("synth.desk_scale", cfg.synth.desk_scale ? 1 : 0) != 0;
  cfg.synth.ratios.train = getd("synth.ratio_train", cfg.synth.ratios.train);
  cfg.synth.ratios.val = getd("synth.ratio_val", cfg.synth.ratios.val);
  cfg.synth.ratios.test = getd("synth.ratio_test", cfg.synth.ratios.test);
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  return from_kv(kv::load(path), path);
}

void ExperimentConfig::save(const std::string& path) const { kv::save(to_kv(), path); }

}  // namespace lcpr

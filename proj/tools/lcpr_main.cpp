// lcpr: synthetic-world place-recognition experiments from the command line.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lcpr/config.hpp"
#include "lcpr/gradcheck.hpp"
#include "lcpr/pipeline.hpp"
#include "lcpr/training.hpp"

namespace fs = std::filesystem;
using namespace lcpr;

namespace {

struct CommonFlags {
  std::string config_path;
  ExperimentConfig cfg;

  void load_config() {
    if (!config_path.empty()) cfg = ExperimentConfig::load(config_path);
  }
};

std::vector<const data::DataSample*> select_queries(const data::Dataset& ds,
                                                    const std::string& which) {
  std::vector<uint64_t> ids;
  if (which == "test")
    ids = ds.split.test;
  else if (which == "val")
    ids = ds.split.val;
  else if (which == "train")
    ids = ds.split.train;
  else if (which == "all")
    ids = ds.split.all_queries();
  else
    throw UsageError("unknown query set '" + which + "' (test|val|train|all)");
  std::vector<const data::DataSample*> out;
  for (uint64_t id : ids) out.push_back(&ds.by_id(id));
  return out;
}

std::vector<const data::DataSample*> database_samples(const data::Dataset& ds) {
  std::vector<const data::DataSample*> out;
  for (uint64_t id : ds.split.database) out.push_back(&ds.by_id(id));
  return out;
}

int run_synth(CommonFlags& common, const std::string& out_dir) {
  common.cfg.synth.seed = common.cfg.seed;
  data::Dataset ds = synth::generate_dataset(common.cfg.synth);
  synth::save_dataset(ds, common.cfg.synth, out_dir);
  std::printf("dataset: %zu samples (%zu db, %zu train, %zu val, %zu test) -> %s\n",
              ds.samples.size(), ds.split.database.size(), ds.split.train.size(),
              ds.split.val.size(), ds.split.test.size(), out_dir.c_str());
  return 0;
}

int run_project(const std::string& cloud_path, const std::string& out_path,
                proj::ProjectionParams params) {
  proj::PointCloud cloud = proj::load_cloud(cloud_path);
  proj::RangeImage ri = proj::spherical_project(cloud, params);
  proj::save_range_image(ri, out_path);
  int occupied = 0;
  for (float v : ri.grid.data)
    if (v > 0.0f) ++occupied;
  std::printf("projected %zu points into %dx%d (%d occupied cells) -> %s\n", cloud.points.size(),
              params.h, params.w, occupied, out_path.c_str());
  return 0;
}

int run_train(CommonFlags& common, bool quiet) {
  ExperimentConfig& cfg = common.cfg;
  data::Dataset ds = data::load_dataset(cfg.dataset_dir);
  nd::ParamStore<float> params = net::init_params(cfg.model, cfg.seed);
  fs::create_directories(cfg.out_dir);
  cfg.save(cfg.out_dir + "/config.cfg");
  train::TrainOptions opts;
  opts.checkpoint_path = cfg.out_dir + "/checkpoint.bin";
  opts.metrics_path = cfg.out_dir + "/metrics.log";
  opts.verbose = !quiet;
  cfg.optim.seed = cfg.seed;
  train::TrainResult res = train_loop(ds, cfg.model, params, cfg.miner, cfg.optim, opts);
  std::printf("trained %d epoch(s); best val recall@1 %.4f (epoch %d); checkpoint %s\n",
              res.epochs_run, res.best_val_recall1, res.best_epoch, opts.checkpoint_path.c_str());
  return 0;
}

int run_build_db(CommonFlags& common, const std::string& checkpoint, const std::string& out_db,
                 const std::string& out_poses) {
  ExperimentConfig& cfg = common.cfg;
  data::Dataset ds = data::load_dataset(cfg.dataset_dir);
  nd::ParamStore<float> params = net::params_from_checkpoint(cfg.model, checkpoint);
  ret::DescriptorDatabase db =
      ret::db_build(database_samples(ds), make_embedder(params, cfg.model));
  ret::save_database(db, out_db, out_poses);
  std::printf("database: %zu records x %d dims -> %s\n", db.size(), db.dim, out_db.c_str());
  return 0;
}

int run_query(CommonFlags& common, const std::string& checkpoint, const std::string& db_path,
              const std::string& pose_path, uint64_t sample_id, int k) {
  ExperimentConfig& cfg = common.cfg;
  data::Dataset ds = data::load_dataset(cfg.dataset_dir);
  nd::ParamStore<float> params = net::params_from_checkpoint(cfg.model, checkpoint);
  ret::DescriptorDatabase db = ret::load_database(db_path, pose_path);
  std::vector<float> d = make_embedder(params, cfg.model)(ds.by_id(sample_id));
  auto topk = ret::knn_query(db, d.data(), k);
  std::printf("rank,id,distance\n");
  for (size_t i = 0; i < topk.size(); ++i)
    std::printf("%zu,%llu,%.6f\n", i + 1, static_cast<unsigned long long>(topk[i].id),
                topk[i].distance);
  return 0;
}

int run_eval(CommonFlags& common, const std::string& checkpoint, const std::string& queries_name,
             const std::string& degrade_spec, bool yaw, std::vector<int> recall_ns, bool timing,
             const std::string& report_path, const std::string& topk_path) {
  ExperimentConfig& cfg = common.cfg;
  data::Dataset ds = data::load_dataset(cfg.dataset_dir);
  nd::ParamStore<float> params = net::params_from_checkpoint(cfg.model, checkpoint);
  ret::Embedder embed = make_embedder(params, cfg.model);
  ret::DescriptorDatabase db = ret::db_build(database_samples(ds), embed);
  std::vector<const data::DataSample*> queries = select_queries(ds, queries_name);

  if (yaw) {
    auto results = ret::yaw_experiment(queries, db, embed, ds.lidar);
    std::printf("angle_deg,recall@1\n");
    for (const auto& r : results) std::printf("%.1f,%.6f\n", r.angle_deg, r.recall1);
    if (!report_path.empty()) {
      std::ofstream os(report_path);
      os << "angle_deg,recall@1\n";
      for (const auto& r : results) os << r.angle_deg << "," << r.recall1 << "\n";
    }
    return 0;
  }

  std::vector<data::DataSample> degraded;
  if (!degrade_spec.empty()) {
    ret::DegradationSpec spec = ret::DegradationSpec::parse(degrade_spec);
    degraded.reserve(queries.size());
    for (const data::DataSample* q : queries) degraded.push_back(ret::degrade(*q, spec));
    queries.clear();
    for (const auto& q : degraded) queries.push_back(&q);
  }

  ret::EvalOptions opts;
  if (!recall_ns.empty()) opts.ns = recall_ns;
  opts.timing = timing;
  ret::EvalReport rep = ret::evaluate(queries, db, embed, opts);
  std::printf("queries=%d\n", rep.queries);
  for (size_t i = 0; i < rep.ns.size(); ++i)
    std::printf("recall@%d=%.6f\n", rep.ns[i], rep.recall[i]);
  std::printf("max_f1=%.6f\n", rep.max_f1);
  if (timing) {
    std::printf("mean_descriptor_ms=%.3f\n", rep.mean_embed_ms);
    std::printf("mean_search_ms=%.3f\n", rep.mean_search_ms);
  }
  if (!report_path.empty()) ret::write_report(rep, report_path, topk_path);
  return 0;
}

int run_ablate(CommonFlags& common, const std::string& variant, bool quiet) {
  ExperimentConfig& cfg = common.cfg;
  if (variant == "image")
    cfg.model.variant = net::Variant::kImageOnly;
  else if (variant == "lidar")
    cfg.model.variant = net::Variant::kLidarOnly;
  else
    throw UsageError("ablate: variant must be image or lidar");
  cfg.out_dir += "/" + variant;
  int rc = run_train(common, quiet);
  if (rc != 0) return rc;
  return run_eval(common, cfg.out_dir + "/checkpoint.bin", "test", "", false, {1, 5, 10, 20},
                  false, cfg.out_dir + "/report.txt", cfg.out_dir + "/topk.csv");
}

int run_gradcheck(uint64_t seed) {
  bool ok = true;
  for (const auto& rep : nd::check_all_primitives(seed)) {
    std::printf("%-24s max_rel_err=%.3e %s\n", rep.name.c_str(), rep.max_rel_err,
                rep.pass ? "ok" : "FAIL");
    ok = ok && rep.pass;
  }
  if (!ok) throw NumericError("gradient check failed");
  std::printf("all primitive gradients verified at 1e-4\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LCPR multimodal place recognition (synthetic-world experiments)"};
  app.set_help_all_flag("--help-all", "Print help for every subcommand");
  app.require_subcommand(1);

  CommonFlags common;
  app.add_option("--config", common.config_path, "Experiment config file (key=value)");
  uint64_t seed_flag = 0;
  bool seed_set = false;
  app.add_option("--seed", seed_flag, "Override the experiment seed")
      ->each([&](const std::string&) { seed_set = true; });

  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::string synth_out = "dataset";
  int synth_places = -1, synth_traversals = -1, synth_landmarks = -1;
  synth_cmd->add_option("--out", synth_out, "Output dataset directory");
  synth_cmd->add_option("--places", synth_places, "Distinct places along the route");
  synth_cmd->add_option("--traversals", synth_traversals, "Traversals of the route");
  synth_cmd->add_option("--landmarks", synth_landmarks, "Landmark count");

  auto* project_cmd = app.add_subcommand("project", "Project a point cloud to a range image");
  std::string project_cloud, project_out = "range.ri";
  proj::ProjectionParams project_params{32, 1056, 10.0, 30.0};
  project_cmd->add_option("--cloud", project_cloud, "Input cloud (raw f32 xyzi)")->required();
  project_cmd->add_option("--out", project_out, "Output range-image file");
  project_cmd->add_option("--height", project_params.h, "Range image rows");
  project_cmd->add_option("--width", project_params.w, "Range image columns");
  project_cmd->add_option("--fov-up", project_params.fov_up_deg, "Vertical FOV up (degrees)");
  project_cmd->add_option("--fov-down", project_params.fov_down_deg,
                          "Vertical FOV down (degrees)");

  auto* train_cmd = app.add_subcommand("train", "Train a model on a dataset");
  std::string train_dataset, train_out, train_variant;
  int train_epochs = -1;
  double train_lr = -1.0, train_early = -2.0;
  bool train_quiet = false;
  train_cmd->add_option("--dataset", train_dataset, "Dataset directory");
  train_cmd->add_option("--out", train_out, "Output directory (checkpoint, metrics)");
  train_cmd->add_option("--epochs", train_epochs, "Training epochs");
  train_cmd->add_option("--lr", train_lr, "Initial learning rate");
  train_cmd->add_option("--early-stop-recall", train_early,
                        "Stop once val recall@1 reaches this value");
  train_cmd->add_option("--variant", train_variant, "Model variant: fused|image|lidar");
  train_cmd->add_flag("--quiet", train_quiet, "Suppress per-epoch progress");

  auto* db_cmd = app.add_subcommand("build-db", "Embed the database split into a descriptor file");
  std::string db_dataset, db_checkpoint, db_out = "db.bin", db_poses = "db.poses", db_variant;
  db_cmd->add_option("--dataset", db_dataset, "Dataset directory");
  db_cmd->add_option("--checkpoint", db_checkpoint, "Model checkpoint")->required();
  db_cmd->add_option("--out-db", db_out, "Output descriptor database");
  db_cmd->add_option("--out-poses", db_poses, "Output pose sidecar");
  db_cmd->add_option("--variant", db_variant, "Model variant: fused|image|lidar");

  auto* query_cmd = app.add_subcommand("query", "Retrieve the top-k records for one sample");
  std::string q_dataset, q_checkpoint, q_db = "db.bin", q_poses = "db.poses";
  uint64_t q_sample = 0;
  int q_k = 20;
  query_cmd->add_option("--dataset", q_dataset, "Dataset directory");
  query_cmd->add_option("--checkpoint", q_checkpoint, "Model checkpoint")->required();
  query_cmd->add_option("--db", q_db, "Descriptor database file");
  query_cmd->add_option("--poses", q_poses, "Pose sidecar file");
  query_cmd->add_option("--sample-id", q_sample, "Query sample id")->required();
  query_cmd->add_option("-k,--k", q_k, "Neighbors to retrieve");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate retrieval metrics");
  std::string e_dataset, e_checkpoint, e_queries = "test", e_degrade, e_report, e_topk, e_variant;
  std::vector<int> e_ns;
  bool e_yaw = false, e_timing = false;
  eval_cmd->add_option("--dataset", e_dataset, "Dataset directory");
  eval_cmd->add_option("--checkpoint", e_checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--queries", e_queries, "Query set: test|val|train|all");
  eval_cmd->add_option("--degrade", e_degrade,
                       "Degradation: camera:<idx> | range | brightness:<factor>");
  eval_cmd->add_flag("--yaw", e_yaw, "Yaw-rotation experiment (recall@1 per angle)");
  eval_cmd->add_option("--recall-ns", e_ns, "Recall@N cutoffs (default 1 5 10 20)");
  eval_cmd->add_flag("--timing", e_timing,
                     "Report mean descriptor and search times (100-query warm-up excluded)");
  eval_cmd->add_option("--report", e_report, "Write the key=value summary here");
  eval_cmd->add_option("--topk", e_topk, "Write the per-query top-k dump (CSV) here");
  eval_cmd->add_option("--variant", e_variant, "Model variant: fused|image|lidar");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate a unimodal variant");
  std::string a_dataset, a_out, a_variant;
  int a_epochs = -1;
  double a_lr = -1.0, a_early = -2.0;
  bool a_quiet = false;
  ablate_cmd->add_option("--dataset", a_dataset, "Dataset directory");
  ablate_cmd->add_option("--out", a_out, "Output directory");
  ablate_cmd->add_option("--variant", a_variant, "image|lidar")->required();
  ablate_cmd->add_option("--epochs", a_epochs, "Training epochs");
  ablate_cmd->add_option("--lr", a_lr, "Initial learning rate");
  ablate_cmd->add_option("--early-stop-recall", a_early, "Early-stop threshold");
  ablate_cmd->add_flag("--quiet", a_quiet, "Suppress per-epoch progress");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference checks for all primitives");
  uint64_t grad_seed = 17;
  grad_cmd->add_option("--seed", grad_seed, "Probe seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    common.load_config();
    if (seed_set) common.cfg.seed = seed_flag;

    auto apply_variant = [&](const std::string& v) {
      if (v.empty()) return;
      if (v == "fused")
        common.cfg.model.variant = net::Variant::kFused;
      else if (v == "image")
        common.cfg.model.variant = net::Variant::kImageOnly;
      else if (v == "lidar")
        common.cfg.model.variant = net::Variant::kLidarOnly;
      else
        throw UsageError("unknown variant '" + v + "'");
    };

    if (*synth_cmd) {
      if (synth_places > 0) common.cfg.synth.route.places = synth_places;
      if (synth_traversals > 0) common.cfg.synth.route.traversals = synth_traversals;
      if (synth_landmarks > 0) common.cfg.synth.landmarks = synth_landmarks;
      return run_synth(common, synth_out);
    }
    if (*project_cmd) return run_project(project_cloud, project_out, project_params);
    if (*train_cmd) {
      if (!train_dataset.empty()) common.cfg.dataset_dir = train_dataset;
      if (!train_out.empty()) common.cfg.out_dir = train_out;
      if (train_epochs >= 0) common.cfg.optim.epochs = train_epochs;
      if (train_lr > 0) common.cfg.optim.lr = train_lr;
      if (train_early > -2.0) common.cfg.optim.early_stop_recall = train_early;
      apply_variant(train_variant);
      return run_train(common, train_quiet);
    }
    if (*db_cmd) {
      if (!db_dataset.empty()) common.cfg.dataset_dir = db_dataset;
      apply_variant(db_variant);
      return run_build_db(common, db_checkpoint, db_out, db_poses);
    }
    if (*query_cmd) {
      if (!q_dataset.empty()) common.cfg.dataset_dir = q_dataset;
      return run_query(common, q_checkpoint, q_db, q_poses, q_sample, q_k);
    }
    if (*eval_cmd) {
      if (!e_dataset.empty()) common.cfg.dataset_dir = e_dataset;
      apply_variant(e_variant);
      return run_eval(common, e_checkpoint, e_queries, e_degrade, e_yaw, e_ns, e_timing, e_report,
                      e_topk);
    }
    if (*ablate_cmd) {
      if (!a_dataset.empty()) common.cfg.dataset_dir = a_dataset;
      if (!a_out.empty()) common.cfg.out_dir = a_out;
      if (a_epochs >= 0) common.cfg.optim.epochs = a_epochs;
      if (a_lr > 0) common.cfg.optim.lr = a_lr;
      if (a_early > -2.0) common.cfg.optim.early_stop_recall = a_early;
      return run_ablate(common, a_variant, a_quiet);
    }
    if (*grad_cmd) return run_gradcheck(grad_seed);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}

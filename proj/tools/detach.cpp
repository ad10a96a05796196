// detach: two-stage cross-modal alignment pipeline over synthetic paired
// video/sensor data. Commands: generate, stage1, stage2, probe, analyze,
// export. Exit codes: 0 success, 1 runtime failure, 2 usage/prerequisite.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "detach/config.hpp"
#include "detach/eval.hpp"
#include "detach/io.hpp"
#include "detach/stage1.hpp"
#include "detach/stage2.hpp"
#include "detach/synthdata.hpp"

namespace fs = std::filesystem;
using detach::Tensor;
using json = nlohmann::json;

static constexpr const char* kVersion = "detach-0.1.0";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Cli {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_override;
  int64_t seed_override = -1;
  std::string split = "all";  // export only
};

static detach::config::RunConfig load_config(const Cli& cli) {
  detach::config::RunConfig cfg = detach::config::load(cli.config_path, cli.overrides);
  if (cli.seed_override >= 0) {
    cfg.seed = uint64_t(cli.seed_override);
    cfg.scenario.seed = cfg.seed;
  } else {
    cfg.scenario.seed = cfg.seed;
  }
  if (!cli.out_override.empty()) cfg.out_dir = cli.out_override;
  if (const char* root = std::getenv("DETACH_OUT_ROOT"))
    cfg.out_dir = std::string(root) + "/" + cfg.out_dir;
  return cfg;
}

static void require_artifact(const std::string& path, const std::string& producer) {
  if (!fs::exists(path))
    throw UsageError("missing prerequisite: expected " + path + " (run `detach " + producer +
                     "` first)");
}

static void write_run_json(const detach::config::RunConfig& cfg, const std::string& command,
                           double wall_seconds) {
  json j{{"command", command},
         {"config_hash", detach::config::hash(cfg)},
         {"seed", cfg.seed},
         {"wall_time_seconds", wall_seconds},
         {"version", kVersion}};
  detach::io::write_text_file(cfg.out_dir + "/run.json", j.dump(2) + "\n");
}

static void warn_hash_mismatch(const json& metadata, const detach::config::RunConfig& cfg,
                               const std::string& path) {
  std::string have = metadata.value("config_hash", std::string());
  if (!have.empty() && have != detach::config::hash(cfg))
    std::cerr << "warning: " << path << " was produced with config hash " << have
              << ", current config hashes to " << detach::config::hash(cfg) << "\n";
}

// rebuild the param sets a stage-1 checkpoint stores
static void load_stage1_sets(const detach::config::RunConfig& cfg, const std::string& path,
                             detach::nn::ParamSet<float>* sensor_spatial,
                             detach::nn::ParamSet<float>* video_spatial, json* metadata) {
  detach::io::Checkpoint ck = detach::io::load_checkpoint(path);
  detach::enc::register_sensor_spatial(*sensor_spatial, cfg.arch, cfg.scenario.num_sources);
  sensor_spatial->add("centroids", {cfg.scenario.num_sources, cfg.arch.d});
  detach::enc::register_video_spatial(*video_spatial, cfg.arch, cfg.scenario.num_sources);
  ck.get_params("sensor_spatial", *sensor_spatial);
  ck.get_params("video_spatial", *video_spatial);
  if (metadata) *metadata = ck.metadata;
}

static int cmd_generate(const Cli& cli) {
  auto cfg = load_config(cli);
  auto t0 = std::chrono::steady_clock::now();
  detach::synth::Dataset ds = detach::synth::build_dataset(cfg.scenario, cfg.window, cfg.fractions);
  fs::create_directories(cfg.out_dir);
  detach::synth::save_dataset(cfg.out_dir + "/dataset", ds, detach::config::hash(cfg));
  for (const auto& w : ds.warnings) std::cerr << "warning: " << w << "\n";
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_run_json(cfg, "generate", secs);
  std::cout << "generated " << ds.windows.size() << " windows in " << cfg.out_dir << "/dataset\n";
  return 0;
}

static int cmd_stage1(const Cli& cli) {
  auto cfg = load_config(cli);
  require_artifact(cfg.out_dir + "/dataset/manifest.json", "generate");
  auto t0 = std::chrono::steady_clock::now();
  detach::synth::Dataset ds = detach::synth::load_dataset(cfg.out_dir + "/dataset");
  auto res = detach::stage1::run_stage1<float>(ds, cfg.arch, cfg.stage1, cfg.seed,
                                               cfg.out_dir + "/stage1.ckpt",
                                               detach::config::hash(cfg));
  detach::io::write_text_file(cfg.out_dir + "/stage1_log.csv", detach::stage1::stage1_log_csv(res.log));
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
  if (res.aborted) throw std::runtime_error("stage1 diverged; last checkpoint retained");
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_run_json(cfg, "stage1", secs);
  std::cout << "stage1 done: " << res.log.size() << " epochs, final purity "
            << (res.log.empty() ? 0.0 : res.log.back().purity) << "\n";
  return 0;
}

static int cmd_stage2(const Cli& cli) {
  auto cfg = load_config(cli);
  require_artifact(cfg.out_dir + "/dataset/manifest.json", "generate");
  require_artifact(cfg.out_dir + "/stage1.ckpt", "stage1");
  auto t0 = std::chrono::steady_clock::now();
  detach::synth::Dataset ds = detach::synth::load_dataset(cfg.out_dir + "/dataset");
  detach::nn::ParamSet<float> sensor_spatial, video_spatial;
  json meta;
  load_stage1_sets(cfg, cfg.out_dir + "/stage1.ckpt", &sensor_spatial, &video_spatial, &meta);
  warn_hash_mismatch(meta, cfg, cfg.out_dir + "/stage1.ckpt");
  auto res = detach::stage2::run_stage2<float>(ds, sensor_spatial, video_spatial, cfg.arch,
                                               cfg.stage2, cfg.seed, cfg.out_dir + "/stage2.ckpt",
                                               detach::config::hash(cfg));
  detach::io::write_text_file(cfg.out_dir + "/stage2_log.csv", detach::stage2::stage2_log_csv(res.log));
  detach::io::write_text_file(cfg.out_dir + "/weights_cdf.csv", detach::stage2::weights_cdf_csv(res.cdf));
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
  if (res.aborted) throw std::runtime_error("stage2 diverged; last checkpoint retained");
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_run_json(cfg, "stage2", secs);
  std::cout << "stage2 done: final loss " << (res.log.empty() ? 0.0 : res.log.back().loss) << "\n";
  return 0;
}

struct Stage2Sets {
  detach::nn::ParamSet<float> sensor_spatial, video_spatial;
  detach::nn::ParamSet<float> sensor_temporal, video_temporal;
  json metadata;
};

static Stage2Sets load_stage2_sets(const detach::config::RunConfig& cfg, const std::string& path) {
  detach::io::Checkpoint ck = detach::io::load_checkpoint(path);
  Stage2Sets s;
  detach::enc::register_sensor_spatial(s.sensor_spatial, cfg.arch, cfg.scenario.num_sources);
  s.sensor_spatial.add("centroids", {cfg.scenario.num_sources, cfg.arch.d});
  detach::enc::register_video_spatial(s.video_spatial, cfg.arch, cfg.scenario.num_sources);
  detach::enc::register_sensor_temporal(s.sensor_temporal, cfg.arch, cfg.scenario.num_sources);
  detach::enc::register_video_temporal(s.video_temporal, cfg.arch);
  ck.get_params("sensor_spatial", s.sensor_spatial);
  ck.get_params("video_spatial", s.video_spatial);
  ck.get_params("sensor_temporal", s.sensor_temporal);
  ck.get_params("video_temporal", s.video_temporal);
  s.metadata = ck.metadata;
  return s;
}

static std::vector<int64_t> split_indices(const detach::synth::Dataset& ds, int split) {
  std::vector<int64_t> out;
  for (int i : ds.indices_of_split(split)) out.push_back(i);
  return out;
}

static int cmd_probe(const Cli& cli) {
  auto cfg = load_config(cli);
  require_artifact(cfg.out_dir + "/dataset/manifest.json", "generate");
  require_artifact(cfg.out_dir + "/stage2.ckpt", "stage2");
  auto t0 = std::chrono::steady_clock::now();
  detach::synth::Dataset ds = detach::synth::load_dataset(cfg.out_dir + "/dataset");
  Stage2Sets s = load_stage2_sets(cfg, cfg.out_dir + "/stage2.ckpt");
  warn_hash_mismatch(s.metadata, cfg, cfg.out_dir + "/stage2.ckpt");

  int num_classes = cfg.scenario.num_sources * cfg.scenario.actions_per_source + 1;
  auto features_and_labels = [&](int split, Tensor<float>* x, std::vector<int>* y) {
    std::vector<int64_t> idx = split_indices(ds, split);
    *x = detach::eval::sensor_joint_features(ds, idx, s.sensor_spatial, s.sensor_temporal,
                                             cfg.arch);
    y->clear();
    for (int64_t i : idx) y->push_back(detach::synth::class_id(ds.windows.at(size_t(i)), ds.scenario));
  };
  Tensor<float> xtr, xva, xte;
  std::vector<int> ytr, yva, yte;
  features_and_labels(1, &xtr, &ytr);
  features_and_labels(2, &xva, &yva);
  features_and_labels(3, &xte, &yte);
  detach::eval::ProbeResult res = detach::eval::train_linear_probe(
      xtr, ytr, xva, yva, xte, yte, num_classes, cfg.probe, cfg.seed);
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
  detach::io::write_text_file(cfg.out_dir + "/probe_result.json",
                              detach::eval::probe_result_to_json(res).dump(2) + "\n");
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_run_json(cfg, "probe", secs);
  std::cout << "probe done: weighted F1 " << res.weighted_f1 << ", mAP " << res.map << "\n";
  return 0;
}

static int cmd_analyze(const Cli& cli) {
  auto cfg = load_config(cli);
  require_artifact(cfg.out_dir + "/stage2_log.csv", "stage2");
  require_artifact(cfg.out_dir + "/weights_cdf.csv", "stage2");
  auto t0 = std::chrono::steady_clock::now();
  // summarize the logged per-category weight statistics (Fig. 4 analog)
  std::istringstream log(detach::io::read_text_file(cfg.out_dir + "/stage2_log.csv"));
  std::string line;
  std::getline(log, line);  // header
  std::vector<std::array<double, 8>> rows;
  while (std::getline(log, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    std::array<double, 8> r{};
    for (double& v : r) ls >> v;
    rows.push_back(r);
  }
  if (rows.empty()) throw std::runtime_error("stage2_log.csv has no data rows");
  const auto& first = rows.front();
  const auto& last = rows.back();
  json j{{"epochs_logged", rows.size()},
         {"initial", {{"mean_easy", first[2]}, {"mean_hard", first[3]}, {"mean_false", first[4]}}},
         {"final", {{"mean_easy", last[2]}, {"mean_hard", last[3]}, {"mean_false", last[4]}}},
         {"initial_hard_false_gap", first[3] - first[4]},
         {"final_hard_false_gap", last[3] - last[4]},
         {"final_loss", last[1]}};
  detach::io::write_text_file(cfg.out_dir + "/analysis.json", j.dump(2) + "\n");
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_run_json(cfg, "analyze", secs);
  std::cout << "analysis written: final hard-false weight gap " << (last[3] - last[4]) << "\n";
  return 0;
}

static int cmd_export(const Cli& cli) {
  auto cfg = load_config(cli);
  require_artifact(cfg.out_dir + "/dataset/manifest.json", "generate");
  require_artifact(cfg.out_dir + "/stage2.ckpt", "stage2");
  auto t0 = std::chrono::steady_clock::now();
  detach::synth::Dataset ds = detach::synth::load_dataset(cfg.out_dir + "/dataset");
  Stage2Sets s = load_stage2_sets(cfg, cfg.out_dir + "/stage2.ckpt");
  std::vector<int64_t> idx;
  if (cli.split == "all") {
    for (size_t i = 0; i < ds.windows.size(); ++i) idx.push_back(int64_t(i));
  } else {
    static const std::map<std::string, int> names{
        {"pretrain", 0}, {"probe_train", 1}, {"probe_val", 2}, {"probe_test", 3}};
    auto it = names.find(cli.split);
    if (it == names.end())
      throw UsageError("unknown split '" + cli.split +
                       "' (expected pretrain|probe_train|probe_val|probe_test|all)");
    idx = split_indices(ds, it->second);
  }
  std::string csv = detach::eval::export_embeddings_csv(ds, idx, s.sensor_spatial, s.video_spatial,
                                                        s.sensor_temporal, s.video_temporal,
                                                        cfg.arch);
  detach::io::write_text_file(cfg.out_dir + "/embeddings.csv", csv);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_run_json(cfg, "export", secs);
  std::cout << "exported " << 2 * idx.size() << " embedding rows\n";
  return 0;
}

int main(int argc, char** argv) {
  CLI::App app{"DETACH two-stage cross-modal alignment pipeline (synthetic data)"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();  // let global options appear after the subcommand

  Cli cli;
  app.add_option("-c,--config", cli.config_path, "JSON run config (defaults used when omitted)");
  app.add_option("-s,--set", cli.overrides, "config override, e.g. stage2.epochs=10");
  app.add_option("-o,--out", cli.out_override, "output directory (overrides config out_dir)");
  app.add_option("--seed", cli.seed_override, "master seed (overrides config seed)");

  auto* gen = app.add_subcommand("generate", "generate the synthetic dataset");
  auto* s1 = app.add_subcommand("stage1", "run Stage-1 clustering + spatial training");
  auto* s2 = app.add_subcommand("stage2", "run Stage-2 weighted contrastive alignment");
  auto* pr = app.add_subcommand("probe", "train and evaluate the linear probe");
  auto* an = app.add_subcommand("analyze", "summarize Stage-2 weight statistics");
  auto* ex = app.add_subcommand("export", "export embeddings to CSV");
  ex->add_option("--split", cli.split, "pretrain|probe_train|probe_val|probe_test|all");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(cli);
    if (s1->parsed()) return cmd_stage1(cli);
    if (s2->parsed()) return cmd_stage2(cli);
    if (pr->parsed()) return cmd_probe(cli);
    if (an->parsed()) return cmd_analyze(cli);
    if (ex->parsed()) return cmd_export(cli);
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

#pragma once

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "detach/encoders.hpp"
#include "detach/eval.hpp"
#include "detach/io.hpp"
#include "detach/stage1.hpp"
#include "detach/stage2.hpp"
#include "detach/synthdata.hpp"

namespace detach {
namespace config {

using json = nlohmann::json;

struct RunConfig {
  synth::Scenario scenario;
  synth::WindowParams window;
  std::array<double, 4> fractions{0.8, 0.1, 0.05, 0.05};
  enc::EncoderArch arch;
  stage1::Stage1Config stage1;
  stage2::Stage2Config stage2;
  eval::ProbeConfig probe;
  uint64_t seed = 0;
  std::string out_dir = "runs/default";
};

inline json to_json(const RunConfig& c) {
  json j;
  j["scenario"] = synth::scenario_to_json(c.scenario);
  j["window"] = {{"window_seconds", c.window.window_seconds},
                 {"overlap_seconds", c.window.overlap_seconds}};
  j["fractions"] = c.fractions;
  j["arch"] = {{"d", c.arch.d},
               {"sensor_conv_channels", c.arch.sensor_conv_channels},
               {"sensor_kernel", c.arch.sensor_kernel},
               {"sensor_stride", c.arch.sensor_stride},
               {"gru_hidden", c.arch.gru_hidden},
               {"video2d_channels", c.arch.video2d_channels},
               {"video2d_kernel", c.arch.video2d_kernel},
               {"video2d_stride", c.arch.video2d_stride},
               {"video3d_channels", c.arch.video3d_channels},
               {"video3d_kernel", c.arch.video3d_kernel},
               {"video3d_stride", c.arch.video3d_stride}};
  j["stage1"] = {{"warmup_epochs", c.stage1.warmup_epochs},
                 {"t_joint", c.stage1.t_joint},
                 {"alpha", c.stage1.alpha},
                 {"beta", c.stage1.beta},
                 {"max_epochs", c.stage1.max_epochs},
                 {"change_rate_stop", c.stage1.change_rate_stop},
                 {"batch_size", c.stage1.batch_size},
                 {"lr", c.stage1.lr},
                 {"lr_video", c.stage1.lr_video},
                 {"weight_decay", c.stage1.weight_decay},
                 {"tau_cluster", c.stage1.tau_cluster},
                 {"memory_momentum", c.stage1.memory_momentum},
                 {"confidence_percentile", c.stage1.confidence_percentile}};
  j["stage2"] = {{"tau_contrast", c.stage2.tau_contrast},
                 {"lambda_hard", c.stage2.lambda_hard},
                 {"momentum", c.stage2.momentum},
                 {"epochs", c.stage2.epochs},
                 {"batch_size", c.stage2.batch_size},
                 {"lr", c.stage2.lr},
                 {"weight_decay", c.stage2.weight_decay},
                 {"use_adaptive_weights", c.stage2.use_adaptive_weights}};
  j["probe"] = {{"epochs", c.probe.epochs},
                {"lr", c.probe.lr},
                {"weight_decay", c.probe.weight_decay}};
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  return j;
}

inline RunConfig from_json(const json& j) {
  RunConfig c;
  if (j.contains("scenario")) c.scenario = synth::scenario_from_json(j.at("scenario"));
  if (j.contains("window")) {
    c.window.window_seconds = j.at("window").value("window_seconds", c.window.window_seconds);
    c.window.overlap_seconds = j.at("window").value("overlap_seconds", c.window.overlap_seconds);
  }
  if (j.contains("fractions")) c.fractions = j.at("fractions");
  if (j.contains("arch")) {
    const json& a = j.at("arch");
    c.arch.d = a.value("d", c.arch.d);
    c.arch.sensor_conv_channels = a.value("sensor_conv_channels", c.arch.sensor_conv_channels);
    c.arch.sensor_kernel = a.value("sensor_kernel", c.arch.sensor_kernel);
    c.arch.sensor_stride = a.value("sensor_stride", c.arch.sensor_stride);
    c.arch.gru_hidden = a.value("gru_hidden", c.arch.gru_hidden);
    c.arch.video2d_channels = a.value("video2d_channels", c.arch.video2d_channels);
    c.arch.video2d_kernel = a.value("video2d_kernel", c.arch.video2d_kernel);
    c.arch.video2d_stride = a.value("video2d_stride", c.arch.video2d_stride);
    c.arch.video3d_channels = a.value("video3d_channels", c.arch.video3d_channels);
    c.arch.video3d_kernel = a.value("video3d_kernel", c.arch.video3d_kernel);
    c.arch.video3d_stride = a.value("video3d_stride", c.arch.video3d_stride);
  }
  if (j.contains("stage1")) {
    const json& s = j.at("stage1");
    c.stage1.warmup_epochs = s.value("warmup_epochs", c.stage1.warmup_epochs);
    c.stage1.t_joint = s.value("t_joint", c.stage1.t_joint);
    c.stage1.alpha = s.value("alpha", c.stage1.alpha);
    c.stage1.beta = s.value("beta", c.stage1.beta);
    c.stage1.max_epochs = s.value("max_epochs", c.stage1.max_epochs);
    c.stage1.change_rate_stop = s.value("change_rate_stop", c.stage1.change_rate_stop);
    c.stage1.batch_size = s.value("batch_size", c.stage1.batch_size);
    c.stage1.lr = s.value("lr", c.stage1.lr);
    c.stage1.lr_video = s.value("lr_video", c.stage1.lr_video);
    c.stage1.weight_decay = s.value("weight_decay", c.stage1.weight_decay);
    c.stage1.tau_cluster = s.value("tau_cluster", c.stage1.tau_cluster);
    c.stage1.memory_momentum = s.value("memory_momentum", c.stage1.memory_momentum);
    c.stage1.confidence_percentile =
        s.value("confidence_percentile", c.stage1.confidence_percentile);
  }
  if (j.contains("stage2")) {
    const json& s = j.at("stage2");
    c.stage2.tau_contrast = s.value("tau_contrast", c.stage2.tau_contrast);
    c.stage2.lambda_hard = s.value("lambda_hard", c.stage2.lambda_hard);
    c.stage2.momentum = s.value("momentum", c.stage2.momentum);
    c.stage2.epochs = s.value("epochs", c.stage2.epochs);
    c.stage2.batch_size = s.value("batch_size", c.stage2.batch_size);
    c.stage2.lr = s.value("lr", c.stage2.lr);
    c.stage2.weight_decay = s.value("weight_decay", c.stage2.weight_decay);
    c.stage2.use_adaptive_weights = s.value("use_adaptive_weights", c.stage2.use_adaptive_weights);
  }
  if (j.contains("probe")) {
    const json& s = j.at("probe");
    c.probe.epochs = s.value("epochs", c.probe.epochs);
    c.probe.lr = s.value("lr", c.probe.lr);
    c.probe.weight_decay = s.value("weight_decay", c.probe.weight_decay);
  }
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  return c;
}

inline void validate(const RunConfig& c) {
  c.scenario.validate();
  c.window.validate(c.scenario);
  double fsum = c.fractions[0] + c.fractions[1] + c.fractions[2] + c.fractions[3];
  if (std::abs(fsum - 1.0) > 1e-9)
    throw std::invalid_argument("fractions: must sum to 1, got " + std::to_string(fsum));
  for (double f : c.fractions)
    if (f < 0) throw std::invalid_argument("fractions: entries must be >= 0");
  c.arch.validate();
  c.stage1.validate();
  c.stage2.validate();
  if (c.probe.epochs < 1) throw std::invalid_argument("probe.epochs: must be >= 1");
  if (c.probe.lr <= 0) throw std::invalid_argument("probe.lr: must be > 0");
}

// `out_dir` and hash: the hash covers everything that affects results, which
// includes the seed but not the output location.
inline std::string hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("out_dir");
  return io::config_hash(j);
}

// dotted-path override, e.g. "stage2.epochs=10" or "scenario.noise_std=0.3"
inline void apply_override(json& j, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override '" + kv + "' is not of the form key.path=value");
  std::string path = "/" + kv.substr(0, eq);
  for (auto& ch : path)
    if (ch == '.') ch = '/';
  std::string value = kv.substr(eq + 1);
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;  // fall back to string
  j[json::json_pointer(path)] = parsed;
}

inline RunConfig load(const std::string& path, const std::vector<std::string>& overrides) {
  json j = path.empty() ? to_json(RunConfig{}) : json::parse(io::read_text_file(path));
  for (const auto& kv : overrides) apply_override(j, kv);
  RunConfig c = from_json(j);
  validate(c);
  return c;
}

}  // namespace config
}  // namespace detach

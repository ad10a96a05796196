#pragma once

#include <optional>
#include <string>
#include <vector>

#include "detach/clustering.hpp"
#include "detach/encoders.hpp"
#include "detach/io.hpp"
#include "detach/synthdata.hpp"

namespace detach {
namespace stage1 {

using nn::ParamSet;
using nn::ParamVars;
using nn::Var;

struct Stage1Config {
  int warmup_epochs = 10;  // phase 1: clustering only
  int t_joint = 10;        // phase 2: + video spatial supervision
  double alpha = 1.0;
  double beta = 1.5;
  int max_epochs = 80;
  double change_rate_stop = 0.05;
  int batch_size = 16;
  double lr = 1e-4;
  // The video head has to overcome the global-average-pool bottleneck within
  // the fixed joint phase, which needs a much larger step size than the
  // sensor path tolerates.
  double lr_video = 5e-3;
  double weight_decay = 1e-4;
  double tau_cluster = 0.5;
  double memory_momentum = 0.5;
  double confidence_percentile = 75.0;

  void validate() const {
    if (alpha < 0 || beta < 0) throw std::invalid_argument("stage1.alpha/beta: must be >= 0");
    if (change_rate_stop <= 0 || change_rate_stop >= 1)
      throw std::invalid_argument("stage1.change_rate_stop: must be in (0,1)");
    if (warmup_epochs < 0 || t_joint < 0 || max_epochs < warmup_epochs + t_joint)
      throw std::invalid_argument("stage1: need max_epochs >= warmup_epochs + t_joint >= 0");
    if (batch_size < 1) throw std::invalid_argument("stage1.batch_size: must be >= 1");
    if (lr <= 0 || lr_video <= 0) throw std::invalid_argument("stage1.lr/lr_video: must be > 0");
    if (tau_cluster <= 0) throw std::invalid_argument("stage1.tau_cluster: must be > 0");
    if (memory_momentum < 0 || memory_momentum >= 1)
      throw std::invalid_argument("stage1.memory_momentum: must be in [0,1)");
    if (confidence_percentile <= 0 || confidence_percentile > 100)
      throw std::invalid_argument("stage1.confidence_percentile: must be in (0,100]");
  }
};

struct Stage1LogRow {
  int epoch = 0;
  int phase = 1;
  double l_cluster = 0;
  double l_video_spatial = 0;
  double l_refine = 0;
  double change_rate = 0;
  double confident_fraction = 0;
  double purity = 0;
};

template <class S>
struct Stage1Result {
  ParamSet<S> sensor_spatial;  // includes "centroids" [K,d]
  ParamSet<S> video_spatial;
  cluster::ClusterState<S> state;
  std::vector<int64_t> pretrain_indices;  // dataset window indices, state order
  std::vector<Stage1LogRow> log;
  std::vector<std::string> warnings;
  bool aborted = false;
};

// Eq. 2: plain CE over confident samples' video logits against pseudo-labels.
// N_conf = 0 yields no loss (caller records a warning and skips the update).
template <class S>
std::optional<Var<S>> video_spatial_loss(const Var<S>& video_logits,
                                         const std::vector<int64_t>& pseudo_labels) {
  if (pseudo_labels.empty()) return std::nullopt;
  return nn::weighted_ce_mean(video_logits, pseudo_labels);
}

// argmax per row, ties to the lowest index
template <class S>
std::vector<int64_t> argmax_rows(const Tensor<S>& x) {
  int64_t n = x.dim(0), k = x.dim(1);
  std::vector<int64_t> out(size_t(n), 0);
  for (int64_t i = 0; i < n; ++i) {
    double best = double(x.data[i * k]);
    for (int64_t j = 1; j < k; ++j)
      if (double(x.data[i * k + j]) > best) {  // strict: ties keep the lowest index
        best = double(x.data[i * k + j]);
        out[size_t(i)] = j;
      }
  }
  return out;
}

// Eq. 3: CE between the sensor cluster distribution (rows of `sensor_logits`
// selected by `rows`) and the video-derived hard labels.
template <class S>
std::optional<Var<S>> refinement_loss(const Var<S>& sensor_logits,
                                      const std::vector<int64_t>& rows,
                                      const std::vector<int64_t>& video_hard_labels) {
  if (rows.empty()) return std::nullopt;
  return nn::weighted_ce_mean(nn::gather_rows(sensor_logits, rows), video_hard_labels);
}

// Eq. 4
inline double sensor_total_loss(double l_cluster, double l_refine, double alpha, double beta) {
  return alpha * l_cluster + beta * l_refine;
}

// ---------------------------------------------------------------------------
// checkpoint layout

template <class S>
void put_cluster_state(io::Checkpoint& ck, const cluster::ClusterState<S>& st,
                       const std::vector<int64_t>& pretrain_indices) {
  ck.put("cluster/memory", st.memory.template cast<float>());
  Tensor<float> labels({st.total()});
  Tensor<float> confident({st.total()});
  Tensor<float> indices({st.total()});
  for (int64_t i = 0; i < st.total(); ++i) {
    labels.data[size_t(i)] = float(st.labels[size_t(i)]);
    confident.data[size_t(i)] = float(st.confident[size_t(i)]);
    indices.data[size_t(i)] = float(pretrain_indices[size_t(i)]);
  }
  Tensor<float> sizes({int64_t(st.sizes.size())});
  for (size_t c = 0; c < st.sizes.size(); ++c) sizes.data[c] = float(st.sizes[c]);
  ck.put("cluster/labels", labels);
  ck.put("cluster/confident", confident);
  ck.put("cluster/pretrain_indices", indices);
  ck.put("cluster/sizes", sizes);
}

template <class S>
void get_cluster_state(const io::Checkpoint& ck, cluster::ClusterState<S>* st,
                       std::vector<int64_t>* pretrain_indices) {
  st->memory = ck.tensors.at("cluster/memory").template cast<S>();
  const Tensor<float>& labels = ck.tensors.at("cluster/labels");
  const Tensor<float>& confident = ck.tensors.at("cluster/confident");
  const Tensor<float>& indices = ck.tensors.at("cluster/pretrain_indices");
  const Tensor<float>& sizes = ck.tensors.at("cluster/sizes");
  int64_t n = labels.size();
  st->labels.resize(size_t(n));
  st->confident.resize(size_t(n));
  pretrain_indices->resize(size_t(n));
  for (int64_t i = 0; i < n; ++i) {
    st->labels[size_t(i)] = int(labels.data[size_t(i)]);
    st->confident[size_t(i)] = char(confident.data[size_t(i)]);
    (*pretrain_indices)[size_t(i)] = int64_t(indices.data[size_t(i)]);
  }
  st->sizes.resize(size_t(sizes.size()));
  for (int64_t c = 0; c < sizes.size(); ++c) st->sizes[size_t(c)] = int64_t(sizes.data[size_t(c)]);
}

template <class S>
void save_stage1_checkpoint(const std::string& path, const Stage1Result<S>& res, int epoch,
                            const std::string& config_hash, uint64_t seed) {
  io::Checkpoint ck;
  ck.metadata = {{"stage", 1}, {"epoch", epoch}, {"config_hash", config_hash}, {"seed", seed}};
  ck.put_params("sensor_spatial", res.sensor_spatial);
  ck.put_params("video_spatial", res.video_spatial);
  put_cluster_state(ck, res.state, res.pretrain_indices);
  io::save_checkpoint(path, ck);
}

// ---------------------------------------------------------------------------
// helpers shared with stage2/eval

template <class S>
Tensor<S> gather_sensor_batch(const synth::Dataset& ds, const std::vector<int64_t>& idx) {
  int64_t c = ds.windows.at(0).values.dim(0), t = ds.windows.at(0).values.dim(1);
  Tensor<S> out({int64_t(idx.size()), c, t});
  for (size_t b = 0; b < idx.size(); ++b) {
    const Tensor<float>& w = ds.windows.at(size_t(idx[b])).values;
    for (int64_t j = 0; j < c * t; ++j) out.data[int64_t(b) * c * t + j] = S(w.data[size_t(j)]);
  }
  return out;
}

template <class S>
Tensor<S> gather_video_batch(const synth::Dataset& ds, const std::vector<int64_t>& idx) {
  const Tensor<float>& first = ds.clips.at(0).frames;
  int64_t f = first.dim(0), h = first.dim(1), w = first.dim(2);
  const std::vector<float>& pix_mean = ds.stats.video_pixel_mean;
  bool centered = int64_t(pix_mean.size()) == h * w;
  Tensor<S> out({int64_t(idx.size()), f, h, w});
  for (size_t b = 0; b < idx.size(); ++b) {
    const Tensor<float>& clip = ds.clips.at(size_t(idx[b])).frames;
    for (int64_t j = 0; j < f * h * w; ++j) {
      float v = clip.data[size_t(j)];
      if (centered) v -= pix_mean[size_t(j % (h * w))];
      out.data[int64_t(b) * f * h * w + j] = S(v);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// training loop

template <class S = float>
Stage1Result<S> run_stage1(const synth::Dataset& ds, const enc::EncoderArch& arch,
                           const Stage1Config& cfg, uint64_t seed,
                           const std::string& checkpoint_path = "",
                           const std::string& config_hash = "") {
  cfg.validate();
  arch.validate();
  const int k = ds.scenario.num_sources;
  const int channels = ds.scenario.num_sources;

  Stage1Result<S> res;
  res.pretrain_indices.clear();
  for (int i : ds.indices_of_split(0)) res.pretrain_indices.push_back(i);
  if (res.pretrain_indices.empty())
    throw std::invalid_argument("run_stage1: pretraining split is empty");
  const int64_t np = int64_t(res.pretrain_indices.size());

  enc::register_sensor_spatial(res.sensor_spatial, arch, channels);
  res.sensor_spatial.add("centroids", {k, arch.d});
  enc::register_video_spatial(res.video_spatial, arch, k);
  {
    Rng r1 = substream(seed, "stage1/init/sensor");
    nn::init_params(res.sensor_spatial, r1);
    Rng r2 = substream(seed, "stage1/init/video");
    nn::init_params(res.video_spatial, r2);
  }

  // initial memory bank: one full forward pass, unit-normalized
  {
    Tensor<S> feats({np, arch.d});
    ParamVars<S> pv = ParamVars<S>::attach(res.sensor_spatial, false);
    const int64_t chunk = cfg.batch_size;
    for (int64_t at = 0; at < np; at += chunk) {
      std::vector<int64_t> idx(res.pretrain_indices.begin() + at,
                               res.pretrain_indices.begin() + std::min(at + chunk, np));
      Var<S> out = enc::encode_sensor_spatial(gather_sensor_batch<S>(ds, idx), pv, arch);
      for (size_t b = 0; b < idx.size(); ++b)
        for (int64_t q = 0; q < arch.d; ++q)
          feats.data[(at + int64_t(b)) * arch.d + q] = out.value().data[int64_t(b) * arch.d + q];
    }
    Tensor<S> unit = l2_normalize_rows(feats);
    Rng crng = substream(seed, "stage1/cluster_init");
    res.state = cluster::init_cluster_state(unit, res.sensor_spatial.value("centroids"), crng);
  }

  nn::AdamW<S> opt_sensor(cfg.lr, cfg.weight_decay);
  nn::AdamW<S> opt_video(cfg.lr_video, cfg.weight_decay);

  std::vector<int> truth(size_t(np), 0);
  for (int64_t i = 0; i < np; ++i)
    truth[size_t(i)] = ds.windows.at(size_t(res.pretrain_indices[size_t(i)])).source_id;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    int phase = epoch < cfg.warmup_epochs ? 1 : epoch < cfg.warmup_epochs + cfg.t_joint ? 2 : 3;
    std::vector<int> labels_prev = res.state.labels;

    // refresh the confidence split once per epoch (phases 2 and 3)
    cluster::ConfidenceSplit split;
    if (phase >= 2) {
      split = cluster::confidence_split(res.state, res.sensor_spatial.value("centroids"),
                                        cfg.confidence_percentile);
      for (int64_t i = 0; i < np; ++i) res.state.confident[size_t(i)] = 0;
      for (int64_t i : split.confident) res.state.confident[size_t(i)] = 1;
    }

    std::vector<int64_t> order(size_t(np), 0);
    for (int64_t i = 0; i < np; ++i) order[size_t(i)] = i;
    Rng brng = substream(seed, "stage1/batch/" + std::to_string(epoch));
    brng.shuffle(order);
    Rng erng = substream(seed, "stage1/empty/" + std::to_string(epoch));

    double sum_lc = 0, sum_lv = 0, sum_lr = 0;
    int64_t batches = 0, video_batches = 0, refine_batches = 0;
    bool diverged = false;

    for (int64_t at = 0; at < np && !diverged; at += cfg.batch_size) {
      std::vector<int64_t> local(order.begin() + at,
                                 order.begin() + std::min<int64_t>(at + cfg.batch_size, np));
      std::vector<int64_t> global;
      for (int64_t i : local) global.push_back(res.pretrain_indices[size_t(i)]);

      // --- sensor step: clustering loss (+ refinement in phase 3)
      res.sensor_spatial.zero_grads();
      ParamVars<S> pv = ParamVars<S>::attach(res.sensor_spatial, true);
      Var<S> feats = enc::encode_sensor_spatial(gather_sensor_batch<S>(ds, global), pv, arch);
      Var<S> unit = nn::normalize_rows(feats);
      Var<S> logits = nn::neg_sqdist_logits(unit, pv["centroids"], cfg.tau_cluster);
      std::vector<int> batch_labels;
      for (int64_t i : local) batch_labels.push_back(res.state.labels[size_t(i)]);
      std::vector<int64_t> lab64(batch_labels.begin(), batch_labels.end());
      Var<S> lc = nn::weighted_ce_mean(logits, lab64,
                                       cluster::balance_weights(batch_labels, res.state.sizes));
      Var<S> total = nn::affine(lc, cfg.alpha, 0.0);

      double lr_val = 0;
      if (phase == 3) {
        std::vector<int64_t> amb_rows;  // positions within the batch
        std::vector<int64_t> amb_global;
        for (size_t b = 0; b < local.size(); ++b)
          if (!res.state.confident[size_t(local[b])]) {
            amb_rows.push_back(int64_t(b));
            amb_global.push_back(global[b]);
          }
        if (!amb_rows.empty()) {
          // video-derived hard labels, video frozen
          ParamVars<S> pvv = ParamVars<S>::attach(res.video_spatial, false);
          Var<S> vemb = enc::encode_video_spatial(gather_video_batch<S>(ds, amb_global), pvv, arch);
          Var<S> vlogits = enc::video_cluster_logits(vemb, pvv);
          std::vector<int64_t> hard = argmax_rows(vlogits.value());
          auto lr_loss = refinement_loss(logits, amb_rows, hard);
          lr_val = double(lr_loss->value().data[0]);
          total = nn::add(total, nn::affine(*lr_loss, cfg.beta, 0.0));
          sum_lr += lr_val;
          ++refine_batches;
        }
      }
      double lc_val = double(lc.value().data[0]);
      if (!std::isfinite(lc_val) || !std::isfinite(lr_val)) {
        res.warnings.push_back("stage1: nonfinite loss at epoch " + std::to_string(epoch) +
                               "; aborting with last checkpoint retained");
        res.aborted = true;
        diverged = true;
        break;
      }
      sum_lc += lc_val;
      ++batches;
      nn::backward(total);
      pv.harvest_into(res.sensor_spatial);
      opt_sensor.step(res.sensor_spatial);

      // --- memory bank / centroid maintenance (post-step features reuse the
      // pre-step forward; ODC tolerates one-step-stale features)
      Tensor<S> batch_unit({int64_t(local.size()), arch.d});
      for (size_t b = 0; b < local.size(); ++b)
        for (int64_t q = 0; q < arch.d; ++q)
          batch_unit.data[int64_t(b) * arch.d + q] = unit.value().data[int64_t(b) * arch.d + q];
      cluster::update_memory_and_centroids(res.state, res.sensor_spatial.value("centroids"), local,
                                           batch_unit, cfg.memory_momentum);
      cluster::handle_empty_clusters(res.state, res.sensor_spatial.value("centroids"), erng);

      // --- video step: Eq. 2 on confident samples (phase 2 only)
      if (phase == 2) {
        std::vector<int64_t> conf_global;
        std::vector<int64_t> conf_labels;
        for (size_t b = 0; b < local.size(); ++b)
          if (res.state.confident[size_t(local[b])]) {
            conf_global.push_back(global[b]);
            conf_labels.push_back(res.state.labels[size_t(local[b])]);
          }
        if (conf_global.empty()) {
          res.warnings.push_back("stage1: batch with no confident samples at epoch " +
                                 std::to_string(epoch) + "; video update skipped");
        } else {
          res.video_spatial.zero_grads();
          ParamVars<S> pvv = ParamVars<S>::attach(res.video_spatial, true);
          Var<S> vemb = enc::encode_video_spatial(gather_video_batch<S>(ds, conf_global), pvv, arch);
          Var<S> vlogits = enc::video_cluster_logits(vemb, pvv);
          auto lv = video_spatial_loss(vlogits, conf_labels);
          double lv_val = double(lv->value().data[0]);
          if (!std::isfinite(lv_val)) {
            res.warnings.push_back("stage1: nonfinite video loss at epoch " +
                                   std::to_string(epoch) + "; aborting");
            res.aborted = true;
            diverged = true;
            break;
          }
          sum_lv += lv_val;
          ++video_batches;
          nn::backward(*lv);
          pvv.harvest_into(res.video_spatial);
          opt_video.step(res.video_spatial);
        }
      }
    }
    if (diverged) break;

    Stage1LogRow row;
    row.epoch = epoch;
    row.phase = phase;
    row.l_cluster = batches ? sum_lc / double(batches) : 0.0;
    row.l_video_spatial = video_batches ? sum_lv / double(video_batches) : 0.0;
    row.l_refine = refine_batches ? sum_lr / double(refine_batches) : 0.0;
    row.change_rate = cluster::label_change_rate(labels_prev, res.state.labels);
    int64_t nconf = 0;
    for (char c : res.state.confident) nconf += c;
    row.confident_fraction = double(nconf) / double(np);
    row.purity = cluster::purity(res.state.labels, truth, k, int64_t(ds.scenario.num_sources));
    res.log.push_back(row);

    if (!checkpoint_path.empty())
      save_stage1_checkpoint(checkpoint_path, res, epoch, config_hash, seed);
    if (phase == 3 && row.change_rate < cfg.change_rate_stop) break;
  }
  return res;
}

inline std::string stage1_log_csv(const std::vector<Stage1LogRow>& log) {
  std::ostringstream os;
  os << "epoch,phase,l_cluster,l_video_spatial,l_refine,change_rate,confident_fraction,purity\n";
  os.precision(10);
  for (const auto& r : log)
    os << r.epoch << "," << r.phase << "," << r.l_cluster << "," << r.l_video_spatial << ","
       << r.l_refine << "," << r.change_rate << "," << r.confident_fraction << "," << r.purity
       << "\n";
  return os.str();
}

}  // namespace stage1
}  // namespace detach

#pragma once

#include <array>
#include <string>
#include <vector>

#include "detach/encoders.hpp"
#include "detach/io.hpp"
#include "detach/stage1.hpp"
#include "detach/synthdata.hpp"

namespace detach {
namespace stage2 {

using nn::ParamSet;
using nn::ParamVars;
using nn::Var;

struct Stage2Config {
  double tau_contrast = 0.10;
  double lambda_hard = 3.0;
  double momentum = 0.999;
  int epochs = 50;
  int batch_size = 4;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  bool use_adaptive_weights = true;  // false = plain InfoNCE ablation (all W=1)

  void validate() const {
    if (tau_contrast <= 0) throw std::invalid_argument("stage2.tau_contrast: must be > 0");
    if (lambda_hard <= 1) throw std::invalid_argument("stage2.lambda_hard: must be > 1");
    if (momentum < 0 || momentum >= 1)
      throw std::invalid_argument("stage2.momentum: must be in [0,1)");
    if (epochs < 1) throw std::invalid_argument("stage2.epochs: must be >= 1");
    if (batch_size < 2) throw std::invalid_argument("stage2.batch_size: must be >= 2");
  }
};

// ---------------------------------------------------------------------------
// similarity and weight computations (Eqs. 7-11); all evaluation-side, no
// gradients flow through these (the weight matrix is a constant in the loss)

template <class S>
struct SimilarityBundle {
  Tensor<S> v_spatial, s_spatial;    // cosine matrices
  Tensor<S> v_temporal, s_temporal;  // cosine matrices (momentum encoders)
  Tensor<S> spatial;                 // Eq. 7 combined, in [0,1]
  Tensor<S> temporal;                // Eq. 9 combined, in [-1,1]
};

// Eq. 7: s_ij = max(ReLU(cos_v), ReLU(cos_s)), clamped into [0,1]
template <class S>
Tensor<S> spatial_similarity(const Tensor<S>& cos_v, const Tensor<S>& cos_s) {
  if (!cos_v.same_shape(cos_s))
    throw std::invalid_argument("spatial_similarity: shape mismatch");
  Tensor<S> out(cos_v.shape);
  for (size_t i = 0; i < out.data.size(); ++i) {
    double a = std::max(0.0, double(cos_v.data[i]));
    double b = std::max(0.0, double(cos_s.data[i]));
    out.data[i] = S(std::min(1.0, std::max(a, b)));
  }
  return out;
}

// Eq. 8: W_ij = 1 + (lambda - 1) * s_ij
template <class S>
Tensor<S> spatial_weight(const Tensor<S>& s_spatial, double lambda_hard) {
  if (lambda_hard <= 1) throw std::invalid_argument("spatial_weight: lambda_hard must be > 1");
  Tensor<S> out(s_spatial.shape);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = S(1.0 + (lambda_hard - 1.0) * double(s_spatial.data[i]));
  return out;
}

// Eq. 9: average of the two momentum-encoder cosine matrices
template <class S>
Tensor<S> temporal_similarity(const Tensor<S>& cos_v, const Tensor<S>& cos_s) {
  if (!cos_v.same_shape(cos_s))
    throw std::invalid_argument("temporal_similarity: shape mismatch");
  Tensor<S> out(cos_v.shape);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = S(0.5 * (double(cos_v.data[i]) + double(cos_s.data[i])));
  return out;
}

// Eq. 10: W_ij = 1 - s_spatial_ij * ReLU(s_temporal_ij)
template <class S>
Tensor<S> temporal_weight(const Tensor<S>& s_spatial, const Tensor<S>& s_temporal) {
  if (!s_spatial.same_shape(s_temporal))
    throw std::invalid_argument("temporal_weight: shape mismatch");
  Tensor<S> out(s_spatial.shape);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] =
        S(1.0 - double(s_spatial.data[i]) * std::max(0.0, double(s_temporal.data[i])));
  return out;
}

// Eq. 11: elementwise product with a zero diagonal
template <class S>
Tensor<S> combined_weights(const Tensor<S>& w_spatial, const Tensor<S>& w_temporal) {
  if (!w_spatial.same_shape(w_temporal) || w_spatial.rank() != 2 ||
      w_spatial.dim(0) != w_spatial.dim(1))
    throw std::invalid_argument("combined_weights: need matching square matrices");
  int64_t n = w_spatial.dim(0);
  Tensor<S> out({n, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      out.data[i * n + j] =
          i == j ? S(0) : S(double(w_spatial.data[i * n + j]) * double(w_temporal.data[i * n + j]));
  return out;
}

template <class S>
SimilarityBundle<S> build_similarity(const Tensor<S>& v_spat, const Tensor<S>& s_spat,
                                     const Tensor<S>& v_temp_mom, const Tensor<S>& s_temp_mom) {
  SimilarityBundle<S> b;
  b.v_spatial = cosine_similarity_matrix(v_spat, v_spat);
  b.s_spatial = cosine_similarity_matrix(s_spat, s_spat);
  b.v_temporal = cosine_similarity_matrix(v_temp_mom, v_temp_mom);
  b.s_temporal = cosine_similarity_matrix(s_temp_mom, s_temp_mom);
  b.spatial = spatial_similarity(b.v_spatial, b.s_spatial);
  b.temporal = temporal_similarity(b.v_temporal, b.s_temporal);
  return b;
}

template <class S>
Tensor<S> build_weights(const SimilarityBundle<S>& b, double lambda_hard) {
  return combined_weights(spatial_weight(b.spatial, lambda_hard),
                          temporal_weight(b.spatial, b.temporal));
}

// Eqs. 12-13: joint vectors enter as raw concatenations, scores are dot
// products / tau. W is a constant (gradient-stop).
template <class S>
Var<S> stage2_loss(const Var<S>& z_video, const Var<S>& z_sensor, const Tensor<S>& w,
                   double tau_contrast) {
  Var<S> logits = nn::affine(nn::dot_products(z_video, z_sensor), 1.0 / tau_contrast, 0.0);
  return nn::weighted_infonce(logits, w);
}

// ---------------------------------------------------------------------------
// ground-truth negative categories (instrumentation only)

enum class NegCategory { easy = 0, hard = 1, false_neg = 2 };

inline const char* category_name(NegCategory c) {
  switch (c) {
    case NegCategory::easy: return "easy";
    case NegCategory::hard: return "hard";
    default: return "false";
  }
}

// same source+action = false negative, same source different action = hard,
// different source = easy; idle counts as its own source
inline NegCategory categorize_pair(const synth::SensorWindow& a, const synth::SensorWindow& b) {
  if (a.source_id != b.source_id) return NegCategory::easy;
  return a.action_id == b.action_id ? NegCategory::false_neg : NegCategory::hard;
}

struct Stage2LogRow {
  int epoch = 0;  // 0 = pre-training snapshot
  double loss = 0;
  double mean_easy = 0, mean_hard = 0, mean_false = 0;
  double median_easy = 0, median_hard = 0, median_false = 0;
};

struct WeightQuantRow {
  int epoch = 0;
  std::string category;
  std::array<double, 101> q{};  // 1% grid
};

template <class S>
struct Stage2Result {
  ParamSet<S> sensor_spatial;  // frozen, carried through for downstream use
  ParamSet<S> video_spatial;
  ParamSet<S> sensor_temporal, video_temporal;
  ParamSet<S> sensor_temporal_momentum, video_temporal_momentum;
  std::vector<int64_t> pretrain_indices;
  std::vector<Stage2LogRow> log;
  std::vector<WeightQuantRow> cdf;
  std::vector<std::string> warnings;
  bool aborted = false;
};

template <class S>
void save_stage2_checkpoint(const std::string& path, const Stage2Result<S>& res, int epoch,
                            const std::string& config_hash, uint64_t seed) {
  io::Checkpoint ck;
  ck.metadata = {{"stage", 2}, {"epoch", epoch}, {"config_hash", config_hash}, {"seed", seed}};
  ck.put_params("sensor_spatial", res.sensor_spatial);
  ck.put_params("video_spatial", res.video_spatial);
  ck.put_params("sensor_temporal", res.sensor_temporal);
  ck.put_params("video_temporal", res.video_temporal);
  ck.put_params("sensor_temporal_momentum", res.sensor_temporal_momentum);
  ck.put_params("video_temporal_momentum", res.video_temporal_momentum);
  io::save_checkpoint(path, ck);
}

// ---------------------------------------------------------------------------
// training loop

template <class S = float>
Stage2Result<S> run_stage2(const synth::Dataset& ds, const ParamSet<S>& sensor_spatial,
                           const ParamSet<S>& video_spatial, const enc::EncoderArch& arch,
                           const Stage2Config& cfg, uint64_t seed,
                           const std::string& checkpoint_path = "",
                           const std::string& config_hash = "") {
  cfg.validate();
  arch.validate();
  Stage2Result<S> res;
  res.sensor_spatial = sensor_spatial;
  res.video_spatial = video_spatial;
  for (int i : ds.indices_of_split(0)) res.pretrain_indices.push_back(i);
  const int64_t np = int64_t(res.pretrain_indices.size());
  if (np < 2) throw std::invalid_argument("run_stage2: need at least 2 pretraining windows");

  // frozen spatial embeddings, precomputed once
  Tensor<S> v_spat_all({np, arch.d}), s_spat_all({np, arch.d});
  {
    ParamVars<S> pvs = ParamVars<S>::attach(res.sensor_spatial, false);
    ParamVars<S> pvv = ParamVars<S>::attach(res.video_spatial, false);
    for (int64_t at = 0; at < np; at += cfg.batch_size) {
      std::vector<int64_t> idx(res.pretrain_indices.begin() + at,
                               res.pretrain_indices.begin() +
                                   std::min<int64_t>(at + cfg.batch_size, np));
      Var<S> se = enc::encode_sensor_spatial(stage1::gather_sensor_batch<S>(ds, idx), pvs, arch);
      Var<S> ve = enc::encode_video_spatial(stage1::gather_video_batch<S>(ds, idx), pvv, arch);
      for (size_t b = 0; b < idx.size(); ++b)
        for (int64_t q = 0; q < arch.d; ++q) {
          s_spat_all.data[(at + int64_t(b)) * arch.d + q] = se.value().data[int64_t(b) * arch.d + q];
          v_spat_all.data[(at + int64_t(b)) * arch.d + q] = ve.value().data[int64_t(b) * arch.d + q];
        }
    }
    // The frozen spatial embeddings are kept unit-length, matching the
    // normalized memory features they were trained against; this also keeps
    // the joint dot products bounded regardless of raw encoder output scale.
    v_spat_all = l2_normalize_rows(v_spat_all);
    s_spat_all = l2_normalize_rows(s_spat_all);
  }

  enc::register_sensor_temporal(res.sensor_temporal, arch, ds.scenario.num_sources);
  enc::register_video_temporal(res.video_temporal, arch);
  {
    Rng r1 = substream(seed, "stage2/init/sensor");
    nn::init_params(res.sensor_temporal, r1);
    Rng r2 = substream(seed, "stage2/init/video");
    nn::init_params(res.video_temporal, r2);
  }
  res.sensor_temporal_momentum = res.sensor_temporal;
  res.video_temporal_momentum = res.video_temporal;

  nn::AdamW<S> opt_s(cfg.lr, cfg.weight_decay);
  nn::AdamW<S> opt_v(cfg.lr, cfg.weight_decay);

  auto gather_rows_of = [&](const Tensor<S>& all, const std::vector<int64_t>& local) {
    Tensor<S> out({int64_t(local.size()), arch.d});
    for (size_t b = 0; b < local.size(); ++b)
      for (int64_t q = 0; q < arch.d; ++q)
        out.data[int64_t(b) * arch.d + q] = all.data[local[b] * arch.d + q];
    return out;
  };

  // epoch 0 is a measurement-only pass; epochs 1..cfg.epochs train
  for (int epoch = 0; epoch <= cfg.epochs; ++epoch) {
    std::vector<int64_t> order(size_t(np), 0);
    for (int64_t i = 0; i < np; ++i) order[size_t(i)] = i;
    Rng brng = substream(seed, "stage2/batch/" + std::to_string(epoch));
    brng.shuffle(order);

    double sum_loss = 0;
    int64_t batches = 0;
    std::array<std::vector<double>, 3> wstats;  // by NegCategory
    bool diverged = false;

    for (int64_t at = 0; at + 2 <= np && !diverged; at += cfg.batch_size) {
      std::vector<int64_t> local(order.begin() + at,
                                 order.begin() + std::min<int64_t>(at + cfg.batch_size, np));
      if (local.size() < 2) break;  // InfoNCE needs at least one negative
      std::vector<int64_t> global;
      for (int64_t i : local) global.push_back(res.pretrain_indices[size_t(i)]);
      int64_t nb = int64_t(local.size());

      Tensor<S> sens = stage1::gather_sensor_batch<S>(ds, global);
      Tensor<S> vid = stage1::gather_video_batch<S>(ds, global);

      bool train = epoch > 0;
      res.sensor_temporal.zero_grads();
      res.video_temporal.zero_grads();
      ParamVars<S> pvs = ParamVars<S>::attach(res.sensor_temporal, train);
      ParamVars<S> pvv = ParamVars<S>::attach(res.video_temporal, train);
      Var<S> s_temp = enc::encode_sensor_temporal(sens, pvs, arch);
      Var<S> v_temp = enc::encode_video_temporal(vid, pvv, arch);

      // momentum temporal embeddings for the similarity estimates
      ParamVars<S> pms = ParamVars<S>::attach(res.sensor_temporal_momentum, false);
      ParamVars<S> pmv = ParamVars<S>::attach(res.video_temporal_momentum, false);
      Tensor<S> s_temp_mom = enc::encode_sensor_temporal(sens, pms, arch).value();
      Tensor<S> v_temp_mom = enc::encode_video_temporal(vid, pmv, arch).value();

      Tensor<S> v_spat = gather_rows_of(v_spat_all, local);
      Tensor<S> s_spat = gather_rows_of(s_spat_all, local);
      SimilarityBundle<S> bundle = build_similarity(v_spat, s_spat, v_temp_mom, s_temp_mom);
      Tensor<S> w({nb, nb});
      if (cfg.use_adaptive_weights) {
        w = build_weights(bundle, cfg.lambda_hard);
      } else {
        for (int64_t i = 0; i < nb; ++i)
          for (int64_t j = 0; j < nb; ++j) w.data[i * nb + j] = i == j ? S(0) : S(1);
      }
      for (int64_t i = 0; i < nb; ++i)
        for (int64_t j = 0; j < nb; ++j) {
          double wv = double(w.data[i * nb + j]);
          if (wv < 0 || wv > cfg.lambda_hard + 1e-6 || (i == j && wv != 0))
            throw std::logic_error("stage2: weight matrix invariant violated");
          if (i != j)
            wstats[size_t(categorize_pair(ds.windows.at(size_t(global[size_t(i)])),
                                          ds.windows.at(size_t(global[size_t(j)]))))]
                .push_back(wv);
        }

      Var<S> z_v = nn::concat_cols(Var<S>::leaf(v_spat, false), v_temp);
      Var<S> z_s = nn::concat_cols(Var<S>::leaf(s_spat, false), s_temp);
      Var<S> loss = stage2_loss(z_v, z_s, w, cfg.tau_contrast);
      double lv = double(loss.value().data[0]);
      if (!std::isfinite(lv)) {
        res.warnings.push_back("stage2: nonfinite loss at epoch " + std::to_string(epoch) +
                               "; aborting with last checkpoint retained");
        res.aborted = true;
        diverged = true;
        break;
      }
      sum_loss += lv;
      ++batches;

      if (train) {
        nn::backward(loss);
        pvs.harvest_into(res.sensor_temporal);
        pvv.harvest_into(res.video_temporal);
        opt_s.step(res.sensor_temporal);
        opt_v.step(res.video_temporal);
        // EMA strictly after the optimizer step
        nn::ema_update(res.sensor_temporal_momentum, res.sensor_temporal, cfg.momentum);
        nn::ema_update(res.video_temporal_momentum, res.video_temporal, cfg.momentum);
      }
    }
    if (diverged) break;

    Stage2LogRow row;
    row.epoch = epoch;
    row.loss = batches ? sum_loss / double(batches) : 0.0;
    auto mean_of = [](const std::vector<double>& v) {
      if (v.empty()) return 0.0;
      double s = 0;
      for (double x : v) s += x;
      return s / double(v.size());
    };
    row.mean_easy = mean_of(wstats[0]);
    row.mean_hard = mean_of(wstats[1]);
    row.mean_false = mean_of(wstats[2]);
    row.median_easy = wstats[0].empty() ? 0.0 : percentile(wstats[0], 50.0);
    row.median_hard = wstats[1].empty() ? 0.0 : percentile(wstats[1], 50.0);
    row.median_false = wstats[2].empty() ? 0.0 : percentile(wstats[2], 50.0);
    res.log.push_back(row);
    for (int c = 0; c < 3; ++c) {
      WeightQuantRow qr;
      qr.epoch = epoch;
      qr.category = category_name(NegCategory(c));
      if (!wstats[size_t(c)].empty())
        for (int p = 0; p <= 100; ++p) qr.q[size_t(p)] = percentile(wstats[size_t(c)], double(p));
      res.cdf.push_back(qr);
    }
    if (!checkpoint_path.empty() && epoch > 0)
      save_stage2_checkpoint(checkpoint_path, res, epoch, config_hash, seed);
  }
  return res;
}

inline std::string stage2_log_csv(const std::vector<Stage2LogRow>& log) {
  std::ostringstream os;
  os << "epoch,loss,mean_easy,mean_hard,mean_false,median_easy,median_hard,median_false\n";
  os.precision(10);
  for (const auto& r : log)
    os << r.epoch << "," << r.loss << "," << r.mean_easy << "," << r.mean_hard << ","
       << r.mean_false << "," << r.median_easy << "," << r.median_hard << "," << r.median_false
       << "\n";
  return os.str();
}

inline std::string weights_cdf_csv(const std::vector<WeightQuantRow>& cdf) {
  std::ostringstream os;
  os << "epoch,category";
  for (int p = 0; p <= 100; ++p) os << ",q" << (p < 10 ? "00" : p < 100 ? "0" : "") << p;
  os << "\n";
  os.precision(10);
  for (const auto& r : cdf) {
    os << r.epoch << "," << r.category;
    for (int p = 0; p <= 100; ++p) os << "," << r.q[size_t(p)];
    os << "\n";
  }
  return os.str();
}

}  // namespace stage2
}  // namespace detach

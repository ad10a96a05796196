#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "detach/encoders.hpp"
#include "detach/stage1.hpp"
#include "detach/synthdata.hpp"

namespace detach {
namespace eval {

using json = nlohmann::json;
using nn::ParamSet;
using nn::ParamVars;
using nn::Var;

// ---------------------------------------------------------------------------
// metrics

inline std::vector<int64_t> confusion_matrix(const std::vector<int>& pred,
                                             const std::vector<int>& truth, int num_classes) {
  if (pred.size() != truth.size())
    throw std::invalid_argument("confusion_matrix: length mismatch");
  std::vector<int64_t> cm(size_t(num_classes * num_classes), 0);
  for (size_t i = 0; i < pred.size(); ++i)
    ++cm[size_t(truth[i]) * size_t(num_classes) + size_t(pred[i])];
  return cm;
}

struct ClassScores {
  std::vector<double> precision, recall, f1;
  std::vector<int64_t> support;
};

inline ClassScores per_class_scores(const std::vector<int64_t>& cm, int num_classes) {
  ClassScores s;
  s.precision.assign(size_t(num_classes), 0.0);
  s.recall.assign(size_t(num_classes), 0.0);
  s.f1.assign(size_t(num_classes), 0.0);
  s.support.assign(size_t(num_classes), 0);
  for (int c = 0; c < num_classes; ++c) {
    int64_t tp = cm[size_t(c * num_classes + c)];
    int64_t row = 0, col = 0;
    for (int j = 0; j < num_classes; ++j) {
      row += cm[size_t(c * num_classes + j)];
      col += cm[size_t(j * num_classes + c)];
    }
    s.support[size_t(c)] = row;
    s.precision[size_t(c)] = col > 0 ? double(tp) / double(col) : 0.0;
    s.recall[size_t(c)] = row > 0 ? double(tp) / double(row) : 0.0;
    double pr = s.precision[size_t(c)] + s.recall[size_t(c)];
    s.f1[size_t(c)] = pr > 0 ? 2.0 * s.precision[size_t(c)] * s.recall[size_t(c)] / pr : 0.0;
  }
  return s;
}

// per-class F1 weighted by support fraction
inline double weighted_f1(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size() || pred.empty())
    throw std::invalid_argument("weighted_f1: need equal, nonempty inputs");
  int num_classes = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    num_classes = std::max({num_classes, pred[i] + 1, truth[i] + 1});
  std::vector<int64_t> cm = confusion_matrix(pred, truth, num_classes);
  ClassScores s = per_class_scores(cm, num_classes);
  double total = double(truth.size());
  double out = 0;
  for (int c = 0; c < num_classes; ++c)
    out += double(s.support[size_t(c)]) / total * s.f1[size_t(c)];
  return out;
}

// Macro mAP: per class with >= 1 positive, rank samples by descending score
// (ties by ascending sample index); AP = mean of precision at each positive's
// rank; mAP = unweighted mean over those classes.
template <class S>
double mean_average_precision(const Tensor<S>& scores, const std::vector<int>& labels) {
  if (scores.rank() != 2 || scores.dim(0) != int64_t(labels.size()))
    throw std::invalid_argument("mean_average_precision: scores must be [N,L] with N labels");
  if (!scores.all_finite()) throw std::invalid_argument("mean_average_precision: nonfinite score");
  int64_t n = scores.dim(0), l = scores.dim(1);
  double sum_ap = 0;
  int64_t classes_with_pos = 0;
  std::vector<int64_t> idx(size_t(n), 0);
  for (int64_t c = 0; c < l; ++c) {
    int64_t pos = 0;
    for (int lab : labels)
      if (lab == c) ++pos;
    if (pos == 0) continue;
    ++classes_with_pos;
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
      return double(scores.data[a * l + c]) > double(scores.data[b * l + c]);
    });
    double ap = 0;
    int64_t hits = 0;
    for (int64_t r = 0; r < n; ++r) {
      if (labels[size_t(idx[size_t(r)])] == c) {
        ++hits;
        ap += double(hits) / double(r + 1);
      }
    }
    sum_ap += ap / double(pos);
  }
  if (classes_with_pos == 0)
    throw std::invalid_argument("mean_average_precision: no class has a positive");
  return sum_ap / double(classes_with_pos);
}

// arithmetic mean over a sequence's window embeddings
template <class S>
Tensor<S> temporal_pool_sequence(const Tensor<S>& embeddings) {
  if (embeddings.rank() != 2 || embeddings.dim(0) < 1)
    throw std::invalid_argument("temporal_pool_sequence: need [n>=1, d]");
  int64_t n = embeddings.dim(0), d = embeddings.dim(1);
  Tensor<S> out({1, d});
  for (int64_t k = 0; k < d; ++k) {
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += double(embeddings.data[i * d + k]);
    out.data[size_t(k)] = S(acc / double(n));
  }
  return out;
}

// ---------------------------------------------------------------------------
// features

// sensor joint representation [spatial || temporal] for the given windows
template <class S>
Tensor<S> sensor_joint_features(const synth::Dataset& ds, const std::vector<int64_t>& idx,
                                const ParamSet<S>& sensor_spatial,
                                const ParamSet<S>& sensor_temporal, const enc::EncoderArch& arch,
                                int batch_size = 64) {
  ParamVars<S> pvs = ParamVars<S>::attach(sensor_spatial, false);
  ParamVars<S> pvt = ParamVars<S>::attach(sensor_temporal, false);
  int64_t n = int64_t(idx.size());
  Tensor<S> out({n, 2 * arch.d});
  for (int64_t at = 0; at < n; at += batch_size) {
    std::vector<int64_t> chunk(idx.begin() + at, idx.begin() + std::min<int64_t>(at + batch_size, n));
    Tensor<S> batch = stage1::gather_sensor_batch<S>(ds, chunk);
    Tensor<S> sp = enc::encode_sensor_spatial(batch, pvs, arch).value();
    Tensor<S> tp = enc::encode_sensor_temporal(batch, pvt, arch).value();
    for (size_t b = 0; b < chunk.size(); ++b)
      for (int64_t q = 0; q < arch.d; ++q) {
        out.data[(at + int64_t(b)) * 2 * arch.d + q] = sp.data[int64_t(b) * arch.d + q];
        out.data[(at + int64_t(b)) * 2 * arch.d + arch.d + q] = tp.data[int64_t(b) * arch.d + q];
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear probe

struct ProbeConfig {
  int epochs = 200;
  double lr = 1e-2;
  double weight_decay = 1e-4;
};

struct ProbeResult {
  ClassScores per_class;
  double weighted_f1 = 0;
  double map = 0;
  std::vector<int64_t> confusion;  // num_classes x num_classes
  int num_classes = 0;
  int best_epoch = -1;
  std::vector<std::string> warnings;
};

inline json probe_result_to_json(const ProbeResult& r) {
  json cm = json::array();
  for (int c = 0; c < r.num_classes; ++c) {
    json row = json::array();
    for (int j = 0; j < r.num_classes; ++j)
      row.push_back(r.confusion[size_t(c * r.num_classes + j)]);
    cm.push_back(row);
  }
  return json{{"weighted_f1", r.weighted_f1},
              {"map", r.map},
              {"num_classes", r.num_classes},
              {"best_epoch", r.best_epoch},
              {"precision", r.per_class.precision},
              {"recall", r.per_class.recall},
              {"f1", r.per_class.f1},
              {"support", r.per_class.support},
              {"confusion_matrix", cm},
              {"warnings", r.warnings}};
}

// Full-batch logistic regression head on frozen features. Best-validation
// epoch (by weighted F1, earliest wins ties) is evaluated on the test split.
template <class S>
ProbeResult train_linear_probe(const Tensor<S>& x_train, const std::vector<int>& y_train,
                               const Tensor<S>& x_val, const std::vector<int>& y_val,
                               const Tensor<S>& x_test, const std::vector<int>& y_test,
                               int num_classes, const ProbeConfig& cfg, uint64_t seed) {
  ProbeResult out;
  out.num_classes = num_classes;
  if (y_train.empty() || y_test.empty())
    throw std::invalid_argument("train_linear_probe: empty probe split");
  bool single_class = true;
  for (int y : y_train)
    if (y != y_train[0]) single_class = false;

  int64_t dim = x_train.dim(1);
  ParamSet<S> head;
  head.add("head.w", {num_classes, dim});
  head.add("head.bias", {num_classes});
  Rng rng = substream(seed, "probe/init");
  nn::init_params(head, rng);

  auto predict = [&](const ParamSet<S>& h, const Tensor<S>& x) {
    ParamVars<S> pv = ParamVars<S>::attach(h, false);
    Var<S> logits = nn::linear(Var<S>::leaf(x, false), pv["head.w"], pv["head.bias"]);
    return logits.value();
  };
  auto argmax_of = [&](const Tensor<S>& logits) {
    std::vector<int> pred(size_t(logits.dim(0)), 0);
    std::vector<int64_t> am = stage1::argmax_rows(logits);
    for (size_t i = 0; i < pred.size(); ++i) pred[i] = int(am[i]);
    return pred;
  };

  ParamSet<S> best = head;
  if (single_class) {
    out.warnings.push_back("probe train split contains a single class (" +
                           std::to_string(y_train[0]) + "); head degenerates to a constant");
    // force the constant prediction rather than relying on optimization
    for (auto& v : best.value("head.w").data) v = S(0);
    for (auto& v : best.value("head.bias").data) v = S(0);
    best.value("head.bias").data[size_t(y_train[0])] = S(1);
  } else {
    std::vector<int64_t> lab(y_train.begin(), y_train.end());
    nn::AdamW<S> opt(cfg.lr, cfg.weight_decay);
    double best_val = -1;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      head.zero_grads();
      ParamVars<S> pv = ParamVars<S>::attach(head, true);
      Var<S> logits = nn::linear(Var<S>::leaf(x_train, false), pv["head.w"], pv["head.bias"]);
      Var<S> loss = nn::weighted_ce_mean(logits, lab);
      nn::backward(loss);
      pv.harvest_into(head);
      opt.step(head);
      double val_f1 = y_val.empty() ? 0.0 : weighted_f1(argmax_of(predict(head, x_val)), y_val);
      if (val_f1 > best_val) {
        best_val = val_f1;
        best = head;
        out.best_epoch = epoch;
      }
    }
    if (y_val.empty()) {
      out.warnings.push_back("probe validation split empty; using final epoch head");
      best = head;
      out.best_epoch = cfg.epochs - 1;
    }
  }

  Tensor<S> test_logits = predict(best, x_test);
  std::vector<int> pred = argmax_of(test_logits);
  out.confusion = confusion_matrix(pred, y_test, num_classes);
  out.per_class = per_class_scores(out.confusion, num_classes);
  double total = double(y_test.size());
  out.weighted_f1 = 0;
  for (int c = 0; c < num_classes; ++c)
    out.weighted_f1 += double(out.per_class.support[size_t(c)]) / total * out.per_class.f1[size_t(c)];
  out.map = mean_average_precision(test_logits, y_test);
  return out;
}

// ---------------------------------------------------------------------------
// embedding export

// CSV: window_index, modality, spatial d dims, temporal d dims, source_id,
// action_id — one video and one sensor row per window
template <class S>
std::string export_embeddings_csv(const synth::Dataset& ds, const std::vector<int64_t>& idx,
                                  const ParamSet<S>& sensor_spatial,
                                  const ParamSet<S>& video_spatial,
                                  const ParamSet<S>& sensor_temporal,
                                  const ParamSet<S>& video_temporal, const enc::EncoderArch& arch,
                                  int batch_size = 64) {
  ParamVars<S> pss = ParamVars<S>::attach(sensor_spatial, false);
  ParamVars<S> pvs = ParamVars<S>::attach(video_spatial, false);
  ParamVars<S> pst = ParamVars<S>::attach(sensor_temporal, false);
  ParamVars<S> pvt = ParamVars<S>::attach(video_temporal, false);
  std::ostringstream os;
  os << "window_index,modality";
  for (int q = 0; q < arch.d; ++q) os << ",s" << q;
  for (int q = 0; q < arch.d; ++q) os << ",t" << q;
  os << ",source_id,action_id\n";
  os.precision(9);
  int64_t n = int64_t(idx.size());
  for (int64_t at = 0; at < n; at += batch_size) {
    std::vector<int64_t> chunk(idx.begin() + at, idx.begin() + std::min<int64_t>(at + batch_size, n));
    Tensor<S> sens = stage1::gather_sensor_batch<S>(ds, chunk);
    Tensor<S> vid = stage1::gather_video_batch<S>(ds, chunk);
    Tensor<S> s_sp = enc::encode_sensor_spatial(sens, pss, arch).value();
    Tensor<S> s_tp = enc::encode_sensor_temporal(sens, pst, arch).value();
    Tensor<S> v_sp = enc::encode_video_spatial(vid, pvs, arch).value();
    Tensor<S> v_tp = enc::encode_video_temporal(vid, pvt, arch).value();
    for (size_t b = 0; b < chunk.size(); ++b) {
      const synth::SensorWindow& w = ds.windows.at(size_t(chunk[b]));
      for (int m = 0; m < 2; ++m) {
        const Tensor<S>& sp = m == 0 ? v_sp : s_sp;
        const Tensor<S>& tp = m == 0 ? v_tp : s_tp;
        os << w.window_index << "," << (m == 0 ? "video" : "sensor");
        for (int64_t q = 0; q < arch.d; ++q) os << "," << double(sp.data[int64_t(b) * arch.d + q]);
        for (int64_t q = 0; q < arch.d; ++q) os << "," << double(tp.data[int64_t(b) * arch.d + q]);
        os << "," << w.source_id << "," << w.action_id << "\n";
      }
    }
  }
  return os.str();
}

}  // namespace eval
}  // namespace detach

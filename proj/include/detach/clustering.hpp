#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "detach/autodiff.hpp"
#include "detach/rng.hpp"
#include "detach/tensor.hpp"

namespace detach {
namespace cluster {

// Online deep clustering state over the pretraining split. The memory bank
// holds EMA-smoothed unit-norm features per sample; centroids themselves are
// trainable parameters owned by the sensor spatial ParamSet and are passed in
// explicitly.
template <class S>
struct ClusterState {
  Tensor<S> memory;            // [N, d], unit rows
  std::vector<int> labels;     // N pseudo-labels in [0,K)
  std::vector<int64_t> sizes;  // K
  std::vector<char> confident; // N flags, refreshed by confidence_split

  int64_t total() const { return int64_t(labels.size()); }

  void check(int64_t k) const {
    int64_t sum = 0;
    for (int64_t s : sizes) sum += s;
    if (sum != total() || int64_t(sizes.size()) != k)
      throw std::logic_error("ClusterState: sizes inconsistent with labels");
  }
};

struct ConfidenceSplit {
  std::vector<int64_t> confident;
  std::vector<int64_t> ambiguous;
  std::vector<double> thresholds;  // per cluster, 75th-percentile distance
};

// label_i = argmin_k |f_i - c_k|, ties to the lowest cluster index
template <class S>
void assign_pseudo_labels(const Tensor<S>& features, const Tensor<S>& centroids,
                          std::vector<int>* labels, std::vector<double>* distances) {
  if (features.rank() != 2 || centroids.rank() != 2 || features.dim(1) != centroids.dim(1))
    throw std::invalid_argument("assign_pseudo_labels: need [N,d] features and [K,d] centroids");
  if (!features.all_finite()) throw std::invalid_argument("assign_pseudo_labels: nonfinite feature");
  int64_t n = features.dim(0), k = centroids.dim(0), d = features.dim(1);
  if (k < 2) throw std::invalid_argument("assign_pseudo_labels: need K >= 2");
  labels->assign(size_t(n), 0);
  if (distances) distances->assign(size_t(n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    int best = 0;
    double best_d = 1e300;
    for (int64_t c = 0; c < k; ++c) {
      double acc = 0;
      for (int64_t q = 0; q < d; ++q) {
        double diff = double(features.data[i * d + q]) - double(centroids.data[c * d + q]);
        acc += diff * diff;
      }
      double dist = std::sqrt(acc);
      if (dist < best_d - 1e-12) {
        best_d = dist;
        best = int(c);
      }
    }
    (*labels)[size_t(i)] = best;
    if (distances) (*distances)[size_t(i)] = best_d;
  }
}

// w_k = 1 / sqrt(|C_k|); per-sample weights w_{y_i}
inline std::vector<double> balance_weights(const std::vector<int>& labels,
                                           const std::vector<int64_t>& sizes) {
  std::vector<double> w(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    int64_t sz = sizes.at(size_t(labels[i]));
    if (sz <= 0) throw std::logic_error("balance_weights: assigned label with empty cluster");
    w[i] = 1.0 / std::sqrt(double(sz));
  }
  return w;
}

// Class-balanced clustering loss (probabilities via softmax over -|f-c|^2/tau):
// L = (1/N) sum_i w_{y_i} * (-log p_{i,y_i}); gradients reach features and
// centroids through the logit op.
template <class S>
nn::Var<S> cluster_loss(const nn::Var<S>& features_unit, const nn::Var<S>& centroids,
                        const std::vector<int>& labels, const std::vector<int64_t>& sizes,
                        double tau) {
  nn::Var<S> logits = nn::neg_sqdist_logits(features_unit, centroids, tau);
  std::vector<int64_t> lab(labels.begin(), labels.end());
  return nn::weighted_ce_mean(logits, lab, balance_weights(labels, sizes));
}

template <class S>
void recount_sizes(ClusterState<S>& st, int64_t k) {
  st.sizes.assign(size_t(k), 0);
  for (int l : st.labels) ++st.sizes.at(size_t(l));
}

namespace detail {

template <class S>
void recompute_centroid(ClusterState<S>& st, Tensor<S>& centroids, int64_t c) {
  int64_t d = centroids.dim(1);
  std::vector<double> mean(size_t(d), 0.0);
  int64_t count = 0;
  for (int64_t i = 0; i < st.total(); ++i) {
    if (st.labels[size_t(i)] != c) continue;
    ++count;
    for (int64_t q = 0; q < d; ++q) mean[size_t(q)] += double(st.memory.data[i * d + q]);
  }
  if (count == 0) return;  // handled by handle_empty_clusters
  for (int64_t q = 0; q < d; ++q) centroids.data[c * d + q] = S(mean[size_t(q)] / double(count));
}

}  // namespace detail

// EMA the batch features into the memory bank (then renormalize rows),
// relabel the touched samples to their nearest centroid, and recompute the
// centroids of every touched cluster as the mean of its members' memory rows.
template <class S>
void update_memory_and_centroids(ClusterState<S>& st, Tensor<S>& centroids,
                                 const std::vector<int64_t>& indices,
                                 const Tensor<S>& batch_features, double momentum_mem) {
  int64_t d = st.memory.dim(1);
  if (batch_features.dim(0) != int64_t(indices.size()) || batch_features.dim(1) != d)
    throw std::invalid_argument("update_memory_and_centroids: batch shape mismatch");
  std::vector<char> touched(st.sizes.size(), 0);
  for (size_t b = 0; b < indices.size(); ++b) {
    int64_t i = indices[b];
    if (i < 0 || i >= st.total())
      throw std::invalid_argument("update_memory_and_centroids: index out of range");
    double norm2 = 0;
    for (int64_t q = 0; q < d; ++q) {
      double v = momentum_mem * double(st.memory.data[i * d + q]) +
                 (1.0 - momentum_mem) * double(batch_features.data[int64_t(b) * d + q]);
      st.memory.data[i * d + q] = S(v);
      norm2 += v * v;
    }
    double inv = 1.0 / (std::sqrt(norm2) + 1e-12);
    for (int64_t q = 0; q < d; ++q) st.memory.data[i * d + q] = S(double(st.memory.data[i * d + q]) * inv);

    // relabel to nearest centroid
    int old_label = st.labels[size_t(i)];
    int best = 0;
    double best_d = 1e300;
    for (int64_t c = 0; c < int64_t(st.sizes.size()); ++c) {
      double acc = 0;
      for (int64_t q = 0; q < d; ++q) {
        double diff = double(st.memory.data[i * d + q]) - double(centroids.data[c * d + q]);
        acc += diff * diff;
      }
      if (acc < best_d - 1e-12) {
        best_d = acc;
        best = int(c);
      }
    }
    if (best != old_label) {
      --st.sizes[size_t(old_label)];
      ++st.sizes[size_t(best)];
      st.labels[size_t(i)] = best;
    }
    touched[size_t(old_label)] = 1;
    touched[size_t(best)] = 1;
  }
  for (size_t c = 0; c < touched.size(); ++c)
    if (touched[c]) detail::recompute_centroid(st, centroids, int64_t(c));
}

// Empty clusters steal a random member of the largest cluster: the new
// centroid is that member's memory row plus 1e-4 noise, and the member moves.
template <class S>
void handle_empty_clusters(ClusterState<S>& st, Tensor<S>& centroids, Rng& rng) {
  int64_t k = int64_t(st.sizes.size());
  if (k > st.total())
    throw std::invalid_argument("handle_empty_clusters: more clusters than samples");
  int64_t d = centroids.dim(1);
  for (int64_t c = 0; c < k; ++c) {
    if (st.sizes[size_t(c)] > 0) continue;
    int64_t largest = 0;
    for (int64_t j = 1; j < k; ++j)
      if (st.sizes[size_t(j)] > st.sizes[size_t(largest)]) largest = j;
    std::vector<int64_t> members;
    for (int64_t i = 0; i < st.total(); ++i)
      if (st.labels[size_t(i)] == largest) members.push_back(i);
    int64_t pick = members.at(size_t(rng.uniform_int(0, int64_t(members.size()))));
    for (int64_t q = 0; q < d; ++q)
      centroids.data[c * d + q] =
          S(double(st.memory.data[pick * d + q]) + 1e-4 * rng.gaussian());
    st.labels[size_t(pick)] = int(c);
    --st.sizes[size_t(largest)];
    ++st.sizes[size_t(c)];
  }
}

// Per cluster, threshold = 75th-percentile member distance; members at or
// below the threshold are confident. Singleton clusters stay confident.
template <class S>
ConfidenceSplit confidence_split(const ClusterState<S>& st, const Tensor<S>& centroids,
                                 double percentile_p = 75.0) {
  int64_t k = int64_t(st.sizes.size());
  int64_t d = centroids.dim(1);
  std::vector<double> dist(size_t(st.total()), 0.0);
  for (int64_t i = 0; i < st.total(); ++i) {
    int64_t c = st.labels[size_t(i)];
    double acc = 0;
    for (int64_t q = 0; q < d; ++q) {
      double diff = double(st.memory.data[i * d + q]) - double(centroids.data[c * d + q]);
      acc += diff * diff;
    }
    dist[size_t(i)] = std::sqrt(acc);
  }
  ConfidenceSplit out;
  out.thresholds.assign(size_t(k), 0.0);
  for (int64_t c = 0; c < k; ++c) {
    std::vector<double> member_d;
    for (int64_t i = 0; i < st.total(); ++i)
      if (st.labels[size_t(i)] == c) member_d.push_back(dist[size_t(i)]);
    if (member_d.empty()) throw std::invalid_argument("confidence_split: empty cluster");
    out.thresholds[size_t(c)] = percentile(member_d, percentile_p);
  }
  for (int64_t i = 0; i < st.total(); ++i) {
    if (dist[size_t(i)] <= out.thresholds[size_t(st.labels[size_t(i)])] + 1e-12)
      out.confident.push_back(i);
    else
      out.ambiguous.push_back(i);
  }
  return out;
}

inline double label_change_rate(const std::vector<int>& prev, const std::vector<int>& now) {
  if (prev.size() != now.size())
    throw std::invalid_argument("label_change_rate: length mismatch");
  if (prev.empty()) return 0.0;
  int64_t diff = 0;
  for (size_t i = 0; i < prev.size(); ++i)
    if (prev[i] != now[i]) ++diff;
  return double(diff) / double(prev.size());
}

// Majority-label purity: sum over clusters of the count of the most common
// ground-truth label, divided by the number of labeled samples. Samples with
// truth < 0 (idle) are excluded.
inline double purity(const std::vector<int>& cluster_labels, const std::vector<int>& truth,
                     int64_t k, int64_t num_truth_classes) {
  if (cluster_labels.size() != truth.size()) throw std::invalid_argument("purity: length mismatch");
  std::vector<int64_t> counts(size_t(k * num_truth_classes), 0);
  int64_t n = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0) continue;
    ++counts[size_t(cluster_labels[i]) * size_t(num_truth_classes) + size_t(truth[i])];
    ++n;
  }
  if (n == 0) return 0.0;
  int64_t agree = 0;
  for (int64_t c = 0; c < k; ++c) {
    int64_t best = 0;
    for (int64_t l = 0; l < num_truth_classes; ++l)
      best = std::max(best, counts[size_t(c * num_truth_classes + l)]);
    agree += best;
  }
  return double(agree) / double(n);
}

namespace detail {

// One Lloyd run with k-means++ seeding (each next seed drawn with probability
// proportional to its squared distance to the nearest chosen seed), then
// alternating nearest-centroid assignment and mean updates until the labels
// stop moving. Returns the inertia (sum of squared member distances).
// Uniform-sample seeding is not enough here: with tight well-separated
// groups, two seeds in one group give a merged local optimum that the Lloyd
// iterations cannot escape.
template <class S>
double lloyd_run(const Tensor<S>& features, Tensor<S>& centroids, std::vector<int>& labels,
                 Rng& rng, int max_iters = 100) {
  int64_t n = features.dim(0), d = features.dim(1), k = centroids.dim(0);
  std::vector<double> d2(size_t(n), 0.0);
  int64_t first = rng.uniform_int(0, n);
  for (int64_t q = 0; q < d; ++q) centroids.data[q] = features.data[first * d + q];
  for (int64_t c = 1; c < k; ++c) {
    double total = 0;
    for (int64_t i = 0; i < n; ++i) {
      double best = 1e300;
      for (int64_t p = 0; p < c; ++p) {
        double acc = 0;
        for (int64_t q = 0; q < d; ++q) {
          double diff = double(features.data[i * d + q]) - double(centroids.data[p * d + q]);
          acc += diff * diff;
        }
        best = std::min(best, acc);
      }
      d2[size_t(i)] = best;
      total += best;
    }
    int64_t pick = 0;
    if (total > 0) {
      double u = rng.uniform(0.0, total);
      double acc = 0;
      for (int64_t i = 0; i < n; ++i) {
        acc += d2[size_t(i)];
        if (acc >= u) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_int(0, n);  // all points coincide with a seed
    }
    for (int64_t q = 0; q < d; ++q) centroids.data[c * d + q] = features.data[pick * d + q];
  }
  labels.clear();
  std::vector<double> dist;
  for (int iter = 0; iter < max_iters; ++iter) {
    std::vector<int> next;
    assign_pseudo_labels(features, centroids, &next, &dist);
    std::vector<double> acc(size_t(k * d), 0.0);
    std::vector<int64_t> cnt(size_t(k), 0);
    for (int64_t i = 0; i < n; ++i) {
      ++cnt[size_t(next[size_t(i)])];
      for (int64_t q = 0; q < d; ++q)
        acc[size_t(next[size_t(i)]) * size_t(d) + size_t(q)] += double(features.data[i * d + q]);
    }
    for (int64_t c = 0; c < k; ++c) {
      if (cnt[size_t(c)] == 0) continue;  // keep previous centroid
      for (int64_t q = 0; q < d; ++q)
        centroids.data[c * d + q] =
            S(acc[size_t(c) * size_t(d) + size_t(q)] / double(cnt[size_t(c)]));
    }
    bool stable = (next == labels);
    labels = std::move(next);
    if (stable) break;
  }
  assign_pseudo_labels(features, centroids, &labels, &dist);
  double inertia = 0.0;
  for (double v : dist) inertia += v * v;
  return inertia;
}

}  // namespace detail

// Initial state: centroids come from the best of several Lloyd refinement
// runs over the initial features (random-sample seeding, lowest inertia
// wins); memory holds the normalized features; labels by nearest centroid.
// One-shot random seeding routinely places two centroids inside the same
// dense group, and the online updates cannot split a merged, non-empty
// cluster afterwards.
template <class S>
ClusterState<S> init_cluster_state(const Tensor<S>& features_unit, Tensor<S>& centroids,
                                   Rng& rng, int restarts = 20) {
  int64_t n = features_unit.dim(0);
  int64_t k = centroids.dim(0);
  if (k > n) throw std::invalid_argument("init_cluster_state: more clusters than samples");
  Tensor<S> best_centroids = centroids;
  std::vector<int> best_labels;
  double best_inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(restarts, 1); ++r) {
    Tensor<S> cand = centroids;
    std::vector<int> labels;
    double inertia = detail::lloyd_run(features_unit, cand, labels, rng);
    if (inertia < best_inertia) {
      best_inertia = inertia;
      best_centroids = cand;
      best_labels = std::move(labels);
    }
  }
  centroids = best_centroids;
  ClusterState<S> st;
  st.memory = features_unit;
  st.labels = std::move(best_labels);
  recount_sizes(st, k);
  st.confident.assign(size_t(n), 1);
  handle_empty_clusters(st, centroids, rng);
  return st;
}

}  // namespace cluster
}  // namespace detach

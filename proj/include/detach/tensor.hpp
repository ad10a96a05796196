#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace detach {

// Dense row-major tensor. Scalar type is a template parameter: training runs
// with float storage, gradient-check oracles instantiate double throughout.
// Reductions always accumulate in double regardless of S.
template <class S>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> sh, S fill = S(0)) : shape(std::move(sh)) {
    data.assign(size_t(count(shape)), fill);
  }

  static Tensor from(std::vector<int64_t> sh, std::vector<S> d) {
    Tensor t;
    t.shape = std::move(sh);
    t.data = std::move(d);
    if (count(t.shape) != int64_t(t.data.size()))
      throw std::invalid_argument("Tensor::from: shape/data size mismatch");
    return t;
  }

  static int64_t count(const std::vector<int64_t>& sh) {
    int64_t n = 1;
    for (int64_t d : sh) n *= d;
    return n;
  }

  int64_t size() const { return int64_t(data.size()); }
  int rank() const { return int(shape.size()); }
  int64_t dim(size_t i) const { return shape[i]; }
  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> t;
    t.shape = shape;
    t.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) t.data[i] = U(data[i]);
    return t;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }
};

// Percentile with the linear-interpolation convention: rank r = (n-1)*p/100
// over the sorted values.
template <class S>
double percentile(std::vector<S> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile: empty input");
  if (p < 0.0 || p > 100.0) throw std::invalid_argument("percentile: p out of [0,100]");
  std::sort(values.begin(), values.end());
  double r = double(values.size() - 1) * p / 100.0;
  size_t lo = size_t(std::floor(r));
  size_t hi = size_t(std::ceil(r));
  double frac = r - double(lo);
  return double(values[lo]) + frac * (double(values[hi]) - double(values[lo]));
}

// S_ij = <a_i, b_j> / (|a_i||b_j| + eps), eps = 1e-8.
template <class S>
Tensor<S> cosine_similarity_matrix(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw std::invalid_argument("cosine_similarity_matrix: need NxD and MxD, got " +
                                a.shape_str() + " vs " + b.shape_str());
  int64_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  std::vector<double> na(size_t(n), 0.0), nb(size_t(m), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (int64_t k = 0; k < d; ++k) s += double(a.data[i * d + k]) * double(a.data[i * d + k]);
    na[size_t(i)] = std::sqrt(s);
  }
  for (int64_t j = 0; j < m; ++j) {
    double s = 0;
    for (int64_t k = 0; k < d; ++k) s += double(b.data[j * d + k]) * double(b.data[j * d + k]);
    nb[size_t(j)] = std::sqrt(s);
  }
  Tensor<S> out({n, m});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) {
      double dot = 0;
      for (int64_t k = 0; k < d; ++k) dot += double(a.data[i * d + k]) * double(b.data[j * d + k]);
      out.data[i * m + j] = S(dot / (na[size_t(i)] * nb[size_t(j)] + 1e-8));
    }
  return out;
}

// Row-wise L2 normalization; zero rows stay zero (eps guard).
template <class S>
Tensor<S> l2_normalize_rows(const Tensor<S>& x) {
  if (x.rank() != 2) throw std::invalid_argument("l2_normalize_rows: need rank 2");
  int64_t n = x.dim(0), d = x.dim(1);
  Tensor<S> out = x;
  for (int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (int64_t k = 0; k < d; ++k) s += double(x.data[i * d + k]) * double(x.data[i * d + k]);
    double inv = 1.0 / (std::sqrt(s) + 1e-12);
    for (int64_t k = 0; k < d; ++k) out.data[i * d + k] = S(double(x.data[i * d + k]) * inv);
  }
  return out;
}

}  // namespace detach

#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "detach/autodiff.hpp"
#include "detach/rng.hpp"
#include "detach/tensor.hpp"

namespace detach {
namespace nn {

// Named parameters with matching gradient buffers. Iteration follows
// insertion order so init, serialization, and optimizer sweeps are
// deterministic.
template <class S>
struct ParamSet {
  std::vector<std::string> order;
  std::unordered_map<std::string, Tensor<S>> values;
  std::unordered_map<std::string, Tensor<S>> grads;

  Tensor<S>& add(const std::string& name, std::vector<int64_t> shape) {
    if (values.count(name)) throw std::invalid_argument("ParamSet: duplicate name " + name);
    order.push_back(name);
    values[name] = Tensor<S>(shape);
    grads[name] = Tensor<S>(shape);
    return values[name];
  }

  bool has(const std::string& name) const { return values.count(name) > 0; }

  Tensor<S>& value(const std::string& name) {
    auto it = values.find(name);
    if (it == values.end()) throw std::invalid_argument("ParamSet: unknown parameter " + name);
    return it->second;
  }
  const Tensor<S>& value(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw std::invalid_argument("ParamSet: unknown parameter " + name);
    return it->second;
  }
  Tensor<S>& grad(const std::string& name) { return grads.at(name); }

  void zero_grads() {
    for (auto& [k, g] : grads)
      for (auto& v : g.data) v = S(0);
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (auto& name : order) n += values.at(name).size();
    return n;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (auto& name : order) {
      out.order.push_back(name);
      out.values[name] = values.at(name).template cast<U>();
      out.grads[name] = grads.at(name).template cast<U>();
    }
    return out;
  }

  bool bit_equal(const ParamSet& o) const {
    if (order != o.order) return false;
    for (auto& name : order) {
      const auto& a = values.at(name);
      const auto& b = o.values.at(name);
      if (a.shape != b.shape) return false;
      for (size_t i = 0; i < a.data.size(); ++i)
        if (!(a.data[i] == b.data[i])) return false;
    }
    return true;
  }
};

// Uniform +-sqrt(1/fan_in) for weights, zeros for names ending in "bias".
template <class S>
void init_params(ParamSet<S>& p, Rng& rng) {
  for (auto& name : p.order) {
    Tensor<S>& t = p.value(name);
    bool is_bias = name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0;
    if (is_bias) {
      for (auto& v : t.data) v = S(0);
      continue;
    }
    int64_t fan_in = t.rank() >= 2 ? t.size() / t.dim(0) : t.dim(0);
    double bound = std::sqrt(1.0 / double(std::max<int64_t>(fan_in, 1)));
    for (auto& v : t.data) v = S(rng.uniform(-bound, bound));
  }
}

// Leaf variables attached to a ParamSet for one graph build. harvest()
// accumulates the tape gradients back into the set's gradient buffers.
template <class S>
struct ParamVars {
  std::map<std::string, Var<S>> vars;

  static ParamVars attach(const ParamSet<S>& p, bool requires_grad) {
    ParamVars pv;
    for (auto& name : p.order) pv.vars.emplace(name, Var<S>::leaf(p.values.at(name), requires_grad));
    return pv;
  }

  const Var<S>& operator[](const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw std::invalid_argument("ParamVars: unknown parameter " + name);
    return it->second;
  }

  void harvest_into(ParamSet<S>& p) const {
    for (auto& [name, v] : vars) {
      if (!v.node->requires_grad) continue;
      if (v.node->grad.data.empty()) continue;
      Tensor<S>& g = p.grad(name);
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += v.node->grad.data[i];
    }
  }
};

// AdamW with decoupled weight decay. Moments kept in double so updates are
// reproducible independent of the storage scalar.
template <class S>
struct AdamW {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step_count = 0;
  std::unordered_map<std::string, Tensor<double>> m, v;

  AdamW() = default;
  AdamW(double lr_, double wd_) : lr(lr_), weight_decay(wd_) {}

  void step(ParamSet<S>& p) {
    ++step_count;
    double bc1 = 1.0 - std::pow(beta1, double(step_count));
    double bc2 = 1.0 - std::pow(beta2, double(step_count));
    for (auto& name : p.order) {
      Tensor<S>& theta = p.value(name);
      Tensor<S>& g = p.grad(name);
      if (!g.all_finite())
        throw std::runtime_error("AdamW: nonfinite gradient for parameter '" + name + "'");
      auto& mm = m[name];
      auto& vv = v[name];
      if (mm.data.empty()) mm = Tensor<double>(theta.shape);
      if (vv.data.empty()) vv = Tensor<double>(theta.shape);
      for (size_t i = 0; i < theta.data.size(); ++i) {
        double gi = double(g.data[i]);
        mm.data[i] = beta1 * mm.data[i] + (1.0 - beta1) * gi;
        vv.data[i] = beta2 * vv.data[i] + (1.0 - beta2) * gi * gi;
        double mhat = mm.data[i] / bc1;
        double vhat = vv.data[i] / bc2;
        double th = double(theta.data[i]);
        th -= lr * weight_decay * th;  // decoupled decay
        th -= lr * mhat / (std::sqrt(vhat) + eps);
        theta.data[i] = S(th);
      }
    }
  }
};

// theta_mom <- m*theta_mom + (1-m)*theta_online
template <class S>
void ema_update(ParamSet<S>& momentum, const ParamSet<S>& online, double m) {
  if (m < 0.0 || m >= 1.0) throw std::invalid_argument("ema_update: need 0 <= m < 1");
  for (auto& name : momentum.order) {
    Tensor<S>& t = momentum.value(name);
    const Tensor<S>& o = online.value(name);
    if (t.shape != o.shape) throw std::invalid_argument("ema_update: shape mismatch at " + name);
    for (size_t i = 0; i < t.data.size(); ++i)
      t.data[i] = S(m * double(t.data[i]) + (1.0 - m) * double(o.data[i]));
  }
}

}  // namespace nn
}  // namespace detach

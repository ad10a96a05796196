#pragma once

#include <array>
#include <atomic>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "detach/tensor.hpp"

namespace detach {
namespace nn {

// Minimal reverse-mode tape. Nodes are created eagerly; backward() walks the
// graph in reverse creation order. The op set is closed and small: dense,
// conv, recurrent-cell building blocks, attention pooling, and the fused
// losses. Each backward accumulates into parent grads with the parent order
// fixed, so results do not depend on evaluation schedule.

inline uint64_t next_node_id() {
  static std::atomic<uint64_t> counter{0};
  return ++counter;
}

template <class S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // allocated lazily
  bool requires_grad = false;
  uint64_t id = 0;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(Node<S>&)> backward_fn;

  Tensor<S>& grad_buf() {
    if (grad.shape.empty() && !value.shape.empty()) grad = Tensor<S>(value.shape);
    if (grad.data.size() != value.data.size()) grad = Tensor<S>(value.shape);
    return grad;
  }
};

template <class S>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<S>> n) : node(std::move(n)) {}

  static Var leaf(Tensor<S> v, bool requires_grad) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    n->id = next_node_id();
    return Var(std::move(n));
  }

  bool defined() const { return node != nullptr; }
  const Tensor<S>& value() const { return node->value; }
  Tensor<S>& grad() { return node->grad_buf(); }
  bool requires_grad() const { return node->requires_grad; }

  std::shared_ptr<Node<S>> node;
};

template <class S>
std::shared_ptr<Node<S>> make_node(Tensor<S> value, std::vector<std::shared_ptr<Node<S>>> parents,
                                   std::function<void(Node<S>&)> bw) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(bw);
  n->id = next_node_id();
  return n;
}

template <class S>
void backward(const Var<S>& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined root");
  if (!root.node->requires_grad) return;
  // collect reachable nodes
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<Node<S>*> stack{root.node.get()};
  while (!stack.empty()) {
    Node<S>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& p : n->parents)
      if (p->requires_grad) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(), [](Node<S>* a, Node<S>* b) { return a->id > b->id; });
  Tensor<S>& g = root.node->grad_buf();
  for (auto& v : g.data) v = S(1);
  for (Node<S>* n : order)
    if (n->backward_fn) n->backward_fn(*n);
}

// ---------------------------------------------------------------------------
// helpers

template <class S>
void accum(std::shared_ptr<Node<S>>& p, const Tensor<S>& g) {
  if (!p->requires_grad) return;
  Tensor<S>& dst = p->grad_buf();
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// ---------------------------------------------------------------------------
// dense

// y = x W^T + bias; x:[N,a], W:[b,a], bias:[b] (optional)
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& bias = Var<S>()) {
  require(x.value().rank() == 2 && w.value().rank() == 2, "linear: x and W must be rank 2");
  int64_t n = x.value().dim(0), a = x.value().dim(1);
  int64_t b = w.value().dim(0);
  require(w.value().dim(1) == a,
          "linear: weight shape " + w.node->value.shape_str() + " incompatible with input " +
              x.node->value.shape_str() + " (expected [b," + std::to_string(a) + "])");
  if (bias.defined())
    require(bias.value().rank() == 1 && bias.value().dim(0) == b,
            "linear: bias shape " + bias.node->value.shape_str() + " (expected [" +
                std::to_string(b) + "])");
  Tensor<S> y({n, b});
  const S* xp = x.value().ptr();
  const S* wp = w.value().ptr();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < b; ++j) {
      double acc = bias.defined() ? double(bias.value().data[size_t(j)]) : 0.0;
      for (int64_t k = 0; k < a; ++k) acc += double(xp[i * a + k]) * double(wp[j * a + k]);
      y.data[i * b + j] = S(acc);
    }
  std::vector<std::shared_ptr<Node<S>>> parents{x.node, w.node};
  if (bias.defined()) parents.push_back(bias.node);
  auto xn = x.node, wn = w.node;
  auto bn = bias.defined() ? bias.node : nullptr;
  auto bw = [xn, wn, bn, n, a, b](Node<S>& self) mutable {
    const Tensor<S>& g = self.grad;
    if (xn->requires_grad) {
      Tensor<S>& gx = xn->grad_buf();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < a; ++k) {
          double acc = 0;
          for (int64_t j = 0; j < b; ++j)
            acc += double(g.data[i * b + j]) * double(wn->value.data[j * a + k]);
          gx.data[i * a + k] += S(acc);
        }
    }
    if (wn->requires_grad) {
      Tensor<S>& gw = wn->grad_buf();
      for (int64_t j = 0; j < b; ++j)
        for (int64_t k = 0; k < a; ++k) {
          double acc = 0;
          for (int64_t i = 0; i < n; ++i)
            acc += double(g.data[i * b + j]) * double(xn->value.data[i * a + k]);
          gw.data[j * a + k] += S(acc);
        }
    }
    if (bn && bn->requires_grad) {
      Tensor<S>& gb = bn->grad_buf();
      for (int64_t j = 0; j < b; ++j) {
        double acc = 0;
        for (int64_t i = 0; i < n; ++i) acc += double(g.data[i * b + j]);
        gb.data[size_t(j)] += S(acc);
      }
    }
  };
  return Var<S>(make_node<S>(std::move(y), std::move(parents), std::move(bw)));
}

// S_ij = <a_i, b_j>; a:[N,d], b:[M,d] -> [N,M]
template <class S>
Var<S> dot_products(const Var<S>& a, const Var<S>& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 && a.value().dim(1) == b.value().dim(1),
          "dot_products: need NxD and MxD");
  int64_t n = a.value().dim(0), m = b.value().dim(0), d = a.value().dim(1);
  Tensor<S> y({n, m});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) {
      double acc = 0;
      for (int64_t k = 0; k < d; ++k)
        acc += double(a.value().data[i * d + k]) * double(b.value().data[j * d + k]);
      y.data[i * m + j] = S(acc);
    }
  auto an = a.node, bn = b.node;
  auto bw = [an, bn, n, m, d](Node<S>& self) {
    const Tensor<S>& g = self.grad;
    if (an->requires_grad) {
      Tensor<S>& ga = an->grad_buf();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < d; ++k) {
          double acc = 0;
          for (int64_t j = 0; j < m; ++j)
            acc += double(g.data[i * m + j]) * double(bn->value.data[j * d + k]);
          ga.data[i * d + k] += S(acc);
        }
    }
    if (bn->requires_grad) {
      Tensor<S>& gb = bn->grad_buf();
      for (int64_t j = 0; j < m; ++j)
        for (int64_t k = 0; k < d; ++k) {
          double acc = 0;
          for (int64_t i = 0; i < n; ++i)
            acc += double(g.data[i * m + j]) * double(an->value.data[i * d + k]);
          gb.data[j * d + k] += S(acc);
        }
    }
  };
  return Var<S>(make_node<S>(std::move(y), {a.node, b.node}, std::move(bw)));
}

// ---------------------------------------------------------------------------
// elementwise

template <class S, class F, class DF>
Var<S> unary_elementwise(const Var<S>& x, F f, DF df_from_xy) {
  Tensor<S> y(x.value().shape);
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = S(f(double(x.value().data[i])));
  auto xn = x.node;
  auto bw = [xn, df_from_xy](Node<S>& self) {
    Tensor<S>& gx = xn->grad_buf();
    for (size_t i = 0; i < gx.data.size(); ++i)
      gx.data[i] += S(double(self.grad.data[i]) *
                      df_from_xy(double(xn->value.data[i]), double(self.value.data[i])));
  };
  return Var<S>(make_node<S>(std::move(y), {x.node}, std::move(bw)));
}

template <class S>
Var<S> sigmoid(const Var<S>& x) {
  return unary_elementwise(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

template <class S>
Var<S> tanh_act(const Var<S>& x) {
  return unary_elementwise(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

template <class S>
Var<S> relu(const Var<S>& x) {
  return unary_elementwise(
      x, [](double v) { return v > 0 ? v : 0.0; },
      [](double xv, double) { return xv > 0 ? 1.0 : 0.0; });
}

// y = alpha*x + beta
template <class S>
Var<S> affine(const Var<S>& x, double alpha, double beta) {
  Tensor<S> y(x.value().shape);
  for (size_t i = 0; i < y.data.size(); ++i)
    y.data[i] = S(alpha * double(x.value().data[i]) + beta);
  auto xn = x.node;
  auto bw = [xn, alpha](Node<S>& self) {
    Tensor<S>& gx = xn->grad_buf();
    for (size_t i = 0; i < gx.data.size(); ++i)
      gx.data[i] += S(alpha * double(self.grad.data[i]));
  };
  return Var<S>(make_node<S>(std::move(y), {x.node}, std::move(bw)));
}

template <class S>
Var<S> binary_elementwise(const Var<S>& a, const Var<S>& b, int mode /*0 add,1 sub,2 mul*/) {
  require(a.value().same_shape(b.value()), "elementwise: shape mismatch " +
                                               a.node->value.shape_str() + " vs " +
                                               b.node->value.shape_str());
  Tensor<S> y(a.value().shape);
  for (size_t i = 0; i < y.data.size(); ++i) {
    double av = double(a.value().data[i]), bv = double(b.value().data[i]);
    y.data[i] = S(mode == 0 ? av + bv : mode == 1 ? av - bv : av * bv);
  }
  auto an = a.node, bn = b.node;
  auto bw = [an, bn, mode](Node<S>& self) {
    if (an->requires_grad) {
      Tensor<S>& ga = an->grad_buf();
      for (size_t i = 0; i < ga.data.size(); ++i) {
        double g = double(self.grad.data[i]);
        ga.data[i] += S(mode == 2 ? g * double(bn->value.data[i]) : g);
      }
    }
    if (bn->requires_grad) {
      Tensor<S>& gb = bn->grad_buf();
      for (size_t i = 0; i < gb.data.size(); ++i) {
        double g = double(self.grad.data[i]);
        gb.data[i] += S(mode == 0 ? g
                        : mode == 1 ? -g
                                    : g * double(an->value.data[i]));
      }
    }
  };
  return Var<S>(make_node<S>(std::move(y), {a.node, b.node}, std::move(bw)));
}

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  return binary_elementwise(a, b, 0);
}
template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  return binary_elementwise(a, b, 1);
}
template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  return binary_elementwise(a, b, 2);
}

// ---------------------------------------------------------------------------
// convolution (cross-correlation semantics)

// x:[N,Ci,L], k:[Co,Ci,K], bias:[Co] -> [N,Co,Lo]
template <class S>
Var<S> conv1d(const Var<S>& x, const Var<S>& k, const Var<S>& bias, int64_t stride,
              int64_t pad) {
  require(stride > 0, "conv1d: stride must be positive");
  require(x.value().rank() == 3 && k.value().rank() == 3, "conv1d: x [N,Ci,L], k [Co,Ci,K]");
  int64_t n = x.value().dim(0), ci = x.value().dim(1), l = x.value().dim(2);
  int64_t co = k.value().dim(0), kk = k.value().dim(2);
  require(k.value().dim(1) == ci, "conv1d: channel mismatch: kernel " + k.node->value.shape_str() +
                                      " vs input " + x.node->value.shape_str());
  require(kk <= l + 2 * pad, "conv1d: kernel larger than padded input");
  int64_t lo = (l + 2 * pad - kk) / stride + 1;
  Tensor<S> y({n, co, lo});
  const S* xp = x.value().ptr();
  const S* kp = k.value().ptr();
#pragma omp parallel for
  for (int64_t i = 0; i < n; ++i)
    for (int64_t c = 0; c < co; ++c)
      for (int64_t o = 0; o < lo; ++o) {
        double acc = bias.defined() ? double(bias.value().data[size_t(c)]) : 0.0;
        for (int64_t q = 0; q < ci; ++q)
          for (int64_t t = 0; t < kk; ++t) {
            int64_t src = o * stride + t - pad;
            if (src < 0 || src >= l) continue;
            acc += double(xp[(i * ci + q) * l + src]) * double(kp[(c * ci + q) * kk + t]);
          }
        y.data[(i * co + c) * lo + o] = S(acc);
      }
  std::vector<std::shared_ptr<Node<S>>> parents{x.node, k.node};
  if (bias.defined()) parents.push_back(bias.node);
  auto xn = x.node, kn = k.node;
  auto bn = bias.defined() ? bias.node : nullptr;
  auto bw = [xn, kn, bn, n, ci, l, co, kk, lo, stride, pad](Node<S>& self) {
    const Tensor<S>& g = self.grad;
    if (xn->requires_grad) {
      Tensor<S>& gx = xn->grad_buf();
#pragma omp parallel for
      for (int64_t i = 0; i < n; ++i)
        for (int64_t q = 0; q < ci; ++q)
          for (int64_t src = 0; src < l; ++src) {
            double acc = 0;
            for (int64_t c = 0; c < co; ++c)
              for (int64_t t = 0; t < kk; ++t) {
                int64_t num = src + pad - t;
                if (num < 0 || num % stride != 0) continue;
                int64_t o = num / stride;
                if (o >= lo) continue;
                acc += double(g.data[(i * co + c) * lo + o]) *
                       double(kn->value.data[(c * ci + q) * kk + t]);
              }
            gx.data[(i * ci + q) * l + src] += S(acc);
          }
    }
    if (kn->requires_grad) {
      Tensor<S>& gk = kn->grad_buf();
#pragma omp parallel for
      for (int64_t c = 0; c < co; ++c)
        for (int64_t q = 0; q < ci; ++q)
          for (int64_t t = 0; t < kk; ++t) {
            double acc = 0;
            for (int64_t i = 0; i < n; ++i)
              for (int64_t o = 0; o < lo; ++o) {
                int64_t src = o * stride + t - pad;
                if (src < 0 || src >= l) continue;
                acc += double(g.data[(i * co + c) * lo + o]) *
                       double(xn->value.data[(i * ci + q) * l + src]);
              }
            gk.data[(c * ci + q) * kk + t] += S(acc);
          }
    }
    if (bn && bn->requires_grad) {
      Tensor<S>& gb = bn->grad_buf();
      for (int64_t c = 0; c < co; ++c) {
        double acc = 0;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t o = 0; o < lo; ++o) acc += double(g.data[(i * co + c) * lo + o]);
        gb.data[size_t(c)] += S(acc);
      }
    }
  };
  return Var<S>(make_node<S>(std::move(y), std::move(parents), std::move(bw)));
}

// x:[N,Ci,H,W], k:[Co,Ci,Kh,Kw] -> [N,Co,Ho,Wo]
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& k, const Var<S>& bias, int64_t stride,
              int64_t pad) {
  require(stride > 0, "conv2d: stride must be positive");
  require(x.value().rank() == 4 && k.value().rank() == 4, "conv2d: x [N,Ci,H,W], k [Co,Ci,Kh,Kw]");
  int64_t n = x.value().dim(0), ci = x.value().dim(1), h = x.value().dim(2), w = x.value().dim(3);
  int64_t co = k.value().dim(0), kh = k.value().dim(2), kw = k.value().dim(3);
  require(k.value().dim(1) == ci, "conv2d: channel mismatch");
  require(kh <= h + 2 * pad && kw <= w + 2 * pad, "conv2d: kernel larger than padded input");
  int64_t ho = (h + 2 * pad - kh) / stride + 1;
  int64_t wo = (w + 2 * pad - kw) / stride + 1;
  Tensor<S> y({n, co, ho, wo});
  const S* xp = x.value().ptr();
  const S* kp = k.value().ptr();
#pragma omp parallel for
  for (int64_t i = 0; i < n; ++i)
    for (int64_t c = 0; c < co; ++c)
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox) {
          S acc = bias.defined() ? bias.value().data[size_t(c)] : S(0);
          for (int64_t q = 0; q < ci; ++q)
            for (int64_t ty = 0; ty < kh; ++ty) {
              int64_t sy = oy * stride + ty - pad;
              if (sy < 0 || sy >= h) continue;
              for (int64_t tx = 0; tx < kw; ++tx) {
                int64_t sx = ox * stride + tx - pad;
                if (sx < 0 || sx >= w) continue;
                acc += xp[((i * ci + q) * h + sy) * w + sx] *
                       kp[((c * ci + q) * kh + ty) * kw + tx];
              }
            }
          y.data[((i * co + c) * ho + oy) * wo + ox] = acc;
        }
  std::vector<std::shared_ptr<Node<S>>> parents{x.node, k.node};
  if (bias.defined()) parents.push_back(bias.node);
  auto xn = x.node, kn = k.node;
  auto bn = bias.defined() ? bias.node : nullptr;
  auto bw = [xn, kn, bn, n, ci, h, w, co, kh, kw, ho, wo, stride, pad](Node<S>& self) {
    const Tensor<S>& g = self.grad;
    if (xn->requires_grad) {
      Tensor<S>& gx = xn->grad_buf();
#pragma omp parallel for
      for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < co; ++c)
          for (int64_t oy = 0; oy < ho; ++oy)
            for (int64_t ox = 0; ox < wo; ++ox) {
              S gv = g.data[((i * co + c) * ho + oy) * wo + ox];
              if (gv == S(0)) continue;
              for (int64_t q = 0; q < ci; ++q)
                for (int64_t ty = 0; ty < kh; ++ty) {
                  int64_t sy = oy * stride + ty - pad;
                  if (sy < 0 || sy >= h) continue;
                  for (int64_t tx = 0; tx < kw; ++tx) {
                    int64_t sx = ox * stride + tx - pad;
                    if (sx < 0 || sx >= w) continue;
                    gx.data[((i * ci + q) * h + sy) * w + sx] +=
                        gv * kn->value.data[((c * ci + q) * kh + ty) * kw + tx];
                  }
                }
            }
    }
    if (kn->requires_grad) {
      Tensor<S>& gk = kn->grad_buf();
#pragma omp parallel for
      for (int64_t c = 0; c < co; ++c)
        for (int64_t q = 0; q < ci; ++q)
          for (int64_t ty = 0; ty < kh; ++ty)
            for (int64_t tx = 0; tx < kw; ++tx) {
              S acc = 0;
              for (int64_t i = 0; i < n; ++i)
                for (int64_t oy = 0; oy < ho; ++oy) {
                  int64_t sy = oy * stride + ty - pad;
                  if (sy < 0 || sy >= h) continue;
                  for (int64_t ox = 0; ox < wo; ++ox) {
                    int64_t sx = ox * stride + tx - pad;
                    if (sx < 0 || sx >= w) continue;
                    acc += g.data[((i * co + c) * ho + oy) * wo + ox] *
                           xn->value.data[((i * ci + q) * h + sy) * w + sx];
                  }
                }
              gk.data[((c * ci + q) * kh + ty) * kw + tx] += acc;
            }
    }
    if (bn && bn->requires_grad) {
      Tensor<S>& gb = bn->grad_buf();
      for (int64_t c = 0; c < co; ++c) {
        double acc = 0;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t oy = 0; oy < ho; ++oy)
            for (int64_t ox = 0; ox < wo; ++ox)
              acc += double(g.data[((i * co + c) * ho + oy) * wo + ox]);
        gb.data[size_t(c)] += S(acc);
      }
    }
  };
  return Var<S>(make_node<S>(std::move(y), std::move(parents), std::move(bw)));
}

// x:[N,Ci,D,H,W], k:[Co,Ci,Kd,Kh,Kw], per-dim stride/pad
template <class S>
Var<S> conv3d(const Var<S>& x, const Var<S>& k, const Var<S>& bias,
              std::array<int64_t, 3> stride, std::array<int64_t, 3> pad) {
  require(stride[0] > 0 && stride[1] > 0 && stride[2] > 0, "conv3d: stride must be positive");
  require(x.value().rank() == 5 && k.value().rank() == 5,
          "conv3d: x [N,Ci,D,H,W], k [Co,Ci,Kd,Kh,Kw]");
  int64_t n = x.value().dim(0), ci = x.value().dim(1);
  int64_t dd = x.value().dim(2), h = x.value().dim(3), w = x.value().dim(4);
  int64_t co = k.value().dim(0), kd = k.value().dim(2), kh = k.value().dim(3),
          kw = k.value().dim(4);
  require(k.value().dim(1) == ci, "conv3d: channel mismatch");
  require(kd <= dd + 2 * pad[0] && kh <= h + 2 * pad[1] && kw <= w + 2 * pad[2],
          "conv3d: kernel larger than padded input");
  int64_t od = (dd + 2 * pad[0] - kd) / stride[0] + 1;
  int64_t oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
  int64_t ow = (w + 2 * pad[2] - kw) / stride[2] + 1;
  int64_t csz = ci * kd * kh * kw;
  int64_t ppi = od * oh * ow;  // output positions per sample
  // Patches laid out [n*od*oh*ow, ci*kd*kh*kw] so every inner product and
  // rank-1 update below runs over one contiguous row.
  auto im2col = [n, ci, dd, h, w, od, oh, ow, kd, kh, kw, stride, pad, csz, ppi](
                    const Tensor<S>& src) {
    Tensor<S> cols({n * ppi, csz});
    const S* sp = src.ptr();
#pragma omp parallel for
    for (int64_t i = 0; i < n; ++i)
      for (int64_t oz = 0; oz < od; ++oz)
        for (int64_t oy = 0; oy < oh; ++oy)
          for (int64_t ox = 0; ox < ow; ++ox) {
            S* row = cols.data.data() + ((i * od + oz) * oh * ow + oy * ow + ox) * csz;
            for (int64_t q = 0; q < ci; ++q)
              for (int64_t tz = 0; tz < kd; ++tz) {
                int64_t sz = oz * stride[0] + tz - pad[0];
                for (int64_t ty = 0; ty < kh; ++ty) {
                  int64_t sy = oy * stride[1] + ty - pad[1];
                  S* dst = row + ((q * kd + tz) * kh + ty) * kw;
                  if (sz < 0 || sz >= dd || sy < 0 || sy >= h) continue;
                  const S* srow = sp + (((i * ci + q) * dd + sz) * h + sy) * w;
                  for (int64_t tx = 0; tx < kw; ++tx) {
                    int64_t sx = ox * stride[2] + tx - pad[2];
                    if (sx >= 0 && sx < w) dst[tx] = srow[sx];
                  }
                }
              }
          }
    return cols;
  };
  Tensor<S> y({n, co, od, oh, ow});
  const S* kp = k.value().ptr();
  {
    Tensor<S> cols = im2col(x.value());
#pragma omp parallel for
    for (int64_t i = 0; i < n; ++i)
      for (int64_t p = 0; p < ppi; ++p) {
        const S* row = cols.ptr() + (i * ppi + p) * csz;
        for (int64_t c = 0; c < co; ++c) {
          const S* krow = kp + c * csz;
          S acc = bias.defined() ? bias.value().data[size_t(c)] : S(0);
#pragma omp simd reduction(+ : acc)
          for (int64_t t = 0; t < csz; ++t) acc += row[t] * krow[t];
          y.data[(i * co + c) * ppi + p] = acc;
        }
      }
  }
  std::vector<std::shared_ptr<Node<S>>> parents{x.node, k.node};
  if (bias.defined()) parents.push_back(bias.node);
  auto xn = x.node, kn = k.node;
  auto bn = bias.defined() ? bias.node : nullptr;
  auto bw = [xn, kn, bn, n, ci, dd, h, w, co, kd, kh, kw, od, oh, ow, stride, pad, csz, ppi,
             im2col](Node<S>& self) {
    const Tensor<S>& g = self.grad;
    if (xn->requires_grad) {
      Tensor<S>& gx = xn->grad_buf();
      const S* kp = kn->value.ptr();
#pragma omp parallel for
      for (int64_t i = 0; i < n; ++i) {
        std::vector<S> gpatch(size_t(csz), S(0));
        for (int64_t oz = 0; oz < od; ++oz)
          for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox) {
              int64_t p = (oz * oh + oy) * ow + ox;
              std::fill(gpatch.begin(), gpatch.end(), S(0));
              for (int64_t c = 0; c < co; ++c) {
                S gv = g.data[(i * co + c) * ppi + p];
                if (gv == S(0)) continue;
                const S* krow = kp + c * csz;
                for (int64_t t = 0; t < csz; ++t) gpatch[size_t(t)] += gv * krow[t];
              }
              // col2im: scatter the patch gradient back to input positions
              for (int64_t q = 0; q < ci; ++q)
                for (int64_t tz = 0; tz < kd; ++tz) {
                  int64_t sz = oz * stride[0] + tz - pad[0];
                  if (sz < 0 || sz >= dd) continue;
                  for (int64_t ty = 0; ty < kh; ++ty) {
                    int64_t sy = oy * stride[1] + ty - pad[1];
                    if (sy < 0 || sy >= h) continue;
                    const S* src = gpatch.data() + ((q * kd + tz) * kh + ty) * kw;
                    S* dst = gx.data.data() + (((i * ci + q) * dd + sz) * h + sy) * w;
                    for (int64_t tx = 0; tx < kw; ++tx) {
                      int64_t sx = ox * stride[2] + tx - pad[2];
                      if (sx >= 0 && sx < w) dst[sx] += src[tx];
                    }
                  }
                }
            }
      }
    }
    if (kn->requires_grad) {
      Tensor<S>& gk = kn->grad_buf();
      Tensor<S> cols = im2col(xn->value);
#pragma omp parallel for
      for (int64_t c = 0; c < co; ++c) {
        S* grow = gk.data.data() + c * csz;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t p = 0; p < ppi; ++p) {
            S gv = g.data[(i * co + c) * ppi + p];
            if (gv == S(0)) continue;
            const S* row = cols.ptr() + (i * ppi + p) * csz;
            for (int64_t t = 0; t < csz; ++t) grow[t] += gv * row[t];
          }
      }
    }
    if (bn && bn->requires_grad) {
      Tensor<S>& gb = bn->grad_buf();
      for (int64_t c = 0; c < co; ++c) {
        double acc = 0;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t oz = 0; oz < od; ++oz)
            for (int64_t oy = 0; oy < oh; ++oy)
              for (int64_t ox = 0; ox < ow; ++ox)
                acc += double(g.data[(((i * co + c) * od + oz) * oh + oy) * ow + ox]);
        gb.data[size_t(c)] += S(acc);
      }
    }
  };
  return Var<S>(make_node<S>(std::move(y), std::move(parents), std::move(bw)));
}

// ---------------------------------------------------------------------------
// shape ops

// [N,A,B] -> [N,B,A]
template <class S>
Var<S> transpose12(const Var<S>& x) {
  require(x.value().rank() == 3, "transpose12: need rank 3");
  int64_t n = x.value().dim(0), a = x.value().dim(1), b = x.value().dim(2);
  Tensor<S> y({n, b, a});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t p = 0; p < a; ++p)
      for (int64_t q = 0; q < b; ++q)
        y.data[(i * b + q) * a + p] = x.value().data[(i * a + p) * b + q];
  auto xn = x.node;
  auto bw = [xn, n, a, b](Node<S>& self) {
    Tensor<S>& gx = xn->grad_buf();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t p = 0; p < a; ++p)
        for (int64_t q = 0; q < b; ++q)
          gx.data[(i * a + p) * b + q] += self.grad.data[(i * b + q) * a + p];
  };
  return Var<S>(make_node<S>(std::move(y), {x.node}, std::move(bw)));
}

// x:[N,T,A] -> t-th slice [N,A]
template <class S>
Var<S> select_time(const Var<S>& x, int64_t t) {
  require(x.value().rank() == 3, "select_time: need rank 3");
  int64_t n = x.value().dim(0), tt = x.value().dim(1), a = x.value().dim(2);
  require(t >= 0 && t < tt, "select_time: index out of range");
  Tensor<S> y({n, a});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t k = 0; k < a; ++k) y.data[i * a + k] = x.value().data[(i * tt + t) * a + k];
  auto xn = x.node;
  auto bw = [xn, n, tt, a, t](Node<S>& self) {
    Tensor<S>& gx = xn->grad_buf();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t k = 0; k < a; ++k) gx.data[(i * tt + t) * a + k] += self.grad.data[i * a + k];
  };
  return Var<S>(make_node<S>(std::move(y), {x.node}, std::move(bw)));
}

// list of [N,H] -> [N,T,H]
template <class S>
Var<S> stack_time(const std::vector<Var<S>>& steps) {
  require(!steps.empty(), "stack_time: empty");
  int64_t n = steps[0].value().dim(0), h = steps[0].value().dim(1);
  int64_t t = int64_t(steps.size());
  Tensor<S> y({n, t, h});
  for (int64_t s = 0; s < t; ++s) {
    require(steps[size_t(s)].value().dim(0) == n && steps[size_t(s)].value().dim(1) == h,
            "stack_time: inconsistent shapes");
    for (int64_t i = 0; i < n; ++i)
      for (int64_t k = 0; k < h; ++k)
        y.data[(i * t + s) * h + k] = steps[size_t(s)].value().data[i * h + k];
  }
  std::vector<std::shared_ptr<Node<S>>> parents;
  for (auto& v : steps) parents.push_back(v.node);
  auto ps = parents;
  auto bw = [ps, n, t, h](Node<S>& self) {
    for (int64_t s = 0; s < t; ++s) {
      auto& p = ps[size_t(s)];
      if (!p->requires_grad) continue;
      Tensor<S>& g = p->grad_buf();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < h; ++k) g.data[i * h + k] += self.grad.data[(i * t + s) * h + k];
    }
  };
  return Var<S>(make_node<S>(std::move(y), std::move(parents), std::move(bw)));
}

// [N,P] ++ [N,Q] -> [N,P+Q]
template <class S>
Var<S> concat_cols(const Var<S>& a, const Var<S>& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 && a.value().dim(0) == b.value().dim(0),
          "concat_cols: need [N,P] and [N,Q]");
  int64_t n = a.value().dim(0), p = a.value().dim(1), q = b.value().dim(1);
  Tensor<S> y({n, p + q});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t k = 0; k < p; ++k) y.data[i * (p + q) + k] = a.value().data[i * p + k];
    for (int64_t k = 0; k < q; ++k) y.data[i * (p + q) + p + k] = b.value().data[i * q + k];
  }
  auto an = a.node, bn = b.node;
  auto bw = [an, bn, n, p, q](Node<S>& self) {
    if (an->requires_grad) {
      Tensor<S>& ga = an->grad_buf();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < p; ++k) ga.data[i * p + k] += self.grad.data[i * (p + q) + k];
    }
    if (bn->requires_grad) {
      Tensor<S>& gb = bn->grad_buf();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < q; ++k) gb.data[i * q + k] += self.grad.data[i * (p + q) + p + k];
    }
  };
  return Var<S>(make_node<S>(std::move(y), {a.node, b.node}, std::move(bw)));
}

// x:[N,...] select rows -> [R,...]
template <class S>
Var<S> gather_rows(const Var<S>& x, const std::vector<int64_t>& rows) {
  require(x.value().rank() >= 1, "gather_rows: need rank >= 1");
  int64_t n = x.value().dim(0);
  int64_t inner = x.value().size() / std::max<int64_t>(n, 1);
  std::vector<int64_t> sh = x.value().shape;
  sh[0] = int64_t(rows.size());
  Tensor<S> y(sh);
  for (size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] >= 0 && rows[r] < n, "gather_rows: index out of range");
    for (int64_t k = 0; k < inner; ++k)
      y.data[int64_t(r) * inner + k] = x.value().data[rows[r] * inner + k];
  }
  auto xn = x.node;
  auto idx = rows;
  auto bw = [xn, idx, inner](Node<S>& self) {
    Tensor<S>& gx = xn->grad_buf();
    for (size_t r = 0; r < idx.size(); ++r)
      for (int64_t k = 0; k < inner; ++k)
        gx.data[idx[r] * inner + k] += self.grad.data[int64_t(r) * inner + k];
  };
  return Var<S>(make_node<S>(std::move(y), {x.node}, std::move(bw)));
}

// row-wise L2 normalization on [N,D]; eps keeps zero rows finite
template <class S>
Var<S> normalize_rows(const Var<S>& x) {
  require(x.value().rank() == 2, "normalize_rows: need rank 2");
  int64_t n = x.value().dim(0), d = x.value().dim(1);
  Tensor<S> y({n, d});
  auto norms = std::make_shared<std::vector<double>>(size_t(n));
  for (int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (int64_t k = 0; k < d; ++k) {
      double v = double(x.value().data[i * d + k]);
      s += v * v;
    }
    double nm = std::sqrt(s) + 1e-12;
    (*norms)[size_t(i)] = nm;
    for (int64_t k = 0; k < d; ++k) y.data[i * d + k] = S(double(x.value().data[i * d + k]) / nm);
  }
  auto xn = x.node;
  auto bw = [xn, norms, n, d](Node<S>& self) {
    Tensor<S>& gx = xn->grad_buf();
    for (int64_t i = 0; i < n; ++i) {
      double dot = 0;
      for (int64_t k = 0; k < d; ++k)
        dot += double(self.grad.data[i * d + k]) * double(self.value.data[i * d + k]);
      double inv = 1.0 / (*norms)[size_t(i)];
      for (int64_t k = 0; k < d; ++k)
        gx.data[i * d + k] +=
            S(inv * (double(self.grad.data[i * d + k]) - dot * double(self.value.data[i * d + k])));
    }
  };
  return Var<S>(make_node<S>(std::move(y), {x.node}, std::move(bw)));
}

// ---------------------------------------------------------------------------
// pooling / attention

// mean over all trailing spatial dims: [N,C,...] -> [N,C]
template <class S>
Var<S> global_avg_pool(const Var<S>& x) {
  require(x.value().rank() >= 3, "global_avg_pool: need rank >= 3");
  int64_t n = x.value().dim(0), c = x.value().dim(1);
  int64_t sp = x.value().size() / (n * c);
  Tensor<S> y({n, c});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t q = 0; q < c; ++q) {
      double acc = 0;
      for (int64_t k = 0; k < sp; ++k) acc += double(x.value().data[(i * c + q) * sp + k]);
      y.data[i * c + q] = S(acc / double(sp));
    }
  auto xn = x.node;
  auto bw = [xn, n, c, sp](Node<S>& self) {
    Tensor<S>& gx = xn->grad_buf();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t q = 0; q < c; ++q) {
        S g = S(double(self.grad.data[i * c + q]) / double(sp));
        for (int64_t k = 0; k < sp; ++k) gx.data[(i * c + q) * sp + k] += g;
      }
  };
  return Var<S>(make_node<S>(std::move(y), {x.node}, std::move(bw)));
}

// scores_{nt} = sum_d h_{ntd} w_d : h [N,T,D], w [D] -> [N,T]
template <class S>
Var<S> contract_last(const Var<S>& h, const Var<S>& w) {
  require(h.value().rank() == 3 && w.value().rank() == 1 && h.value().dim(2) == w.value().dim(0),
          "contract_last: need [N,T,D] and [D]");
  int64_t n = h.value().dim(0), t = h.value().dim(1), d = h.value().dim(2);
  Tensor<S> y({n, t});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t s = 0; s < t; ++s) {
      double acc = 0;
      for (int64_t k = 0; k < d; ++k)
        acc += double(h.value().data[(i * t + s) * d + k]) * double(w.value().data[size_t(k)]);
      y.data[i * t + s] = S(acc);
    }
  auto hn = h.node, wn = w.node;
  auto bw = [hn, wn, n, t, d](Node<S>& self) {
    if (hn->requires_grad) {
      Tensor<S>& gh = hn->grad_buf();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t s = 0; s < t; ++s) {
          double g = double(self.grad.data[i * t + s]);
          for (int64_t k = 0; k < d; ++k)
            gh.data[(i * t + s) * d + k] += S(g * double(wn->value.data[size_t(k)]));
        }
    }
    if (wn->requires_grad) {
      Tensor<S>& gw = wn->grad_buf();
      for (int64_t k = 0; k < d; ++k) {
        double acc = 0;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t s = 0; s < t; ++s)
            acc += double(self.grad.data[i * t + s]) * double(hn->value.data[(i * t + s) * d + k]);
        gw.data[size_t(k)] += S(acc);
      }
    }
  };
  return Var<S>(make_node<S>(std::move(y), {h.node, w.node}, std::move(bw)));
}

// row-wise stable softmax on [N,T]
template <class S>
Var<S> softmax_rows(const Var<S>& x) {
  require(x.value().rank() == 2, "softmax_rows: need rank 2");
  int64_t n = x.value().dim(0), t = x.value().dim(1);
  require(t > 0, "softmax_rows: empty rows");
  Tensor<S> y({n, t});
  for (int64_t i = 0; i < n; ++i) {
    double m = -1e300;
    for (int64_t s = 0; s < t; ++s) m = std::max(m, double(x.value().data[i * t + s]));
    double z = 0;
    for (int64_t s = 0; s < t; ++s) z += std::exp(double(x.value().data[i * t + s]) - m);
    for (int64_t s = 0; s < t; ++s)
      y.data[i * t + s] = S(std::exp(double(x.value().data[i * t + s]) - m) / z);
  }
  auto xn = x.node;
  auto bw = [xn, n, t](Node<S>& self) {
    Tensor<S>& gx = xn->grad_buf();
    for (int64_t i = 0; i < n; ++i) {
      double dot = 0;
      for (int64_t s = 0; s < t; ++s)
        dot += double(self.grad.data[i * t + s]) * double(self.value.data[i * t + s]);
      for (int64_t s = 0; s < t; ++s)
        gx.data[i * t + s] +=
            S(double(self.value.data[i * t + s]) * (double(self.grad.data[i * t + s]) - dot));
    }
  };
  return Var<S>(make_node<S>(std::move(y), {x.node}, std::move(bw)));
}

// out_{nd} = sum_t alpha_{nt} h_{ntd} : h [N,T,D], alpha [N,T] -> [N,D]
template <class S>
Var<S> weight_sum_time(const Var<S>& h, const Var<S>& alpha) {
  require(h.value().rank() == 3 && alpha.value().rank() == 2 &&
              h.value().dim(0) == alpha.value().dim(0) && h.value().dim(1) == alpha.value().dim(1),
          "weight_sum_time: need [N,T,D] and [N,T]");
  int64_t n = h.value().dim(0), t = h.value().dim(1), d = h.value().dim(2);
  Tensor<S> y({n, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t k = 0; k < d; ++k) {
      double acc = 0;
      for (int64_t s = 0; s < t; ++s)
        acc += double(alpha.value().data[i * t + s]) * double(h.value().data[(i * t + s) * d + k]);
      y.data[i * d + k] = S(acc);
    }
  auto hn = h.node, an = alpha.node;
  auto bw = [hn, an, n, t, d](Node<S>& self) {
    if (hn->requires_grad) {
      Tensor<S>& gh = hn->grad_buf();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t s = 0; s < t; ++s) {
          double a = double(an->value.data[i * t + s]);
          for (int64_t k = 0; k < d; ++k)
            gh.data[(i * t + s) * d + k] += S(a * double(self.grad.data[i * d + k]));
        }
    }
    if (an->requires_grad) {
      Tensor<S>& ga = an->grad_buf();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t s = 0; s < t; ++s) {
          double acc = 0;
          for (int64_t k = 0; k < d; ++k)
            acc += double(self.grad.data[i * d + k]) * double(hn->value.data[(i * t + s) * d + k]);
          ga.data[i * t + s] += S(acc);
        }
    }
  };
  return Var<S>(make_node<S>(std::move(y), {h.node, alpha.node}, std::move(bw)));
}

// ---------------------------------------------------------------------------
// fused losses

// L = (1/R) * sum_r w_r * (-log softmax(logits)_{r, y_r}); logits [R,K]
template <class S>
Var<S> weighted_ce_mean(const Var<S>& logits, const std::vector<int64_t>& labels,
                        const std::vector<double>& weights = {}) {
  require(logits.value().rank() == 2, "weighted_ce_mean: logits must be rank 2");
  int64_t r = logits.value().dim(0), k = logits.value().dim(1);
  require(int64_t(labels.size()) == r, "weighted_ce_mean: label count mismatch");
  require(weights.empty() || int64_t(weights.size()) == r,
          "weighted_ce_mean: weight count mismatch");
  // cache softmax probabilities for the backward pass
  auto probs = std::make_shared<std::vector<double>>(size_t(r * k));
  double total = 0;
  for (int64_t i = 0; i < r; ++i) {
    require(labels[size_t(i)] >= 0 && labels[size_t(i)] < k, "weighted_ce_mean: bad label");
    double m = -1e300;
    for (int64_t j = 0; j < k; ++j) m = std::max(m, double(logits.value().data[i * k + j]));
    double z = 0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(double(logits.value().data[i * k + j]) - m);
    for (int64_t j = 0; j < k; ++j)
      (*probs)[size_t(i * k + j)] = std::exp(double(logits.value().data[i * k + j]) - m) / z;
    double w = weights.empty() ? 1.0 : weights[size_t(i)];
    total += w * -(double(logits.value().data[i * k + labels[size_t(i)]]) - m - std::log(z));
  }
  Tensor<S> y({1});
  y.data[0] = S(total / double(r));
  auto ln = logits.node;
  auto lab = labels;
  auto ws = weights;
  auto bw = [ln, lab, ws, probs, r, k](Node<S>& self) {
    double g = double(self.grad.data[0]) / double(r);
    Tensor<S>& gl = ln->grad_buf();
    for (int64_t i = 0; i < r; ++i) {
      double w = ws.empty() ? 1.0 : ws[size_t(i)];
      for (int64_t j = 0; j < k; ++j) {
        double p = (*probs)[size_t(i * k + j)];
        double d = p - (j == lab[size_t(i)] ? 1.0 : 0.0);
        gl.data[i * k + j] += S(g * w * d);
      }
    }
  };
  return Var<S>(make_node<S>(std::move(y), {logits.node}, std::move(bw)));
}

// logits_{ik} = -|f_i - c_k|^2 / tau ; f [N,D], c [K,D]
template <class S>
Var<S> neg_sqdist_logits(const Var<S>& f, const Var<S>& c, double tau) {
  require(f.value().rank() == 2 && c.value().rank() == 2 && f.value().dim(1) == c.value().dim(1),
          "neg_sqdist_logits: need [N,D] and [K,D]");
  require(tau > 0, "neg_sqdist_logits: tau must be positive");
  int64_t n = f.value().dim(0), k = c.value().dim(0), d = f.value().dim(1);
  Tensor<S> y({n, k});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < k; ++j) {
      double acc = 0;
      for (int64_t q = 0; q < d; ++q) {
        double diff = double(f.value().data[i * d + q]) - double(c.value().data[j * d + q]);
        acc += diff * diff;
      }
      y.data[i * k + j] = S(-acc / tau);
    }
  auto fn = f.node, cn = c.node;
  auto bw = [fn, cn, n, k, d, tau](Node<S>& self) {
    const Tensor<S>& g = self.grad;
    if (fn->requires_grad) {
      Tensor<S>& gf = fn->grad_buf();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t q = 0; q < d; ++q) {
          double acc = 0;
          for (int64_t j = 0; j < k; ++j) {
            double diff = double(fn->value.data[i * d + q]) - double(cn->value.data[j * d + q]);
            acc += double(g.data[i * k + j]) * (-2.0 / tau) * diff;
          }
          gf.data[i * d + q] += S(acc);
        }
    }
    if (cn->requires_grad) {
      Tensor<S>& gc = cn->grad_buf();
      for (int64_t j = 0; j < k; ++j)
        for (int64_t q = 0; q < d; ++q) {
          double acc = 0;
          for (int64_t i = 0; i < n; ++i) {
            double diff = double(fn->value.data[i * d + q]) - double(cn->value.data[j * d + q]);
            acc += double(g.data[i * k + j]) * (2.0 / tau) * diff;
          }
          gc.data[j * d + q] += S(acc);
        }
    }
  };
  return Var<S>(make_node<S>(std::move(y), {f.node, c.node}, std::move(bw)));
}

// Weighted bidirectional InfoNCE over a square logit matrix.
// v2s rows: L_i = -log( e^{s_ii} / (e^{s_ii} + sum_{j!=i} W_ij e^{s_ij}) )
// s2v cols: symmetric with the transposed weights. Returns (L_v2s + L_s2v)/2.
// W is a constant: no gradient flows through the weights.
template <class S>
Var<S> weighted_infonce(const Var<S>& logits, const Tensor<S>& w) {
  require(logits.value().rank() == 2 && logits.value().dim(0) == logits.value().dim(1),
          "weighted_infonce: logits must be square");
  require(w.same_shape(logits.value()), "weighted_infonce: weight shape mismatch");
  require(logits.value().all_finite(), "weighted_infonce: nonfinite logits");
  int64_t n = logits.value().dim(0);
  const auto& s = logits.value().data;
  // row and column softmax-style ratios, cached for backward
  auto prow = std::make_shared<std::vector<double>>(size_t(n * n));
  auto pcol = std::make_shared<std::vector<double>>(size_t(n * n));
  double l_v2s = 0, l_s2v = 0;
  for (int64_t i = 0; i < n; ++i) {
    double m = -1e300;
    for (int64_t j = 0; j < n; ++j) m = std::max(m, double(s[i * n + j]));
    double e0 = std::exp(double(s[i * n + i]) - m);
    double rest = 0;
    for (int64_t j = 0; j < n; ++j)
      if (j != i) rest += double(w.data[i * n + j]) * std::exp(double(s[i * n + j]) - m);
    double den = e0 + rest;
    for (int64_t j = 0; j < n; ++j) {
      double e = std::exp(double(s[i * n + j]) - m);
      (*prow)[size_t(i * n + j)] = (j == i ? e : double(w.data[i * n + j]) * e) / den;
    }
    // log1p form: exactly 0 when every off-diagonal weight is 0
    l_v2s += std::log1p(rest / e0);
  }
  for (int64_t j = 0; j < n; ++j) {
    double m = -1e300;
    for (int64_t i = 0; i < n; ++i) m = std::max(m, double(s[i * n + j]));
    double e0 = std::exp(double(s[j * n + j]) - m);
    double rest = 0;
    for (int64_t i = 0; i < n; ++i)
      if (i != j) rest += double(w.data[i * n + j]) * std::exp(double(s[i * n + j]) - m);
    double den = e0 + rest;
    for (int64_t i = 0; i < n; ++i) {
      double e = std::exp(double(s[i * n + j]) - m);
      (*pcol)[size_t(i * n + j)] = (i == j ? e : double(w.data[i * n + j]) * e) / den;
    }
    l_s2v += std::log1p(rest / e0);
  }
  Tensor<S> y({1});
  y.data[0] = S(0.5 * (l_v2s + l_s2v) / double(n));
  auto ln = logits.node;
  auto bw = [ln, prow, pcol, n](Node<S>& self) {
    double g = double(self.grad.data[0]) * 0.5 / double(n);
    Tensor<S>& gl = ln->grad_buf();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) {
        double d = (*prow)[size_t(i * n + j)] + (*pcol)[size_t(i * n + j)];
        if (i == j) d -= 2.0;
        gl.data[i * n + j] += S(g * d);
      }
  };
  return Var<S>(make_node<S>(std::move(y), {logits.node}, std::move(bw)));
}

}  // namespace nn
}  // namespace detach

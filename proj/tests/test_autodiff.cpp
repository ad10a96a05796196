#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"

#include "detach/autodiff.hpp"
#include "detach/gradcheck.hpp"
#include "detach/params.hpp"
#include "detach/rng.hpp"

using namespace detach;

namespace {

using BuildFn = std::function<nn::Var<double>(const nn::ParamVars<double>&)>;

// Loss = sum of all outputs; backward() seeds ones over the root, so the
// analytic gradients match the finite differences of this sum.
double run_graph(nn::ParamSet<double>& ps, bool want_grad, const BuildFn& build) {
  auto pv = nn::ParamVars<double>::attach(ps, want_grad);
  nn::Var<double> out = build(pv);
  double loss = 0;
  for (double v : out.value().data) loss += v;
  if (want_grad) {
    ps.zero_grads();
    nn::backward(out);
    pv.harvest_into(ps);
  }
  return loss;
}

nn::GradCheckReport check(nn::ParamSet<double>& ps, const BuildFn& build) {
  auto f = [&build](nn::ParamSet<double>& p, bool g) { return run_graph(p, g, build); };
  return nn::finite_difference_check(ps, f);
}

void random_fill(nn::ParamSet<double>& ps, uint64_t seed) {
  Rng r(seed);
  for (auto& name : ps.order)
    for (auto& v : ps.value(name).data) v = r.uniform(-1.0, 1.0);
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("linear forward oracle") {
  auto x = nn::Var<double>::leaf(Tensor<double>::from({1, 2}, {2.0, 3.0}), false);
  auto w = nn::Var<double>::leaf(Tensor<double>::from({2, 2}, {1.0, 0.0, 1.0, 1.0}), false);
  auto b = nn::Var<double>::leaf(Tensor<double>::from({2}, {10.0, -1.0}), false);
  nn::Var<double> y = nn::linear(x, w, b);
  CHECK(y.value().data[0] == doctest::Approx(12.0).epsilon(1e-14));  // 2*1+3*0+10
  CHECK(y.value().data[1] == doctest::Approx(4.0).epsilon(1e-14));   // 2*1+3*1-1
  CHECK_THROWS_AS(nn::linear(x, nn::Var<double>::leaf(Tensor<double>({3, 3}), false)),
                  std::invalid_argument);
}

TEST_CASE("gradcheck: linear with bias") {
  nn::ParamSet<double> ps;
  ps.add("x", {3, 4});
  ps.add("w", {5, 4});
  ps.add("b", {5});
  random_fill(ps, 11);
  auto rep = check(ps, [](const nn::ParamVars<double>& pv) {
    return nn::linear(pv["x"], pv["w"], pv["b"]);
  });
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("gradcheck: dot_products") {
  nn::ParamSet<double> ps;
  ps.add("a", {3, 5});
  ps.add("b", {4, 5});
  random_fill(ps, 12);
  auto rep = check(ps, [](const nn::ParamVars<double>& pv) {
    return nn::dot_products(pv["a"], pv["b"]);
  });
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("gradcheck: elementwise chain") {
  nn::ParamSet<double> ps;
  ps.add("a", {2, 6});
  ps.add("b", {2, 6});
  random_fill(ps, 13);
  auto rep = check(ps, [](const nn::ParamVars<double>& pv) {
    auto s = nn::sigmoid(pv["a"]);
    auto t = nn::tanh_act(pv["b"]);
    auto m = nn::mul(s, t);
    auto r = nn::relu(nn::sub(m, nn::add(s, t)));
    return nn::affine(r, 2.5, -0.3);
  });
  CHECK(rep.max_rel_error < 1e-5);
}

TEST_CASE("conv1d forward oracle") {
  auto x = nn::Var<double>::leaf(Tensor<double>::from({1, 1, 3}, {1.0, 2.0, 3.0}), false);
  auto k = nn::Var<double>::leaf(Tensor<double>::from({1, 1, 2}, {1.0, 1.0}), false);
  nn::Var<double> y = nn::conv1d(x, k, nn::Var<double>(), 1, 0);
  REQUIRE(y.value().shape == std::vector<int64_t>{1, 1, 2});
  CHECK(y.value().data[0] == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(y.value().data[1] == doctest::Approx(5.0).epsilon(1e-14));
  // with zero padding of 1: (1, 3, 5, 3)
  nn::Var<double> yp = nn::conv1d(x, k, nn::Var<double>(), 1, 1);
  REQUIRE(yp.value().shape == std::vector<int64_t>{1, 1, 4});
  CHECK(yp.value().data[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(yp.value().data[3] == doctest::Approx(3.0).epsilon(1e-14));
}

TEST_CASE("gradcheck: conv1d strided padded") {
  nn::ParamSet<double> ps;
  ps.add("x", {2, 3, 11});
  ps.add("k", {4, 3, 5});
  ps.add("b", {4});
  random_fill(ps, 14);
  auto rep = check(ps, [](const nn::ParamVars<double>& pv) {
    return nn::conv1d(pv["x"], pv["k"], pv["b"], 2, 2);
  });
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("gradcheck: conv2d strided padded") {
  nn::ParamSet<double> ps;
  ps.add("x", {2, 2, 7, 7});
  ps.add("k", {3, 2, 3, 3});
  ps.add("b", {3});
  random_fill(ps, 15);
  auto rep = check(ps, [](const nn::ParamVars<double>& pv) {
    return nn::conv2d(pv["x"], pv["k"], pv["b"], 2, 1);
  });
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("gradcheck: conv3d per-dim stride") {
  nn::ParamSet<double> ps;
  ps.add("x", {2, 2, 5, 6, 6});
  ps.add("k", {3, 2, 3, 3, 3});
  ps.add("b", {3});
  random_fill(ps, 16);
  auto rep = check(ps, [](const nn::ParamVars<double>& pv) {
    return nn::conv3d(pv["x"], pv["k"], pv["b"], {1, 2, 2}, {1, 1, 1});
  });
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("conv3d with depth-1 kernel matches conv2d") {
  nn::ParamSet<double> ps;
  ps.add("x", {2, 2, 1, 6, 6});
  ps.add("k", {3, 2, 1, 3, 3});
  ps.add("b", {3});
  random_fill(ps, 17);
  auto pv = nn::ParamVars<double>::attach(ps, false);
  nn::Var<double> y3 = nn::conv3d(pv["x"], pv["k"], pv["b"], {1, 2, 2}, {0, 1, 1});
  Tensor<double> x2 = ps.value("x");
  x2.shape = {2, 2, 6, 6};
  Tensor<double> k2 = ps.value("k");
  k2.shape = {3, 2, 3, 3};
  nn::Var<double> y2 = nn::conv2d(nn::Var<double>::leaf(x2, false),
                                  nn::Var<double>::leaf(k2, false),
                                  nn::Var<double>::leaf(ps.value("b"), false), 2, 1);
  REQUIRE(y3.value().size() == y2.value().size());
  for (int64_t i = 0; i < y3.value().size(); ++i)
    CHECK(y3.value().data[size_t(i)] == doctest::Approx(y2.value().data[size_t(i)]).epsilon(1e-12));
}

TEST_CASE("shape ops forward semantics") {
  auto x = nn::Var<double>::leaf(Tensor<double>::from({1, 2, 3}, {1, 2, 3, 4, 5, 6}), false);
  nn::Var<double> t = nn::transpose12(x);
  REQUIRE(t.value().shape == std::vector<int64_t>{1, 3, 2});
  CHECK(t.value().data[1] == 4.0);
  nn::Var<double> s = nn::select_time(x, 1);
  REQUIRE(s.value().shape == std::vector<int64_t>{1, 3});
  CHECK(s.value().data[0] == 4.0);
  auto a = nn::Var<double>::leaf(Tensor<double>::from({2, 1}, {1, 2}), false);
  auto b = nn::Var<double>::leaf(Tensor<double>::from({2, 1}, {3, 4}), false);
  nn::Var<double> st = nn::stack_time(std::vector<nn::Var<double>>{a, b});
  REQUIRE(st.value().shape == std::vector<int64_t>{2, 2, 1});
  CHECK(st.value().data[1] == 3.0);
  nn::Var<double> cc = nn::concat_cols(a, b);
  REQUIRE(cc.value().shape == std::vector<int64_t>{2, 2});
  CHECK(cc.value().data[1] == 3.0);
  nn::Var<double> gr = nn::gather_rows(cc, {1, 0, 1});
  REQUIRE(gr.value().shape == std::vector<int64_t>{3, 2});
  CHECK(gr.value().data[0] == 2.0);
  CHECK_THROWS_AS(nn::gather_rows(cc, {2}), std::invalid_argument);
}

TEST_CASE("gradcheck: shape op composition") {
  nn::ParamSet<double> ps;
  ps.add("x", {2, 3, 4});
  ps.add("y", {2, 4});
  random_fill(ps, 18);
  auto rep = check(ps, [](const nn::ParamVars<double>& pv) {
    auto t = nn::transpose12(pv["x"]);          // [2,4,3]
    auto s0 = nn::select_time(t, 0);            // [2,3]
    auto s2 = nn::select_time(t, 2);            // [2,3]
    auto st = nn::stack_time(std::vector<nn::Var<double>>{s0, s2, s0});  // [2,3,3]
    auto g = nn::global_avg_pool(st);           // [2,3]
    auto cc = nn::concat_cols(g, pv["y"]);      // [2,7]
    return nn::gather_rows(cc, {1, 0, 0});
  });
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("normalize_rows: unit output and gradient") {
  nn::ParamSet<double> ps;
  ps.add("x", {4, 6});
  random_fill(ps, 19);
  auto pv = nn::ParamVars<double>::attach(ps, false);
  nn::Var<double> y = nn::normalize_rows(pv["x"]);
  for (int64_t i = 0; i < 4; ++i) {
    double s = 0;
    for (int64_t k = 0; k < 6; ++k) s += y.value().data[size_t(i * 6 + k)] * y.value().data[size_t(i * 6 + k)];
    CHECK(std::sqrt(s) == doctest::Approx(1.0).epsilon(1e-9));
  }
  // gradient check against a non-constant downstream (sum of y*y is the row
  // count exactly, which would make the true gradient zero)
  nn::ParamSet<double> ps2;
  ps2.add("x", {4, 6});
  ps2.add("m", {4, 6});
  random_fill(ps2, 19);
  auto rep = check(ps2, [](const nn::ParamVars<double>& p) {
    return nn::mul(nn::normalize_rows(p["x"]), p["m"]);
  });
  CHECK(rep.max_rel_error < 1e-5);
}

TEST_CASE("softmax rows: normalization and shift invariance") {
  auto x = nn::Var<double>::leaf(Tensor<double>::from({2, 3}, {0.1, -2.0, 1.3, 5.0, 5.0, 5.0}),
                                 false);
  nn::Var<double> y = nn::softmax_rows(x);
  CHECK(y.value().data[0] + y.value().data[1] + y.value().data[2] ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y.value().data[3] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  auto xs = nn::Var<double>::leaf(
      Tensor<double>::from({2, 3}, {100.1, 98.0, 101.3, 5.0, 5.0, 5.0}), false);
  nn::Var<double> ys = nn::softmax_rows(xs);
  CHECK(ys.value().data[0] ==
        doctest::Approx(std::exp(0.1) / (std::exp(0.1) + std::exp(-2.0) + std::exp(1.3)))
            .epsilon(1e-9));
}

TEST_CASE("gradcheck: attention pooling chain") {
  nn::ParamSet<double> ps;
  ps.add("h", {2, 5, 4});
  ps.add("w", {4});
  random_fill(ps, 20);
  auto rep = check(ps, [](const nn::ParamVars<double>& pv) {
    auto scores = nn::contract_last(pv["h"], pv["w"]);
    auto alpha = nn::softmax_rows(scores);
    return nn::weight_sum_time(pv["h"], alpha);
  });
  CHECK(rep.max_rel_error < 1e-5);
}

TEST_CASE("weighted_ce_mean oracle: uniform logits give ln K") {
  auto logits = nn::Var<double>::leaf(Tensor<double>({3, 7}, 0.25), false);
  nn::Var<double> l = nn::weighted_ce_mean(logits, {0, 3, 6});
  CHECK(l.value().data[0] == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  // per-sample weights scale each term
  nn::Var<double> lw = nn::weighted_ce_mean(logits, {0, 3, 6}, {2.0, 0.0, 1.0});
  CHECK(lw.value().data[0] == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  CHECK_THROWS_AS(nn::weighted_ce_mean(logits, {0, 9, 6}), std::invalid_argument);
}

TEST_CASE("gradcheck: weighted_ce_mean") {
  nn::ParamSet<double> ps;
  ps.add("logits", {4, 5});
  random_fill(ps, 21);
  auto rep = check(ps, [](const nn::ParamVars<double>& pv) {
    return nn::weighted_ce_mean(pv["logits"], {1, 4, 0, 2}, {0.5, 1.5, 1.0, 2.0});
  });
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("neg_sqdist_logits oracle and gradient") {
  auto f = nn::Var<double>::leaf(Tensor<double>::from({1, 2}, {1.0, 0.0}), false);
  auto c = nn::Var<double>::leaf(Tensor<double>::from({2, 2}, {1.0, 0.0, 0.0, 1.0}), false);
  nn::Var<double> y = nn::neg_sqdist_logits(f, c, 0.5);
  CHECK(y.value().data[0] == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(y.value().data[1] == doctest::Approx(-4.0).epsilon(1e-14));  // -(1+1)/0.5
  CHECK_THROWS_AS(nn::neg_sqdist_logits(f, c, 0.0), std::invalid_argument);

  nn::ParamSet<double> ps;
  ps.add("f", {3, 4});
  ps.add("c", {5, 4});
  random_fill(ps, 22);
  auto rep = check(ps, [](const nn::ParamVars<double>& pv) {
    return nn::neg_sqdist_logits(pv["f"], pv["c"], 0.5);
  });
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("weighted_infonce equals standard InfoNCE when W is all ones") {
  const int64_t n = 3;
  Tensor<double> s = Tensor<double>::from(
      {n, n}, {1.2, -0.3, 0.4, 0.1, 0.9, -1.1, 0.6, 0.2, 1.7});
  Tensor<double> w({n, n}, 1.0);
  auto logits = nn::Var<double>::leaf(s, false);
  nn::Var<double> l = nn::weighted_infonce(logits, w);
  // independent oracle: plain bidirectional InfoNCE, long-hand in double
  double oracle = 0;
  for (int64_t i = 0; i < n; ++i) {
    double den_r = 0, den_c = 0;
    for (int64_t j = 0; j < n; ++j) {
      den_r += std::exp(s.data[size_t(i * n + j)]);
      den_c += std::exp(s.data[size_t(j * n + i)]);
    }
    oracle += -std::log(std::exp(s.data[size_t(i * n + i)]) / den_r);
    oracle += -std::log(std::exp(s.data[size_t(i * n + i)]) / den_c);
  }
  oracle *= 0.5 / double(n);
  CHECK(std::abs(l.value().data[0] - oracle) < 1e-12);
}

TEST_CASE("weighted_infonce is exactly zero when off-diagonal weights vanish") {
  const int64_t n = 4;
  Tensor<double> s({n, n});
  Rng r(33);
  for (auto& v : s.data) v = r.uniform(-3.0, 3.0);
  Tensor<double> w({n, n}, 0.0);
  for (int64_t i = 0; i < n; ++i) w.data[size_t(i * n + i)] = 1.0;  // diagonal irrelevant
  auto logits = nn::Var<double>::leaf(s, false);
  nn::Var<double> l = nn::weighted_infonce(logits, w);
  CHECK(l.value().data[0] == 0.0);  // exact, not approximate
}

TEST_CASE("gradcheck: weighted_infonce with generic weights") {
  nn::ParamSet<double> ps;
  ps.add("logits", {4, 4});
  random_fill(ps, 23);
  Tensor<double> w({4, 4});
  Rng r(24);
  for (auto& v : w.data) v = r.uniform(0.0, 3.0);
  for (int64_t i = 0; i < 4; ++i) w.data[size_t(i * 4 + i)] = 0.0;
  auto rep = check(ps, [&w](const nn::ParamVars<double>& pv) {
    return nn::weighted_infonce(pv["logits"], w);
  });
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("backward is deterministic across repeated builds") {
  nn::ParamSet<double> ps;
  ps.add("x", {3, 8});
  ps.add("w", {8});
  random_fill(ps, 25);
  auto build = [](const nn::ParamVars<double>& pv) {
    auto sm = nn::softmax_rows(nn::dot_products(pv["x"], pv["x"]));
    auto h = nn::stack_time(std::vector<nn::Var<double>>{pv["x"], nn::relu(pv["x"])});
    auto scores = nn::contract_last(nn::transpose12(h), nn::Var<double>::leaf(Tensor<double>({2}, 0.5), false));
    (void)scores;
    return nn::weighted_ce_mean(sm, {0, 1, 2});
  };
  double l1 = run_graph(ps, true, build);
  nn::ParamSet<double> g1 = ps;
  double l2 = run_graph(ps, true, build);
  CHECK(l1 == l2);
  for (auto& name : ps.order)
    for (size_t i = 0; i < ps.grads.at(name).data.size(); ++i)
      CHECK(ps.grads.at(name).data[i] == g1.grads.at(name).data[i]);
}

TEST_CASE("adamw step and ema_update behave as specified") {
  nn::ParamSet<double> ps;
  ps.add("w", {2});
  ps.value("w").data = {1.0, -1.0};
  ps.grads["w"].data = {0.5, 0.0};
  nn::AdamW<double> opt(0.1, 0.0);
  opt.step(ps);
  // first step: mhat/(sqrt(vhat)+eps) ~ sign(g), so w0 moves by ~ -lr
  CHECK(ps.value("w").data[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(ps.value("w").data[1] == doctest::Approx(-1.0).epsilon(1e-12));
  // decoupled decay shrinks weights even with zero gradient
  nn::ParamSet<double> pd;
  pd.add("w", {1});
  pd.value("w").data = {2.0};
  pd.grads["w"].data = {0.0};
  nn::AdamW<double> opt2(0.1, 0.5);
  opt2.step(pd);
  CHECK(pd.value("w").data[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0).epsilon(1e-12));
  // nonfinite gradients are rejected by name
  pd.grads["w"].data = {std::numeric_limits<double>::infinity()};
  CHECK_THROWS_AS(opt2.step(pd), std::runtime_error);

  nn::ParamSet<double> a, b;
  a.add("w", {1});
  b.add("w", {1});
  a.value("w").data = {1.0};
  b.value("w").data = {3.0};
  nn::ema_update(a, b, 0.9);
  CHECK(a.value("w").data[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(nn::ema_update(a, b, 1.0), std::invalid_argument);
}

TEST_CASE("init_params: bias zero, weights within fan-in bound") {
  nn::ParamSet<float> ps;
  ps.add("layer.weight", {8, 16});
  ps.add("layer.bias", {8});
  Rng r(7);
  nn::init_params(ps, r);
  double bound = std::sqrt(1.0 / 16.0);
  bool nonzero = false;
  for (float v : ps.value("layer.weight").data) {
    CHECK(std::abs(double(v)) <= bound + 1e-7);
    nonzero = nonzero || v != 0.0f;
  }
  CHECK(nonzero);
  for (float v : ps.value("layer.bias").data) CHECK(v == 0.0f);
}

}  // TEST_SUITE

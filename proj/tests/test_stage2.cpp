#include <cmath>
#include <vector>

#include "doctest.h"

#include "detach/stage2.hpp"

using namespace detach;

namespace {

synth::Scenario tiny_scenario() {
  synth::Scenario sc;
  sc.num_sources = 4;
  sc.actions_per_source = 2;
  sc.sensor_rate = 10.0;
  sc.video_rate = 4.0;
  sc.duration = 30.0;
  sc.num_sequences = 3;
  sc.event_min_seconds = 2;
  sc.event_max_seconds = 4;
  sc.gap_min_seconds = 1;
  sc.gap_max_seconds = 2;
  sc.height = 16;
  sc.width = 16;
  sc.seed = 11;
  return sc;
}

enc::EncoderArch tiny_arch() {
  enc::EncoderArch a;
  a.d = 8;
  a.gru_hidden = 8;
  a.sensor_conv_channels = {8, 8};
  a.sensor_kernel = 5;
  a.sensor_stride = 2;
  a.video2d_channels = {4, 8};
  a.video2d_kernel = 3;
  a.video2d_stride = 2;
  a.video3d_channels = {4};
  a.video3d_kernel = 3;
  a.video3d_stride = {1, 2, 2};
  return a;
}

synth::Dataset& tiny_dataset() {
  static synth::Dataset ds =
      synth::build_dataset(tiny_scenario(), synth::WindowParams{}, {0.8, 0.1, 0.05, 0.05});
  return ds;
}

// frozen spatial encoders from a short stage-1 run, shared across test cases
stage1::Stage1Result<float>& stage1_result() {
  static stage1::Stage1Result<float> res = [] {
    stage1::Stage1Config cfg;
    cfg.warmup_epochs = 2;
    cfg.t_joint = 2;
    cfg.max_epochs = 6;
    return stage1::run_stage1<float>(tiny_dataset(), tiny_arch(), cfg, 1);
  }();
  return res;
}

stage2::Stage2Config quick_config() {
  stage2::Stage2Config cfg;
  cfg.epochs = 3;
  return cfg;
}

synth::SensorWindow fake_window(int source, int action) {
  synth::SensorWindow w;
  w.source_id = source;
  w.action_id = action;
  return w;
}

}  // namespace

TEST_SUITE("stage2") {

TEST_CASE("config validation") {
  stage2::Stage2Config cfg;
  cfg.lambda_hard = 1.0;  // must be > 1
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = stage2::Stage2Config{};
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = stage2::Stage2Config{};
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("weight equations: endpoint table") {
  const double lambda = 3.0;
  // rows: (s_spatial, s_temporal) -> expected W
  struct Row {
    double s_sp, s_t, want;
  };
  // easy: s_sp = 0 -> W = 1 regardless of temporal similarity
  // hard: s_sp = 1, s_t <= 0 -> W = lambda
  // false: s_sp = 1, s_t = 1 -> W = 0
  const Row rows[] = {{0.0, 0.0, 1.0}, {0.0, 1.0, 1.0},    {0.0, -1.0, 1.0},
                      {1.0, 0.0, lambda}, {1.0, -1.0, lambda}, {1.0, 1.0, 0.0}};
  for (const Row& r : rows) {
    Tensor<double> ssp = Tensor<double>::from({2, 2}, {0, r.s_sp, r.s_sp, 0});
    Tensor<double> st = Tensor<double>::from({2, 2}, {0, r.s_t, r.s_t, 0});
    Tensor<double> w = stage2::combined_weights(stage2::spatial_weight(ssp, lambda),
                                                stage2::temporal_weight(ssp, st));
    CHECK(w.data[1] == doctest::Approx(r.want).epsilon(1e-15));
    CHECK(w.data[0] == 0.0);  // diagonal
    CHECK(w.data[3] == 0.0);
  }
}

TEST_CASE("spatial similarity: max of ReLU cosines, clamped to [0,1]") {
  Tensor<double> cv = Tensor<double>::from({1, 3}, {-0.5, 0.3, 1.2});
  Tensor<double> cs = Tensor<double>::from({1, 3}, {-0.9, 0.7, 0.1});
  Tensor<double> s = stage2::spatial_similarity(cv, cs);
  CHECK(s.data[0] == 0.0);  // both negative -> 0
  CHECK(s.data[1] == doctest::Approx(0.7));
  CHECK(s.data[2] == 1.0);  // clamped
  CHECK_THROWS_AS(stage2::spatial_similarity(cv, Tensor<double>({2, 2})), std::invalid_argument);
}

TEST_CASE("temporal similarity is the average of the two cosine matrices") {
  Tensor<double> cv = Tensor<double>::from({1, 2}, {0.2, -0.6});
  Tensor<double> cs = Tensor<double>::from({1, 2}, {0.8, -0.2});
  Tensor<double> s = stage2::temporal_similarity(cv, cs);
  CHECK(s.data[0] == doctest::Approx(0.5));
  CHECK(s.data[1] == doctest::Approx(-0.4));
}

TEST_CASE("categorize_pair ground-truth table") {
  using stage2::NegCategory;
  CHECK(stage2::categorize_pair(fake_window(0, 0), fake_window(1, 0)) == NegCategory::easy);
  CHECK(stage2::categorize_pair(fake_window(0, 0), fake_window(0, 1)) == NegCategory::hard);
  CHECK(stage2::categorize_pair(fake_window(0, 1), fake_window(0, 1)) == NegCategory::false_neg);
  // idle counts as its own source
  CHECK(stage2::categorize_pair(fake_window(-1, -1), fake_window(0, 0)) == NegCategory::easy);
  CHECK(stage2::categorize_pair(fake_window(-1, -1), fake_window(-1, -1)) ==
        NegCategory::false_neg);
}

TEST_CASE("stage2_loss matches a brute-force bidirectional InfoNCE when W = 1") {
  const int64_t n = 4, d = 3;
  Rng r(77);
  Tensor<double> zv({n, d}), zs({n, d});
  for (auto& v : zv.data) v = r.uniform(-1.0, 1.0);
  for (auto& v : zs.data) v = r.uniform(-1.0, 1.0);
  Tensor<double> w({n, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) w.data[size_t(i * n + j)] = i == j ? 0.0 : 1.0;
  const double tau = 0.2;
  double got = stage2::stage2_loss(nn::Var<double>::leaf(zv, false),
                                   nn::Var<double>::leaf(zs, false), w, tau)
                   .value()
                   .data[0];
  // independent oracle: mean over rows and columns of -log softmax diagonals
  auto dot = [&](int64_t i, int64_t j) {
    double acc = 0;
    for (int64_t q = 0; q < d; ++q)
      acc += double(zv.data[size_t(i * d + q)]) * double(zs.data[size_t(j * d + q)]);
    return acc / tau;
  };
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    double den_r = 0, den_c = 0;
    for (int64_t j = 0; j < n; ++j) {
      den_r += std::exp(dot(i, j));
      den_c += std::exp(dot(j, i));
    }
    loss += -std::log(std::exp(dot(i, i)) / den_r) - std::log(std::exp(dot(i, i)) / den_c);
  }
  loss /= double(2 * n);
  CHECK(got == doctest::Approx(loss).epsilon(1e-10));
}

TEST_CASE("run_stage2: freeze contract, momentum drift, and log shape") {
  const synth::Dataset& ds = tiny_dataset();
  const auto& s1 = stage1_result();
  stage2::Stage2Config cfg = quick_config();
  auto res = stage2::run_stage2<float>(ds, s1.sensor_spatial, s1.video_spatial, tiny_arch(), cfg, 9);
  CHECK(!res.aborted);

  // spatial encoders pass through bit-identically (they are frozen)
  CHECK(res.sensor_spatial.bit_equal(s1.sensor_spatial));
  CHECK(res.video_spatial.bit_equal(s1.video_spatial));

  // epoch 0 snapshot plus one row per training epoch
  REQUIRE(res.log.size() == size_t(cfg.epochs + 1));
  CHECK(res.log.front().epoch == 0);
  CHECK(res.log.back().epoch == cfg.epochs);

  // momentum encoders moved but stay within EMA reach of the online ones
  CHECK(!res.sensor_temporal_momentum.bit_equal(res.sensor_temporal));
  CHECK(!res.video_temporal_momentum.bit_equal(res.video_temporal));

  // three cdf rows (easy/hard/false) per logged epoch, quantiles nondecreasing
  REQUIRE(res.cdf.size() == 3 * res.log.size());
  for (const auto& row : res.cdf)
    for (int p = 1; p <= 100; ++p) CHECK(row.q[size_t(p)] >= row.q[size_t(p - 1)] - 1e-12);

  // weights observed in the log stay inside [0, lambda_hard]
  for (const auto& row : res.log) {
    for (double m : {row.mean_easy, row.mean_hard, row.mean_false}) {
      CHECK(m >= 0.0);
      CHECK(m <= cfg.lambda_hard);
    }
  }
}

TEST_CASE("run_stage2 with use_adaptive_weights=false reports all-ones weights") {
  const synth::Dataset& ds = tiny_dataset();
  const auto& s1 = stage1_result();
  stage2::Stage2Config cfg = quick_config();
  cfg.use_adaptive_weights = false;
  cfg.epochs = 1;
  auto res = stage2::run_stage2<float>(ds, s1.sensor_spatial, s1.video_spatial, tiny_arch(), cfg, 9);
  for (const auto& row : res.log) {
    CHECK(row.mean_easy == doctest::Approx(1.0));
    CHECK(row.mean_hard == doctest::Approx(1.0));
    CHECK(row.mean_false == doctest::Approx(1.0));
  }
}

TEST_CASE("run_stage2 is deterministic for a fixed seed") {
  const synth::Dataset& ds = tiny_dataset();
  const auto& s1 = stage1_result();
  stage2::Stage2Config cfg = quick_config();
  cfg.epochs = 2;
  auto a = stage2::run_stage2<float>(ds, s1.sensor_spatial, s1.video_spatial, tiny_arch(), cfg, 5);
  auto b = stage2::run_stage2<float>(ds, s1.sensor_spatial, s1.video_spatial, tiny_arch(), cfg, 5);
  CHECK(a.sensor_temporal.bit_equal(b.sensor_temporal));
  CHECK(a.video_temporal.bit_equal(b.video_temporal));
  CHECK(a.sensor_temporal_momentum.bit_equal(b.sensor_temporal_momentum));
  REQUIRE(a.log.size() == b.log.size());
  for (size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].loss == b.log[i].loss);
  CHECK(stage2::stage2_log_csv(a.log) == stage2::stage2_log_csv(b.log));
  CHECK(stage2::weights_cdf_csv(a.cdf) == stage2::weights_cdf_csv(b.cdf));
}

}  // TEST_SUITE

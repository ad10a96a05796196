#pragma once

#include <string>
#include <vector>

#include "detach/autodiff.hpp"
#include "detach/params.hpp"
#include "detach/tensor.hpp"

namespace detach {
namespace enc {

using nn::ParamSet;
using nn::ParamVars;
using nn::Var;

// Architecture defaults chosen to keep total parameters well under 1M for CPU
// training; all four encoders project to the same embedding width d.
struct EncoderArch {
  int d = 64;
  // sensor branch: conv1d stack + GRU
  std::vector<int> sensor_conv_channels = {32, 32};
  int sensor_kernel = 5;
  int sensor_stride = 2;
  int gru_hidden = 64;
  // video spatial: conv2d stack on the mean frame
  // Four stride-2 valid convolutions take a 32x32 frame down to 1x1, so the
  // pooled feature keeps full position information.
  std::vector<int> video2d_channels = {16, 32, 64, 64};
  int video2d_kernel = 3;
  int video2d_stride = 2;
  // video temporal: conv3d stack on frame differences
  std::vector<int> video3d_channels = {16, 32};
  int video3d_kernel = 3;
  std::array<int64_t, 3> video3d_stride = {1, 2, 2};

  void validate() const {
    if (d < 1) throw std::invalid_argument("encoder.d: must be >= 1");
    if (gru_hidden != d)
      throw std::invalid_argument(
          "encoder.gru_hidden: must equal d (GRU state is used as the embedding)");
    if (sensor_conv_channels.empty() || video2d_channels.empty() || video3d_channels.empty())
      throw std::invalid_argument("encoder: conv stacks must be nonempty");
    if (sensor_kernel < 1 || sensor_stride < 1 || video2d_kernel < 1 || video2d_stride < 1 ||
        video3d_kernel < 1)
      throw std::invalid_argument("encoder: kernels and strides must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// parameter registration (names are the serialization contract)

template <class S>
void register_conv1d_stack(ParamSet<S>& p, const EncoderArch& a, int in_channels) {
  int ci = in_channels;
  for (size_t l = 0; l < a.sensor_conv_channels.size(); ++l) {
    int co = a.sensor_conv_channels[l];
    std::string base = "conv" + std::to_string(l);
    p.add(base + ".w", {co, ci, a.sensor_kernel});
    p.add(base + ".bias", {co});
    ci = co;
  }
}

template <class S>
void register_gru(ParamSet<S>& p, int in, int hidden) {
  for (const char* g : {"z", "r", "n"}) {
    p.add(std::string("gru.w") + g, {hidden, in});
    p.add(std::string("gru.u") + g, {hidden, hidden});
    p.add(std::string("gru.b") + g + "bias", {hidden});
  }
}

template <class S>
void register_sensor_spatial(ParamSet<S>& p, const EncoderArch& a, int channels) {
  a.validate();
  register_conv1d_stack(p, a, channels);
  register_gru(p, a.sensor_conv_channels.back(), a.gru_hidden);
  p.add("intensity_proj.w", {a.d, channels});
  p.add("intensity_proj.bias", {a.d});
}

template <class S>
void register_video_spatial(ParamSet<S>& p, const EncoderArch& a, int num_clusters) {
  a.validate();
  int ci = 1;
  for (size_t l = 0; l < a.video2d_channels.size(); ++l) {
    int co = a.video2d_channels[l];
    std::string base = "conv" + std::to_string(l);
    p.add(base + ".w", {co, ci, a.video2d_kernel, a.video2d_kernel});
    p.add(base + ".bias", {co});
    ci = co;
  }
  p.add("head_proj.w", {a.d, a.video2d_channels.back()});
  p.add("head_proj.bias", {a.d});
  p.add("classifier.w", {num_clusters, a.d});
}

template <class S>
void register_sensor_temporal(ParamSet<S>& p, const EncoderArch& a, int channels) {
  a.validate();
  register_conv1d_stack(p, a, channels);
  register_gru(p, a.sensor_conv_channels.back(), a.gru_hidden);
  p.add("attn.w", {a.gru_hidden});
  p.add("out.w", {a.d, a.gru_hidden});
  p.add("out.bias", {a.d});
}

template <class S>
void register_video_temporal(ParamSet<S>& p, const EncoderArch& a) {
  a.validate();
  int ci = 1;
  for (size_t l = 0; l < a.video3d_channels.size(); ++l) {
    int co = a.video3d_channels[l];
    std::string base = "conv3d" + std::to_string(l);
    p.add(base + ".w", {co, ci, a.video3d_kernel, a.video3d_kernel, a.video3d_kernel});
    p.add(base + ".bias", {co});
    ci = co;
  }
  p.add("out.w", {a.d, a.video3d_channels.back()});
  p.add("out.bias", {a.d});
}

// ---------------------------------------------------------------------------
// building blocks

template <class S>
struct GruOut {
  Var<S> seq;   // [N,T,H]
  Var<S> last;  // [N,H]
};

// Standard GRU recurrence: z and r gates, candidate n with reset-gated state,
// h' = (1-z) * n + z * h. Built from tape primitives, so BPTT comes for free.
template <class S>
GruOut<S> gru_sequence(const Var<S>& x, const ParamVars<S>& pv) {
  nn::require(x.value().rank() == 3, "gru_sequence: need [N,T,A]");
  int64_t n = x.value().dim(0), t = x.value().dim(1);
  nn::require(t > 0, "gru_sequence: T must be >= 1");
  int64_t h = pv["gru.uz"].value().dim(0);
  Var<S> state = Var<S>::leaf(Tensor<S>({n, h}), false);
  std::vector<Var<S>> states;
  for (int64_t s = 0; s < t; ++s) {
    Var<S> xt = nn::select_time(x, s);
    Var<S> z = nn::sigmoid(nn::add(nn::linear(xt, pv["gru.wz"], pv["gru.bzbias"]),
                                   nn::linear(state, pv["gru.uz"])));
    Var<S> r = nn::sigmoid(nn::add(nn::linear(xt, pv["gru.wr"], pv["gru.brbias"]),
                                   nn::linear(state, pv["gru.ur"])));
    Var<S> cand = nn::tanh_act(nn::add(nn::linear(xt, pv["gru.wn"], pv["gru.bnbias"]),
                                       nn::mul(r, nn::linear(state, pv["gru.un"]))));
    Var<S> one_minus_z = nn::affine(z, -1.0, 1.0);
    state = nn::add(nn::mul(one_minus_z, cand), nn::mul(z, state));
    states.push_back(state);
  }
  return {nn::stack_time(states), state};
}

// alpha = softmax_t(h_t . w); output = sum_t alpha_t h_t
template <class S>
Var<S> attention_pool(const Var<S>& h, const Var<S>& w) {
  Var<S> scores = nn::contract_last(h, w);
  Var<S> alpha = nn::softmax_rows(scores);
  return nn::weight_sum_time(h, alpha);
}

template <class S>
Var<S> conv1d_stack(const Var<S>& x, const ParamVars<S>& pv, const EncoderArch& a) {
  Var<S> h = x;
  for (size_t l = 0; l < a.sensor_conv_channels.size(); ++l) {
    std::string base = "conv" + std::to_string(l);
    h = nn::relu(nn::conv1d(h, pv[base + ".w"], pv[base + ".bias"], a.sensor_stride, 0));
  }
  return h;
}

// ---------------------------------------------------------------------------
// encoder forwards (batched; inputs are constants, parameters carry grads)

// per-channel 99th-percentile intensity vector of each window, [N,C]
template <class S>
Tensor<S> intensity_vectors(const Tensor<S>& windows) {
  int64_t n = windows.dim(0), c = windows.dim(1), t = windows.dim(2);
  Tensor<S> out({n, c});
  std::vector<S> buf(size_t(t), S(0));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t q = 0; q < c; ++q) {
      const S* src = windows.ptr() + (i * c + q) * t;
      buf.assign(src, src + t);
      out.data[i * c + q] = S(percentile(buf, 99.0));
    }
  return out;
}

// windows [N,C,T] -> [N,d]: GRU(conv stack) final state fused (element-wise
// add) with the projected per-channel 99th-percentile intensity vector
template <class S>
Var<S> encode_sensor_spatial(const Tensor<S>& windows, const ParamVars<S>& pv,
                             const EncoderArch& a) {
  nn::require(windows.rank() == 3, "encode_sensor_spatial: need [N,C,T]");
  nn::require(windows.dim(1) == pv["conv0.w"].value().dim(1),
              "encode_sensor_spatial: window has " + std::to_string(windows.dim(1)) +
                  " channels, encoder expects " + std::to_string(pv["conv0.w"].value().dim(1)));
  Var<S> x = Var<S>::leaf(windows, false);
  Var<S> conv = conv1d_stack(x, pv, a);
  GruOut<S> gru = gru_sequence(nn::transpose12(conv), pv);
  Var<S> intens = Var<S>::leaf(intensity_vectors(windows), false);
  Var<S> proj = nn::linear(intens, pv["intensity_proj.w"], pv["intensity_proj.bias"]);
  return nn::add(gru.last, proj);
}

// clips [N,F,H,W] -> [N,d]: temporal mean frame -> conv2d stack -> GAP -> linear
template <class S>
Var<S> encode_video_spatial(const Tensor<S>& clips, const ParamVars<S>& pv,
                            const EncoderArch& a) {
  nn::require(clips.rank() == 4, "encode_video_spatial: need [N,F,H,W]");
  int64_t n = clips.dim(0), f = clips.dim(1), h = clips.dim(2), w = clips.dim(3);
  Tensor<S> mean({n, 1, h, w});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t p = 0; p < h * w; ++p) {
      double acc = 0;
      for (int64_t q = 0; q < f; ++q) acc += double(clips.data[(i * f + q) * h * w + p]);
      mean.data[i * h * w + p] = S(acc / double(f));
    }
  Var<S> x = Var<S>::leaf(std::move(mean), false);
  for (size_t l = 0; l < a.video2d_channels.size(); ++l) {
    std::string base = "conv" + std::to_string(l);
    x = nn::relu(nn::conv2d(x, pv[base + ".w"], pv[base + ".bias"], a.video2d_stride, 0));
  }
  Var<S> pooled = nn::global_avg_pool(x);
  return nn::linear(pooled, pv["head_proj.w"], pv["head_proj.bias"]);
}

// Cluster logits from the video spatial embedding: cosine similarity against
// unit prototypes, scaled by a fixed temperature. Cross-entropy then pulls each
// class onto its prototype while the prototypes repel each other on the
// sphere, mirroring the centroid-based logits of the sensor path.
inline constexpr double kPrototypeTau = 0.1;

template <class S>
Var<S> video_cluster_logits(const Var<S>& embedding, const ParamVars<S>& pv) {
  Var<S> protos = nn::normalize_rows(pv["classifier.w"]);
  return nn::affine(nn::linear(nn::normalize_rows(embedding), protos), 1.0 / kPrototypeTau, 0.0);
}

// windows [N,C,T] -> [N,d]: conv stack -> GRU sequence -> attention pool -> linear
template <class S>
Var<S> encode_sensor_temporal(const Tensor<S>& windows, const ParamVars<S>& pv,
                              const EncoderArch& a) {
  nn::require(windows.rank() == 3, "encode_sensor_temporal: need [N,C,T]");
  nn::require(windows.dim(1) == pv["conv0.w"].value().dim(1),
              "encode_sensor_temporal: window has " + std::to_string(windows.dim(1)) +
                  " channels, encoder expects " + std::to_string(pv["conv0.w"].value().dim(1)));
  Var<S> x = Var<S>::leaf(windows, false);
  Var<S> conv = conv1d_stack(x, pv, a);
  GruOut<S> gru = gru_sequence(nn::transpose12(conv), pv);
  Var<S> pooled = attention_pool(gru.seq, pv["attn.w"]);
  return nn::linear(pooled, pv["out.w"], pv["out.bias"]);
}

// clips [N,F,H,W], F>=2 -> [N,d]: frame differences -> conv3d stack -> GAP -> linear
template <class S>
Var<S> encode_video_temporal(const Tensor<S>& clips, const ParamVars<S>& pv,
                             const EncoderArch& a) {
  nn::require(clips.rank() == 4, "encode_video_temporal: need [N,F,H,W]");
  int64_t n = clips.dim(0), f = clips.dim(1), h = clips.dim(2), w = clips.dim(3);
  nn::require(f >= 2, "encode_video_temporal: need at least 2 frames, got " + std::to_string(f));
  Tensor<S> diffs({n, 1, f - 1, h, w});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t q = 0; q + 1 < f; ++q)
      for (int64_t p = 0; p < h * w; ++p)
        diffs.data[(i * (f - 1) + q) * h * w + p] =
            S(double(clips.data[(i * f + q + 1) * h * w + p]) -
              double(clips.data[(i * f + q) * h * w + p]));
  Var<S> x = Var<S>::leaf(std::move(diffs), false);
  for (size_t l = 0; l < a.video3d_channels.size(); ++l) {
    std::string base = "conv3d" + std::to_string(l);
    x = nn::relu(nn::conv3d(x, pv[base + ".w"], pv[base + ".bias"], a.video3d_stride, {0, 0, 0}));
  }
  Var<S> pooled = nn::global_avg_pool(x);
  return nn::linear(pooled, pv["out.w"], pv["out.bias"]);
}

// joint representation [spatial || temporal], spatial first (Tensor level)
template <class S>
Tensor<S> concat_joint(const Tensor<S>& spatial, const Tensor<S>& temporal) {
  if (spatial.rank() != 2 || !spatial.same_shape(temporal))
    throw std::invalid_argument("concat_joint: need matching [N,d] inputs, got " +
                                spatial.shape_str() + " and " + temporal.shape_str());
  int64_t n = spatial.dim(0), d = spatial.dim(1);
  Tensor<S> out({n, 2 * d});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t k = 0; k < d; ++k) out.data[i * 2 * d + k] = spatial.data[i * d + k];
    for (int64_t k = 0; k < d; ++k) out.data[i * 2 * d + d + k] = temporal.data[i * d + k];
  }
  return out;
}

}  // namespace enc
}  // namespace detach

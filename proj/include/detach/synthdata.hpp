#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "detach/io.hpp"
#include "detach/rng.hpp"
#include "detach/tensor.hpp"

namespace detach {
namespace synth {

using json = nlohmann::json;

// Paired exocentric-video / ambient-sensor scenario. Each of K sources owns
// one sensor channel and one fixed screen position; an event produces a
// channel transient shaped by its action and a moving blob at the source's
// position. Events sit on an integer-second grid.
struct Scenario {
  int num_sources = 7;
  int actions_per_source = 2;
  double sensor_rate = 30.0;  // Hz
  double video_rate = 8.0;    // fps
  double duration = 48.0;     // seconds per sequence
  int num_sequences = 12;
  int num_events = 0;  // 0 = fill every sequence; otherwise exactly this many
  // Events several windows long, so most windows sit fully inside an event.
  int event_min_seconds = 4;
  int event_max_seconds = 8;
  int gap_min_seconds = 1;
  int gap_max_seconds = 1;
  double noise_std = 0.0;
  int height = 32;
  int width = 32;
  uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& constraint) {
      throw std::invalid_argument("scenario." + field + ": " + constraint);
    };
    if (num_sources < 2) fail("num_sources", "must be >= 2");
    if (actions_per_source < 1) fail("actions_per_source", "must be >= 1");
    if (sensor_rate <= 0) fail("sensor_rate", "must be > 0");
    if (video_rate <= 0) fail("video_rate", "must be > 0");
    if (duration <= 0) fail("duration", "must be > 0");
    if (num_sequences < 1) fail("num_sequences", "must be >= 1");
    if (event_min_seconds < 1 || event_max_seconds < event_min_seconds)
      fail("event_min_seconds/event_max_seconds", "need 1 <= min <= max");
    if (gap_min_seconds < 0 || gap_max_seconds < gap_min_seconds)
      fail("gap_min_seconds/gap_max_seconds", "need 0 <= min <= max");
    if (noise_std < 0) fail("noise_std", "must be >= 0");
    if (height < 8 || width < 8) fail("height/width", "must be >= 8");
    if (num_events < 0) fail("num_events", "must be >= 0");
  }
};

struct Event {
  int sequence = 0;
  int source_id = 0;
  int action_id = 0;
  double start = 0;
  double duration = 0;
};

struct SequenceStreams {
  Tensor<float> sensor;  // [C, T_total]
  Tensor<float> video;   // [F_total, H, W]
};

struct GeneratedData {
  std::vector<Event> events;
  std::vector<SequenceStreams> sequences;
};

inline constexpr double kTransientAmplitude = 2.0;
inline constexpr double kBlobAmplitude = 0.35;
inline constexpr double kBlobSigma = 2.0;
inline constexpr double kBlobTravel = 2.0;       // pixels over one event
inline constexpr double kVideoNoiseScale = 0.05;  // relative to noise_std

namespace detail {

// channel transient value at progress u in [0,1)
inline double transient_shape(int action, double u) {
  switch (action % 4) {
    case 0: return u;                                    // rising ramp
    case 1: return 1.0 - u;                              // falling ramp
    case 2: return u < 0.5 ? 2.0 * u : 2.0 * (1.0 - u);  // triangle
    default: return 1.0;                                 // plateau
  }
}

// Actions also differ by a periodic signature: an action-specific carrier on
// the sensor transient and an action-specific brightness pulsation on the
// blob. Frequency, unlike the ramp slope or travel direction alone, survives
// windowing at an arbitrary phase, so two windows of the same action stay
// recognizably similar wherever they fall inside the event.
// Integer frequencies, evaluated on absolute sequence time: windows start on
// the integer-second grid, so every window of a given action sees the same
// carrier phase no matter where it falls inside an event.
inline double sensor_carrier_hz(int action) { return 2.0 + 2.0 * double(action); }
inline double blob_pulse_hz(int action) { return 1.0 + 2.0 * double(action); }

inline std::pair<double, double> source_position(const Scenario& sc, int k) {
  double cx = 0.5 * (sc.width - 1), cy = 0.5 * (sc.height - 1);
  double r = 0.35 * std::min(sc.width, sc.height);
  double th = 2.0 * M_PI * double(k) / double(sc.num_sources);
  return {cx + r * std::cos(th), cy + r * std::sin(th)};
}

inline std::pair<double, double> action_direction(const Scenario& sc, int action) {
  double th = 2.0 * M_PI * double(action) / double(sc.actions_per_source);
  return {std::cos(th), std::sin(th)};
}

// Appearance signature of source k at pixel (x, y) for a blob centered at
// (bx, by): an anisotropic Gaussian oriented per source with a cosine ripple
// along its major axis. Different equipment looks different on camera, so each
// source gets its own texture, not just its own position.
inline double blob_intensity(const Scenario& sc, int k, double x, double y, double bx, double by) {
  double phi = M_PI * double(k) / double(sc.num_sources);
  double c = std::cos(phi), s = std::sin(phi);
  double ux = (x - bx) * c + (y - by) * s;   // major axis
  double uy = -(x - bx) * s + (y - by) * c;  // minor axis
  double sig_major = 1.35 * kBlobSigma, sig_minor = 0.65 * kBlobSigma;
  double q = (ux * ux) / (sig_major * sig_major) + (uy * uy) / (sig_minor * sig_minor);
  double freq = 2.0 * M_PI * (1.0 + double(k % 3)) / (6.0 * kBlobSigma);
  double ripple = 0.65 + 0.35 * std::cos(freq * ux);
  return kBlobAmplitude * std::exp(-0.5 * q) * ripple;
}

}  // namespace detail

// Events for one sequence, drawn from that sequence's own substream so
// parallel and serial generation agree bit for bit.
inline std::vector<Event> sample_sequence_events(const Scenario& sc, int seq) {
  Rng rng = substream(sc.seed, "data/events/" + std::to_string(seq));
  std::vector<Event> events;
  int64_t t = 0;
  while (true) {
    int64_t gap = rng.uniform_int(sc.gap_min_seconds, sc.gap_max_seconds + 1);
    int64_t dur = rng.uniform_int(sc.event_min_seconds, sc.event_max_seconds + 1);
    if (double(t + gap + dur) > sc.duration) {
      // Fill the tail with one clipped event so sequences do not end with a
      // long unlabeled stretch; windows there would otherwise have no cluster
      // of their own (K = num_sources).
      int64_t tail = int64_t(sc.duration) - t - gap;
      if (tail >= 1) {
        Event e;
        e.sequence = seq;
        e.source_id = int(rng.uniform_int(0, sc.num_sources));
        e.action_id = int(rng.uniform_int(0, sc.actions_per_source));
        e.start = double(t + gap);
        e.duration = double(tail);
        events.push_back(e);
      }
      break;
    }
    Event e;
    e.sequence = seq;
    e.source_id = int(rng.uniform_int(0, sc.num_sources));
    e.action_id = int(rng.uniform_int(0, sc.actions_per_source));
    e.start = double(t + gap);
    e.duration = double(dur);
    events.push_back(e);
    t += gap + dur;
  }
  return events;
}

inline GeneratedData generate_scenario(const Scenario& sc) {
  sc.validate();
  GeneratedData out;
  for (int s = 0; s < sc.num_sequences; ++s) {
    auto ev = sample_sequence_events(sc, s);
    out.events.insert(out.events.end(), ev.begin(), ev.end());
  }
  if (sc.num_events > 0) {
    if (int(out.events.size()) < sc.num_events)
      throw std::invalid_argument(
          "scenario: cannot pack " + std::to_string(sc.num_events) + " events into " +
          std::to_string(sc.num_sequences) + " x " + std::to_string(sc.duration) +
          "s without overlap (capacity " + std::to_string(out.events.size()) + ")");
    out.events.resize(size_t(sc.num_events));
  }

  // background shared by all sequences
  Rng bg_rng = substream(sc.seed, "data/background");
  double fx = double(bg_rng.uniform_int(1, 3));
  double fy = double(bg_rng.uniform_int(1, 3));
  double p1 = bg_rng.uniform(0, 2.0 * M_PI);
  double p2 = bg_rng.uniform(0, 2.0 * M_PI);
  Tensor<float> background({sc.height, sc.width});
  for (int y = 0; y < sc.height; ++y)
    for (int x = 0; x < sc.width; ++x)
      background.data[size_t(y * sc.width + x)] =
          float(0.35 + 0.15 * std::sin(2.0 * M_PI * fx * x / sc.width + p1) *
                           std::cos(2.0 * M_PI * fy * y / sc.height + p2));

  int t_total = int(std::llround(sc.duration * sc.sensor_rate));
  int f_total = int(std::llround(sc.duration * sc.video_rate));
  int c = sc.num_sources;
  out.sequences.resize(size_t(sc.num_sequences));
  for (int s = 0; s < sc.num_sequences; ++s) {
    SequenceStreams& st = out.sequences[size_t(s)];
    st.sensor = Tensor<float>({c, t_total});
    st.video = Tensor<float>({f_total, sc.height, sc.width});

    for (const Event& e : out.events) {
      if (e.sequence != s) continue;
      int t0 = int(std::llround(e.start * sc.sensor_rate));
      int t1 = int(std::llround((e.start + e.duration) * sc.sensor_rate));
      for (int t = t0; t < t1 && t < t_total; ++t) {
        double u = double(t - t0) / double(t1 - t0);
        double t_abs = double(t) / sc.sensor_rate;
        double carrier =
            1.0 + 0.7 * std::sin(2.0 * M_PI * detail::sensor_carrier_hz(e.action_id) * t_abs);
        // The envelope is compressed toward 1 so that two windows of the same
        // action taken at different phases of an event stay close in input
        // space; the carrier frequency carries most of the action identity.
        st.sensor.data[size_t(e.source_id * t_total + t)] +=
            float(kTransientAmplitude * (0.85 + 0.15 * detail::transient_shape(e.action_id, u)) *
                  carrier);
      }
    }
    if (sc.noise_std > 0) {
      Rng nrng = substream(sc.seed, "data/noise/" + std::to_string(s));
      for (auto& v : st.sensor.data) v += float(sc.noise_std * nrng.gaussian());
    }

    for (int f = 0; f < f_total; ++f) {
      float* frame = st.video.ptr() + size_t(f) * sc.height * sc.width;
      std::memcpy(frame, background.ptr(), sizeof(float) * size_t(sc.height * sc.width));
      double tsec = double(f) / sc.video_rate;
      for (const Event& e : out.events) {
        if (e.sequence != s) continue;
        if (tsec < e.start || tsec >= e.start + e.duration) continue;
        double u = (tsec - e.start) / e.duration;
        auto [px, py] = detail::source_position(sc, e.source_id);
        auto [dx, dy] = detail::action_direction(sc, e.action_id);
        double bx = px + (u - 0.5) * kBlobTravel * dx;
        double by = py + (u - 0.5) * kBlobTravel * dy;
        double pulse =
            1.0 + 0.6 * std::sin(2.0 * M_PI * detail::blob_pulse_hz(e.action_id) * tsec);
        for (int y = 0; y < sc.height; ++y)
          for (int x = 0; x < sc.width; ++x)
            frame[y * sc.width + x] +=
                float(pulse * detail::blob_intensity(sc, e.source_id, x, y, bx, by));
      }
    }
    if (sc.noise_std > 0) {
      Rng vrng = substream(sc.seed, "data/vnoise/" + std::to_string(s));
      for (auto& v : st.video.data) v += float(kVideoNoiseScale * sc.noise_std * vrng.gaussian());
    }
    for (auto& v : st.video.data) v = std::min(1.0f, std::max(0.0f, v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// windowing

struct WindowParams {
  double window_seconds = 2.0;
  double overlap_seconds = 1.0;

  void validate(const Scenario& sc) const {
    if (overlap_seconds < 0 || overlap_seconds >= window_seconds)
      throw std::invalid_argument("window: need 0 <= overlap_seconds < window_seconds");
    double t = window_seconds * sc.sensor_rate;
    double f = window_seconds * sc.video_rate;
    if (std::abs(t - std::round(t)) > 1e-9 || std::abs(f - std::round(f)) > 1e-9)
      throw std::invalid_argument("window: window_seconds must align with both sample rates");
    if (sc.duration < window_seconds)
      throw std::invalid_argument("window: stream shorter than one window");
  }
};

struct SensorWindow {
  Tensor<float> values;  // [C, T], z-scored
  int source_id = -1;    // -1 = idle
  int action_id = -1;
  int window_index = 0;
  int sequence_id = 0;
  double start_seconds = 0;
};

struct VideoClip {
  Tensor<float> frames;  // [F, H, W]
  int window_index = 0;
};

struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<int> degenerate_channels;
  // Per-pixel mean frame (H*W, row-major) over the pretraining split; encoders
  // subtract it so the static background does not dominate the spatial input.
  std::vector<float> video_pixel_mean;
};

// Raw (un-normalized) windows with majority-overlap labels; an event must
// cover at least half the window to label it, otherwise the window is idle.
inline std::pair<std::vector<SensorWindow>, std::vector<VideoClip>> make_windows(
    const Scenario& sc, const GeneratedData& gen, const WindowParams& wp) {
  wp.validate(sc);
  double stride = wp.window_seconds - wp.overlap_seconds;
  int per_seq = int(std::floor((sc.duration - wp.window_seconds) / stride + 1e-9)) + 1;
  int t_win = int(std::llround(wp.window_seconds * sc.sensor_rate));
  int f_win = int(std::llround(wp.window_seconds * sc.video_rate));
  int c = sc.num_sources;
  int t_total = int(std::llround(sc.duration * sc.sensor_rate));
  int f_total = int(std::llround(sc.duration * sc.video_rate));

  std::vector<SensorWindow> windows;
  std::vector<VideoClip> clips;
  int widx = 0;
  for (int s = 0; s < sc.num_sequences; ++s) {
    const SequenceStreams& st = gen.sequences[size_t(s)];
    for (int wi = 0; wi < per_seq; ++wi) {
      double w0 = wi * stride;
      double w1 = w0 + wp.window_seconds;
      SensorWindow sw;
      sw.window_index = widx;
      sw.sequence_id = s;
      sw.start_seconds = w0;
      sw.values = Tensor<float>({c, t_win});
      int t0 = int(std::llround(w0 * sc.sensor_rate));
      for (int q = 0; q < c; ++q)
        for (int t = 0; t < t_win; ++t) {
          int src = std::min(t0 + t, t_total - 1);
          sw.values.data[size_t(q * t_win + t)] = st.sensor.data[size_t(q * t_total + src)];
        }
      // majority-overlap label
      double best = 0;
      const Event* best_ev = nullptr;
      for (const Event& e : gen.events) {
        if (e.sequence != s) continue;
        double ov = std::min(w1, e.start + e.duration) - std::max(w0, e.start);
        if (ov > best + 1e-12) {
          best = ov;
          best_ev = &e;
        }
      }
      if (best_ev && best + 1e-9 >= 0.5 * wp.window_seconds) {
        sw.source_id = best_ev->source_id;
        sw.action_id = best_ev->action_id;
      }
      windows.push_back(std::move(sw));

      VideoClip vc;
      vc.window_index = widx;
      vc.frames = Tensor<float>({f_win, sc.height, sc.width});
      int f0 = int(std::llround(w0 * sc.video_rate));
      size_t hw = size_t(sc.height * sc.width);
      for (int f = 0; f < f_win; ++f) {
        int src = std::min(f0 + f, f_total - 1);
        std::memcpy(vc.frames.ptr() + size_t(f) * hw, st.video.ptr() + size_t(src) * hw,
                    sizeof(float) * hw);
      }
      clips.push_back(std::move(vc));
      ++widx;
    }
  }
  return {std::move(windows), std::move(clips)};
}

// composite class id used for stratification and downstream labels;
// idle gets the reserved id K*A
inline int class_id(const SensorWindow& w, const Scenario& sc) {
  if (w.source_id < 0) return sc.num_sources * sc.actions_per_source;
  return w.source_id * sc.actions_per_source + w.action_id;
}

// Label-stratified split into (pretrain, probe_train, probe_val, probe_test).
// Returns split index per window. Classes smaller than the split count go
// entirely to pretrain with a warning.
inline std::vector<int> split_dataset(const std::vector<SensorWindow>& windows,
                                      const Scenario& sc, const std::array<double, 4>& fractions,
                                      uint64_t seed,
                                      std::vector<std::string>* warnings = nullptr) {
  double fsum = fractions[0] + fractions[1] + fractions[2] + fractions[3];
  if (std::abs(fsum - 1.0) > 1e-9)
    throw std::invalid_argument("split fractions must sum to 1, got " + std::to_string(fsum));
  int64_t n = int64_t(windows.size());
  // global targets via largest remainder
  std::array<int64_t, 4> target{};
  std::array<double, 4> frac{};
  int64_t assigned = 0;
  for (int s = 0; s < 4; ++s) {
    double exact = double(n) * fractions[size_t(s)];
    target[size_t(s)] = int64_t(std::floor(exact + 1e-9));
    frac[size_t(s)] = exact - double(target[size_t(s)]);
    assigned += target[size_t(s)];
  }
  while (assigned < n) {
    int best = 0;
    for (int s = 1; s < 4; ++s)
      if (frac[size_t(s)] > frac[size_t(best)] + 1e-12) best = s;
    ++target[size_t(best)];
    frac[size_t(best)] = -1;
    ++assigned;
  }

  std::map<int, std::vector<int64_t>> by_class;
  for (int64_t i = 0; i < n; ++i) by_class[class_id(windows[size_t(i)], sc)].push_back(i);

  Rng rng = substream(seed, "split");
  std::vector<int> split_of(size_t(n), 0);
  std::array<int64_t, 4> size_now{};
  for (auto& [cls, idxs] : by_class) {
    if (int64_t(idxs.size()) < 4) {
      if (warnings)
        warnings->push_back("class " + std::to_string(cls) + " has only " +
                            std::to_string(idxs.size()) + " samples; assigned to pretrain");
      size_now[0] += int64_t(idxs.size());
      continue;  // split 0 already
    }
    std::vector<int64_t> shuffled = idxs;
    rng.shuffle(shuffled);
    int64_t nc = int64_t(shuffled.size());
    std::array<int64_t, 4> take{};
    int64_t got = 0;
    for (int s = 0; s < 4; ++s) {
      take[size_t(s)] = int64_t(std::floor(double(nc) * fractions[size_t(s)] + 1e-9));
      got += take[size_t(s)];
    }
    while (got < nc) {  // give leftovers to the globally most-underfilled split
      int best = 0;
      double best_deficit = -1e18;
      for (int s = 0; s < 4; ++s) {
        double deficit = double(target[size_t(s)] - size_now[size_t(s)] - take[size_t(s)]);
        if (deficit > best_deficit + 1e-12) {
          best_deficit = deficit;
          best = s;
        }
      }
      ++take[size_t(best)];
      ++got;
    }
    int64_t pos = 0;
    for (int s = 0; s < 4; ++s) {
      for (int64_t j = 0; j < take[size_t(s)]; ++j) split_of[size_t(shuffled[size_t(pos++)])] = s;
      size_now[size_t(s)] += take[size_t(s)];
    }
  }
  return split_of;
}

// z-score statistics from the given population only (pretraining split)
inline NormStats compute_norm_stats(const std::vector<SensorWindow>& windows,
                                    const std::vector<int>& split_of) {
  if (windows.empty()) throw std::invalid_argument("compute_norm_stats: no windows");
  int c = int(windows[0].values.dim(0));
  int t = int(windows[0].values.dim(1));
  NormStats st;
  st.mean.assign(size_t(c), 0.0);
  st.stddev.assign(size_t(c), 0.0);
  int64_t count = 0;
  for (size_t i = 0; i < windows.size(); ++i) {
    if (split_of[i] != 0) continue;
    ++count;
    for (int q = 0; q < c; ++q)
      for (int s = 0; s < t; ++s) st.mean[size_t(q)] += double(windows[i].values.data[size_t(q * t + s)]);
  }
  if (count == 0) throw std::invalid_argument("compute_norm_stats: empty pretraining split");
  for (int q = 0; q < c; ++q) st.mean[size_t(q)] /= double(count * t);
  for (size_t i = 0; i < windows.size(); ++i) {
    if (split_of[i] != 0) continue;
    for (int q = 0; q < c; ++q)
      for (int s = 0; s < t; ++s) {
        double d = double(windows[i].values.data[size_t(q * t + s)]) - st.mean[size_t(q)];
        st.stddev[size_t(q)] += d * d;
      }
  }
  for (int q = 0; q < c; ++q) {
    st.stddev[size_t(q)] = std::sqrt(st.stddev[size_t(q)] / double(count * t));
    if (st.stddev[size_t(q)] < 1e-12) st.degenerate_channels.push_back(q);
  }
  return st;
}

// Per-pixel mean frame over all clips of the pretraining split (all frames
// pooled). Stored alongside the sensor z-score stats; clips themselves stay in
// [0,1] on disk and the mean is subtracted at encoder-input time.
inline std::vector<float> compute_video_pixel_mean(const std::vector<VideoClip>& clips,
                                                   const std::vector<int>& split_of) {
  if (clips.empty()) throw std::invalid_argument("compute_video_pixel_mean: no clips");
  int64_t f = clips[0].frames.dim(0), h = clips[0].frames.dim(1), w = clips[0].frames.dim(2);
  std::vector<double> acc(size_t(h * w), 0.0);
  int64_t count = 0;
  for (size_t i = 0; i < clips.size(); ++i) {
    if (split_of[i] != 0) continue;
    const auto& fr = clips[i].frames;
    for (int64_t t = 0; t < f; ++t)
      for (int64_t p = 0; p < h * w; ++p) acc[size_t(p)] += double(fr.data[size_t(t * h * w + p)]);
    count += f;
  }
  if (count == 0) throw std::invalid_argument("compute_video_pixel_mean: empty pretraining split");
  std::vector<float> mean(size_t(h * w));
  for (size_t p = 0; p < mean.size(); ++p) mean[p] = float(acc[p] / double(count));
  return mean;
}

inline void apply_normalization(std::vector<SensorWindow>& windows, const NormStats& st) {
  if (windows.empty()) return;
  int c = int(windows[0].values.dim(0));
  int t = int(windows[0].values.dim(1));
  std::vector<bool> degen(size_t(c), false);
  for (int q : st.degenerate_channels) degen[size_t(q)] = true;
  for (auto& w : windows)
    for (int q = 0; q < c; ++q)
      for (int s = 0; s < t; ++s) {
        float& v = w.values.data[size_t(q * t + s)];
        v = degen[size_t(q)] ? 0.0f
                             : float((double(v) - st.mean[size_t(q)]) / st.stddev[size_t(q)]);
      }
}

// ---------------------------------------------------------------------------
// dataset

struct Dataset {
  Scenario scenario;
  WindowParams window_params;
  std::array<double, 4> fractions{0.8, 0.1, 0.05, 0.05};
  std::vector<SensorWindow> windows;
  std::vector<VideoClip> clips;
  std::vector<int> split_of;
  std::vector<Event> events;
  NormStats stats;
  std::vector<std::string> warnings;

  std::vector<int> indices_of_split(int s) const {
    std::vector<int> out;
    for (size_t i = 0; i < split_of.size(); ++i)
      if (split_of[i] == s) out.push_back(int(i));
    return out;
  }

  int num_classes() const {
    // action classes plus the reserved idle class when it occurs
    bool any_idle = false;
    for (auto& w : windows)
      if (w.source_id < 0) any_idle = true;
    return scenario.num_sources * scenario.actions_per_source + (any_idle ? 1 : 0);
  }
};

inline Dataset build_dataset(const Scenario& sc, const WindowParams& wp,
                             const std::array<double, 4>& fractions) {
  Dataset ds;
  ds.scenario = sc;
  ds.window_params = wp;
  ds.fractions = fractions;
  GeneratedData gen = generate_scenario(sc);
  ds.events = gen.events;
  auto [windows, clips] = make_windows(sc, gen, wp);
  ds.windows = std::move(windows);
  ds.clips = std::move(clips);
  ds.split_of = split_dataset(ds.windows, sc, fractions, sc.seed, &ds.warnings);
  ds.stats = compute_norm_stats(ds.windows, ds.split_of);
  ds.stats.video_pixel_mean = compute_video_pixel_mean(ds.clips, ds.split_of);
  apply_normalization(ds.windows, ds.stats);
  return ds;
}

// ---------------------------------------------------------------------------
// persistence

inline json scenario_to_json(const Scenario& s) {
  return json{{"num_sources", s.num_sources},
              {"actions_per_source", s.actions_per_source},
              {"sensor_rate", s.sensor_rate},
              {"video_rate", s.video_rate},
              {"duration", s.duration},
              {"num_sequences", s.num_sequences},
              {"num_events", s.num_events},
              {"event_min_seconds", s.event_min_seconds},
              {"event_max_seconds", s.event_max_seconds},
              {"gap_min_seconds", s.gap_min_seconds},
              {"gap_max_seconds", s.gap_max_seconds},
              {"noise_std", s.noise_std},
              {"height", s.height},
              {"width", s.width},
              {"seed", s.seed}};
}

inline Scenario scenario_from_json(const json& j) {
  Scenario s;
  s.num_sources = j.value("num_sources", s.num_sources);
  s.actions_per_source = j.value("actions_per_source", s.actions_per_source);
  s.sensor_rate = j.value("sensor_rate", s.sensor_rate);
  s.video_rate = j.value("video_rate", s.video_rate);
  s.duration = j.value("duration", s.duration);
  s.num_sequences = j.value("num_sequences", s.num_sequences);
  s.num_events = j.value("num_events", s.num_events);
  s.event_min_seconds = j.value("event_min_seconds", s.event_min_seconds);
  s.event_max_seconds = j.value("event_max_seconds", s.event_max_seconds);
  s.gap_min_seconds = j.value("gap_min_seconds", s.gap_min_seconds);
  s.gap_max_seconds = j.value("gap_max_seconds", s.gap_max_seconds);
  s.noise_std = j.value("noise_std", s.noise_std);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.seed = j.value("seed", s.seed);
  return s;
}

inline void save_dataset(const std::string& dir, const Dataset& ds,
                         const std::string& config_hash = "") {
  namespace fs = std::filesystem;
  fs::create_directories(dir + "/windows");
  json manifest;
  manifest["format_version"] = 1;
  manifest["config_hash"] = config_hash;
  manifest["scenario"] = scenario_to_json(ds.scenario);
  manifest["window_params"] = {{"window_seconds", ds.window_params.window_seconds},
                               {"overlap_seconds", ds.window_params.overlap_seconds}};
  manifest["fractions"] = ds.fractions;
  manifest["normalization"] = {{"mean", ds.stats.mean},
                               {"stddev", ds.stats.stddev},
                               {"degenerate_channels", ds.stats.degenerate_channels},
                               {"video_pixel_mean", ds.stats.video_pixel_mean}};
  manifest["warnings"] = ds.warnings;
  manifest["num_windows"] = ds.windows.size();
  std::vector<int> seq_ids;
  for (auto& w : ds.windows) seq_ids.push_back(w.sequence_id);
  manifest["sequence_id"] = seq_ids;
  json evs = json::array();
  for (auto& e : ds.events)
    evs.push_back({{"sequence", e.sequence},
                   {"source_id", e.source_id},
                   {"action_id", e.action_id},
                   {"start", e.start},
                   {"duration", e.duration}});
  manifest["events"] = evs;
  io::write_text_file(dir + "/manifest.json", manifest.dump(2) + "\n");

  std::ostringstream csv;
  csv << "window_index,source_id,action_id,split\n";
  for (size_t i = 0; i < ds.windows.size(); ++i)
    csv << ds.windows[i].window_index << "," << ds.windows[i].source_id << ","
        << ds.windows[i].action_id << "," << ds.split_of[i] << "\n";
  io::write_text_file(dir + "/labels.csv", csv.str());

  char idx[32];
  for (size_t i = 0; i < ds.windows.size(); ++i) {
    std::snprintf(idx, sizeof(idx), "%06zu", i);
    io::write_tensor_record(dir + "/windows/sensor_" + idx + ".dtch", ds.windows[i].values);
    io::write_tensor_record(dir + "/windows/video_" + idx + ".dtch", ds.clips[i].frames);
  }
}

inline Dataset load_dataset(const std::string& dir) {
  json manifest = json::parse(io::read_text_file(dir + "/manifest.json"));
  Dataset ds;
  ds.scenario = scenario_from_json(manifest.at("scenario"));
  ds.window_params.window_seconds = manifest.at("window_params").at("window_seconds");
  ds.window_params.overlap_seconds = manifest.at("window_params").at("overlap_seconds");
  ds.fractions = manifest.at("fractions");
  ds.stats.mean = manifest.at("normalization").at("mean").get<std::vector<double>>();
  ds.stats.stddev = manifest.at("normalization").at("stddev").get<std::vector<double>>();
  ds.stats.degenerate_channels =
      manifest.at("normalization").at("degenerate_channels").get<std::vector<int>>();
  ds.stats.video_pixel_mean =
      manifest.at("normalization").value("video_pixel_mean", std::vector<float>{});
  ds.warnings = manifest.at("warnings").get<std::vector<std::string>>();
  for (auto& e : manifest.at("events")) {
    Event ev;
    ev.sequence = e.at("sequence");
    ev.source_id = e.at("source_id");
    ev.action_id = e.at("action_id");
    ev.start = e.at("start");
    ev.duration = e.at("duration");
    ds.events.push_back(ev);
  }
  std::vector<int> seq_ids = manifest.at("sequence_id").get<std::vector<int>>();

  size_t n = manifest.at("num_windows").get<size_t>();
  std::istringstream csv(io::read_text_file(dir + "/labels.csv"));
  std::string line;
  std::getline(csv, line);  // header
  ds.windows.resize(n);
  ds.clips.resize(n);
  ds.split_of.resize(n);
  size_t row = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    SensorWindow& w = ds.windows.at(row);
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    ls >> w.window_index >> w.source_id >> w.action_id >> ds.split_of.at(row);
    w.sequence_id = seq_ids.at(row);
    ++row;
  }
  if (row != n) throw std::runtime_error("labels.csv row count mismatch in " + dir);
  char idx[32];
  for (size_t i = 0; i < n; ++i) {
    std::snprintf(idx, sizeof(idx), "%06zu", i);
    ds.windows[i].values = io::read_tensor_record(dir + "/windows/sensor_" + idx + ".dtch");
    ds.clips[i].frames = io::read_tensor_record(dir + "/windows/video_" + idx + ".dtch");
    ds.clips[i].window_index = int(i);
  }
  return ds;
}

}  // namespace synth
}  // namespace detach

#pragma once

// Deterministic synthetic skeleton motion for two movement classes:
//   dystonia-like: slow sinusoidal twist of one arm about its shoulder
//   chorea-like:   brief random jerks on every part, mean-reverting

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "skelnet/errors.hpp"
#include "skelnet/pose_data.hpp"

namespace skelnet::synth {

enum class MotionClass { DystoniaLike, ChoreaLike };

inline Label label_of(MotionClass c) {
  return c == MotionClass::DystoniaLike ? Label::Dystonia : Label::Chorea;
}

using Pose = std::array<std::array<double, 2>, kNumKeypoints>;

/// Seated stance with both hands raised and held out, in normalized image
/// coordinates (y grows downward). Symmetric about x = 0.5.
inline constexpr Pose kBasePose{{
    {0.500, 0.300}, {0.500, 0.400}, {0.420, 0.400}, {0.360, 0.300}, {0.320, 0.200},
    {0.580, 0.400}, {0.640, 0.300}, {0.680, 0.200}, {0.500, 0.620}, {0.450, 0.620},
    {0.440, 0.750}, {0.440, 0.880}, {0.550, 0.620}, {0.560, 0.750}, {0.560, 0.880},
    {0.480, 0.280}, {0.520, 0.280}, {0.460, 0.290}, {0.540, 0.290}, {0.580, 0.920},
    {0.600, 0.910}, {0.555, 0.900}, {0.420, 0.920}, {0.400, 0.910}, {0.445, 0.900},
}};

struct MotionSpec {
  MotionClass motion = MotionClass::DystoniaLike;
  std::size_t n_frames = 125;
  int fps = 25;
  int width = 1280;
  int height = 720;
  std::uint64_t seed = 0;
  Pose base_pose = kBasePose;
  /// Dystonia: twist amplitude (radians). Chorea: jerk impulse scale (normalized units/frame).
  double amplitude = 0.0;
  /// Chorea: per-frame probability of a jerk on each part. Dystonia: twist frequency (Hz).
  double jerk_rate = 0.0;
  /// Mean-reversion rate per frame for the chorea displacement.
  double drift_rate = 0.0;
  double noise = 0.0015;
};

inline MotionSpec default_spec(MotionClass c) {
  MotionSpec s;
  s.motion = c;
  if (c == MotionClass::DystoniaLike) {
    s.amplitude = 0.25;
    s.jerk_rate = 0.3;
    s.drift_rate = 0.0;
  } else {
    s.amplitude = 0.012;
    s.jerk_rate = 0.25;
    s.drift_rate = 0.08;
  }
  return s;
}

namespace detail {

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

inline void rotate_about(Pose& pose, std::span<const std::size_t> chain, std::size_t pivot,
                         double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double px = pose[pivot][0], py = pose[pivot][1];
  for (std::size_t k : chain) {
    if (k == pivot) continue;
    const double dx = pose[k][0] - px, dy = pose[k][1] - py;
    pose[k][0] = px + c * dx - s * dy;
    pose[k][1] = py + s * dx + c * dy;
  }
}

}  // namespace detail

/// Generates one sequence in pixel coordinates (normalized coordinates scaled
/// by width/height after clamping to [0,1]).
inline KeypointSequence generate(const MotionSpec& spec) {
  if (spec.n_frames < kClipFrames) throw ConfigError("synthetic sequences need at least 75 frames");
  if (spec.fps <= 0 || spec.width <= 0 || spec.height <= 0)
    throw ConfigError("synthetic spec needs positive fps and resolution");

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::uniform_real_distribution<double> conf(0.5, 1.0);

  KeypointSequence seq;
  seq.label = label_of(spec.motion);
  seq.fps = spec.fps;
  seq.width = spec.width;
  seq.height = spec.height;

  // Per-video posture jitter so that clips are not copies of one template.
  Pose base = spec.base_pose;
  const double offset_x = 0.03 * (uni(rng) - 0.5), offset_y = 0.03 * (uni(rng) - 0.5);
  const double zoom = 1.0 + 0.1 * (uni(rng) - 0.5);
  for (auto& p : base) {
    p[0] = 0.5 + (p[0] - 0.5) * zoom + offset_x;
    p[1] = 0.5 + (p[1] - 0.5) * zoom + offset_y;
  }

  const bool right_side = uni(rng) < 0.5;
  const double phase = 2.0 * std::numbers::pi * uni(rng);
  const double amp = spec.amplitude * (0.8 + 0.4 * uni(rng));
  std::array<std::array<double, 2>, kNumParts> disp{}, vel{};

  seq.frames.resize(spec.n_frames);
  for (std::size_t t = 0; t < spec.n_frames; ++t) {
    Pose pose = base;
    if (spec.motion == MotionClass::DystoniaLike) {
      const double time = static_cast<double>(t) / spec.fps;
      const double angle = amp * std::sin(2.0 * std::numbers::pi * spec.jerk_rate * time + phase);
      const Part arm = right_side ? Part::RightArm : Part::LeftArm;
      const auto chain = part_keypoints(arm);
      detail::rotate_about(pose, chain, chain[0], right_side ? angle : -angle);
    } else {
      for (std::size_t p = 0; p < kNumParts; ++p) {
        for (int axis = 0; axis < 2; ++axis) {
          if (uni(rng) < spec.jerk_rate) vel[p][axis] += spec.amplitude * unit(rng);
          vel[p][axis] *= 0.7;
          disp[p][axis] = (disp[p][axis] + vel[p][axis]) * (1.0 - spec.drift_rate);
        }
      }
      for (std::size_t k = 0; k < kNumKeypoints; ++k) {
        const auto p = static_cast<std::size_t>(part_of_keypoint(k));
        pose[k][0] += disp[p][0];
        pose[k][1] += disp[p][1];
      }
    }
    for (std::size_t k = 0; k < kNumKeypoints; ++k) {
      const double x = detail::clamp01(pose[k][0] + spec.noise * unit(rng));
      const double y = detail::clamp01(pose[k][1] + spec.noise * unit(rng));
      seq.frames[t][k] = Keypoint{x * spec.width, y * spec.height, conf(rng), true};
    }
  }
  return seq;
}

/// Mean keypoint displacement between consecutive frames, in normalized units.
inline double mean_frame_displacement(const KeypointSequence& seq) {
  if (seq.frames.size() < 2) return 0.0;
  double total = 0.0;
  for (std::size_t t = 1; t < seq.frames.size(); ++t)
    for (std::size_t k = 0; k < kNumKeypoints; ++k) {
      const double dx = (seq.frames[t][k].x - seq.frames[t - 1][k].x) / seq.width;
      const double dy = (seq.frames[t][k].y - seq.frames[t - 1][k].y) / seq.height;
      total += std::hypot(dx, dy);
    }
  return total / static_cast<double>((seq.frames.size() - 1) * kNumKeypoints);
}

struct DatasetOptions {
  std::size_t n_per_class = 25;
  std::size_t n_frames = 125;
  int fps = 25;
  std::uint64_t seed = 3407;
};

/// Spec of the i-th file of a dataset run. Files alternate chorea/dystonia
/// and file i always uses seed + i, so any file can be regenerated alone.
inline MotionSpec dataset_spec(const DatasetOptions& opt, std::size_t i) {
  MotionSpec s = default_spec(i % 2 == 0 ? MotionClass::ChoreaLike : MotionClass::DystoniaLike);
  s.n_frames = opt.n_frames;
  s.fps = opt.fps;
  s.seed = opt.seed + i;
  return s;
}

inline std::string dataset_video_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "synth_%04zu", i);
  return buf;
}

inline KeypointSequence generate_indexed(const DatasetOptions& opt, std::size_t i) {
  auto seq = generate(dataset_spec(opt, i));
  seq.video_id = dataset_video_id(i);
  return seq;
}

/// Writes 2 * n_per_class NDJSON files into `dir` and returns their paths.
inline std::vector<std::filesystem::path> generate_dataset(const DatasetOptions& opt,
                                                           const std::filesystem::path& dir) {
  if (opt.n_per_class < 1) throw ConfigError("n_per_class must be at least 1");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir))
    throw DataError("cannot create output directory " + dir.string());
  std::vector<std::filesystem::path> paths;
  for (std::size_t i = 0; i < 2 * opt.n_per_class; ++i) {
    auto path = dir / (dataset_video_id(i) + ".ndjson");
    write_sequence(path, generate_indexed(opt, i));
    paths.push_back(std::move(path));
  }
  return paths;
}

/// In-memory variant returning the sequences directly.
inline std::vector<KeypointSequence> generate_sequences(const DatasetOptions& opt) {
  std::vector<KeypointSequence> out;
  for (std::size_t i = 0; i < 2 * opt.n_per_class; ++i) out.push_back(generate_indexed(opt, i));
  return out;
}

}  // namespace skelnet::synth

#pragma once

// Keypoint ingestion and clip preparation for BODY_25 skeleton sequences.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "skelnet/errors.hpp"
#include "skelnet/tensor.hpp"

namespace skelnet {

inline constexpr std::size_t kNumKeypoints = 25;
inline constexpr std::size_t kClipRows = 2 * kNumKeypoints;
inline constexpr std::size_t kClipFrames = 75;
inline constexpr double kDefaultConfidenceThreshold = 0.05;

enum class Label : int { Chorea = 0, Dystonia = 1 };

inline int to_int(Label l) { return static_cast<int>(l); }

inline Label label_from_int(long long v) {
  if (v != 0 && v != 1) throw DataError("label must be 0 or 1, got " + std::to_string(v));
  return static_cast<Label>(v);
}

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double confidence = 0.0;
  bool valid = true;
};

using PoseFrame = std::array<Keypoint, kNumKeypoints>;

struct KeypointSequence {
  std::string video_id;
  Label label = Label::Chorea;
  int fps = 0;
  int width = 0;
  int height = 0;
  std::vector<PoseFrame> frames;
};

struct ClipSource {
  std::string video_id;
  std::size_t start_frame = 0;
  int fps = 0;

  friend bool operator==(const ClipSource&, const ClipSource&) = default;
};

/// One model input: rows are (x0, y0, x1, y1, ...) and columns are frames.
struct SkeletonClip {
  Tensor matrix;
  Label label = Label::Chorea;
  ClipSource source;

  std::size_t frames() const { return matrix.dim(1); }
  double x(std::size_t keypoint, std::size_t frame) const { return matrix.at(2 * keypoint, frame); }
  double y(std::size_t keypoint, std::size_t frame) const {
    return matrix.at(2 * keypoint + 1, frame);
  }

  friend bool operator==(const SkeletonClip&, const SkeletonClip&) = default;
};

// ---------------------------------------------------------------------------
// Body-part layout

enum class Part : std::size_t { Torso = 0, RightArm, LeftArm, RightLeg, LeftLeg };
inline constexpr std::size_t kNumParts = 5;

/// Parts that share encoder weights: both arms, both legs.
enum class Archetype : std::size_t { Torso = 0, Arm, Leg };

namespace detail {
inline constexpr std::array<std::size_t, 7> kTorso{8, 1, 0, 15, 17, 16, 18};
inline constexpr std::array<std::size_t, 3> kRightArm{2, 3, 4};
inline constexpr std::array<std::size_t, 3> kLeftArm{5, 6, 7};
inline constexpr std::array<std::size_t, 6> kRightLeg{9, 10, 11, 24, 22, 23};
inline constexpr std::array<std::size_t, 6> kLeftLeg{12, 13, 14, 21, 19, 20};
}  // namespace detail

/// Keypoints of a part in travelling (proximal to distal) order.
inline std::span<const std::size_t> part_keypoints(Part p) {
  switch (p) {
    case Part::Torso: return detail::kTorso;
    case Part::RightArm: return detail::kRightArm;
    case Part::LeftArm: return detail::kLeftArm;
    case Part::RightLeg: return detail::kRightLeg;
    case Part::LeftLeg: return detail::kLeftLeg;
  }
  return {};
}

inline Archetype archetype(Part p) {
  switch (p) {
    case Part::RightArm:
    case Part::LeftArm: return Archetype::Arm;
    case Part::RightLeg:
    case Part::LeftLeg: return Archetype::Leg;
    default: return Archetype::Torso;
  }
}

inline std::string_view part_name(Part p) {
  static constexpr std::array<std::string_view, kNumParts> names{
      "torso", "right_arm", "left_arm", "right_leg", "left_leg"};
  return names[static_cast<std::size_t>(p)];
}

inline constexpr std::array<Part, kNumParts> kAllParts{Part::Torso, Part::RightArm, Part::LeftArm,
                                                       Part::RightLeg, Part::LeftLeg};

/// Left/right mirror of a BODY_25 index; midline points map to themselves.
inline constexpr std::size_t mirror_keypoint(std::size_t k) {
  constexpr std::array<std::size_t, kNumKeypoints> m{0,  1,  5,  6,  7,  2,  3,  4,  8,
                                                     12, 13, 14, 9,  10, 11, 16, 15, 18,
                                                     17, 22, 23, 24, 19, 20, 21};
  return m[k];
}

/// BODY_25 wireframe edges.
inline constexpr std::array<std::array<std::size_t, 2>, 24> kSkeletonEdges{{
    {1, 8},   {1, 2},   {1, 5},   {2, 3},   {3, 4},   {5, 6},   {6, 7},   {8, 9},
    {9, 10},  {10, 11}, {8, 12},  {12, 13}, {13, 14}, {1, 0},   {0, 15},  {15, 17},
    {0, 16},  {16, 18}, {14, 19}, {19, 20}, {14, 21}, {11, 22}, {22, 23}, {11, 24},
}};

inline Part part_of_keypoint(std::size_t k) {
  for (Part p : kAllParts) {
    auto kps = part_keypoints(p);
    if (std::find(kps.begin(), kps.end(), k) != kps.end()) return p;
  }
  throw DataError("keypoint index out of range: " + std::to_string(k));
}

// ---------------------------------------------------------------------------
// NDJSON ingestion

namespace detail {

inline nlohmann::json parse_json_line(const std::string& line, std::size_t lineno,
                                      const std::string& where) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(where + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
  }
}

template <class T>
T require_field(const nlohmann::json& obj, const char* key, std::size_t lineno,
                const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    throw DataError(where + ":" + std::to_string(lineno) + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw DataError(where + ":" + std::to_string(lineno) + ": field '" + key +
                    "' has the wrong type");
  }
}

}  // namespace detail

inline KeypointSequence parse_sequence(std::istream& in, const std::string& where = "<stream>") {
  using detail::require_field;
  KeypointSequence seq;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  long long last_t = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto rec = detail::parse_json_line(line, lineno, where);
    if (!have_header) {
      if (!rec.is_object() || !rec.contains("video_id"))
        throw DataError(where + ":" + std::to_string(lineno) + ": missing metadata header");
      seq.video_id = require_field<std::string>(rec, "video_id", lineno, where);
      seq.label = label_from_int(require_field<long long>(rec, "label", lineno, where));
      seq.fps = require_field<int>(rec, "fps", lineno, where);
      seq.width = require_field<int>(rec, "width", lineno, where);
      seq.height = require_field<int>(rec, "height", lineno, where);
      if (seq.fps <= 0) throw DataError(where + ": fps must be positive");
      if (seq.width <= 0 || seq.height <= 0) throw DataError(where + ": resolution must be positive");
      have_header = true;
      continue;
    }
    const std::size_t frame_index = seq.frames.size();
    const auto t = require_field<long long>(rec, "t", lineno, where);
    if ((last_t < 0 && t != 0) || (last_t >= 0 && t <= last_t))
      throw DataError(where + ":" + std::to_string(lineno) + ": frame " +
                      std::to_string(frame_index) + " has out-of-order t=" + std::to_string(t));
    last_t = t;
    if (!rec.contains("kp") || !rec.at("kp").is_array())
      throw DataError(where + ":" + std::to_string(lineno) + ": missing field 'kp'");
    const auto& kp = rec.at("kp");
    if (kp.size() != kNumKeypoints)
      throw DataError(where + ":" + std::to_string(lineno) + ": frame " +
                      std::to_string(frame_index) + " has " + std::to_string(kp.size()) +
                      " keypoints, expected 25");
    PoseFrame frame{};
    for (std::size_t k = 0; k < kNumKeypoints; ++k) {
      const auto& p = kp[k];
      if (!p.is_array() || p.size() != 3 || !p[0].is_number() || !p[1].is_number() ||
          !p[2].is_number())
        throw DataError(where + ":" + std::to_string(lineno) + ": frame " +
                        std::to_string(frame_index) + " keypoint " + std::to_string(k) +
                        " is not [x, y, c]");
      frame[k] = Keypoint{p[0].get<double>(), p[1].get<double>(), p[2].get<double>(), true};
      if (!std::isfinite(frame[k].x) || !std::isfinite(frame[k].y))
        throw DataError(where + ":" + std::to_string(lineno) + ": non-finite coordinate");
    }
    seq.frames.push_back(frame);
  }
  if (!have_header) throw DataError(where + ": missing metadata header");
  if (seq.frames.empty()) throw DataError(where + ": no frames");
  return seq;
}

inline KeypointSequence parse_sequence(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return parse_sequence(in, path.string());
}

inline void write_sequence(std::ostream& out, const KeypointSequence& seq) {
  nlohmann::json header{{"video_id", seq.video_id},
                        {"label", to_int(seq.label)},
                        {"fps", seq.fps},
                        {"width", seq.width},
                        {"height", seq.height}};
  out << header.dump() << '\n';
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    nlohmann::json kp = nlohmann::json::array();
    for (const auto& k : seq.frames[t]) kp.push_back({k.x, k.y, k.confidence});
    out << nlohmann::json{{"t", t}, {"kp", std::move(kp)}}.dump() << '\n';
  }
}

inline void write_sequence(const std::filesystem::path& path, const KeypointSequence& seq) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write_sequence(out, seq);
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Marks keypoints at or below `threshold` invalid and fills them from the
/// last valid value of the same index (or the first valid one if none precedes).
inline KeypointSequence filter_confidence(KeypointSequence seq,
                                          double threshold = kDefaultConfidenceThreshold) {
  if (threshold < 0.0 || threshold > 1.0) throw ConfigError("confidence threshold outside [0,1]");
  std::vector<std::size_t> never;
  for (std::size_t k = 0; k < kNumKeypoints; ++k) {
    std::ptrdiff_t first_valid = -1;
    for (std::size_t t = 0; t < seq.frames.size(); ++t) {
      auto& kp = seq.frames[t][k];
      kp.valid = kp.confidence > threshold;
      if (kp.valid && first_valid < 0) first_valid = static_cast<std::ptrdiff_t>(t);
    }
    if (first_valid < 0) {
      never.push_back(k);
      continue;
    }
    Keypoint last = seq.frames[static_cast<std::size_t>(first_valid)][k];
    for (auto& frame : seq.frames) {
      auto& kp = frame[k];
      if (kp.valid) {
        last = kp;
      } else {
        kp.x = last.x;
        kp.y = last.y;
      }
    }
  }
  if (!never.empty()) {
    std::string msg = "keypoint";
    msg += never.size() > 1 ? "s " : " ";
    for (std::size_t i = 0; i < never.size(); ++i) {
      if (i) msg += ", ";
      msg += std::to_string(never[i]);
    }
    throw DataError(msg + " never valid");
  }
  return seq;
}

/// Rounds a unit coordinate to a multiple of 2^-40. On that grid 1 - x is
/// exact, which keeps the horizontal flip an exact involution.
inline double snap_unit(double v) { return std::ldexp(std::nearbyint(std::ldexp(v, 40)), -40); }

/// Divides pixel coordinates by the frame resolution.
inline KeypointSequence normalize_resolution(KeypointSequence seq) {
  if (seq.width <= 0 || seq.height <= 0) throw DataError("resolution must be positive");
  const double w = seq.width, h = seq.height;
  for (std::size_t t = 0; t < seq.frames.size(); ++t)
    for (std::size_t k = 0; k < kNumKeypoints; ++k) {
      auto& kp = seq.frames[t][k];
      if (kp.x < -1.0 || kp.x > w + 1.0 || kp.y < -1.0 || kp.y > h + 1.0)
        throw DataError(seq.video_id + ": frame " + std::to_string(t) + " keypoint " +
                        std::to_string(k) + " lies outside the " + std::to_string(seq.width) +
                        "x" + std::to_string(seq.height) + " frame");
      kp.x = snap_unit(std::clamp(kp.x / w, 0.0, 1.0));
      kp.y = snap_unit(std::clamp(kp.y / h, 0.0, 1.0));
    }
  return seq;
}

/// Block-local indices kept when reducing `source_fps` to `target_fps`.
inline std::vector<std::size_t> retained_block_indices(int source_fps, int target_fps) {
  std::vector<std::size_t> idx;
  for (int i = 0; i < target_fps; ++i)
    idx.push_back(static_cast<std::size_t>((static_cast<long long>(i) * source_fps) / target_fps));
  return idx;
}

inline KeypointSequence downsample(const KeypointSequence& seq, int target_fps) {
  if (target_fps <= 0) throw ConfigError("target fps must be positive");
  if (target_fps > seq.fps)
    throw ConfigError("cannot upsample from " + std::to_string(seq.fps) + " to " +
                      std::to_string(target_fps) + " fps");
  const auto keep = retained_block_indices(seq.fps, target_fps);
  KeypointSequence out = seq;
  out.fps = target_fps;
  out.frames.clear();
  const auto block = static_cast<std::size_t>(seq.fps);
  for (std::size_t start = 0; start < seq.frames.size(); start += block)
    for (std::size_t i : keep)
      if (start + i < seq.frames.size()) out.frames.push_back(seq.frames[start + i]);
  return out;
}

struct WindowResult {
  std::vector<SkeletonClip> clips;
  bool skipped = false;
  std::string notice;
};

/// Cuts a normalized sequence into clips of `length` frames every `stride` frames.
inline WindowResult window_clips(const KeypointSequence& seq, std::size_t length = kClipFrames,
                                 std::size_t stride = kClipFrames) {
  if (length == 0 || stride == 0) throw ConfigError("window length and stride must be positive");
  WindowResult r;
  if (seq.frames.size() < length) {
    r.skipped = true;
    r.notice = "skipped " + seq.video_id + ": " + std::to_string(seq.frames.size()) +
               " frames < " + std::to_string(length);
    return r;
  }
  for (std::size_t start = 0; start + length <= seq.frames.size(); start += stride) {
    SkeletonClip c;
    c.matrix = Tensor(Shape{kClipRows, length});
    c.label = seq.label;
    c.source = ClipSource{seq.video_id, start, seq.fps};
    for (std::size_t t = 0; t < length; ++t)
      for (std::size_t k = 0; k < kNumKeypoints; ++k) {
        c.matrix.at(2 * k, t) = seq.frames[start + t][k].x;
        c.matrix.at(2 * k + 1, t) = seq.frames[start + t][k].y;
      }
    r.clips.push_back(std::move(c));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Part partitioning and augmentation

struct PartitionedSkeleton {
  /// Indexed by Part; each block is (2 * k_p) x frames in travelling order.
  std::array<Tensor, kNumParts> blocks;
  std::array<std::size_t, kNumParts> part_sizes{};

  const Tensor& block(Part p) const { return blocks[static_cast<std::size_t>(p)]; }
};

/// Clip rows in part-concatenation order (torso, right arm, left arm, right leg, left leg).
inline std::vector<std::size_t> partition_row_order() {
  std::vector<std::size_t> rows;
  for (Part p : kAllParts)
    for (std::size_t k : part_keypoints(p)) {
      rows.push_back(2 * k);
      rows.push_back(2 * k + 1);
    }
  return rows;
}

inline PartitionedSkeleton partition_parts(const SkeletonClip& clip) {
  PartitionedSkeleton out;
  const std::size_t frames = clip.frames();
  for (Part p : kAllParts) {
    const auto kps = part_keypoints(p);
    const auto pi = static_cast<std::size_t>(p);
    out.part_sizes[pi] = kps.size();
    Tensor block(Shape{2 * kps.size(), frames});
    for (std::size_t j = 0; j < kps.size(); ++j)
      for (std::size_t t = 0; t < frames; ++t) {
        block.at(2 * j, t) = clip.matrix.at(2 * kps[j], t);
        block.at(2 * j + 1, t) = clip.matrix.at(2 * kps[j] + 1, t);
      }
    out.blocks[pi] = std::move(block);
  }
  return out;
}

/// Inverse of partition_parts: reassembles the 50-row clip matrix.
inline Tensor unpartition(const PartitionedSkeleton& parts) {
  const std::size_t frames = parts.blocks[0].dim(1);
  Tensor m(Shape{kClipRows, frames});
  for (Part p : kAllParts) {
    const auto kps = part_keypoints(p);
    const Tensor& block = parts.block(p);
    for (std::size_t j = 0; j < kps.size(); ++j)
      for (std::size_t t = 0; t < frames; ++t) {
        m.at(2 * kps[j], t) = block.at(2 * j, t);
        m.at(2 * kps[j] + 1, t) = block.at(2 * j + 1, t);
      }
  }
  return m;
}

/// Mirrors x and swaps left/right keypoints. Exact involution on normalized clips.
inline SkeletonClip flip_horizontal(const SkeletonClip& clip) {
  SkeletonClip out = clip;
  const std::size_t frames = clip.frames();
  for (std::size_t k = 0; k < kNumKeypoints; ++k) {
    const std::size_t m = mirror_keypoint(k);
    for (std::size_t t = 0; t < frames; ++t) {
      out.matrix.at(2 * m, t) = 1.0 - snap_unit(clip.matrix.at(2 * k, t));
      out.matrix.at(2 * m + 1, t) = clip.matrix.at(2 * k + 1, t);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting and class balancing

struct DatasetSplit {
  std::vector<SkeletonClip> train, validation, test;
  std::uint64_t seed = 0;
};

namespace detail {

/// Largest-remainder apportionment of `n` items by `ratios`; ties go to the lowest index.
template <std::size_t N>
std::array<std::size_t, N> largest_remainder(std::size_t n, const std::array<double, N>& ratios) {
  std::array<std::size_t, N> counts{};
  std::array<double, N> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const double exact = ratios[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < N; ++i)
      if (rem[i] > rem[best] + 1e-12) best = i;
    ++counts[best];
    rem[best] = -1.0;
    ++assigned;
  }
  while (assigned > n) {  // only reachable through floating error
    for (std::size_t i = N; i-- > 0;)
      if (counts[i] > 0) {
        --counts[i];
        --assigned;
        break;
      }
  }
  return counts;
}

}  // namespace detail

/// Stratified assignment of clips to (train, validation, test) index sets.
/// With `group_by_video`, all clips of one video share a subset.
inline std::array<std::vector<std::size_t>, 3> stratified_split_indices(
    const std::vector<SkeletonClip>& clips, std::array<double, 3> ratios, std::uint64_t seed,
    bool group_by_video = true) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  for (double r : ratios)
    if (r < 0.0) throw ConfigError("split ratios must be non-negative");

  std::array<std::vector<std::size_t>, 3> out;
  std::mt19937_64 rng(seed);
  for (Label label : {Label::Chorea, Label::Dystonia}) {
    // Groups in order of first appearance; each group is one video or one clip.
    std::vector<std::vector<std::size_t>> groups;
    std::map<std::string, std::size_t> group_of;
    std::size_t members = 0;
    for (std::size_t i = 0; i < clips.size(); ++i) {
      if (clips[i].label != label) continue;
      ++members;
      if (!group_by_video) {
        groups.push_back({i});
        continue;
      }
      auto [it, inserted] = group_of.try_emplace(clips[i].source.video_id, groups.size());
      if (inserted) groups.emplace_back();
      groups[it->second].push_back(i);
    }
    if (members == 0)
      throw DataError("class " + std::to_string(to_int(label)) + " absent from input");
    std::shuffle(groups.begin(), groups.end(), rng);
    const auto target = detail::largest_remainder<3>(members, ratios);
    std::array<long long, 3> assigned{};
    for (const auto& g : groups) {
      std::size_t best = 3;
      long long best_deficit = 0;
      for (std::size_t s = 0; s < 3; ++s) {
        if (ratios[s] <= 0.0) continue;
        const long long deficit = static_cast<long long>(target[s]) - assigned[s];
        if (best == 3 || deficit > best_deficit) {
          best = s;
          best_deficit = deficit;
        }
      }
      for (std::size_t i : g) out[best].push_back(i);
      assigned[best] += static_cast<long long>(g.size());
    }
  }
  for (auto& v : out) std::sort(v.begin(), v.end());
  return out;
}

inline DatasetSplit stratified_split(const std::vector<SkeletonClip>& clips,
                                     std::array<double, 3> ratios, std::uint64_t seed,
                                     bool group_by_video = true) {
  const auto idx = stratified_split_indices(clips, ratios, seed, group_by_video);
  DatasetSplit s;
  s.seed = seed;
  for (std::size_t i : idx[0]) s.train.push_back(clips[i]);
  for (std::size_t i : idx[1]) s.validation.push_back(clips[i]);
  for (std::size_t i : idx[2]) s.test.push_back(clips[i]);
  return s;
}

inline std::array<std::size_t, 2> class_counts(const std::vector<SkeletonClip>& clips) {
  std::array<std::size_t, 2> c{};
  for (const auto& clip : clips) ++c[static_cast<std::size_t>(to_int(clip.label))];
  return c;
}

/// Resamples the minority class with replacement until both classes have
/// equal counts, then shuffles the result.
inline std::vector<SkeletonClip> bootstrap_oversample(const std::vector<SkeletonClip>& clips,
                                                      std::uint64_t seed) {
  const auto counts = class_counts(clips);
  if (counts[0] == 0 || counts[1] == 0)
    throw DataError("bootstrap_oversample needs both classes present");
  const Label minority = counts[0] < counts[1] ? Label::Chorea : Label::Dystonia;
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < clips.size(); ++i)
    if (clips[i].label == minority) pool.push_back(i);
  const std::size_t extra = std::max(counts[0], counts[1]) - std::min(counts[0], counts[1]);

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<SkeletonClip> out = clips;
  for (std::size_t i = 0; i < extra; ++i) out.push_back(clips[pool[pick(rng)]]);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

// ---------------------------------------------------------------------------
// Clip archive (NDJSON, one clip per line)

inline nlohmann::json clip_to_json(const SkeletonClip& c) {
  return {{"source",
           {{"video_id", c.source.video_id},
            {"start_frame", c.source.start_frame},
            {"fps", c.source.fps}}},
          {"label", to_int(c.label)},
          {"matrix", c.matrix.storage()}};
}

inline SkeletonClip clip_from_json(const nlohmann::json& j, std::size_t lineno,
                                   const std::string& where) {
  using detail::require_field;
  SkeletonClip c;
  if (!j.is_object() || !j.contains("source"))
    throw DataError(where + ":" + std::to_string(lineno) + ": missing field 'source'");
  const auto& src = j.at("source");
  c.source.video_id = require_field<std::string>(src, "video_id", lineno, where);
  c.source.start_frame = require_field<std::size_t>(src, "start_frame", lineno, where);
  c.source.fps = require_field<int>(src, "fps", lineno, where);
  c.label = label_from_int(require_field<long long>(j, "label", lineno, where));
  auto data = require_field<std::vector<double>>(j, "matrix", lineno, where);
  if (data.size() % kClipRows != 0 || data.empty())
    throw DataError(where + ":" + std::to_string(lineno) + ": matrix length " +
                    std::to_string(data.size()) + " is not a multiple of 50");
  for (double v : data)
    if (!(v >= 0.0 && v <= 1.0))
      throw DataError(where + ":" + std::to_string(lineno) + ": matrix entry outside [0,1]");
  const std::size_t frames = data.size() / kClipRows;
  c.matrix = Tensor(Shape{kClipRows, frames}, std::move(data));
  return c;
}

inline void write_clip_archive(const std::filesystem::path& path,
                               const std::vector<SkeletonClip>& clips) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& c : clips) out << clip_to_json(c).dump() << '\n';
}

inline std::vector<SkeletonClip> read_clip_archive(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<SkeletonClip> clips;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    clips.push_back(
        clip_from_json(detail::parse_json_line(line, lineno, path.string()), lineno, path.string()));
  }
  return clips;
}

/// Full preprocessing chain for one sequence: confidence filtering,
/// resolution normalization, frame-rate reduction, and windowing.
struct PreprocessOptions {
  double confidence_threshold = kDefaultConfidenceThreshold;
  int target_fps = 0;  // 0 keeps the source rate
  std::size_t window_length = kClipFrames;
  std::size_t window_stride = kClipFrames;
};

inline WindowResult preprocess(const KeypointSequence& seq, const PreprocessOptions& opt) {
  auto s = normalize_resolution(filter_confidence(seq, opt.confidence_threshold));
  if (opt.target_fps > 0) s = downsample(s, opt.target_fps);
  return window_clips(s, opt.window_length, opt.window_stride);
}

}  // namespace skelnet

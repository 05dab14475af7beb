#pragma once

// Attention rendering: per-frame wireframe skeletons colored by smoothed,
// normalized part attention, with a temporal-attention bar along the bottom.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "skelnet/errors.hpp"
#include "skelnet/evaluation.hpp"
#include "skelnet/network.hpp"
#include "skelnet/pose_data.hpp"
#include "skelnet/viridis_table.hpp"

namespace skelnet::viz {

enum class Aggregation { RowAndColumn, RowOnly };

struct VizConfig {
  double gaussian_sigma = 2.0;      // frames
  std::size_t temporal_window = 5;  // frames, odd
  double clamp_low = 2.0;           // percentile
  double clamp_high = 98.0;         // percentile
  std::size_t image_size = 256;     // pixels, square skeleton canvas
  Aggregation aggregation = Aggregation::RowAndColumn;

  void validate() const {
    if (gaussian_sigma < 0.0) throw ConfigError("gaussian_sigma must be non-negative");
    if (temporal_window < 1 || temporal_window % 2 == 0)
      throw ConfigError("temporal_window must be a positive odd number");
    if (!(clamp_low >= 0.0 && clamp_low < clamp_high && clamp_high <= 100.0))
      throw ConfigError("clamp percentiles must satisfy 0 <= low < high <= 100");
    if (image_size < 32) throw ConfigError("image_size must be at least 32");
  }
};

using PartScores = std::array<double, kNumParts>;

/// Per-part score from a 5x5 attention matrix: the off-diagonal entries of
/// row p plus those of column p (row p only in RowOnly mode).
inline PartScores aggregate_spatial(std::span<const double> att,
                                    Aggregation mode = Aggregation::RowAndColumn) {
  if (att.size() != kNumParts * kNumParts) throw NumericError("spatial attention must be 5x5");
  PartScores s{};
  for (std::size_t p = 0; p < kNumParts; ++p)
    for (std::size_t j = 0; j < kNumParts; ++j) {
      if (j == p) continue;
      s[p] += att[p * kNumParts + j];
      if (mode == Aggregation::RowAndColumn) s[p] += att[j * kNumParts + p];
    }
  return s;
}

/// Scores for every frame of a [T, 5, 5] tensor.
inline std::vector<PartScores> aggregate_spatial_frames(const Tensor& per_frame,
                                                        Aggregation mode = Aggregation::RowAndColumn) {
  const std::size_t block = kNumParts * kNumParts;
  if (per_frame.size() % block != 0) throw NumericError("per-frame attention must be [T, 5, 5]");
  std::vector<PartScores> out;
  for (std::size_t t = 0; t < per_frame.size() / block; ++t)
    out.push_back(aggregate_spatial(per_frame.values().subspan(t * block, block), mode));
  return out;
}

/// Gaussian kernel (truncated at 3 sigma) then a centered moving average.
/// Both passes renormalize over the taps that fall inside the series.
inline std::vector<double> smooth(std::span<const double> series, double sigma, std::size_t window) {
  if (sigma < 0.0) throw ConfigError("sigma must be non-negative");
  if (window < 1 || window % 2 == 0) throw ConfigError("window must be a positive odd number");
  const auto n = static_cast<std::ptrdiff_t>(series.size());
  std::vector<double> g(series.begin(), series.end());
  if (sigma > 0.0) {
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (std::ptrdiff_t k = -radius; k <= radius; ++k)
      total += kernel[static_cast<std::size_t>(k + radius)] =
          std::exp(-static_cast<double>(k * k) / (2.0 * sigma * sigma));
    for (auto& w : kernel) w /= total;
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      double acc = 0.0, mass = 0.0;
      for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
        const std::ptrdiff_t j = i + k;
        if (j < 0 || j >= n) continue;
        const double w = kernel[static_cast<std::size_t>(k + radius)];
        acc += w * series[static_cast<std::size_t>(j)];
        mass += w;
      }
      g[static_cast<std::size_t>(i)] = acc / mass;
    }
  }
  if (window == 1) return g;
  const auto half = static_cast<std::ptrdiff_t>(window / 2);
  std::vector<double> out(g.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double acc = 0.0;
    std::size_t count = 0;
    for (std::ptrdiff_t j = std::max<std::ptrdiff_t>(0, i - half);
         j <= std::min<std::ptrdiff_t>(n - 1, i + half); ++j) {
      acc += g[static_cast<std::size_t>(j)];
      ++count;
    }
    out[static_cast<std::size_t>(i)] = acc / static_cast<double>(count);
  }
  return out;
}

inline std::vector<PartScores> smooth_parts(const std::vector<PartScores>& scores, double sigma,
                                            std::size_t window) {
  std::vector<PartScores> out(scores.size());
  std::vector<double> series(scores.size());
  for (std::size_t p = 0; p < kNumParts; ++p) {
    for (std::size_t t = 0; t < scores.size(); ++t) series[t] = scores[t][p];
    const auto s = smooth(series, sigma, window);
    for (std::size_t t = 0; t < scores.size(); ++t) out[t][p] = s[t];
  }
  return out;
}

/// Clamps to the [low, high] percentiles of the values, then min-max scales to
/// [0, 1]. A flat distribution maps to 0.5.
inline std::vector<double> normalize_clamp(std::span<const double> values, double low_pct,
                                           double high_pct) {
  if (values.empty()) throw NumericError("normalize_clamp of an empty sample");
  std::vector<double> v(values.begin(), values.end());
  const double lo = eval::percentile(v, low_pct);
  const double hi = eval::percentile(v, high_pct);
  if (!(hi - lo > 1e-12 * std::max(1.0, std::abs(hi)))) {
    std::fill(v.begin(), v.end(), 0.5);
    return v;
  }
  for (auto& x : v) x = (std::clamp(x, lo, hi) - lo) / (hi - lo);
  return v;
}

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Linear interpolation into the 256-entry Viridis table.
inline Rgb colormap(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const double pos = v * 255.0;
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(pos), 254);
  const double f = pos - static_cast<double>(i);
  auto channel = [&](std::size_t c) {
    const double x = kViridis[i][c] + f * (kViridis[i + 1][c] - kViridis[i][c]);
    return static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0));
  };
  return {channel(0), channel(1), channel(2)};
}

// ---------------------------------------------------------------------------
// Raster

class Image {
 public:
  Image(std::size_t width, std::size_t height, Rgb fill = {})
      : width_(width), height_(height), pixels_(width * height * 3) {
    for (std::size_t i = 0; i < width * height; ++i) set(i % width, i / width, fill);
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }

  void set(std::size_t x, std::size_t y, Rgb c) {
    if (x >= width_ || y >= height_) return;
    auto* p = &pixels_[(y * width_ + x) * 3];
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
  }

  Rgb get(std::size_t x, std::size_t y) const {
    const auto* p = &pixels_[(y * width_ + x) * 3];
    return {p[0], p[1], p[2]};
  }

  void fill_rect(long x0, long y0, long x1, long y1, Rgb c) {
    for (long y = std::max(0L, y0); y < std::min<long>(static_cast<long>(height_), y1); ++y)
      for (long x = std::max(0L, x0); x < std::min<long>(static_cast<long>(width_), x1); ++x)
        set(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c);
  }

  /// Bresenham line stamped with a square brush of half-width `radius`.
  void draw_line(long x0, long y0, long x1, long y1, Rgb c, long radius = 1) {
    const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    while (true) {
      fill_rect(x0 - radius, y0 - radius, x0 + radius + 1, y0 + radius + 1, c);
      if (x0 == x1 && y0 == y1) break;
      const long e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  std::string ppm() const {
    std::string out = "P6\n" + std::to_string(width_) + " " + std::to_string(height_) + "\n255\n";
    out.append(reinterpret_cast<const char*>(pixels_.data()), pixels_.size());
    return out;
  }

 private:
  std::size_t width_, height_;
  std::vector<std::uint8_t> pixels_;
};

// ---------------------------------------------------------------------------
// Frame export and rendering

struct FrameExport {
  std::size_t frame = 0;
  PartScores spatial_raw{};
  PartScores spatial_vis{};
  std::vector<double> temporal_row;
};

inline nlohmann::json to_json(const FrameExport& e) {
  return {{"frame", e.frame},
          {"spatial_raw", e.spatial_raw},
          {"spatial_vis", e.spatial_vis},
          {"temporal_row", e.temporal_row}};
}

inline FrameExport frame_export_from_json(const nlohmann::json& j) {
  FrameExport e;
  try {
    j.at("frame").get_to(e.frame);
    j.at("spatial_raw").get_to(e.spatial_raw);
    j.at("spatial_vis").get_to(e.spatial_vis);
    j.at("temporal_row").get_to(e.temporal_row);
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("attention export: ") + ex.what());
  }
  return e;
}

/// Raw, smoothed and normalized scores for every frame of a clip.
inline std::vector<FrameExport> build_exports(const net::AttentionRecord& record,
                                              const VizConfig& cfg) {
  cfg.validate();
  const auto raw = aggregate_spatial_frames(record.spatial_per_frame, cfg.aggregation);
  const auto smoothed = smooth_parts(raw, cfg.gaussian_sigma, cfg.temporal_window);
  std::vector<double> flat;
  for (const auto& s : smoothed) flat.insert(flat.end(), s.begin(), s.end());
  const auto vis = normalize_clamp(flat, cfg.clamp_low, cfg.clamp_high);
  const std::size_t frames = raw.size();
  if (record.temporal.rank() != 2 || record.temporal.dim(0) != frames)
    throw DataError("temporal attention does not match the spatial frame count");
  std::vector<FrameExport> out(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    out[t].frame = t;
    out[t].spatial_raw = raw[t];
    std::copy_n(vis.begin() + static_cast<std::ptrdiff_t>(t * kNumParts), kNumParts,
                out[t].spatial_vis.begin());
    const auto row = record.temporal.values().subspan(t * frames, frames);
    out[t].temporal_row.assign(row.begin(), row.end());
  }
  return out;
}

inline constexpr Rgb kBackground{24, 24, 28};
inline constexpr Rgb kMarker{255, 255, 255};

/// Renders one frame: part-colored wireframe on a square canvas, a part legend
/// (top-left swatches in torso, right arm, left arm, right leg, left leg
/// order), a Viridis scale on the right edge, and the temporal bar whose cell
/// j encodes attention from the current frame to frame j.
inline Image render_frame(const SkeletonClip& clip, const FrameExport& e, const VizConfig& cfg) {
  const std::size_t size = cfg.image_size;
  const std::size_t bar_h = std::max<std::size_t>(12, size / 12);
  const std::size_t frames = e.temporal_row.size();
  Image img(size, size + bar_h + 6, kBackground);

  std::array<Rgb, kNumParts> colors;
  for (std::size_t p = 0; p < kNumParts; ++p) colors[p] = colormap(e.spatial_vis[p]);

  const double margin = 0.06 * static_cast<double>(size);
  const double span = static_cast<double>(size) - 2.0 * margin;
  auto px = [&](std::size_t k, bool is_x) {
    const double v = is_x ? clip.x(k, e.frame) : clip.y(k, e.frame);
    return static_cast<long>(std::lround(margin + v * span));
  };
  const long brush = std::max<long>(1, static_cast<long>(size / 200));
  for (const auto& edge : kSkeletonEdges) {
    const Rgb c = colors[static_cast<std::size_t>(part_of_keypoint(edge[1]))];
    img.draw_line(px(edge[0], true), px(edge[0], false), px(edge[1], true), px(edge[1], false), c,
                  brush);
  }
  for (std::size_t k = 0; k < kNumKeypoints; ++k) {
    const Rgb c = colors[static_cast<std::size_t>(part_of_keypoint(k))];
    const long x = px(k, true), y = px(k, false), r = brush + 1;
    img.fill_rect(x - r, y - r, x + r + 1, y + r + 1, c);
  }

  const long sw = std::max<long>(4, static_cast<long>(size / 32));
  for (std::size_t p = 0; p < kNumParts; ++p) {
    const long x0 = 2 + static_cast<long>(p) * (sw + 2);
    img.fill_rect(x0, 2, x0 + sw, 2 + sw, colors[p]);
  }
  const long scale_x = static_cast<long>(size) - sw - 2;
  const long scale_h = static_cast<long>(size) / 2;
  for (long y = 0; y < scale_h; ++y)
    img.fill_rect(scale_x, 2 + y, scale_x + sw, 3 + y,
                  colormap(1.0 - static_cast<double>(y) / static_cast<double>(scale_h - 1)));

  if (frames > 0) {
    const auto row = normalize_clamp(e.temporal_row, cfg.clamp_low, cfg.clamp_high);
    const long top = static_cast<long>(size) + 4;
    for (std::size_t j = 0; j < frames; ++j) {
      const long x0 = static_cast<long>(j * size / frames);
      const long x1 = static_cast<long>((j + 1) * size / frames);
      img.fill_rect(x0, top, x1, top + static_cast<long>(bar_h), colormap(row[j]));
    }
    const long mx0 = static_cast<long>(e.frame * size / frames);
    const long mx1 = std::max(mx0 + 1, static_cast<long>((e.frame + 1) * size / frames));
    img.fill_rect(mx0, top - 3, mx1, top - 1, kMarker);
  }
  return img;
}

inline std::string frame_filename(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04zu.ppm", t);
  return buf;
}

/// Writes `frame_%04d.ppm` for every export line using `threads` workers.
/// Output bytes do not depend on the worker count.
inline std::vector<std::filesystem::path> render_from_export(const SkeletonClip& clip,
                                                             const std::vector<FrameExport>& exports,
                                                             const VizConfig& cfg,
                                                             const std::filesystem::path& out_dir,
                                                             std::size_t threads = 1) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir))
    throw DataError("cannot create output directory " + out_dir.string());
  for (const auto& e : exports)
    if (e.frame >= clip.frames()) throw DataError("export frame index beyond the clip");

  std::vector<std::filesystem::path> paths(exports.size());
  for (std::size_t i = 0; i < exports.size(); ++i)
    paths[i] = out_dir / frame_filename(exports[i].frame);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < exports.size();) {
      const std::string bytes = render_frame(clip, exports[i], cfg).ppm();
      std::ofstream out(paths[i], std::ios::binary);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!out) failed = true;
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < std::max<std::size_t>(1, threads); ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failed) throw DataError("failed writing frames to " + out_dir.string());
  return paths;
}

inline void write_exports(const std::filesystem::path& path, const std::vector<FrameExport>& exports) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& e : exports) out << to_json(e).dump() << '\n';
}

inline std::vector<FrameExport> read_exports(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<FrameExport> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(frame_export_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }
  return out;
}

struct RenderOutput {
  std::vector<std::filesystem::path> frames;
  std::filesystem::path export_path;
  std::vector<FrameExport> exports;
};

/// Renders every frame of a clip plus `attention.ndjson`.
inline RenderOutput render_clip(const SkeletonClip& clip, const net::AttentionRecord& record,
                                const VizConfig& cfg, const std::filesystem::path& out_dir,
                                std::size_t threads = 1) {
  RenderOutput r;
  r.exports = build_exports(record, cfg);
  if (r.exports.size() != clip.frames())
    throw DataError("attention record covers " + std::to_string(r.exports.size()) +
                    " frames, clip has " + std::to_string(clip.frames()));
  r.frames = render_from_export(clip, r.exports, cfg, out_dir, threads);
  r.export_path = out_dir / "attention.ndjson";
  write_exports(r.export_path, r.exports);
  return r;
}

}  // namespace skelnet::viz

#pragma once

// Visual prompts: role-colored box outlines and gaze segments drawn onto
// selected frames. Rasterization is integer-only and never anti-aliased.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "ster/dataset.hpp"
#include "ster/error.hpp"
#include "ster/frame_select.hpp"
#include "ster/image.hpp"

namespace ster {

struct Palette {
  Rgb pedestrian{0, 255, 0};
  Rgb vehicle{255, 0, 0};
  Rgb gaze{255, 255, 0};

  Rgb for_role(Role r) const { return r == Role::kPedestrian ? pedestrian : vehicle; }
};

inline constexpr double kDefaultGazeLength = 80.0;
inline constexpr int kDefaultStroke = 2;

struct ColoredBox {
  BBoxAnnotation box;
  Rgb color;
};

struct OverlaySpec {
  FrameRef frame;
  std::vector<ColoredBox> boxes;
  std::optional<GazeAnnotation> gaze;
  Rgb gaze_color{255, 255, 0};
  double gaze_length = kDefaultGazeLength;
  int stroke = 1;
};

namespace detail {

inline int round_px(double v) { return static_cast<int>(std::lround(v)); }

inline void draw_hline(Image& img, int x0, int x1, int y, Rgb c) {
  if (y < 0 || y >= img.height) return;
  for (int x = std::max(x0, 0); x <= std::min(x1, img.width - 1); ++x) img.set(x, y, c);
}

inline void draw_vline(Image& img, int x, int y0, int y1, Rgb c) {
  if (x < 0 || x >= img.width) return;
  for (int y = std::max(y0, 0); y <= std::min(y1, img.height - 1); ++y) img.set(x, y, c);
}

// Outline with corners (x0,y0) and (x1,y1) inclusive, `stroke` pixels thick
// growing inward.
inline void draw_rect(Image& img, int x0, int y0, int x1, int y1, int stroke, Rgb c) {
  for (int i = 0; i < stroke; ++i) {
    const int ax = x0 + i, ay = y0 + i, bx = x1 - i, by = y1 - i;
    if (ax > bx || ay > by) break;
    draw_hline(img, ax, bx, ay, c);
    draw_hline(img, ax, bx, by, c);
    draw_vline(img, ax, ay, by, c);
    draw_vline(img, bx, ay, by, c);
  }
}

// Midpoint (Bresenham) segment with a square brush of side `stroke`.
inline void draw_segment(Image& img, int x0, int y0, int x1, int y1, int stroke, Rgb c) {
  const int lo = -(stroke - 1) / 2;
  const int hi = stroke / 2;
  const auto plot = [&](int x, int y) {
    for (int dy = lo; dy <= hi; ++dy)
      for (int dx = lo; dx <= hi; ++dx) img.set(x + dx, y + dy, c);
  };
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  int x = x0, y = y0;
  while (true) {
    plot(x, y);
    if (x == x1 && y == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y += sy;
    }
  }
}

}  // namespace detail

// Returns a copy of `image` with the overlay drawn; out-of-bounds geometry is
// clipped.
inline Image render_overlay(const OverlaySpec& spec, const Image& image) {
  if (image.width <= 0 || image.height <= 0)
    throw ValidationError("render_overlay needs a non-empty image");
  if (spec.stroke < 1) throw ValidationError("overlay stroke must be >= 1");
  if (!(spec.gaze_length > 0)) throw ValidationError("gaze_length must be > 0");
  Image out = image;
  for (const auto& cb : spec.boxes) {
    const auto& b = cb.box;
    detail::draw_rect(out, detail::round_px(b.x), detail::round_px(b.y), detail::round_px(b.x + b.w),
                      detail::round_px(b.y + b.h), spec.stroke, cb.color);
  }
  if (spec.gaze) {
    const auto& g = *spec.gaze;
    detail::draw_segment(out, detail::round_px(g.origin_x), detail::round_px(g.origin_y),
                         detail::round_px(g.origin_x + spec.gaze_length * g.dir_x),
                         detail::round_px(g.origin_y + spec.gaze_length * g.dir_y), spec.stroke,
                         spec.gaze_color);
  }
  return out;
}

// --- batch rendering ----------------------------------------------------------

struct RenderOptions {
  Palette palette;
  int stroke = kDefaultStroke;
  double gaze_length = kDefaultGazeLength;
  bool draw_gaze = true;
  unsigned workers = 1;
};

inline std::string overlay_file_name(const std::string& scenario_id, const FrameRef& f) {
  char idx[32];
  std::snprintf(idx, sizeof idx, "%06lld", static_cast<long long>(f.frame_index));
  return scenario_id + "_" + f.video_id + "_" + idx + ".png";
}

// Boxes drawn for one frame: human boxes replace generated ones of the same
// role on that frame.
inline OverlaySpec overlay_for_frame(const ScenarioRecord& s, const FrameRef& f,
                                     const RenderOptions& opts) {
  OverlaySpec spec;
  spec.frame = f;
  spec.stroke = opts.stroke;
  spec.gaze_length = opts.gaze_length;
  spec.gaze_color = opts.palette.gaze;
  std::set<Role> human_roles;
  for (const auto& b : s.bboxes)
    if (b.video_id == f.video_id && b.frame_index == f.frame_index && b.source == BoxSource::kHuman)
      human_roles.insert(b.role);
  for (const auto& b : s.bboxes) {
    if (b.video_id != f.video_id || b.frame_index != f.frame_index) continue;
    if (b.source == BoxSource::kGenerated && human_roles.count(b.role)) continue;
    spec.boxes.push_back(ColoredBox{b, opts.palette.for_role(b.role)});
  }
  if (opts.draw_gaze)
    for (const auto& g : s.gaze)
      if (g.video_id == f.video_id && g.frame_index == f.frame_index) {
        spec.gaze = g;
        break;
      }
  return spec;
}

// Distinct frames referenced by the selections, in first-seen order.
inline std::vector<FrameRef> unique_frames(const std::vector<FrameSelection>& selections) {
  std::vector<FrameRef> out;
  std::set<FrameRef> seen;
  for (const auto& sel : selections)
    for (const auto& f : sel.frames)
      if (seen.insert(f).second) out.push_back(f);
  return out;
}

// Writes one overlaid PNG per distinct selected frame into out_dir, named
// {scenario}_{video}_{frame:06}.png. Returns the written paths in order.
inline std::vector<fs::path> batch_render(const Manifest& manifest, const ScenarioRecord& scenario,
                                          const std::vector<FrameSelection>& selections,
                                          const RenderOptions& opts, const fs::path& out_dir) {
  const auto frames = unique_frames(selections);
  std::vector<fs::path> sources;
  for (const auto& f : frames) {
    const VideoRecord* v = scenario.find_video(f.video_id);
    if (!v)
      throw MissingFrameFile("scenario '" + scenario.scenario_id + "' has no video '" +
                             f.video_id + "'");
    const fs::path dir = manifest.resolve_frame_dir(*v);
    const auto file = find_frame_file(dir, f.frame_index);
    if (!file) {
      char idx[32];
      std::snprintf(idx, sizeof idx, "%06lld", static_cast<long long>(f.frame_index));
      throw MissingFrameFile((dir / (std::string(idx) + ".{png,jpg}")).string());
    }
    sources.push_back(*file);
  }
  std::vector<fs::path> outputs;
  for (const auto& f : frames) outputs.push_back(out_dir / overlay_file_name(scenario.scenario_id, f));
  if (frames.empty()) return outputs;
  fs::create_directories(out_dir);

  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;
  const auto work = [&] {
    for (std::size_t i = next++; i < frames.size(); i = next++) {
      try {
        const Image img = read_image(sources[i]);
        write_png(render_overlay(overlay_for_frame(scenario, frames[i], opts), img), outputs[i]);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  const unsigned n_workers = std::max(1u, std::min<unsigned>(opts.workers, frames.size()));
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 1; w < n_workers; ++w) pool.emplace_back(work);
    work();
  }
  if (first_error) std::rethrow_exception(first_error);
  return outputs;
}

inline json to_json(const Rgb& c) { return json::array({c.r, c.g, c.b}); }

inline Rgb rgb_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3)
    throw ParseError(where + ": expected [r, g, b]");
  Rgb c;
  std::uint8_t* dst[3] = {&c.r, &c.g, &c.b};
  for (std::size_t i = 0; i < 3; ++i) {
    if (!j[i].is_number_integer() || j[i].get<int>() < 0 || j[i].get<int>() > 255)
      throw ParseError(where + ": channel values must be integers in 0..255");
    *dst[i] = static_cast<std::uint8_t>(j[i].get<int>());
  }
  return c;
}

inline json to_json(const Palette& p) {
  return {{"pedestrian", to_json(p.pedestrian)}, {"vehicle", to_json(p.vehicle)}, {"gaze", to_json(p.gaze)}};
}

// Missing keys keep their defaults.
inline Palette palette_from_json(const json& j) {
  Palette p;
  if (!j.is_object()) throw ParseError("palette: expected an object");
  if (j.contains("pedestrian")) p.pedestrian = rgb_from_json(j["pedestrian"], "palette.pedestrian");
  if (j.contains("vehicle")) p.vehicle = rgb_from_json(j["vehicle"], "palette.vehicle");
  if (j.contains("gaze")) p.gaze = rgb_from_json(j["gaze"], "palette.gaze");
  return p;
}

}  // namespace ster

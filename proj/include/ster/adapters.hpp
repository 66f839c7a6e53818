#pragma once

// Adapters from raw per-source annotation trees to the canonical manifest.
//
// WTS tree:
//   <root>/<scenario>/caption.json
//   <root>/<scenario>/vqa.json                      (optional)
//   <root>/<scenario>/{overhead_view,vehicle_view}/<video_id>/
//       video.json  frames/  bbox_annotated/  bbox_generated/  gaze.json
// BDD tree:
//   <root>/<scenario>/caption.json  vqa.json  video.json  frames/
//   <root>/<scenario>/bbox_annotated/  bbox_generated/  gaze.json
//
// caption.json: {"event_phase": [{"label": "prerecognition" | 1 | "1",
//   "start_time", "end_time", "caption_pedestrian", "caption_vehicle"}]}
// vqa.json:     [{"phase", "question", "choices": [...], "correct": "a"}]
// video.json:   {"fps": 30}
// bbox_*/{pedestrian,vehicle}.json: {"annotations": [{"frame_index", "bbox": [x, y, w, h]}]}
// gaze.json:    {"annotations": [{"frame_index", "origin": [x, y], "direction": [dx, dy]}]}

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ster/dataset.hpp"
#include "ster/error.hpp"
#include "ster/io.hpp"

namespace ster {

namespace adapter_detail {

inline std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline double number_or_string(const json& j, const std::string& where) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    try {
      std::size_t used = 0;
      const double v = std::stod(j.get<std::string>(), &used);
      if (used == j.get<std::string>().size()) return v;
    } catch (const std::exception&) {
    }
  }
  throw ParseError(where + ": expected a number");
}

inline int phase_number(const json& j, const std::string& where) {
  if (j.is_string()) {
    if (const auto label = parse_phase_label(j.get<std::string>())) return phase_for_label(*label);
  }
  const double v = number_or_string(j, where);
  if (v != std::floor(v) || v < kMinPhase || v > kMaxPhase)
    throw ParseError(where + ": phase must be 1..5 or a phase label");
  return static_cast<int>(v);
}

inline const json& field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw ParseError(where + "." + key + ": missing field");
  return obj[key];
}

inline void read_captions(const fs::path& file, ScenarioRecord& s) {
  const json doc = read_json_file(file);
  const std::string where = file.string();
  const json& phases = field(doc, "event_phase", where);
  if (!phases.is_array()) throw ParseError(where + ".event_phase: expected an array");
  for (std::size_t i = 0; i < phases.size(); ++i) {
    const json& p = phases[i];
    const std::string at = where + ".event_phase[" + std::to_string(i) + "]";
    const json& label = p.contains("label") ? p["label"] : field(p, "labels", at);
    PhaseSegment seg;
    seg.number = phase_number(label.is_array() && !label.empty() ? label[0] : label, at + ".label");
    seg.label = label_for_phase(seg.number);
    seg.start_time = number_or_string(field(p, "start_time", at), at + ".start_time");
    seg.end_time = number_or_string(field(p, "end_time", at), at + ".end_time");
    s.phases.push_back(seg);
    for (const auto& [key, role] : {std::pair{"caption_pedestrian", Role::kPedestrian},
                                    std::pair{"caption_vehicle", Role::kVehicle}}) {
      if (!p.contains(key)) continue;
      const std::string text = trim(p[key].get<std::string>());
      if (!text.empty()) s.captions.push_back({seg.number, role, text});
    }
  }
  std::stable_sort(s.phases.begin(), s.phases.end(),
                   [](const PhaseSegment& a, const PhaseSegment& b) { return a.number < b.number; });
  std::stable_sort(s.captions.begin(), s.captions.end(), [](const CaptionRecord& a, const CaptionRecord& b) {
    return std::pair(a.phase, a.subject) < std::pair(b.phase, b.subject);
  });
}

inline void read_vqa(const fs::path& file, ScenarioRecord& s) {
  if (!fs::exists(file)) return;
  const json doc = read_json_file(file);
  const std::string where = file.string();
  if (!doc.is_array()) throw ParseError(where + ": expected an array");
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& q = doc[i];
    const std::string at = where + "[" + std::to_string(i) + "]";
    VqaItem item;
    item.phase = phase_number(field(q, "phase", at), at + ".phase");
    item.question = field(q, "question", at).get<std::string>();
    item.choices = field(q, "choices", at).get<std::vector<std::string>>();
    std::string correct = field(q, "correct", at).get<std::string>();
    for (char& c : correct) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    item.correct = correct;
    s.vqa.push_back(std::move(item));
  }
}

inline void read_boxes(const fs::path& video_dir, const std::string& video_id, ScenarioRecord& s) {
  for (const auto& [dir, source] : {std::pair{"bbox_annotated", BoxSource::kHuman},
                                    std::pair{"bbox_generated", BoxSource::kGenerated}}) {
    for (const auto& [file, role] : {std::pair{"pedestrian.json", Role::kPedestrian},
                                     std::pair{"vehicle.json", Role::kVehicle}}) {
      const fs::path path = video_dir / dir / file;
      if (!fs::exists(path)) continue;
      const json doc = read_json_file(path);
      const json& anns = field(doc, "annotations", path.string());
      for (std::size_t i = 0; i < anns.size(); ++i) {
        const std::string at = path.string() + ".annotations[" + std::to_string(i) + "]";
        const json& box = field(anns[i], "bbox", at);
        if (!box.is_array() || box.size() != 4) throw ParseError(at + ".bbox: expected [x, y, w, h]");
        BBoxAnnotation b;
        b.video_id = video_id;
        b.frame_index = field(anns[i], "frame_index", at).get<std::int64_t>();
        b.role = role;
        b.source = source;
        b.x = box[0].get<double>();
        b.y = box[1].get<double>();
        b.w = box[2].get<double>();
        b.h = box[3].get<double>();
        s.bboxes.push_back(b);
      }
    }
  }
}

inline void read_gaze(const fs::path& video_dir, const std::string& video_id, ScenarioRecord& s) {
  const fs::path path = video_dir / "gaze.json";
  if (!fs::exists(path)) return;
  const json doc = read_json_file(path);
  const json& anns = field(doc, "annotations", path.string());
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const std::string at = path.string() + ".annotations[" + std::to_string(i) + "]";
    const json& o = field(anns[i], "origin", at);
    const json& d = field(anns[i], "direction", at);
    GazeAnnotation g;
    g.video_id = video_id;
    g.frame_index = field(anns[i], "frame_index", at).get<std::int64_t>();
    g.origin_x = o.at(0).get<double>();
    g.origin_y = o.at(1).get<double>();
    const double dx = d.at(0).get<double>(), dy = d.at(1).get<double>();
    const double norm = std::hypot(dx, dy);
    if (!(norm > 0)) throw ParseError(at + ".direction: zero vector");
    g.dir_x = dx / norm;
    g.dir_y = dy / norm;
    s.gaze.push_back(g);
  }
}

inline VideoRecord read_video(const fs::path& video_dir, const std::string& video_id, CameraKind kind,
                              const fs::path& root) {
  const fs::path meta = video_dir / "video.json";
  if (!fs::exists(meta)) throw UnsupportedLayout(video_dir.string() + " has no video.json");
  if (!fs::is_directory(video_dir / "frames")) throw UnsupportedLayout(video_dir.string() + " has no frames/");
  VideoRecord v;
  v.video_id = video_id;
  v.camera_kind = kind;
  v.fps = field(read_json_file(meta), "fps", meta.string()).get<double>();
  v.frame_dir = (video_dir / "frames").lexically_relative(root).generic_string();
  v.frame_count = count_frame_files(video_dir / "frames");
  return v;
}

inline std::vector<fs::path> scenario_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw UnsupportedLayout(root.string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& d : sorted_subdirs(root))
    if (fs::exists(d / "caption.json")) out.push_back(d);
  if (out.empty()) throw UnsupportedLayout(root.string() + " contains no <scenario>/caption.json");
  return out;
}

}  // namespace adapter_detail

// Reads a raw tree read-only. Relative frame_dir entries are relative to
// raw_path, which becomes the manifest's base_dir.
inline Manifest normalize_source(const fs::path& raw_path, Source source) {
  using namespace adapter_detail;
  Manifest m;
  m.base_dir = raw_path;
  for (const auto& dir : scenario_dirs(raw_path)) {
    ScenarioRecord s;
    s.scenario_id = dir.filename().string();
    s.source = source;
    read_captions(dir / "caption.json", s);
    read_vqa(dir / "vqa.json", s);
    if (source == Source::kBDD) {
      s.videos.push_back(read_video(dir, s.scenario_id, CameraKind::kVehicleDashboard, raw_path));
      read_boxes(dir, s.scenario_id, s);
      read_gaze(dir, s.scenario_id, s);
    } else {
      for (const auto& [view, kind] : {std::pair{"overhead_view", CameraKind::kOverheadSurveillance},
                                       std::pair{"vehicle_view", CameraKind::kVehicleDashboard}}) {
        for (const auto& vdir : sorted_subdirs(dir / view)) {
          const std::string id = vdir.filename().string();
          s.videos.push_back(read_video(vdir, id, kind, raw_path));
          read_boxes(vdir, id, s);
          read_gaze(vdir, id, s);
        }
      }
      if (s.videos.empty())
        throw UnsupportedLayout(dir.string() + " has neither overhead_view/ nor vehicle_view/ videos");
    }
    m.scenarios.push_back(std::move(s));
  }
  validate_manifest(m);
  return m;
}

}  // namespace ster

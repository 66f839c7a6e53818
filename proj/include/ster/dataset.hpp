#pragma once

// Canonical scenario manifest: domain types, JSON (de)serialization,
// validation and the time -> frame mapping every other module relies on.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "ster/error.hpp"
#include "ster/io.hpp"

namespace ster {

enum class Source { kWTS, kBDD };
enum class CameraKind { kOverheadSurveillance, kVehicleDashboard };
enum class PhaseLabel { kPrerecognition, kRecognition, kJudgment, kAction, kAvoidance };
enum class Role { kPedestrian, kVehicle };
enum class BoxSource { kHuman, kGenerated };

inline constexpr int kMinPhase = 1;
inline constexpr int kMaxPhase = 5;

inline std::string_view to_string(Source s) { return s == Source::kWTS ? "WTS" : "BDD"; }

inline std::string_view to_string(CameraKind c) {
  return c == CameraKind::kOverheadSurveillance ? "overhead_surveillance"
                                                : "vehicle_dashboard";
}

inline std::string_view to_string(PhaseLabel p) {
  static constexpr std::array<std::string_view, 5> kNames = {
      "prerecognition", "recognition", "judgment", "action", "avoidance"};
  return kNames[static_cast<std::size_t>(p)];
}

inline std::string_view to_string(Role r) {
  return r == Role::kPedestrian ? "pedestrian" : "vehicle";
}

inline std::string_view to_string(BoxSource s) {
  return s == BoxSource::kHuman ? "human" : "generated";
}

inline PhaseLabel label_for_phase(int number) {
  if (number < kMinPhase || number > kMaxPhase)
    throw ValidationError("phase number " + std::to_string(number) + " outside 1..5");
  return static_cast<PhaseLabel>(number - 1);
}

inline int phase_for_label(PhaseLabel label) { return static_cast<int>(label) + 1; }

// Parses the lower-case names above. Returns nullopt for anything else.
inline std::optional<Source> parse_source(std::string_view s) {
  if (s == "WTS" || s == "wts") return Source::kWTS;
  if (s == "BDD" || s == "bdd") return Source::kBDD;
  return std::nullopt;
}

inline std::optional<CameraKind> parse_camera_kind(std::string_view s) {
  if (s == "overhead_surveillance") return CameraKind::kOverheadSurveillance;
  if (s == "vehicle_dashboard") return CameraKind::kVehicleDashboard;
  return std::nullopt;
}

inline std::optional<PhaseLabel> parse_phase_label(std::string_view s) {
  for (int n = kMinPhase; n <= kMaxPhase; ++n) {
    const auto label = static_cast<PhaseLabel>(n - 1);
    if (s == to_string(label)) return label;
  }
  return std::nullopt;
}

inline std::optional<Role> parse_role(std::string_view s) {
  if (s == "pedestrian") return Role::kPedestrian;
  if (s == "vehicle") return Role::kVehicle;
  return std::nullopt;
}

inline std::optional<BoxSource> parse_box_source(std::string_view s) {
  if (s == "human") return BoxSource::kHuman;
  if (s == "generated") return BoxSource::kGenerated;
  return std::nullopt;
}

struct VideoRecord {
  std::string video_id;
  CameraKind camera_kind = CameraKind::kVehicleDashboard;
  double fps = 0.0;
  std::string frame_dir;
  std::int64_t frame_count = 0;

  bool operator==(const VideoRecord&) const = default;
};

struct PhaseSegment {
  int number = 1;
  PhaseLabel label = PhaseLabel::kPrerecognition;
  double start_time = 0.0;
  double end_time = 0.0;

  bool operator==(const PhaseSegment&) const = default;
};

struct BBoxAnnotation {
  std::string video_id;
  std::int64_t frame_index = 0;
  Role role = Role::kPedestrian;
  BoxSource source = BoxSource::kHuman;
  double x = 0, y = 0, w = 0, h = 0;

  bool operator==(const BBoxAnnotation&) const = default;
};

struct GazeAnnotation {
  std::string video_id;
  std::int64_t frame_index = 0;
  double origin_x = 0, origin_y = 0;
  double dir_x = 1, dir_y = 0;

  bool operator==(const GazeAnnotation&) const = default;
};

struct CaptionRecord {
  int phase = 1;
  Role subject = Role::kPedestrian;
  std::string text;

  bool operator==(const CaptionRecord&) const = default;
};

struct VqaItem {
  int phase = 1;
  std::string question;
  std::vector<std::string> choices;  // keyed A, B, C, ... in order
  std::string correct;

  bool operator==(const VqaItem&) const = default;
};

inline std::string choice_key(std::size_t index) {
  return std::string(1, static_cast<char>('A' + index));
}

struct ScenarioRecord {
  std::string scenario_id;
  Source source = Source::kWTS;
  std::vector<VideoRecord> videos;
  std::vector<PhaseSegment> phases;
  std::vector<CaptionRecord> captions;
  std::vector<VqaItem> vqa;
  std::vector<BBoxAnnotation> bboxes;
  std::vector<GazeAnnotation> gaze;

  const PhaseSegment* find_phase(int number) const {
    for (const auto& p : phases)
      if (p.number == number) return &p;
    return nullptr;
  }

  const VideoRecord* find_video(std::string_view id) const {
    for (const auto& v : videos)
      if (v.video_id == id) return &v;
    return nullptr;
  }

  const CaptionRecord* find_caption(int phase, Role subject) const {
    for (const auto& c : captions)
      if (c.phase == phase && c.subject == subject) return &c;
    return nullptr;
  }

  bool operator==(const ScenarioRecord&) const = default;
};

struct Manifest {
  std::vector<ScenarioRecord> scenarios;
  // Directory that relative frame_dir entries resolve against. Not serialized.
  fs::path base_dir;

  const ScenarioRecord* find(std::string_view id) const {
    for (const auto& s : scenarios)
      if (s.scenario_id == id) return &s;
    return nullptr;
  }

  fs::path resolve_frame_dir(const VideoRecord& v) const {
    const fs::path dir(v.frame_dir);
    return dir.is_absolute() || base_dir.empty() ? dir : base_dir / dir;
  }
};

// --- frames ---------------------------------------------------------------

// Frame files are named by zero-padded index: 000042.jpg / 000042.png.
inline bool is_frame_file_name(const std::string& name) {
  static const std::regex kPattern(R"(^\d{6}\.(jpg|jpeg|png)$)");
  return std::regex_match(name, kPattern);
}

inline std::int64_t count_frame_files(const fs::path& dir) {
  std::int64_t n = 0;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) return 0;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && is_frame_file_name(entry.path().filename().string())) ++n;
  return n;
}

// Locates the frame file for an index, trying png then jpg then jpeg.
inline std::optional<fs::path> find_frame_file(const fs::path& dir, std::int64_t index) {
  char stem[32];
  std::snprintf(stem, sizeof stem, "%06lld", static_cast<long long>(index));
  for (const char* ext : {".png", ".jpg", ".jpeg"}) {
    fs::path p = dir / (std::string(stem) + ext);
    if (fs::exists(p)) return p;
  }
  return std::nullopt;
}

// Guards floor() against products like 0.29 * 100 = 28.999999999999996.
inline constexpr double kTimeEpsilon = 1e-9;

inline std::int64_t time_to_frame(double seconds, double fps) {
  return static_cast<std::int64_t>(std::floor(seconds * fps + kTimeEpsilon));
}

// Indices i with floor(start*fps) <= i <= min(floor(end*fps), frame_count-1).
inline std::vector<std::int64_t> frames_in_phase(const VideoRecord& video,
                                                 const PhaseSegment& phase) {
  std::vector<std::int64_t> out;
  if (video.fps <= 0 || video.frame_count <= 0) return out;
  const std::int64_t lo = std::max<std::int64_t>(0, time_to_frame(phase.start_time, video.fps));
  const std::int64_t hi =
      std::min<std::int64_t>(time_to_frame(phase.end_time, video.fps), video.frame_count - 1);
  for (std::int64_t i = lo; i <= hi; ++i) out.push_back(i);
  return out;
}

// --- JSON -----------------------------------------------------------------

namespace detail {

// Field access that reports the JSON path of the offending member.
inline const json& require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) throw ParseError(where + ": expected an object");
  const auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(where + "." + key + ": missing field");
  return *it;
}

inline std::string get_string(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_string()) throw ParseError(where + "." + key + ": expected a string");
  return v.get<std::string>();
}

inline double get_number(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_number()) throw ParseError(where + "." + key + ": expected a number");
  return v.get<double>();
}

inline std::int64_t get_integer(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_number_integer()) throw ParseError(where + "." + key + ": expected an integer");
  return v.get<std::int64_t>();
}

inline const json& get_array(const json& obj, const char* key, const std::string& where,
                             bool optional = false) {
  static const json kEmpty = json::array();
  if (optional && obj.is_object() && !obj.contains(key)) return kEmpty;
  const json& v = require(obj, key, where);
  if (!v.is_array()) throw ParseError(where + "." + key + ": expected an array");
  return v;
}

template <typename Enum, typename ParseFn>
Enum get_enum(const json& obj, const char* key, const std::string& where, ParseFn parse) {
  const std::string s = get_string(obj, key, where);
  const auto v = parse(s);
  if (!v) throw ParseError(where + "." + key + ": unknown value '" + s + "'");
  return *v;
}

inline std::string at(const std::string& where, std::size_t i) {
  return where + "[" + std::to_string(i) + "]";
}

}  // namespace detail

inline json to_json(const VideoRecord& v) {
  return {{"video_id", v.video_id},
          {"camera_kind", to_string(v.camera_kind)},
          {"fps", v.fps},
          {"frame_dir", v.frame_dir},
          {"frame_count", v.frame_count}};
}

inline json to_json(const PhaseSegment& p) {
  return {{"number", p.number},
          {"label", to_string(p.label)},
          {"start_time", p.start_time},
          {"end_time", p.end_time}};
}

inline json to_json(const BBoxAnnotation& b) {
  return {{"video_id", b.video_id}, {"frame_index", b.frame_index},
          {"role", to_string(b.role)}, {"source", to_string(b.source)},
          {"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}};
}

inline json to_json(const GazeAnnotation& g) {
  return {{"video_id", g.video_id}, {"frame_index", g.frame_index},
          {"origin_x", g.origin_x}, {"origin_y", g.origin_y},
          {"dir_x", g.dir_x}, {"dir_y", g.dir_y}};
}

inline json to_json(const CaptionRecord& c) {
  return {{"phase", c.phase}, {"subject", to_string(c.subject)}, {"text", c.text}};
}

inline json to_json(const VqaItem& q) {
  return {{"phase", q.phase}, {"question", q.question}, {"choices", q.choices},
          {"correct", q.correct}};
}

template <typename T>
json to_json_array(const std::vector<T>& items) {
  json arr = json::array();
  for (const auto& item : items) arr.push_back(to_json(item));
  return arr;
}

inline json to_json(const ScenarioRecord& s) {
  return {{"scenario_id", s.scenario_id},
          {"source", to_string(s.source)},
          {"videos", to_json_array(s.videos)},
          {"phases", to_json_array(s.phases)},
          {"captions", to_json_array(s.captions)},
          {"vqa", to_json_array(s.vqa)},
          {"bboxes", to_json_array(s.bboxes)},
          {"gaze", to_json_array(s.gaze)}};
}

inline json to_json(const Manifest& m) {
  return {{"version", 1}, {"scenarios", to_json_array(m.scenarios)}};
}

inline VideoRecord video_from_json(const json& j, const std::string& where) {
  VideoRecord v;
  v.video_id = detail::get_string(j, "video_id", where);
  v.camera_kind = detail::get_enum<CameraKind>(j, "camera_kind", where, parse_camera_kind);
  v.fps = detail::get_number(j, "fps", where);
  v.frame_dir = detail::get_string(j, "frame_dir", where);
  v.frame_count = detail::get_integer(j, "frame_count", where);
  return v;
}

inline PhaseSegment phase_from_json(const json& j, const std::string& where) {
  PhaseSegment p;
  p.number = static_cast<int>(detail::get_integer(j, "number", where));
  p.label = detail::get_enum<PhaseLabel>(j, "label", where, parse_phase_label);
  p.start_time = detail::get_number(j, "start_time", where);
  p.end_time = detail::get_number(j, "end_time", where);
  return p;
}

inline BBoxAnnotation bbox_from_json(const json& j, const std::string& where) {
  BBoxAnnotation b;
  b.video_id = detail::get_string(j, "video_id", where);
  b.frame_index = detail::get_integer(j, "frame_index", where);
  b.role = detail::get_enum<Role>(j, "role", where, parse_role);
  b.source = detail::get_enum<BoxSource>(j, "source", where, parse_box_source);
  b.x = detail::get_number(j, "x", where);
  b.y = detail::get_number(j, "y", where);
  b.w = detail::get_number(j, "w", where);
  b.h = detail::get_number(j, "h", where);
  return b;
}

inline GazeAnnotation gaze_from_json(const json& j, const std::string& where) {
  GazeAnnotation g;
  g.video_id = detail::get_string(j, "video_id", where);
  g.frame_index = detail::get_integer(j, "frame_index", where);
  g.origin_x = detail::get_number(j, "origin_x", where);
  g.origin_y = detail::get_number(j, "origin_y", where);
  g.dir_x = detail::get_number(j, "dir_x", where);
  g.dir_y = detail::get_number(j, "dir_y", where);
  return g;
}

inline CaptionRecord caption_from_json(const json& j, const std::string& where) {
  CaptionRecord c;
  c.phase = static_cast<int>(detail::get_integer(j, "phase", where));
  c.subject = detail::get_enum<Role>(j, "subject", where, parse_role);
  c.text = detail::get_string(j, "text", where);
  return c;
}

inline VqaItem vqa_from_json(const json& j, const std::string& where) {
  VqaItem q;
  q.phase = static_cast<int>(detail::get_integer(j, "phase", where));
  q.question = detail::get_string(j, "question", where);
  const json& choices = detail::get_array(j, "choices", where);
  for (std::size_t i = 0; i < choices.size(); ++i) {
    if (!choices[i].is_string())
      throw ParseError(detail::at(where + ".choices", i) + ": expected a string");
    q.choices.push_back(choices[i].get<std::string>());
  }
  q.correct = detail::get_string(j, "correct", where);
  return q;
}

inline ScenarioRecord scenario_from_json(const json& j, const std::string& where) {
  ScenarioRecord s;
  s.scenario_id = detail::get_string(j, "scenario_id", where);
  s.source = detail::get_enum<Source>(j, "source", where, parse_source);
  const auto each = [&](const char* key, bool optional, auto&& fn) {
    const json& arr = detail::get_array(j, key, where, optional);
    for (std::size_t i = 0; i < arr.size(); ++i) fn(arr[i], detail::at(where + "." + key, i));
  };
  each("videos", false, [&](const json& e, const std::string& w) { s.videos.push_back(video_from_json(e, w)); });
  each("phases", false, [&](const json& e, const std::string& w) { s.phases.push_back(phase_from_json(e, w)); });
  each("captions", false, [&](const json& e, const std::string& w) { s.captions.push_back(caption_from_json(e, w)); });
  each("vqa", true, [&](const json& e, const std::string& w) { s.vqa.push_back(vqa_from_json(e, w)); });
  each("bboxes", true, [&](const json& e, const std::string& w) { s.bboxes.push_back(bbox_from_json(e, w)); });
  each("gaze", true, [&](const json& e, const std::string& w) { s.gaze.push_back(gaze_from_json(e, w)); });
  return s;
}

inline Manifest manifest_from_json(const json& doc) {
  if (!doc.is_object()) throw ParseError("manifest: top level must be an object");
  if (doc.contains("version") && doc["version"] != 1)
    throw ParseError("manifest.version: unsupported version " + doc["version"].dump());
  Manifest m;
  const json& arr = detail::get_array(doc, "scenarios", "manifest");
  for (std::size_t i = 0; i < arr.size(); ++i)
    m.scenarios.push_back(scenario_from_json(arr[i], detail::at("scenarios", i)));
  return m;
}

// --- validation -----------------------------------------------------------

struct ValidationOptions {
  // Compare frame_count against the files actually present under frame_dir.
  bool check_frame_files = true;
};

inline void validate_scenario(const ScenarioRecord& s, const Manifest& m,
                              const ValidationOptions& opts) {
  const std::string who = "scenario '" + s.scenario_id + "': ";
  if (s.scenario_id.empty()) throw ValidationError("scenario_id must be nonempty");
  if (s.phases.size() > 5) throw ValidationError(who + "phases: more than 5 segments");

  int previous = 0;
  for (const auto& p : s.phases) {
    if (p.number < kMinPhase || p.number > kMaxPhase)
      throw ValidationError(who + "phases: number " + std::to_string(p.number) + " outside 1..5");
    if (p.number == previous)
      throw ValidationError(who + "phases: duplicate phase " + std::to_string(p.number));
    if (p.number < previous)
      throw ValidationError(who + "phases: phase " + std::to_string(p.number) +
                            " out of order (numbers must be strictly increasing)");
    if (p.label != label_for_phase(p.number))
      throw ValidationError(who + "phases: phase " + std::to_string(p.number) + " labeled '" +
                            std::string(to_string(p.label)) + "', expected '" +
                            std::string(to_string(label_for_phase(p.number))) + "'");
    if (!(p.start_time <= p.end_time))
      throw ValidationError(who + "phases: phase " + std::to_string(p.number) +
                            " start_time > end_time");
    previous = p.number;
  }

  std::set<std::string> video_ids;
  for (const auto& v : s.videos) {
    if (v.video_id.empty()) throw ValidationError(who + "videos: empty video_id");
    if (!video_ids.insert(v.video_id).second)
      throw ValidationError(who + "videos: duplicate video_id '" + v.video_id + "'");
    if (!(v.fps > 0))
      throw ValidationError(who + "videos['" + v.video_id + "'].fps must be > 0");
    if (v.frame_count < 0)
      throw ValidationError(who + "videos['" + v.video_id + "'].frame_count must be >= 0");
    if (opts.check_frame_files) {
      const auto found = count_frame_files(m.resolve_frame_dir(v));
      if (found != v.frame_count)
        throw ValidationError(who + "videos['" + v.video_id + "'].frame_count is " +
                              std::to_string(v.frame_count) + " but " +
                              std::to_string(found) + " frame files exist under " +
                              m.resolve_frame_dir(v).string());
    }
  }

  for (const auto& c : s.captions) {
    if (!s.find_phase(c.phase))
      throw ValidationError(who + "captions: phase " + std::to_string(c.phase) +
                            " is not among the scenario's phases");
    if (c.text.empty()) throw ValidationError(who + "captions: empty text");
  }
  for (const auto& q : s.vqa) {
    if (!s.find_phase(q.phase))
      throw ValidationError(who + "vqa: phase " + std::to_string(q.phase) +
                            " is not among the scenario's phases");
    if (q.choices.size() < 2 || q.choices.size() > 5)
      throw ValidationError(who + "vqa: '" + q.question + "' needs 2..5 choices");
    bool known = false;
    for (std::size_t i = 0; i < q.choices.size(); ++i) known |= (q.correct == choice_key(i));
    if (!known)
      throw ValidationError(who + "vqa: correct key '" + q.correct + "' not among choices");
  }
  for (const auto& b : s.bboxes) {
    const VideoRecord* v = s.find_video(b.video_id);
    if (!v) throw ValidationError(who + "bboxes: unknown video_id '" + b.video_id + "'");
    if (b.w < 0 || b.h < 0) throw ValidationError(who + "bboxes: negative width or height");
    if (b.frame_index < 0 || b.frame_index >= v->frame_count)
      throw ValidationError(who + "bboxes: frame_index " + std::to_string(b.frame_index) +
                            " outside video '" + b.video_id + "'");
  }
  for (const auto& g : s.gaze) {
    const VideoRecord* v = s.find_video(g.video_id);
    if (!v) throw ValidationError(who + "gaze: unknown video_id '" + g.video_id + "'");
    if (g.frame_index < 0 || g.frame_index >= v->frame_count)
      throw ValidationError(who + "gaze: frame_index " + std::to_string(g.frame_index) +
                            " outside video '" + g.video_id + "'");
    const double norm = std::hypot(g.dir_x, g.dir_y);
    if (std::abs(norm - 1.0) > 1e-6)
      throw ValidationError(who + "gaze: direction is not unit length");
  }
}

inline void validate_manifest(const Manifest& m, const ValidationOptions& opts = {}) {
  std::set<std::string> ids;
  for (const auto& s : m.scenarios) {
    validate_scenario(s, m, opts);
    if (!ids.insert(s.scenario_id).second)
      throw ValidationError("scenario_id '" + s.scenario_id + "' is not unique");
  }
}

inline Manifest parse_manifest(std::string_view text, const fs::path& base_dir = {},
                               const ValidationOptions& opts = {},
                               const std::string& name = "manifest") {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(name + ": " + e.what());
  }
  Manifest m = manifest_from_json(doc);
  m.base_dir = base_dir;
  validate_manifest(m, opts);
  return m;
}

inline Manifest load_manifest(const fs::path& path, const ValidationOptions& opts = {}) {
  if (!fs::exists(path)) throw ParseError(path.string() + ": no such file");
  return parse_manifest(read_text_file(path), path.parent_path(), opts, path.string());
}

inline std::string serialize_manifest(const Manifest& m) { return pretty_dump(to_json(m)); }

inline void save_manifest(const Manifest& m, const fs::path& path) {
  write_file_atomic(path, serialize_manifest(m));
}

}  // namespace ster

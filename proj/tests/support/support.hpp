#pragma once

#include <stdlib.h>

#include <string>
#include <vector>

#include "ster/ster.hpp"

namespace ster::testing {

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "ster-test-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }

  const fs::path& path() const { return path_; }
  fs::path operator/(const fs::path& p) const { return path_ / p; }

 private:
  fs::path path_;
};

// Deterministic gradient so frames differ from one another.
inline Image test_frame(int w, int h, std::int64_t index) {
  Image img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      img.set(x, y,
              Rgb{static_cast<std::uint8_t>((x * 4 + index) % 256), static_cast<std::uint8_t>((y * 4) % 256),
                  static_cast<std::uint8_t>((index * 8) % 256)});
  return img;
}

inline void write_frames(const fs::path& dir, std::int64_t count, int w = 32, int h = 24) {
  fs::create_directories(dir);
  for (std::int64_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%06lld.png", static_cast<long long>(i));
    write_png(test_frame(w, h, i), dir / name);
  }
}

inline VideoRecord video(const std::string& id, std::int64_t frames, double fps = 10.0,
                         CameraKind kind = CameraKind::kOverheadSurveillance) {
  VideoRecord v;
  v.video_id = id;
  v.camera_kind = kind;
  v.fps = fps;
  v.frame_dir = "frames/" + id;
  v.frame_count = frames;
  return v;
}

inline PhaseSegment phase(int n, double start, double end) {
  return PhaseSegment{n, label_for_phase(n), start, end};
}

inline BBoxAnnotation box(const std::string& video, std::int64_t frame, Role role, double w, double h,
                          BoxSource src = BoxSource::kHuman, double x = 0, double y = 0) {
  return BBoxAnnotation{video, frame, role, src, x, y, w, h};
}

// Five phases of one second each over a single 10 fps video of 50 frames:
// phase p covers frames 10(p-1) .. 10(p-1)+9.
inline ScenarioRecord five_phase_scenario(const std::string& id = "s1") {
  ScenarioRecord s;
  s.scenario_id = id;
  s.source = Source::kWTS;
  s.videos.push_back(video("camA", 50));
  for (int p = 1; p <= 5; ++p) s.phases.push_back(phase(p, p - 1.0, p - 1.0 + 0.95));
  for (int p = 1; p <= 5; ++p) {
    s.captions.push_back({p, Role::kPedestrian, "The pedestrian was standing near the road in phase " + std::to_string(p) + "."});
    s.captions.push_back({p, Role::kVehicle, "The vehicle was moving slowly in phase " + std::to_string(p) + "."});
  }
  return s;
}

// --- scripted model ------------------------------------------------------------------

inline std::string user_text(const json& body) {
  std::string out;
  for (const auto& m : body.at("messages")) {
    if (m.at("role") != "user") continue;
    const json& c = m.at("content");
    if (c.is_string()) {
      out += c.get<std::string>();
    } else {
      for (const auto& part : c)
        if (part.value("type", "") == "text") out += part.value("text", "");
    }
  }
  return out;
}

inline std::string system_text(const json& body) {
  for (const auto& m : body.at("messages"))
    if (m.at("role") == "system") return m.at("content").get<std::string>();
  return {};
}

inline std::string last_line_with_prefix(const std::string& text, const std::string& prefix) {
  std::string found;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind(prefix, 0) == 0) found = line.substr(prefix.size());
  return found;
}

// Deterministic stand-in for the hosted models: decomposition requests are
// answered by the rule decomposer, composition requests by concatenating
// their sections, and multiple-choice questions with "A".
inline std::string scripted_reply(const json& body) {
  const std::string user = user_text(body);
  const std::string system = system_text(body);
  const auto ends_with = [&](const std::string& suffix) {
    std::string t = trim(user);
    return t.size() >= suffix.size() && t.compare(t.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  if (ends_with("Spatial-invariant:") || ends_with("Temporal-variant:")) {
    const std::string caption = last_line_with_prefix(user, "Caption: ");
    const auto d = rule_decompose(caption);
    return ends_with("Spatial-invariant:") ? d.spatial : d.temporal;
  }
  if (user.find("[Spatial-invariant]") != std::string::npos) {
    std::istringstream in(user);
    std::string line, out;
    bool take = false;
    while (std::getline(in, line)) {
      if (line.rfind("[", 0) == 0) {
        take = true;
        continue;
      }
      if (take && !trim(line).empty()) {
        out += (out.empty() ? "" : " ") + trim(line);
        take = false;
      }
    }
    return out;
  }
  if (user.find("Answer with the letter") != std::string::npos) return "A";
  if (system.find("single traffic-camera frame") != std::string::npos)
    return "A pedestrian stands at the roadside and a vehicle approaches in the near lane.";
  const bool pedestrian = user.find("involving a pedestrian") != std::string::npos;
  if (user.find("spatial-invariant content") != std::string::npos)
    return pedestrian ? "The pedestrian was a male in his 30s wearing a dark jacket. The weather was clear and the road "
                        "surface was dry."
                      : "The vehicle was a white sedan on a dry asphalt road in clear weather.";
  return pedestrian ? "The pedestrian was standing near the vehicle and was aware of it."
                    : "The vehicle was moving slowly and was close to the pedestrian.";
}

inline json chat_completion(const std::string& text) {
  return {{"id", "scripted"},
          {"object", "chat.completion"},
          {"choices", json::array({{{"index", 0},
                                    {"message", {{"role", "assistant"}, {"content", text}}},
                                    {"finish_reason", "stop"}}})},
          {"usage",
           {{"prompt_tokens", 10},
            {"completion_tokens", static_cast<std::int64_t>(text::tokenize(text).size())},
            {"total_tokens", 10 + static_cast<std::int64_t>(text::tokenize(text).size())}}}};
}

// In-process transport answering with scripted_reply.
inline Transport scripted_transport() {
  return [](const HttpRequest& req) {
    HttpResponse r;
    r.status = 200;
    r.body = chat_completion(scripted_reply(json::parse(req.body))).dump();
    return r;
  };
}

}  // namespace ster::testing

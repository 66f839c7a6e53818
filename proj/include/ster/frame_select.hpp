#pragma once

// Phase-aware frame selection with best-view filtering.
//
// Spatial branch: first frame of phases 1 and 2 (in that phase's best
// camera), largest-pedestrian frame of phases 3 and 4 across all cameras.
// Temporal branch: phases 1-3 take [I_best, I_addition]; phases 4-5 take
// three uniformly spaced frames from the single best camera.

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "ster/dataset.hpp"
#include "ster/error.hpp"

namespace ster {

enum class Purpose { kSpatial, kTemporal };

inline std::string_view to_string(Purpose p) {
  return p == Purpose::kSpatial ? "spatial" : "temporal";
}

struct FrameRef {
  std::string video_id;
  std::int64_t frame_index = 0;

  auto operator<=>(const FrameRef&) const = default;
  bool operator==(const FrameRef&) const = default;
};

struct FrameSelection {
  Purpose purpose = Purpose::kTemporal;
  int phase = 1;
  std::vector<FrameRef> frames;
  std::vector<std::string> rationale;  // one entry per frame

  bool operator==(const FrameSelection&) const = default;
};

inline double bbox_area(const BBoxAnnotation& b) { return b.w * b.h; }

// Positions floor(j*(n-1)/(k-1)), j = 0..k-1, de-duplicated in order.
inline std::vector<std::int64_t> uniform_sample(const std::vector<std::int64_t>& indices,
                                                std::size_t k) {
  if (indices.empty()) throw EmptyPhase("uniform_sample over an empty index list");
  if (k == 0) throw ValidationError("uniform_sample needs k >= 1");
  const std::size_t n = indices.size();
  std::vector<std::int64_t> out;
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t pos = k == 1 ? 0 : (j * (n - 1)) / (k - 1);
    if (out.empty() || out.back() != indices[pos]) out.push_back(indices[pos]);
  }
  return out;
}

// Per-frame, per-role box area with human boxes superseding generated ones
// for the same (video, frame, role). Several boxes of one role in a frame
// add up. Frames without a box for a role contribute 0.
class AreaIndex {
 public:
  explicit AreaIndex(const ScenarioRecord& scenario) {
    std::set<Key> has_human;
    for (const auto& b : scenario.bboxes)
      if (b.source == BoxSource::kHuman) has_human.insert(Key{b.video_id, b.frame_index, b.role});
    for (const auto& b : scenario.bboxes) {
      const Key key{b.video_id, b.frame_index, b.role};
      if (b.source == BoxSource::kGenerated && has_human.count(key)) continue;
      area_[key] += bbox_area(b);
    }
  }

  double role_area(const FrameRef& f, Role role) const {
    const auto it = area_.find(Key{f.video_id, f.frame_index, role});
    return it == area_.end() ? 0.0 : it->second;
  }

  double pedestrian(const FrameRef& f) const { return role_area(f, Role::kPedestrian); }

  double combined(const FrameRef& f) const {
    return role_area(f, Role::kPedestrian) + role_area(f, Role::kVehicle);
  }

  bool any_pedestrian(const std::vector<FrameRef>& frames) const {
    for (const auto& f : frames)
      if (area_.count(Key{f.video_id, f.frame_index, Role::kPedestrian})) return true;
    return false;
  }

 private:
  using Key = std::tuple<std::string, std::int64_t, Role>;
  std::map<Key, double> area_;
};

namespace detail {

inline const PhaseSegment& require_phase(const ScenarioRecord& s, int phase) {
  const PhaseSegment* p = s.find_phase(phase);
  if (!p)
    throw MissingPhase("scenario '" + s.scenario_id + "' has no phase " + std::to_string(phase));
  return *p;
}

// Every (video, frame) inside the phase, across all cameras.
inline std::vector<FrameRef> phase_frames(const ScenarioRecord& s, const PhaseSegment& phase) {
  std::vector<FrameRef> out;
  for (const auto& v : s.videos)
    for (auto i : frames_in_phase(v, phase)) out.push_back(FrameRef{v.video_id, i});
  return out;
}

// Argmax with ties broken by earlier frame_index, then smaller video_id.
template <typename Score>
FrameRef argmax_frame(const std::vector<FrameRef>& frames, Score score) {
  const FrameRef* best = nullptr;
  double best_score = 0.0;
  for (const auto& f : frames) {
    const double s = score(f);
    const bool better =
        !best || s > best_score ||
        (s == best_score && std::tie(f.frame_index, f.video_id) <
                                std::tie(best->frame_index, best->video_id));
    if (better) {
      best = &f;
      best_score = s;
    }
  }
  return *best;
}

inline std::string describe(const FrameRef& f) {
  return f.video_id + "#" + std::to_string(f.frame_index);
}

}  // namespace detail

// Camera maximizing the summed pedestrian + vehicle area over the phase.
// Cameras that actually cover the phase win over ones that do not; ties go
// to the lexicographically smallest video_id.
inline std::string best_camera(const ScenarioRecord& scenario, int phase) {
  const PhaseSegment& seg = detail::require_phase(scenario, phase);
  if (scenario.videos.empty())
    throw ValidationError("scenario '" + scenario.scenario_id + "' has no videos");
  const AreaIndex areas(scenario);
  const VideoRecord* best = nullptr;
  bool best_covers = false;
  double best_sum = 0.0;
  for (const auto& v : scenario.videos) {
    const auto frames = frames_in_phase(v, seg);
    double sum = 0.0;
    for (auto i : frames) sum += areas.combined(FrameRef{v.video_id, i});
    const bool covers = !frames.empty();
    const bool better = !best || (covers && !best_covers) ||
                        (covers == best_covers &&
                         (sum > best_sum || (sum == best_sum && v.video_id < best->video_id)));
    if (better) {
      best = &v;
      best_sum = sum;
      best_covers = covers;
    }
  }
  return best->video_id;
}

namespace detail {

inline FrameRef first_frame_in_best_camera(const ScenarioRecord& s, int phase,
                                           std::string* camera_out = nullptr) {
  const PhaseSegment& seg = require_phase(s, phase);
  const std::string cam = best_camera(s, phase);
  const auto frames = frames_in_phase(*s.find_video(cam), seg);
  if (frames.empty())
    throw EmptyPhase("scenario '" + s.scenario_id + "' phase " + std::to_string(phase) +
                     " contains no frames in any video");
  if (camera_out) *camera_out = cam;
  return FrameRef{cam, frames.front()};
}

}  // namespace detail

// Four single-frame selections, one per phase 1..4.
inline std::vector<FrameSelection> select_spatial_frames(const ScenarioRecord& scenario) {
  for (int p = 1; p <= 4; ++p) detail::require_phase(scenario, p);
  if (scenario.videos.empty())
    throw ValidationError("scenario '" + scenario.scenario_id + "' has no videos");
  const AreaIndex areas(scenario);
  std::vector<FrameSelection> out;
  for (int p = 1; p <= 4; ++p) {
    FrameSelection sel;
    sel.purpose = Purpose::kSpatial;
    sel.phase = p;
    if (p <= 2) {
      std::string cam;
      sel.frames.push_back(detail::first_frame_in_best_camera(scenario, p, &cam));
      sel.rationale.push_back("first frame of phase " + std::to_string(p) + " in best camera " + cam);
    } else {
      const auto frames = detail::phase_frames(scenario, *scenario.find_phase(p));
      if (frames.empty())
        throw EmptyPhase("scenario '" + scenario.scenario_id + "' phase " + std::to_string(p) +
                         " contains no frames in any video");
      if (areas.any_pedestrian(frames)) {
        sel.frames.push_back(
            detail::argmax_frame(frames, [&](const FrameRef& f) { return areas.pedestrian(f); }));
        sel.rationale.push_back("largest pedestrian bbox");
      } else {
        std::string cam;
        sel.frames.push_back(detail::first_frame_in_best_camera(scenario, p, &cam));
        sel.rationale.push_back("no pedestrian bbox in phase; first frame in best camera " + cam);
      }
    }
    out.push_back(std::move(sel));
  }
  return out;
}

inline FrameSelection select_temporal_frames(const ScenarioRecord& scenario, int phase,
                                             std::size_t samples = 3) {
  if (phase < kMinPhase || phase > kMaxPhase)
    throw MissingPhase("phase " + std::to_string(phase) + " outside 1..5");
  const PhaseSegment& seg = detail::require_phase(scenario, phase);
  FrameSelection sel;
  sel.purpose = Purpose::kTemporal;
  sel.phase = phase;
  if (phase <= 3) {
    const auto frames = detail::phase_frames(scenario, seg);
    if (frames.empty())
      throw EmptyPhase("scenario '" + scenario.scenario_id + "' phase " + std::to_string(phase) +
                       " contains no frames in any video");
    const AreaIndex areas(scenario);
    const FrameRef best =
        detail::argmax_frame(frames, [&](const FrameRef& f) { return areas.pedestrian(f); });
    const FrameRef addition =
        detail::argmax_frame(frames, [&](const FrameRef& f) { return areas.combined(f); });
    sel.frames.push_back(best);
    sel.rationale.push_back("largest pedestrian bbox");
    if (!(addition == best)) {
      sel.frames.push_back(addition);
      sel.rationale.push_back("largest pedestrian+vehicle bbox sum");
    }
  } else {
    const std::string cam = best_camera(scenario, phase);
    const auto indices = frames_in_phase(*scenario.find_video(cam), seg);
    if (indices.empty())
      throw EmptyPhase("scenario '" + scenario.scenario_id + "' phase " + std::to_string(phase) +
                       " contains no frames in any video");
    const auto picked = uniform_sample(indices, samples);
    for (std::size_t j = 0; j < picked.size(); ++j) {
      sel.frames.push_back(FrameRef{cam, picked[j]});
      sel.rationale.push_back("uniform sample " + std::to_string(j + 1) + "/" +
                              std::to_string(picked.size()) + " in best camera " + cam);
    }
  }
  return sel;
}

// All selections for one scenario: spatial (phases 1-4) and temporal (every
// phase present).
struct ScenarioSelections {
  std::vector<FrameSelection> spatial;
  std::map<int, FrameSelection> temporal;

  std::vector<FrameRef> spatial_frames() const {
    std::vector<FrameRef> out;
    for (const auto& s : spatial)
      for (const auto& f : s.frames) out.push_back(f);
    return out;
  }

  bool operator==(const ScenarioSelections&) const = default;
};

inline ScenarioSelections select_all(const ScenarioRecord& scenario, std::size_t samples = 3) {
  ScenarioSelections out;
  out.spatial = select_spatial_frames(scenario);
  for (const auto& p : scenario.phases)
    out.temporal.emplace(p.number, select_temporal_frames(scenario, p.number, samples));
  return out;
}

// --- selections file --------------------------------------------------------

inline json to_json(const FrameRef& f) {
  return {{"video_id", f.video_id}, {"frame_index", f.frame_index}};
}

inline json to_json(const FrameSelection& s) {
  json frames = json::array();
  for (const auto& f : s.frames) frames.push_back(to_json(f));
  return {{"purpose", to_string(s.purpose)},
          {"phase", s.phase},
          {"frames", frames},
          {"rationale", s.rationale}};
}

inline FrameRef frame_ref_from_json(const json& j) {
  return FrameRef{j.at("video_id").get<std::string>(), j.at("frame_index").get<std::int64_t>()};
}

inline FrameSelection selection_from_json(const json& j) {
  FrameSelection s;
  s.purpose = j.at("purpose").get<std::string>() == "spatial" ? Purpose::kSpatial : Purpose::kTemporal;
  s.phase = j.at("phase").get<int>();
  for (const auto& f : j.at("frames")) s.frames.push_back(frame_ref_from_json(f));
  s.rationale = j.at("rationale").get<std::vector<std::string>>();
  return s;
}

// {scenario_id: {"spatial": [...], "temporal": {"1": [...], ...}}}. Each
// "spatial" entry and each temporal value is a FrameSelection object whose
// "frames" hold FrameRef objects.
inline json selections_to_json(const std::map<std::string, ScenarioSelections>& all) {
  json doc = json::object();
  for (const auto& [id, sel] : all) {
    json spatial = json::array();
    for (const auto& s : sel.spatial) spatial.push_back(to_json(s));
    json temporal = json::object();
    for (const auto& [phase, s] : sel.temporal) temporal[std::to_string(phase)] = to_json(s);
    doc[id] = {{"spatial", spatial}, {"temporal", temporal}};
  }
  return doc;
}

inline std::map<std::string, ScenarioSelections> selections_from_json(const json& doc) {
  std::map<std::string, ScenarioSelections> out;
  try {
    for (const auto& [id, entry] : doc.items()) {
      ScenarioSelections sel;
      for (const auto& s : entry.at("spatial")) sel.spatial.push_back(selection_from_json(s));
      for (const auto& [phase, s] : entry.at("temporal").items())
        sel.temporal.emplace(std::stoi(phase), selection_from_json(s));
      out.emplace(id, std::move(sel));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("selections: ") + e.what());
  }
  return out;
}

}  // namespace ster

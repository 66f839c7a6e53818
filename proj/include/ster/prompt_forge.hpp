#pragma once

// Textual prompt assembly: role-play captioning prompts with hint groups,
// few-shot decomposition prompts, per-frame reference prompts, VQA prompts
// and composition prompts. Wording lives in versioned template assets with
// `{name}` placeholders; this file only binds values.

#include <algorithm>
#include <array>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ster/assets.hpp"
#include "ster/dataset.hpp"
#include "ster/error.hpp"
#include "ster/frame_select.hpp"
#include "ster/visual_prompt.hpp"

namespace ster {

// --- templates ----------------------------------------------------------------

struct PromptTemplate {
  std::string system;
  std::string user;
};

// Template file layout: optional '#' header lines, then "[system]" and
// "[user]" sections. The trailing newline of each section is dropped.
inline PromptTemplate parse_template(std::string_view text, const std::string& name) {
  PromptTemplate t;
  std::string* current = nullptr;
  std::istringstream in{std::string(text)};
  std::string line;
  bool seen_system = false, seen_user = false;
  while (std::getline(in, line)) {
    if (line == "[system]") {
      current = &t.system;
      seen_system = true;
      continue;
    }
    if (line == "[user]") {
      current = &t.user;
      seen_user = true;
      continue;
    }
    if (!current) {
      if (line.empty() || line.front() == '#') continue;
      throw TemplateError(name + ": text before the first section");
    }
    *current += line;
    *current += '\n';
  }
  if (!seen_system || !seen_user) throw TemplateError(name + ": needs [system] and [user] sections");
  for (std::string* s : {&t.system, &t.user})
    if (!s->empty() && s->back() == '\n') s->pop_back();
  return t;
}

using Bindings = std::map<std::string, std::string>;

// Substitutes `{identifier}` placeholders. Bound values are inserted verbatim
// and never rescanned. Braces that do not enclose an identifier pass through.
inline std::string render_template(std::string_view tmpl, const Bindings& bindings,
                                   const std::string& name = "template") {
  std::string out;
  out.reserve(tmpl.size() + 256);
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      std::size_t j = i + 1;
      while (j < tmpl.size() && (std::islower(static_cast<unsigned char>(tmpl[j])) ||
                                 std::isdigit(static_cast<unsigned char>(tmpl[j])) || tmpl[j] == '_'))
        ++j;
      if (j < tmpl.size() && tmpl[j] == '}' && j > i + 1) {
        const std::string key(tmpl.substr(i + 1, j - i - 1));
        const auto it = bindings.find(key);
        if (it == bindings.end()) throw TemplateError(name + ": unbound placeholder {" + key + "}");
        out += it->second;
        i = j + 1;
        continue;
      }
    }
    out.push_back(tmpl[i]);
    ++i;
  }
  return out;
}

class TemplateSet {
 public:
  static inline const std::array<std::string, 6> kNames = {
      "spatial", "temporal", "decomposition", "reference", "vqa", "composition"};

  static TemplateSet defaults() {
    TemplateSet set;
    for (const auto& n : kNames)
      set.templates_[n] = parse_template(assets::get("templates/" + n + ".txt"), n);
    return set;
  }

  // Files named <name>.txt in `dir` override the embedded defaults.
  static TemplateSet load(const fs::path& dir) {
    TemplateSet set = defaults();
    for (const auto& n : kNames) {
      const fs::path p = dir / (n + ".txt");
      if (fs::exists(p)) set.templates_[n] = parse_template(read_text_file(p), p.string());
    }
    return set;
  }

  const PromptTemplate& get(const std::string& name) const {
    const auto it = templates_.find(name);
    if (it == templates_.end()) throw TemplateError("no template named " + name);
    return it->second;
  }

 private:
  std::map<std::string, PromptTemplate> templates_;
};

// --- hint groups -------------------------------------------------------------

enum class HintGroupName { kAppearance, kEnvironment, kAction, kAttention, kLocation };

inline constexpr std::array<HintGroupName, 5> kAllHintGroups = {
    HintGroupName::kAppearance, HintGroupName::kEnvironment, HintGroupName::kAction,
    HintGroupName::kAttention, HintGroupName::kLocation};

inline std::string_view to_string(HintGroupName n) {
  static constexpr std::array<std::string_view, 5> kNames = {"Appearance", "Environment", "Action",
                                                            "Attention", "Location"};
  return kNames[static_cast<std::size_t>(n)];
}

inline std::optional<HintGroupName> parse_hint_group(std::string_view s) {
  for (auto n : kAllHintGroups)
    if (s == to_string(n)) return n;
  return std::nullopt;
}

inline bool is_spatial_group(HintGroupName n) {
  return n == HintGroupName::kAppearance || n == HintGroupName::kEnvironment;
}

struct HintGroup {
  HintGroupName name = HintGroupName::kAppearance;
  std::vector<std::string> attributes;
};

// Attribute lists per group.
class HintCatalog {
 public:
  static HintCatalog defaults() { return from_json(json::parse(assets::get("assets/hint_groups.json"))); }

  static HintCatalog from_json(const json& doc) {
    HintCatalog c;
    const json& groups = doc.contains("groups") ? doc["groups"] : doc;
    for (const auto& [key, attrs] : groups.items()) {
      const auto name = parse_hint_group(key);
      if (!name) throw ParseError("hint groups: unknown group '" + key + "'");
      HintGroup g{*name, attrs.get<std::vector<std::string>>()};
      if (g.attributes.empty()) throw ValidationError("hint group " + key + " has no attributes");
      c.groups_[*name] = std::move(g);
    }
    return c;
  }

  const HintGroup& get(HintGroupName n) const {
    const auto it = groups_.find(n);
    if (it == groups_.end()) throw TemplateError("no attributes for hint group " + std::string(to_string(n)));
    return it->second;
  }

  std::vector<HintGroup> select(const std::vector<HintGroupName>& names) const {
    std::vector<HintGroup> out;
    for (auto n : names) out.push_back(get(n));
    return out;
  }

  std::vector<HintGroup> spatial() const {
    return select({HintGroupName::kAppearance, HintGroupName::kEnvironment});
  }

  std::vector<HintGroup> temporal() const {
    return select({HintGroupName::kAction, HintGroupName::kAttention, HintGroupName::kLocation});
  }

 private:
  std::map<HintGroupName, HintGroup> groups_;
};

// --- bundles ------------------------------------------------------------------

struct PromptBundle {
  std::string system;
  std::string user;
  std::vector<std::string> images;
  std::optional<std::vector<std::string>> references;

  bool operator==(const PromptBundle&) const = default;
};

inline constexpr std::size_t kMaxImagesPerPrompt = 4;

inline json to_json(const PromptBundle& b) {
  json j = {{"system", b.system}, {"user", b.user}, {"images", b.images}};
  if (b.references) j["references"] = *b.references;
  return j;
}

inline PromptBundle bundle_from_json(const json& j) {
  PromptBundle b;
  b.system = j.at("system").get<std::string>();
  b.user = j.at("user").get<std::string>();
  b.images = j.at("images").get<std::vector<std::string>>();
  if (j.contains("references")) b.references = j["references"].get<std::vector<std::string>>();
  return b;
}

enum class DecompositionTarget { kSpatial, kTemporal };

struct FewShotExample {
  std::string caption;
  std::string spatial;
  std::string temporal;
};

inline std::vector<FewShotExample> default_few_shots() {
  const json doc = json::parse(assets::get("assets/decomposition_fewshot.json"));
  std::vector<FewShotExample> out;
  for (const auto& e : doc.at("exemplars"))
    out.push_back({e.at("caption").get<std::string>(), e.at("spatial").get<std::string>(),
                   e.at("temporal").get<std::string>()});
  return out;
}

// Maps a selected frame to the image reference placed in a bundle.
using ImageLocator = std::function<std::string(const std::string& scenario_id, const FrameRef&)>;

inline ImageLocator overlay_locator(std::string prefix = "render/") {
  return [prefix](const std::string& scenario_id, const FrameRef& f) {
    return prefix + overlay_file_name(scenario_id, f);
  };
}

namespace detail {

inline std::string one_line(std::string_view s) {
  std::string out(s);
  for (char& c : out)
    if (c == '\n' || c == '\r') c = ' ';
  return trim(out);
}

inline std::string hint_block(std::vector<HintGroup> hints) {
  if (hints.empty()) return {};
  std::stable_sort(hints.begin(), hints.end(),
                   [](const HintGroup& a, const HintGroup& b) { return a.name < b.name; });
  std::string out = "Pay attention to the following attributes:\n";
  for (const auto& g : hints) {
    out += std::string(to_string(g.name)) + ":\n";
    for (const auto& a : g.attributes) out += "- " + a + "\n";
  }
  return out + "\n";
}

inline std::string reference_block(const std::optional<std::vector<std::string>>& refs) {
  if (!refs || refs->empty()) return {};
  std::string out;
  for (std::size_t i = 0; i < refs->size(); ++i)
    out += "Hint for image " + std::to_string(i + 1) + ": " + one_line((*refs)[i]) + "\n";
  return out + "\n";
}

inline void check_hints(const std::vector<HintGroup>& hints, bool spatial) {
  std::set<HintGroupName> seen;
  for (const auto& g : hints) {
    if (is_spatial_group(g.name) != spatial)
      throw TemplateError(std::string("hint group ") + std::string(to_string(g.name)) +
                          (spatial ? " is not allowed in spatial prompts"
                                   : " is not allowed in temporal prompts"));
    if (!seen.insert(g.name).second)
      throw TemplateError("hint group " + std::string(to_string(g.name)) + " given twice");
    if (g.attributes.empty())
      throw TemplateError("hint group " + std::string(to_string(g.name)) + " has no attributes");
  }
}

inline void check_references(const std::optional<std::vector<std::string>>& refs,
                             std::size_t n_images) {
  if (refs && refs->size() != n_images)
    throw TemplateError("got " + std::to_string(refs->size()) + " references for " +
                        std::to_string(n_images) + " images");
}

inline void check_image_count(std::size_t n) {
  if (n > kMaxImagesPerPrompt)
    throw TemplateError("a prompt carries at most 4 images, got " + std::to_string(n));
}

}  // namespace detail

class PromptForge {
 public:
  explicit PromptForge(TemplateSet templates = TemplateSet::defaults(),
                       ImageLocator locator = overlay_locator())
      : templates_(std::move(templates)), locator_(std::move(locator)) {}

  // Images ordered by phase 1..4; one line per image names its phase.
  PromptBundle build_spatial_prompt(const ScenarioRecord& scenario, Role subject,
                                    const std::vector<FrameSelection>& selection,
                                    const std::vector<HintGroup>& hints,
                                    const std::optional<std::vector<std::string>>& references = {}) const {
    detail::check_hints(hints, true);
    std::vector<const FrameSelection*> ordered;
    for (const auto& s : selection) {
      if (s.purpose != Purpose::kSpatial) throw TemplateError("spatial prompt given a temporal selection");
      ordered.push_back(&s);
    }
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const FrameSelection* a, const FrameSelection* b) { return a->phase < b->phase; });
    PromptBundle b;
    std::string image_block;
    for (const auto* s : ordered)
      for (const auto& f : s->frames) {
        b.images.push_back(locator_(scenario.scenario_id, f));
        image_block += "Image " + std::to_string(b.images.size()) + ": phase " +
                       std::to_string(s->phase) + " (" +
                       std::string(to_string(label_for_phase(s->phase))) + ")\n";
      }
    detail::check_image_count(b.images.size());
    detail::check_references(references, b.images.size());
    b.references = references;
    const auto& t = templates_.get("spatial");
    const Bindings bind = {{"subject", std::string(to_string(subject))},
                           {"image_count", std::to_string(b.images.size())},
                           {"image_block", image_block},
                           {"reference_block", detail::reference_block(references)},
                           {"hint_block", detail::hint_block(hints)}};
    b.system = render_template(t.system, bind, "spatial");
    b.user = render_template(t.user, bind, "spatial");
    return b;
  }

  PromptBundle build_temporal_prompt(const ScenarioRecord& scenario, int phase, Role subject,
                                     const FrameSelection& selection,
                                     const std::vector<HintGroup>& hints,
                                     const std::optional<std::vector<std::string>>& references = {}) const {
    detail::check_hints(hints, false);
    if (selection.purpose != Purpose::kTemporal || selection.phase != phase)
      throw TemplateError("temporal prompt for phase " + std::to_string(phase) +
                          " given a selection for another phase or purpose");
    const std::string label(to_string(label_for_phase(phase)));
    PromptBundle b;
    std::string image_block;
    for (const auto& f : selection.frames) {
      b.images.push_back(locator_(scenario.scenario_id, f));
      image_block += "Image " + std::to_string(b.images.size()) + ": " + label + " phase, camera " +
                     f.video_id + ", frame " + std::to_string(f.frame_index) + "\n";
    }
    detail::check_image_count(b.images.size());
    detail::check_references(references, b.images.size());
    b.references = references;
    const auto& t = templates_.get("temporal");
    const Bindings bind = {{"subject", std::string(to_string(subject))},
                           {"phase_number", std::to_string(phase)},
                           {"phase_label", label},
                           {"image_count", std::to_string(b.images.size())},
                           {"image_block", image_block},
                           {"reference_block", detail::reference_block(references)},
                           {"hint_block", detail::hint_block(hints)}};
    b.system = render_template(t.system, bind, "temporal");
    b.user = render_template(t.user, bind, "temporal");
    return b;
  }

  // Each exemplar appears as (caption -> target segment); the other half of
  // the exemplar is never shown.
  PromptBundle build_decomposition_prompt(const std::string& caption, DecompositionTarget target,
                                          const std::vector<FewShotExample>& few_shots) const {
    if (few_shots.empty()) throw TemplateError("decomposition prompt needs at least one exemplar");
    const bool spatial = target == DecompositionTarget::kSpatial;
    const std::string label = spatial ? "Spatial-invariant" : "Temporal-variant";
    std::string examples;
    for (const auto& e : few_shots)
      examples += "Caption: " + detail::one_line(e.caption) + "\n" + label + ": " +
                  detail::one_line(spatial ? e.spatial : e.temporal) + "\n\n";
    const auto& t = templates_.get("decomposition");
    const Bindings bind = {
        {"target_name", spatial ? "spatial-invariant" : "temporal-variant"},
        {"target_definition",
         spatial ? "Spatial-invariant information stays the same throughout the scenario: the "
                   "appearance of people and vehicles, the weather, the lighting, the road and the "
                   "surroundings."
                 : "Temporal-variant information changes over time: actions, positions, line of "
                   "sight, awareness and distances."},
        {"target_label", label},
        {"examples_block", examples},
        {"caption", detail::one_line(caption)}};
    PromptBundle b;
    b.system = render_template(t.system, bind, "decomposition");
    b.user = render_template(t.user, bind, "decomposition");
    return b;
  }

  PromptBundle build_reference_prompt(const std::string& scenario_id, const FrameRef& frame) const {
    const auto& t = templates_.get("reference");
    PromptBundle b;
    b.system = render_template(t.system, {}, "reference");
    b.user = render_template(t.user, {}, "reference");
    b.images.push_back(locator_(scenario_id, frame));
    return b;
  }

  PromptBundle build_vqa_prompt(const ScenarioRecord& scenario, const VqaItem& item,
                                const FrameSelection& selection) const {
    PromptBundle b;
    std::string image_block;
    for (const auto& f : selection.frames) {
      b.images.push_back(locator_(scenario.scenario_id, f));
      image_block += "Image " + std::to_string(b.images.size()) + ": " +
                     std::string(to_string(label_for_phase(item.phase))) + " phase\n";
    }
    detail::check_image_count(b.images.size());
    std::string choices;
    for (std::size_t i = 0; i < item.choices.size(); ++i)
      choices += choice_key(i) + ") " + detail::one_line(item.choices[i]) + "\n";
    const auto& t = templates_.get("vqa");
    const Bindings bind = {{"image_block", image_block},
                           {"question", detail::one_line(item.question)},
                           {"choices_block", choices}};
    b.system = render_template(t.system, bind, "vqa");
    b.user = render_template(t.user, bind, "vqa");
    return b;
  }

  // Text-only: one labeled section for the spatial part, then one per phase.
  PromptBundle build_composition_prompt(Role subject, const std::string& spatial_text,
                                        const std::map<int, std::string>& temporal_texts) const {
    if (trim(spatial_text).empty()) throw TemplateError("composition prompt needs spatial text");
    std::string sections = "[Spatial-invariant]\n" + detail::one_line(spatial_text) + "\n\n";
    for (const auto& [phase, text] : temporal_texts)
      sections += "[Phase " + std::to_string(phase) + " - " +
                  std::string(to_string(label_for_phase(phase))) + "]\n" + detail::one_line(text) +
                  "\n\n";
    const auto& t = templates_.get("composition");
    const Bindings bind = {{"subject", std::string(to_string(subject))}, {"sections_block", sections}};
    PromptBundle b;
    b.system = render_template(t.system, bind, "composition");
    b.user = render_template(t.user, bind, "composition");
    return b;
  }

  const ImageLocator& locator() const { return locator_; }

 private:
  TemplateSet templates_;
  ImageLocator locator_;
};

}  // namespace ster

#pragma once

// Caption decomposition into spatial-invariant and temporal-variant segments,
// decomposition quality checks, and training-manifest export.

#include <algorithm>
#include <array>
#include <sstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "ster/assets.hpp"
#include "ster/dataset.hpp"
#include "ster/error.hpp"
#include "ster/frame_select.hpp"
#include "ster/io.hpp"
#include "ster/llm_gateway.hpp"
#include "ster/prompt_forge.hpp"
#include "ster/text.hpp"

namespace ster {

enum class DecompositionMethod { kLlm, kRule };

inline std::string_view to_string(DecompositionMethod m) {
  return m == DecompositionMethod::kLlm ? "llm" : "rule";
}

struct DecomposedCaption {
  std::string original;
  std::string spatial;
  std::string temporal;
  DecompositionMethod method = DecompositionMethod::kRule;
  double coverage = 0;
  double overlap = 0;

  bool operator==(const DecomposedCaption&) const = default;
};

class EmptySegment : public Error {
 public:
  EmptySegment(DecompositionTarget which, DecomposedCaption partial)
      : Error(std::string("EmptySegment: model returned a blank ") +
                  (which == DecompositionTarget::kSpatial ? "spatial" : "temporal") + " segment",
              ErrorCategory::kGateway),
        which_(which),
        partial_(std::move(partial)) {}

  DecompositionTarget which() const { return which_; }
  const DecomposedCaption& partial() const { return partial_; }

 private:
  DecompositionTarget which_;
  DecomposedCaption partial_;
};

// Text placed on a side that received no sentences from the rule splitter.
inline constexpr const char* kNoDetailSentence = "No further details were described.";

// --- word lists ---------------------------------------------------------------

inline std::set<std::string> word_set(std::string_view content) {
  const auto words = text::parse_word_list(content);
  return {words.begin(), words.end()};
}

inline const std::set<std::string>& default_stopwords() {
  static const std::set<std::string> kWords = word_set(assets::get("assets/stopwords.txt"));
  return kWords;
}

struct Lexicon {
  std::set<std::string> spatial;
  std::set<std::string> temporal;

  static Lexicon defaults() {
    return {word_set(assets::get("assets/lexicon_spatial.txt")),
            word_set(assets::get("assets/lexicon_temporal.txt"))};
  }
};

inline std::set<std::string> content_tokens(std::string_view s,
                                            const std::set<std::string>& stopwords = default_stopwords()) {
  std::set<std::string> out;
  for (auto& t : text::tokenize(s))
    if (!stopwords.count(t)) out.insert(std::move(t));
  return out;
}

// --- validation ---------------------------------------------------------------

struct DecompositionQuality {
  double coverage = 0;
  double overlap = 0;
};

inline DecompositionQuality validate_decomposition(
    const DecomposedCaption& d, const std::set<std::string>& stopwords = default_stopwords()) {
  const auto orig = content_tokens(d.original, stopwords);
  const auto sp = content_tokens(d.spatial, stopwords);
  const auto te = content_tokens(d.temporal, stopwords);
  DecompositionQuality q;
  if (orig.empty()) {
    q.coverage = 1.0;
  } else {
    std::size_t covered = 0;
    for (const auto& t : orig)
      if (sp.count(t) || te.count(t)) ++covered;
    q.coverage = static_cast<double>(covered) / static_cast<double>(orig.size());
  }
  const std::size_t denom = std::min(sp.size(), te.size());
  if (denom > 0) {
    std::size_t shared = 0;
    for (const auto& t : sp) shared += te.count(t);
    q.overlap = static_cast<double>(shared) / static_cast<double>(denom);
  }
  return q;
}

struct AcceptancePolicy {
  double min_coverage = 0.90;
  double max_overlap = 0.30;

  bool accepts(const DecomposedCaption& d) const {
    return d.coverage >= min_coverage && d.overlap <= max_overlap;
  }
};

inline DecomposedCaption with_quality(DecomposedCaption d) {
  const auto q = validate_decomposition(d);
  d.coverage = q.coverage;
  d.overlap = q.overlap;
  return d;
}

// --- rule decomposer ----------------------------------------------------------

struct SentenceAssignment {
  std::string sentence;
  int spatial_hits = 0;
  int temporal_hits = 0;
  bool spatial = true;
};

inline std::vector<SentenceAssignment> assign_sentences(const std::string& caption, const Lexicon& lexicon) {
  std::vector<SentenceAssignment> out;
  for (auto& s : text::split_sentences(caption)) {
    SentenceAssignment a;
    for (const auto& t : text::tokenize(s)) {
      a.spatial_hits += static_cast<int>(lexicon.spatial.count(t));
      a.temporal_hits += static_cast<int>(lexicon.temporal.count(t));
    }
    a.spatial = a.spatial_hits >= a.temporal_hits;
    a.sentence = std::move(s);
    out.push_back(std::move(a));
  }
  return out;
}

inline std::string join_sentences(const std::vector<std::string>& sentences) {
  std::string out;
  for (const auto& s : sentences) {
    if (!out.empty()) out += ' ';
    out += s;
  }
  return out;
}

inline DecomposedCaption rule_decompose(const std::string& caption, const Lexicon& lexicon = Lexicon::defaults()) {
  if (trim(caption).empty()) throw ValidationError("rule_decompose needs a nonempty caption");
  std::vector<std::string> sp, te;
  for (auto& a : assign_sentences(caption, lexicon)) (a.spatial ? sp : te).push_back(std::move(a.sentence));
  DecomposedCaption d;
  d.original = caption;
  d.spatial = sp.empty() ? kNoDetailSentence : join_sentences(sp);
  d.temporal = te.empty() ? kNoDetailSentence : join_sentences(te);
  d.method = DecompositionMethod::kRule;
  return with_quality(std::move(d));
}

// --- LLM decomposer -----------------------------------------------------------

struct DecomposeOptions {
  std::string model = "decomposer";
  double temperature = 0.0;
  int max_tokens = 512;
  std::vector<FewShotExample> few_shots = default_few_shots();
};

inline std::pair<ChatRequest, ChatRequest> decomposition_requests(const std::string& caption,
                                                                  const PromptForge& forge,
                                                                  const DecomposeOptions& opts) {
  const auto make = [&](DecompositionTarget t) {
    return to_chat_request(forge.build_decomposition_prompt(caption, t, opts.few_shots), opts.model,
                           opts.temperature, opts.max_tokens);
  };
  return {make(DecompositionTarget::kSpatial), make(DecompositionTarget::kTemporal)};
}

inline DecomposedCaption assemble_decomposition(const std::string& caption, const std::string& spatial_reply,
                                                const std::string& temporal_reply) {
  DecomposedCaption d;
  d.original = caption;
  d.spatial = trim(spatial_reply);
  d.temporal = trim(temporal_reply);
  d.method = DecompositionMethod::kLlm;
  d = with_quality(std::move(d));
  if (d.spatial.empty()) throw EmptySegment(DecompositionTarget::kSpatial, d);
  if (d.temporal.empty()) throw EmptySegment(DecompositionTarget::kTemporal, d);
  return d;
}

inline DecomposedCaption decompose_caption(const std::string& caption, Gateway& gateway, const PromptForge& forge,
                                           const DecomposeOptions& opts = {}) {
  if (trim(caption).empty()) throw ValidationError("decompose_caption needs a nonempty caption");
  const auto [sreq, treq] = decomposition_requests(caption, forge, opts);
  const auto sres = gateway.complete(sreq);
  const auto tres = gateway.complete(treq);
  return assemble_decomposition(caption, sres.text, tres.text);
}

// Blank LLM sides are filled from the rule decomposer; a decomposition
// failing the acceptance policy is replaced by the rule result entirely.
inline DecomposedCaption settle_decomposition(const std::string& caption, const std::string& spatial_reply,
                                              const std::string& temporal_reply, const Lexicon& lexicon,
                                              const AcceptancePolicy& policy) {
  DecomposedCaption d;
  try {
    d = assemble_decomposition(caption, spatial_reply, temporal_reply);
  } catch (const EmptySegment& e) {
    const auto rule = rule_decompose(caption, lexicon);
    d = e.partial();
    if (d.spatial.empty()) d.spatial = rule.spatial;
    if (d.temporal.empty()) d.temporal = rule.temporal;
    d = with_quality(std::move(d));
  }
  if (!policy.accepts(d)) return rule_decompose(caption, lexicon);
  return d;
}

// --- keyed collections ----------------------------------------------------------

struct CaptionKey {
  std::string scenario_id;
  int phase = 1;
  Role subject = Role::kPedestrian;

  auto operator<=>(const CaptionKey&) const = default;
  bool operator==(const CaptionKey&) const = default;
};

using DecompositionMap = std::map<CaptionKey, DecomposedCaption>;

inline json to_json(const DecomposedCaption& d) {
  return {{"original", d.original}, {"spatial", d.spatial},   {"temporal", d.temporal},
          {"method", to_string(d.method)}, {"coverage", d.coverage}, {"overlap", d.overlap}};
}

inline DecomposedCaption decomposition_from_json(const json& j) {
  DecomposedCaption d;
  d.original = j.at("original").get<std::string>();
  d.spatial = j.at("spatial").get<std::string>();
  d.temporal = j.at("temporal").get<std::string>();
  d.method = j.at("method").get<std::string>() == "llm" ? DecompositionMethod::kLlm : DecompositionMethod::kRule;
  d.coverage = j.at("coverage").get<double>();
  d.overlap = j.at("overlap").get<double>();
  return d;
}

inline json decompositions_to_json(const DecompositionMap& m) {
  json rows = json::array();
  for (const auto& [k, d] : m) {
    json row = to_json(d);
    row["scenario_id"] = k.scenario_id;
    row["phase"] = k.phase;
    row["subject"] = to_string(k.subject);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline DecompositionMap decompositions_from_json(const json& rows) {
  DecompositionMap m;
  try {
    for (const auto& row : rows) {
      const auto subject = parse_role(row.at("subject").get<std::string>());
      if (!subject) throw ParseError("decompositions: unknown subject");
      m[{row.at("scenario_id").get<std::string>(), row.at("phase").get<int>(), *subject}] =
          decomposition_from_json(row);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("decompositions: ") + e.what());
  }
  return m;
}

// Spatial segments shared across phases are requested once per
// (scenario, subject) with all phase captions joined in phase order.
inline std::string joint_caption(const ScenarioRecord& s, Role subject) {
  std::vector<const CaptionRecord*> caps;
  for (const auto& c : s.captions)
    if (c.subject == subject) caps.push_back(&c);
  std::stable_sort(caps.begin(), caps.end(),
                   [](const CaptionRecord* a, const CaptionRecord* b) { return a->phase < b->phase; });
  std::vector<std::string> parts;
  for (const auto* c : caps) parts.push_back(trim(c->text));
  return join_sentences(parts);
}

struct BatchDecomposeOptions {
  DecomposeOptions decompose;
  AcceptancePolicy policy;
  bool joint_spatial = false;
};

// Decomposes every caption of the manifest through one complete_batch call.
// Gateway failures propagate; blank or rejected LLM output falls back to the
// rule decomposer.
inline DecompositionMap decompose_manifest(const Manifest& manifest, Gateway& gateway, const PromptForge& forge,
                                           const Lexicon& lexicon, const BatchDecomposeOptions& opts = {}) {
  std::vector<CaptionKey> keys;
  std::vector<const CaptionRecord*> records;
  std::vector<ChatRequest> requests;
  std::map<std::pair<std::string, Role>, std::size_t> joint_index;
  for (const auto& s : manifest.scenarios)
    for (const auto& c : s.captions) {
      keys.push_back({s.scenario_id, c.phase, c.subject});
      records.push_back(&c);
      auto [sreq, treq] = decomposition_requests(c.text, forge, opts.decompose);
      requests.push_back(std::move(sreq));
      requests.push_back(std::move(treq));
    }
  if (opts.joint_spatial)
    for (const auto& s : manifest.scenarios)
      for (Role r : {Role::kPedestrian, Role::kVehicle}) {
        const std::string joined = joint_caption(s, r);
        if (joined.empty()) continue;
        joint_index[{s.scenario_id, r}] = requests.size();
        requests.push_back(decomposition_requests(joined, forge, opts.decompose).first);
      }

  auto results = gateway.complete_batch(requests);
  for (auto& r : results)
    if (!r.ok()) std::rethrow_exception(r.error);

  DecompositionMap out;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    std::string spatial_reply = results[2 * i].result->text;
    if (opts.joint_spatial) spatial_reply = results[joint_index.at({keys[i].scenario_id, keys[i].subject})].result->text;
    out[keys[i]] = settle_decomposition(records[i]->text, spatial_reply, results[2 * i + 1].result->text,
                                        lexicon, opts.policy);
  }
  return out;
}

// --- training manifests ---------------------------------------------------------

enum class TrainingTask { kSpatial, kTemporal, kComposition, kVqa };

inline std::string_view to_string(TrainingTask t) {
  static constexpr std::array<std::string_view, 4> kNames = {"spatial", "temporal", "composition", "vqa"};
  return kNames[static_cast<std::size_t>(t)];
}

struct TrainingExample {
  TrainingTask task = TrainingTask::kSpatial;
  PromptBundle prompt;
  std::string target;
};

inline json to_json(const TrainingExample& e) {
  json prompt = {{"system", e.prompt.system}, {"user", e.prompt.user}};
  if (e.prompt.references) prompt["references"] = *e.prompt.references;
  return {{"task", to_string(e.task)}, {"images", e.prompt.images}, {"prompt", prompt}, {"target", e.target}};
}

struct TrainingSets {
  std::vector<TrainingExample> spatial, temporal, composition, vqa;
};

struct ExportOptions {
  std::vector<HintGroup> spatial_hints;
  std::vector<HintGroup> temporal_hints;
};

namespace detail {

inline const DecomposedCaption& require_decomposition(const DecompositionMap& m, const CaptionKey& k) {
  const auto it = m.find(k);
  if (it == m.end())
    throw MissingDecomposition("scenario " + k.scenario_id + " phase " + std::to_string(k.phase) + " (" +
                               std::string(to_string(k.subject)) + ") has no decomposition");
  return it->second;
}

}  // namespace detail

inline TrainingSets build_training_sets(const Manifest& manifest, const DecompositionMap& decompositions,
                                        const std::map<std::string, ScenarioSelections>& selections,
                                        const PromptForge& forge, const ExportOptions& opts = {}) {
  TrainingSets out;
  for (const auto& s : manifest.scenarios) {
    const auto sel_it = selections.find(s.scenario_id);
    if (sel_it == selections.end())
      throw ValidationError("scenario " + s.scenario_id + " has no frame selection");
    const ScenarioSelections& sel = sel_it->second;

    for (Role subject : {Role::kPedestrian, Role::kVehicle}) {
      std::vector<const CaptionRecord*> caps;
      for (const auto& c : s.captions)
        if (c.subject == subject) caps.push_back(&c);
      if (caps.empty()) continue;
      std::stable_sort(caps.begin(), caps.end(),
                       [](const CaptionRecord* a, const CaptionRecord* b) { return a->phase < b->phase; });

      // Spatial target: distinct spatial segments in phase order.
      std::vector<std::string> spatial_parts;
      std::map<int, std::string> temporal_parts;
      for (const auto* c : caps) {
        const auto& d = detail::require_decomposition(decompositions, {s.scenario_id, c->phase, subject});
        if (std::find(spatial_parts.begin(), spatial_parts.end(), d.spatial) == spatial_parts.end())
          spatial_parts.push_back(d.spatial);
        temporal_parts[c->phase] = d.temporal;
      }
      const std::string spatial_target = join_sentences(spatial_parts);
      if (!sel.spatial.empty())
        out.spatial.push_back({TrainingTask::kSpatial,
                               forge.build_spatial_prompt(s, subject, sel.spatial, opts.spatial_hints),
                               spatial_target});

      for (const auto* c : caps) {
        const auto t = sel.temporal.find(c->phase);
        if (t == sel.temporal.end())
          throw ValidationError("scenario " + s.scenario_id + " has no temporal selection for phase " +
                                std::to_string(c->phase));
        out.temporal.push_back({TrainingTask::kTemporal,
                                forge.build_temporal_prompt(s, c->phase, subject, t->second, opts.temporal_hints),
                                temporal_parts.at(c->phase)});
        const auto& d = decompositions.at({s.scenario_id, c->phase, subject});
        out.composition.push_back({TrainingTask::kComposition,
                                   forge.build_composition_prompt(subject, d.spatial, {{c->phase, d.temporal}}),
                                   c->text});
      }
    }

    for (const auto& q : s.vqa) {
      const auto t = sel.temporal.find(q.phase);
      if (t == sel.temporal.end())
        throw ValidationError("scenario " + s.scenario_id + " has no temporal selection for phase " +
                              std::to_string(q.phase));
      out.vqa.push_back({TrainingTask::kVqa, forge.build_vqa_prompt(s, q, t->second), q.correct});
    }
  }
  return out;
}

inline std::string to_jsonl(const std::vector<TrainingExample>& rows) {
  std::string out;
  for (const auto& r : rows) out += canonical_dump(to_json(r)) + "\n";
  return out;
}

inline std::string training_manifest_readme(const TrainingSets& sets) {
  std::ostringstream md;
  md << "# Training data\n\n"
     << "| file | rows | stage |\n|---|---|---|\n"
     << "| spatial.jsonl | " << sets.spatial.size() << " | 1 |\n"
     << "| temporal.jsonl | " << sets.temporal.size() << " | 1 |\n"
     << "| composition.jsonl | " << sets.composition.size() << " | 1 |\n"
     << "| vqa.jsonl | " << sets.vqa.size() << " | 2 |\n\n"
     << "Stage 1 trains the spatial model on spatial.jsonl and the temporal model on temporal.jsonl, "
        "then composition.jsonl. Stage 2 continues from the stage-1 weights on vqa.jsonl.\n\n"
     << "Each row is a JSON object with the keys task, images, prompt and target. Image paths are "
        "relative to the run directory.\n";
  return md.str();
}

inline std::vector<fs::path> export_training_manifests(const Manifest& manifest,
                                                       const DecompositionMap& decompositions,
                                                       const std::map<std::string, ScenarioSelections>& selections,
                                                       const fs::path& out_dir,
                                                       const PromptForge& forge = PromptForge(),
                                                       const ExportOptions& opts = {}) {
  const TrainingSets sets = build_training_sets(manifest, decompositions, selections, forge, opts);
  fs::create_directories(out_dir);
  const std::vector<std::pair<std::string, std::string>> files = {
      {"spatial.jsonl", to_jsonl(sets.spatial)},
      {"temporal.jsonl", to_jsonl(sets.temporal)},
      {"composition.jsonl", to_jsonl(sets.composition)},
      {"vqa.jsonl", to_jsonl(sets.vqa)},
      {"MANIFEST.md", training_manifest_readme(sets)}};
  std::vector<fs::path> written;
  for (const auto& [name, content] : files) {
    write_file_atomic(out_dir / name, content);
    written.push_back(out_dir / name);
  }
  return written;
}

}  // namespace ster

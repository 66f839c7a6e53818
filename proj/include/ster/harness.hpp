#pragma once

// Pipeline orchestration: one JSON config, a fixed stage DAG whose outputs are
// plain files under {output_dir}/{config_hash}/, run records and reports.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <ctime>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ster/adapters.hpp"
#include "ster/dataset.hpp"
#include "ster/decompose.hpp"
#include "ster/error.hpp"
#include "ster/frame_select.hpp"
#include "ster/io.hpp"
#include "ster/llm_gateway.hpp"
#include "ster/metrics.hpp"
#include "ster/prompt_forge.hpp"
#include "ster/visual_prompt.hpp"

namespace ster::harness {

// --- stage graph ------------------------------------------------------------------

enum class Stage { kIngest, kSelect, kRender, kDecompose, kInfer, kEvaluate, kScore, kExportTrain };

inline constexpr std::array<Stage, 8> kAllStages = {Stage::kIngest, Stage::kSelect,   Stage::kRender,
                                                    Stage::kDecompose, Stage::kInfer, Stage::kEvaluate,
                                                    Stage::kScore,  Stage::kExportTrain};

// Stages executed by a full run; export-train is requested separately.
inline constexpr std::array<Stage, 7> kPipelineStages = {Stage::kIngest,    Stage::kSelect, Stage::kRender,
                                                         Stage::kDecompose, Stage::kInfer,  Stage::kEvaluate,
                                                         Stage::kScore};

inline std::string_view to_string(Stage s) {
  static constexpr std::array<std::string_view, 8> kNames = {"ingest", "select",   "render", "decompose",
                                                             "infer",  "evaluate", "score",  "export-train"};
  return kNames[static_cast<std::size_t>(s)];
}

inline std::optional<Stage> parse_stage(std::string_view s) {
  for (Stage st : kAllStages)
    if (to_string(st) == s) return st;
  return std::nullopt;
}

struct StageSpec {
  Stage stage;
  std::vector<Stage> deps;
  std::vector<std::string> outputs;  // relative to the run directory
};

inline void check_acyclic(const std::vector<StageSpec>& graph) {
  std::map<Stage, const StageSpec*> by_stage;
  for (const auto& s : graph) by_stage[s.stage] = &s;
  std::map<Stage, int> state;  // 0 unvisited, 1 on stack, 2 done
  std::function<void(Stage)> visit = [&](Stage s) {
    if (state[s] == 2) return;
    if (state[s] == 1) throw Error("stage graph has a cycle through " + std::string(to_string(s)));
    state[s] = 1;
    const auto it = by_stage.find(s);
    if (it == by_stage.end()) throw Error("stage graph has no entry for " + std::string(to_string(s)));
    for (Stage d : it->second->deps) visit(d);
    state[s] = 2;
  };
  for (const auto& s : graph) visit(s.stage);
}

inline const std::vector<StageSpec>& stage_graph() {
  static const std::vector<StageSpec> kGraph = [] {
    std::vector<StageSpec> g = {
        {Stage::kIngest, {}, {"manifest.json"}},
        {Stage::kSelect, {Stage::kIngest}, {"selections.json"}},
        {Stage::kRender, {Stage::kSelect}, {"render/index.json"}},
        {Stage::kDecompose, {Stage::kSelect}, {"decompositions.json"}},
        {Stage::kInfer,
         {Stage::kRender, Stage::kDecompose},
         {"inference/references.json", "inference/captions.jsonl", "inference/vqa.jsonl"}},
        {Stage::kEvaluate, {Stage::kInfer}, {"metrics.json", "report.md"}},
        {Stage::kScore, {Stage::kEvaluate}, {"score.json"}},
        {Stage::kExportTrain,
         {Stage::kRender, Stage::kDecompose},
         {"train/spatial.jsonl", "train/temporal.jsonl", "train/composition.jsonl", "train/vqa.jsonl",
          "train/MANIFEST.md"}},
    };
    check_acyclic(g);
    return g;
  }();
  return kGraph;
}

inline const StageSpec& stage_spec(Stage s) {
  for (const auto& spec : stage_graph())
    if (spec.stage == s) return spec;
  throw Error("unknown stage");
}

// --- configuration ------------------------------------------------------------------

struct SourceSpec {
  fs::path path;
  Source source = Source::kWTS;
};

struct ModelNames {
  std::string decomposer = "decomposer";
  std::string reference = "reference-vlm";
  std::string spatial = "spatial-captioner";
  std::string temporal = "temporal-captioner";
  std::string composer = "composer";
  std::string vqa = "vqa";
};

struct PromptToggles {
  bool visual = true;
  bool references = true;
  std::vector<HintGroupName> hints = {kAllHintGroups.begin(), kAllHintGroups.end()};
};

struct PipelineConfig {
  fs::path manifest_path;
  std::vector<SourceSpec> sources;
  fs::path output_dir;
  GatewayConfig gateway;
  int k = 3;
  RenderOptions render;
  PromptToggles prompts;
  ModelNames models;
  bool joint_spatial = false;
  AcceptancePolicy policy;
  metrics::ScoreWeights weights;
  std::vector<std::string> subsets = {"WTS", "BDD"};
  int max_tokens = 512;

  // Directory relative paths resolve against (the config file's directory).
  fs::path base_dir;

  fs::path resolve(const fs::path& p) const {
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  }
};

inline json to_json(const PipelineConfig& c) {
  json sources = json::array();
  for (const auto& s : c.sources) sources.push_back({{"path", s.path.generic_string()}, {"source", to_string(s.source)}});
  json hints = json::array();
  for (auto h : c.prompts.hints) hints.push_back(to_string(h));
  json j = {
      {"sources", sources},
      {"output_dir", c.output_dir.generic_string()},
      {"gateway", ster::to_json(c.gateway)},
      {"selection", {{"k", c.k}}},
      {"render",
       {{"stroke", c.render.stroke},
        {"gaze_length", c.render.gaze_length},
        {"draw_gaze", c.render.draw_gaze},
        {"palette", ster::to_json(c.render.palette)}}},
      {"prompts", {{"visual", c.prompts.visual}, {"references", c.prompts.references}, {"hints", hints}}},
      {"models",
       {{"decomposer", c.models.decomposer},
        {"reference", c.models.reference},
        {"spatial", c.models.spatial},
        {"temporal", c.models.temporal},
        {"composer", c.models.composer},
        {"vqa", c.models.vqa}}},
      {"decompose",
       {{"joint_spatial", c.joint_spatial},
        {"min_coverage", c.policy.min_coverage},
        {"max_overlap", c.policy.max_overlap}}},
      {"weights",
       {{"bleu4", c.weights.bleu4},
        {"meteor", c.weights.meteor},
        {"rouge_l", c.weights.rouge_l},
        {"cider", c.weights.cider}}},
      {"subsets", c.subsets},
      {"max_tokens", c.max_tokens},
  };
  if (!c.manifest_path.empty()) j["manifest_path"] = c.manifest_path.generic_string();
  return j;
}

namespace detail {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j[key].get<T>();
}

}  // namespace detail

inline void validate_config(const PipelineConfig& c) {
  if (c.output_dir.empty()) throw ValidationError("config: output_dir is required");
  if (c.manifest_path.empty() == c.sources.empty())
    throw ValidationError("config: give exactly one of manifest_path or sources");
  if (c.k < 1) throw ValidationError("config: selection.k must be >= 1");
  if (c.render.stroke < 1) throw ValidationError("config: render.stroke must be >= 1");
  if (!(c.render.gaze_length > 0)) throw ValidationError("config: render.gaze_length must be > 0");
  if (c.subsets.empty()) throw ValidationError("config: subsets must not be empty");
  for (const auto& s : c.subsets)
    if (!parse_source(s)) throw ValidationError("config: unknown subset label '" + s + "'");
  if (c.max_tokens < 1) throw ValidationError("config: max_tokens must be >= 1");
}

inline PipelineConfig config_from_json(const json& j, const fs::path& base_dir = {}) {
  if (!j.is_object()) throw ParseError("config: top level must be an object");
  PipelineConfig c;
  c.base_dir = base_dir;
  try {
    if (j.contains("manifest_path")) c.manifest_path = j["manifest_path"].get<std::string>();
    if (j.contains("sources"))
      for (const auto& s : j["sources"]) {
        const auto src = parse_source(s.at("source").get<std::string>());
        if (!src) throw ValidationError("config: sources[].source must be WTS or BDD");
        c.sources.push_back({s.at("path").get<std::string>(), *src});
      }
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
    if (j.contains("gateway")) c.gateway = gateway_config_from_json(j["gateway"]);
    if (j.contains("selection")) detail::read_opt(j["selection"], "k", c.k);
    if (j.contains("render")) {
      const json& r = j["render"];
      detail::read_opt(r, "stroke", c.render.stroke);
      detail::read_opt(r, "gaze_length", c.render.gaze_length);
      detail::read_opt(r, "draw_gaze", c.render.draw_gaze);
      if (r.contains("palette")) c.render.palette = palette_from_json(r["palette"]);
    }
    if (j.contains("prompts")) {
      const json& p = j["prompts"];
      detail::read_opt(p, "visual", c.prompts.visual);
      detail::read_opt(p, "references", c.prompts.references);
      if (p.contains("hints")) {
        c.prompts.hints.clear();
        for (const auto& h : p["hints"]) {
          const auto name = parse_hint_group(h.get<std::string>());
          if (!name) throw ValidationError("config: unknown hint group '" + h.get<std::string>() + "'");
          if (std::find(c.prompts.hints.begin(), c.prompts.hints.end(), *name) == c.prompts.hints.end())
            c.prompts.hints.push_back(*name);
        }
        std::sort(c.prompts.hints.begin(), c.prompts.hints.end());
      }
    }
    if (j.contains("models")) {
      const json& m = j["models"];
      detail::read_opt(m, "decomposer", c.models.decomposer);
      detail::read_opt(m, "reference", c.models.reference);
      detail::read_opt(m, "spatial", c.models.spatial);
      detail::read_opt(m, "temporal", c.models.temporal);
      detail::read_opt(m, "composer", c.models.composer);
      detail::read_opt(m, "vqa", c.models.vqa);
    }
    if (j.contains("decompose")) {
      const json& d = j["decompose"];
      detail::read_opt(d, "joint_spatial", c.joint_spatial);
      detail::read_opt(d, "min_coverage", c.policy.min_coverage);
      detail::read_opt(d, "max_overlap", c.policy.max_overlap);
    }
    if (j.contains("weights")) {
      const json& w = j["weights"];
      detail::read_opt(w, "bleu4", c.weights.bleu4);
      detail::read_opt(w, "meteor", c.weights.meteor);
      detail::read_opt(w, "rouge_l", c.weights.rouge_l);
      detail::read_opt(w, "cider", c.weights.cider);
    }
    detail::read_opt(j, "subsets", c.subsets);
    detail::read_opt(j, "max_tokens", c.max_tokens);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  validate_config(c);
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ParseError(path.string() + ": no such file");
  return config_from_json(read_json_file(path), fs::absolute(path).parent_path());
}

// Location-only fields (output_dir, cache directory) do not take part, so the
// same experiment hashes identically wherever it is written.
inline std::string config_hash(const PipelineConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  j["gateway"].erase("cache_dir");
  j["gateway"].erase("backend");
  return sha256_hex(canonical_dump(j)).substr(0, 16);
}

// --- run records --------------------------------------------------------------------

struct StageRecord {
  std::string status = "pending";  // pending | done | cached
  std::vector<std::string> outputs;
};

struct RunRecord {
  std::string run_id;
  std::string config_hash;
  fs::path run_dir;
  std::map<std::string, StageRecord> stages;
};

inline json to_json(const RunRecord& r, const PipelineConfig& c) {
  json stages = json::object();
  for (const auto& [name, s] : r.stages) stages[name] = {{"status", s.status}, {"outputs", s.outputs}};
  return {{"run_id", r.run_id}, {"config_hash", r.config_hash}, {"config", to_json(c)}, {"stages", stages}};
}

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

class StageFailure : public Error {
 public:
  StageFailure(Stage stage, const Error& cause)
      : Error("stage " + std::string(to_string(stage)) + ": " + cause.what(), cause.category()), stage_(stage) {}

  Stage stage() const { return stage_; }

 private:
  Stage stage_;
};

// Exclusive advisory lock on {output_dir}/.ster.lock for the holder's lifetime.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& output_dir) {
    fs::create_directories(output_dir);
    const fs::path path = output_dir / ".ster.lock";
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw ValidationError("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw ValidationError("output directory " + output_dir.string() + " is in use by another process");
    }
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;
  ~OutputLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }

 private:
  int fd_ = -1;
};

// --- reports --------------------------------------------------------------------------

inline std::string fixed3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string signed3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%+.3f", v);
  return std::string(buf) == "-0.000" ? "+0.000" : buf;
}

struct SubsetReport {
  std::string label;
  metrics::MetricReport report;
  std::string items_sha256;
};

inline metrics::MetricReport combine_reports(const std::vector<SubsetReport>& rows,
                                             const metrics::ScoreWeights& w) {
  metrics::MetricReport c;
  for (const auto& r : rows) {
    c.bleu4 += r.report.bleu4;
    c.meteor += r.report.meteor;
    c.rouge_l += r.report.rouge_l;
    c.cider += r.report.cider;
    c.n_items += r.report.n_items;
  }
  const double n = static_cast<double>(rows.size());
  c.bleu4 /= n;
  c.meteor /= n;
  c.rouge_l /= n;
  c.cider /= n;
  c.caption_score = metrics::caption_score(c, w);
  return c;
}

inline std::string caption_table(const std::vector<SubsetReport>& rows, const metrics::MetricReport& combined) {
  std::ostringstream md;
  md << "| Subset | Items | BLEU-4 | METEOR | ROUGE-L | CIDEr | Caption score |\n"
     << "|---|---:|---:|---:|---:|---:|---:|\n";
  const auto row = [&](const std::string& label, const metrics::MetricReport& r) {
    md << "| " << label << " | " << r.n_items << " | " << fixed3(r.bleu4) << " | " << fixed3(r.meteor) << " | "
       << fixed3(r.rouge_l) << " | " << fixed3(r.cider) << " | " << fixed3(r.caption_score) << " |\n";
  };
  for (const auto& r : rows) row(r.label, r.report);
  row("Combined", combined);
  return md.str();
}

// --- pipeline -------------------------------------------------------------------------

struct CaptionRow {
  std::string scenario_id;
  std::string source;
  int phase = 1;
  Role subject = Role::kPedestrian;
  std::string spatial;
  std::string temporal;
  std::string hypothesis;
  std::string reference;
};

inline json to_json(const CaptionRow& r) {
  return {{"scenario_id", r.scenario_id}, {"source", r.source},       {"phase", r.phase},
          {"subject", to_string(r.subject)}, {"spatial", r.spatial}, {"temporal", r.temporal},
          {"hypothesis", r.hypothesis},   {"reference", r.reference}};
}

inline std::vector<json> read_jsonl(const fs::path& path) {
  std::vector<json> rows;
  std::istringstream in(read_text_file(path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw ParseError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

inline std::string to_jsonl(const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) out += canonical_dump(r) + "\n";
  return out;
}

inline std::string frame_key(const FrameRef& f) { return f.video_id + ":" + std::to_string(f.frame_index); }

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config, Transport transport = {})
      : config_(std::move(config)),
        transport_(std::move(transport)),
        hash_(config_hash(config_)),
        run_dir_(config_.resolve(config_.output_dir) / hash_),
        lock_(config_.resolve(config_.output_dir)) {
    stage_graph();
    load_record();
  }

  const PipelineConfig& config() const { return config_; }
  const fs::path& run_dir() const { return run_dir_; }
  const RunRecord& record() const { return record_; }
  std::size_t network_calls() const { return gateway_ ? gateway_->network_calls() : 0; }

  bool outputs_exist(Stage s) const {
    for (const auto& o : stage_spec(s).outputs)
      if (!fs::exists(run_dir_ / o)) return false;
    return true;
  }

  StageRecord run_stage(Stage s, bool force = false) {
    const StageSpec& spec = stage_spec(s);
    for (Stage d : spec.deps)
      if (!outputs_exist(d))
        throw DependencyMissing(std::string(to_string(d)) + " (stage " + std::string(to_string(s)) +
                                " needs its outputs under " + run_dir_.string() + ")");
    StageRecord rec;
    rec.outputs = spec.outputs;
    if (!force && outputs_exist(s)) {
      rec.status = "cached";
    } else {
      fs::create_directories(run_dir_);
      try {
        execute(s);
      } catch (const StageFailure&) {
        throw;
      } catch (const Error& e) {
        std::throw_with_nested(StageFailure(s, e));
      }
      rec.status = "done";
    }
    record_.stages[std::string(to_string(s))] = rec;
    save_record();
    return rec;
  }

  RunRecord run_all(bool force = false) {
    for (Stage s : kPipelineStages) run_stage(s, force);
    return record_;
  }

 private:
  // --- record ---------------------------------------------------------------
  void load_record() {
    record_.config_hash = hash_;
    record_.run_dir = run_dir_;
    const fs::path path = run_dir_ / "run.json";
    if (fs::exists(path)) {
      const json doc = read_json_file(path);
      record_.run_id = doc.value("run_id", "");
      const json stages = doc.value("stages", json::object());
      for (const auto& [name, s] : stages.items())
        record_.stages[name] = {s.value("status", "pending"), s.value("outputs", std::vector<std::string>{})};
    }
    if (record_.run_id.empty()) record_.run_id = utc_timestamp() + "-" + hash_;
  }

  void save_record() const { write_file_atomic(run_dir_ / "run.json", pretty_dump(to_json(record_, config_))); }

  // --- shared inputs ----------------------------------------------------------
  Gateway& gateway() {
    if (!gateway_) {
      GatewayConfig g = config_.gateway;
      g.cache_dir = config_.resolve(g.cache_dir);
      g.image_root = run_dir_;
      gateway_.emplace(std::move(g), transport_);
    }
    return *gateway_;
  }

  Manifest manifest() const { return load_manifest(run_dir_ / "manifest.json"); }

  std::map<std::string, ScenarioSelections> selections() const {
    return selections_from_json(read_json_file(run_dir_ / "selections.json"));
  }

  DecompositionMap decompositions() const {
    return decompositions_from_json(read_json_file(run_dir_ / "decompositions.json"));
  }

  std::vector<HintGroup> hints(bool spatial) const {
    std::vector<HintGroupName> names;
    for (auto h : config_.prompts.hints)
      if (is_spatial_group(h) == spatial) names.push_back(h);
    return catalog_.select(names);
  }

  void execute(Stage s) {
    switch (s) {
      case Stage::kIngest: return ingest();
      case Stage::kSelect: return select();
      case Stage::kRender: return render();
      case Stage::kDecompose: return decompose();
      case Stage::kInfer: return infer();
      case Stage::kEvaluate: return evaluate();
      case Stage::kScore: return score();
      case Stage::kExportTrain: return export_train();
    }
  }

  // --- stages -----------------------------------------------------------------
  void ingest() {
    Manifest m;
    if (!config_.manifest_path.empty()) {
      m = load_manifest(config_.resolve(config_.manifest_path));
    } else {
      for (const auto& src : config_.sources) {
        Manifest part = normalize_source(config_.resolve(src.path), src.source);
        for (auto& sc : part.scenarios) {
          for (auto& v : sc.videos) v.frame_dir = part.resolve_frame_dir(v).generic_string();
          m.scenarios.push_back(std::move(sc));
        }
      }
    }
    for (auto& sc : m.scenarios)
      for (auto& v : sc.videos)
        v.frame_dir = fs::absolute(m.resolve_frame_dir(v)).lexically_normal().generic_string();
    m.base_dir.clear();
    validate_manifest(m);
    save_manifest(m, run_dir_ / "manifest.json");
  }

  void select() {
    const Manifest m = manifest();
    std::map<std::string, ScenarioSelections> all;
    for (const auto& sc : m.scenarios) all.emplace(sc.scenario_id, select_all(sc, static_cast<std::size_t>(config_.k)));
    write_file_atomic(run_dir_ / "selections.json", pretty_dump(selections_to_json(all)));
  }

  void render() {
    const Manifest m = manifest();
    const auto sel = selections();
    const fs::path out_dir = run_dir_ / "render";
    fs::create_directories(out_dir);
    std::vector<std::string> files;
    for (const auto& sc : m.scenarios) {
      const auto& s = sel.at(sc.scenario_id);
      std::vector<FrameSelection> all = s.spatial;
      for (const auto& [phase, t] : s.temporal) all.push_back(t);
      ScenarioRecord drawn = sc;
      if (!config_.prompts.visual) {
        drawn.bboxes.clear();
        drawn.gaze.clear();
      }
      RenderOptions opts = config_.render;
      opts.workers = std::max(1u, std::thread::hardware_concurrency());
      for (const auto& p : batch_render(m, drawn, all, opts, out_dir))
        files.push_back(p.lexically_relative(run_dir_).generic_string());
    }
    std::sort(files.begin(), files.end());
    write_file_atomic(out_dir / "index.json", pretty_dump(json{{"visual", config_.prompts.visual}, {"files", files}}));
  }

  void decompose() {
    const Manifest m = manifest();
    BatchDecomposeOptions opts;
    opts.decompose.model = config_.models.decomposer;
    opts.decompose.max_tokens = config_.max_tokens;
    opts.policy = config_.policy;
    opts.joint_spatial = config_.joint_spatial;
    const auto d = decompose_manifest(m, gateway(), forge_, Lexicon::defaults(), opts);
    write_file_atomic(run_dir_ / "decompositions.json", pretty_dump(decompositions_to_json(d)));
  }

  static std::vector<std::string> texts_of(std::vector<BatchResult>& results) {
    std::vector<std::string> out;
    for (auto& r : results) {
      if (!r.ok()) std::rethrow_exception(r.error);
      out.push_back(r.result->text);
    }
    return out;
  }

  ChatRequest request(const PromptBundle& b, const std::string& model) const {
    return to_chat_request(b, model, 0.0, config_.max_tokens);
  }

  void infer() {
    const Manifest m = manifest();
    const auto sel = selections();
    Gateway& gw = gateway();

    // Round 1: per-frame references.
    std::vector<std::pair<std::string, FrameRef>> ref_frames;
    if (config_.prompts.references)
      for (const auto& sc : m.scenarios) {
        const auto& s = sel.at(sc.scenario_id);
        std::vector<FrameSelection> all = s.spatial;
        for (const auto& [phase, t] : s.temporal) all.push_back(t);
        for (const auto& f : unique_frames(all)) ref_frames.emplace_back(sc.scenario_id, f);
      }
    std::vector<ChatRequest> reqs;
    for (const auto& [id, f] : ref_frames)
      reqs.push_back(request(forge_.build_reference_prompt(id, f), config_.models.reference));
    auto ref_results = gw.complete_batch(reqs);
    const auto ref_texts = texts_of(ref_results);
    std::map<std::string, std::map<std::string, std::string>> refs;
    for (std::size_t i = 0; i < ref_frames.size(); ++i)
      refs[ref_frames[i].first][frame_key(ref_frames[i].second)] = trim(ref_texts[i]);

    const auto refs_for = [&](const std::string& id, const std::vector<FrameRef>& frames)
        -> std::optional<std::vector<std::string>> {
      if (!config_.prompts.references) return std::nullopt;
      std::vector<std::string> out;
      for (const auto& f : frames) out.push_back(refs.at(id).at(frame_key(f)));
      return out;
    };

    // Round 2: spatial captions per subject, temporal captions per caption, VQA.
    struct Pending {
      const ScenarioRecord* sc;
      const CaptionRecord* cap;
      std::size_t spatial_index;
      std::size_t temporal_index;
    };
    std::vector<Pending> pending;
    std::vector<const ScenarioRecord*> vqa_scenarios;
    std::vector<const VqaItem*> vqa_items;
    std::vector<std::size_t> vqa_index;
    reqs.clear();
    const auto spatial_hints = hints(true);
    const auto temporal_hints = hints(false);
    for (const auto& sc : m.scenarios) {
      const auto& s = sel.at(sc.scenario_id);
      std::vector<FrameSelection> spatial = s.spatial;
      std::stable_sort(spatial.begin(), spatial.end(),
                       [](const FrameSelection& a, const FrameSelection& b) { return a.phase < b.phase; });
      std::vector<FrameRef> spatial_frames;
      for (const auto& x : spatial)
        for (const auto& f : x.frames) spatial_frames.push_back(f);
      std::map<Role, std::size_t> spatial_index;
      for (const auto& cap : sc.captions) {
        if (!spatial_index.count(cap.subject)) {
          spatial_index[cap.subject] = reqs.size();
          reqs.push_back(request(forge_.build_spatial_prompt(sc, cap.subject, spatial, spatial_hints,
                                                             refs_for(sc.scenario_id, spatial_frames)),
                                 config_.models.spatial));
        }
        const FrameSelection& t = s.temporal.at(cap.phase);
        pending.push_back({&sc, &cap, spatial_index.at(cap.subject), reqs.size()});
        reqs.push_back(request(forge_.build_temporal_prompt(sc, cap.phase, cap.subject, t, temporal_hints,
                                                            refs_for(sc.scenario_id, t.frames)),
                               config_.models.temporal));
      }
      for (const auto& q : sc.vqa) {
        vqa_scenarios.push_back(&sc);
        vqa_items.push_back(&q);
        vqa_index.push_back(reqs.size());
        reqs.push_back(request(forge_.build_vqa_prompt(sc, q, s.temporal.at(q.phase)), config_.models.vqa));
      }
    }
    auto round2 = gw.complete_batch(reqs);
    const auto texts2 = texts_of(round2);

    // Round 3: composition of the two halves into the final caption.
    reqs.clear();
    for (const auto& p : pending)
      reqs.push_back(request(forge_.build_composition_prompt(p.cap->subject, trim(texts2[p.spatial_index]),
                                                             {{p.cap->phase, trim(texts2[p.temporal_index])}}),
                             config_.models.composer));
    auto round3 = gw.complete_batch(reqs);
    const auto texts3 = texts_of(round3);

    std::vector<json> caption_rows;
    for (std::size_t i = 0; i < pending.size(); ++i) {
      const auto& p = pending[i];
      caption_rows.push_back(to_json(CaptionRow{p.sc->scenario_id, std::string(to_string(p.sc->source)),
                                                p.cap->phase, p.cap->subject, trim(texts2[p.spatial_index]),
                                                trim(texts2[p.temporal_index]), trim(texts3[i]), p.cap->text}));
    }
    std::vector<json> vqa_rows;
    for (std::size_t i = 0; i < vqa_items.size(); ++i) {
      const VqaItem& q = *vqa_items[i];
      const std::string& out = texts2[vqa_index[i]];
      const auto answer = metrics::extract_answer(out, metrics::valid_keys(q));
      vqa_rows.push_back({{"scenario_id", vqa_scenarios[i]->scenario_id},
                          {"source", to_string(vqa_scenarios[i]->source)},
                          {"phase", q.phase},
                          {"question", q.question},
                          {"choices", q.choices},
                          {"correct", q.correct},
                          {"output", out},
                          {"answer", answer ? json(*answer) : json(nullptr)}});
    }
    const fs::path dir = run_dir_ / "inference";
    fs::create_directories(dir);
    write_file_atomic(dir / "references.json", pretty_dump(refs.empty() ? json::object() : json(refs)));
    write_file_atomic(dir / "captions.jsonl", to_jsonl(caption_rows));
    write_file_atomic(dir / "vqa.jsonl", to_jsonl(vqa_rows));
  }

  void evaluate() {
    const auto rows = read_jsonl(run_dir_ / "inference" / "captions.jsonl");
    std::map<std::string, std::vector<metrics::EvalPair>> by_subset;
    for (const auto& r : rows) {
      const std::string id = r.at("scenario_id").get<std::string>() + "/" + std::to_string(r.at("phase").get<int>()) +
                             "/" + r.at("subject").get<std::string>();
      by_subset[r.at("source").get<std::string>()].push_back(
          {id, r.at("hypothesis").get<std::string>(), {r.at("reference").get<std::string>()}});
    }
    std::vector<SubsetReport> reports;
    json subsets = json::object();
    for (const auto& label : config_.subsets) {
      const auto it = by_subset.find(label);
      if (it == by_subset.end() || it->second.empty()) continue;
      std::vector<std::string> ids;
      for (const auto& p : it->second) ids.push_back(p.item_id);
      std::sort(ids.begin(), ids.end());
      std::string joined;
      for (const auto& id : ids) joined += id + "\n";
      SubsetReport r{label, metrics::evaluate_corpus(it->second, config_.weights), sha256_hex(joined)};
      json j = metrics::to_json(r.report);
      j["items_sha256"] = r.items_sha256;
      subsets[label] = j;
      reports.push_back(std::move(r));
    }
    if (reports.empty()) throw EmptyCorpus("no captions fall into the configured subsets");
    const auto combined = combine_reports(reports, config_.weights);
    const json doc = {{"subsets", subsets},
                      {"combined", metrics::to_json(combined)},
                      {"combined_rule", "unweighted mean of the subset rows"},
                      {"weights",
                       {{"bleu4", config_.weights.bleu4},
                        {"meteor", config_.weights.meteor},
                        {"rouge_l", config_.weights.rouge_l},
                        {"cider", config_.weights.cider}}}};
    write_file_atomic(run_dir_ / "metrics.json", pretty_dump(doc));

    std::ostringstream md;
    md << "# Captioning results\n\n"
       << "Run configuration hash: `" << hash_ << "`\n\n"
       << caption_table(reports, combined) << "\n"
       << "Metric columns are fractions; CIDEr is on its usual 0-10 scale and enters the caption score "
          "divided by 10. The Combined row is the unweighted mean of the subset rows.\n";
    write_file_atomic(run_dir_ / "report.md", md.str());
  }

  void score() {
    const json metrics_doc = read_json_file(run_dir_ / "metrics.json");
    const double caption = metrics_doc.at("combined").at("caption_score").get<double>();
    std::vector<metrics::VqaOutcome> outcomes;
    for (const auto& r : read_jsonl(run_dir_ / "inference" / "vqa.jsonl")) {
      VqaItem item;
      item.phase = r.at("phase").get<int>();
      item.question = r.at("question").get<std::string>();
      item.choices = r.at("choices").get<std::vector<std::string>>();
      item.correct = r.at("correct").get<std::string>();
      outcomes.push_back({item, r.at("output").get<std::string>()});
    }
    json doc = {{"caption_score", caption}, {"vqa_items", outcomes.size()}};
    if (outcomes.empty()) {
      doc["vqa_accuracy"] = nullptr;
      doc["final_score"] = nullptr;
    } else {
      const double acc = metrics::vqa_accuracy(outcomes);
      doc["vqa_accuracy"] = acc;
      doc["final_score"] = metrics::final_score(caption, acc);
    }
    write_file_atomic(run_dir_ / "score.json", pretty_dump(doc));
  }

  void export_train() {
    ExportOptions opts{hints(true), hints(false)};
    export_training_manifests(manifest(), decompositions(), selections(), run_dir_ / "train", forge_, opts);
  }

  PipelineConfig config_;
  Transport transport_;
  std::string hash_;
  fs::path run_dir_;
  OutputLock lock_;
  RunRecord record_;
  std::optional<Gateway> gateway_;
  PromptForge forge_;
  HintCatalog catalog_ = HintCatalog::defaults();
};

// --- ablation -------------------------------------------------------------------------

struct AblationRun {
  std::string run_id;
  json config;
  json metrics;
};

inline AblationRun load_ablation_run(const fs::path& run_dir) {
  for (const char* f : {"run.json", "metrics.json"})
    if (!fs::exists(run_dir / f)) throw DependencyMissing(std::string("evaluate (") + (run_dir / f).string() + " missing)");
  const json run = read_json_file(run_dir / "run.json");
  return {run.at("run_id").get<std::string>(), run.at("config"), read_json_file(run_dir / "metrics.json")};
}

// Names the prompt and decomposition toggles in which `run` differs from `base`.
inline std::vector<std::string> toggle_changes(const json& base, const json& run) {
  std::vector<std::string> out;
  const auto groups = [](const json& c) { return c.at("prompts").at("hints").get<std::vector<std::string>>(); };
  const auto bg = groups(base), rg = groups(run);
  for (const auto& g : bg)
    if (std::find(rg.begin(), rg.end(), g) == rg.end()) out.push_back("-" + g);
  for (const auto& g : rg)
    if (std::find(bg.begin(), bg.end(), g) == bg.end()) out.push_back("+" + g);
  for (const char* key : {"visual", "references"}) {
    const bool b = base.at("prompts").at(key).get<bool>(), r = run.at("prompts").at(key).get<bool>();
    if (b != r) out.push_back(std::string(r ? "+" : "-") + key);
  }
  const bool bj = base.at("decompose").at("joint_spatial").get<bool>();
  const bool rj = run.at("decompose").at("joint_spatial").get<bool>();
  if (bj != rj) out.push_back(rj ? "+joint_spatial" : "-joint_spatial");
  return out;
}

struct AblationTable {
  std::string markdown;
  json data;
};

// The first run is the baseline; every other run gets a score row and a delta
// row labeled by its toggle changes.
inline AblationTable ablation_report(const std::vector<AblationRun>& runs) {
  if (runs.size() < 2) throw ValidationError("ablation needs at least two runs");
  const auto subset_items = [](const AblationRun& r) {
    std::map<std::string, std::string> out;
    for (const auto& [label, row] : r.metrics.at("subsets").items()) out[label] = row.at("items_sha256").get<std::string>();
    return out;
  };
  const auto base_items = subset_items(runs[0]);
  for (std::size_t i = 1; i < runs.size(); ++i)
    if (subset_items(runs[i]) != base_items)
      throw IncomparableRuns("run " + runs[i].run_id + " covers different subsets or items than " + runs[0].run_id);

  std::vector<std::string> labels;
  for (const auto& [label, h] : base_items) labels.push_back(label);
  std::stable_sort(labels.begin(), labels.end(), [](const std::string& a, const std::string& b) {
    return parse_source(a).value_or(Source::kBDD) < parse_source(b).value_or(Source::kBDD);
  });
  const auto scores = [&](const AblationRun& r) {
    std::vector<double> v;
    for (const auto& l : labels) v.push_back(r.metrics.at("subsets").at(l).at("caption_score").get<double>());
    v.push_back(r.metrics.at("combined").at("caption_score").get<double>());
    return v;
  };

  std::ostringstream md;
  md << "| Run | Toggles |";
  for (const auto& l : labels) md << " " << l << " |";
  md << " Combined |\n|---|---|";
  for (std::size_t i = 0; i <= labels.size(); ++i) md << "---:|";
  md << "\n";
  json rows = json::array();
  const auto base_scores = scores(runs[0]);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto changes = i == 0 ? std::vector<std::string>{} : toggle_changes(runs[0].config, runs[i].config);
    std::string label = i == 0 ? "baseline" : (changes.empty() ? "no toggle change" : "");
    for (std::size_t c = 0; c < changes.size(); ++c) label += (c ? ", " : "") + changes[c];
    const auto s = scores(runs[i]);
    md << "| " << runs[i].run_id << " | " << label << " |";
    for (double v : s) md << " " << fixed3(v) << " |";
    md << "\n";
    json row = {{"run_id", runs[i].run_id}, {"toggles", changes}, {"scores", s}};
    if (i > 0) {
      std::vector<double> delta;
      md << "| Δ " << label << " | |";
      for (std::size_t k = 0; k < s.size(); ++k) {
        delta.push_back(s[k] - base_scores[k]);
        md << " " << signed3(delta.back()) << " |";
      }
      md << "\n";
      row["delta"] = delta;
    }
    rows.push_back(row);
  }
  std::vector<std::string> columns = labels;
  columns.push_back("Combined");
  return {md.str(), {{"columns", columns}, {"rows", rows}}};
}

// --- CLI support ----------------------------------------------------------------------

inline int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::kValidation: return 2;
    case ErrorCategory::kDependency: return 3;
    case ErrorCategory::kGateway: return 4;
    case ErrorCategory::kGeneral: return 1;
  }
  return 1;
}

}  // namespace ster::harness

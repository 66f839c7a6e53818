#include <spawn.h>
#include <sys/wait.h>

#include <CLI11.hpp>
#include <iostream>

#include "ster/ster.hpp"

extern char** environ;

namespace {

using namespace ster;
using namespace ster::harness;

void print_error_chain(const std::exception& e, int depth = 0) {
  std::cerr << (depth ? "  caused by: " : "error: ") << e.what() << "\n";
  try {
    std::rethrow_if_nested(e);
  } catch (const std::exception& inner) {
    print_error_chain(inner, depth + 1);
  }
}

void print_stage(Stage s, const StageRecord& r) {
  std::cout << to_string(s) << ": " << r.status << "\n";
}

int run_ffmpeg(const fs::path& video, const fs::path& out_dir, double fps) {
  fs::create_directories(out_dir);
  std::vector<std::string> args = {"ffmpeg", "-hide_banner", "-loglevel", "error", "-i", video.string()};
  if (fps > 0) {
    args.push_back("-vf");
    args.push_back("fps=" + std::to_string(fps));
  }
  args.push_back("-start_number");
  args.push_back("0");
  args.push_back((out_dir / "%06d.png").string());
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  pid_t pid = 0;
  if (posix_spawnp(&pid, "ffmpeg", nullptr, nullptr, argv.data(), environ) != 0)
    throw DependencyMissing("ffmpeg executable not found on PATH");
  int status = 0;
  waitpid(pid, &status, 0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) throw Error("ffmpeg failed on " + video.string());
  return static_cast<int>(count_frame_files(out_dir));
}

struct Overrides {
  std::string output_dir;
  std::optional<int> stroke;
  std::optional<double> gaze_length;
  std::string palette;
};

PipelineConfig load_with(const std::string& path, const Overrides& o) {
  PipelineConfig c = load_config(path);
  if (!o.output_dir.empty()) c.output_dir = fs::absolute(o.output_dir);
  if (o.stroke) c.render.stroke = *o.stroke;
  if (o.gaze_length) c.render.gaze_length = *o.gaze_length;
  if (!o.palette.empty()) c.render.palette = palette_from_json(read_json_file(o.palette));
  validate_config(c);
  return c;
}

// Standalone scoring of hypothesis/reference JSONL files, grouped by the
// optional "subset" field of each hypothesis row.
void evaluate_files(const std::string& hyp_path, const std::string& ref_path, const std::string& json_out,
                    const std::string& report_out) {
  std::map<std::string, std::vector<std::string>> refs;
  for (const auto& row : read_jsonl(ref_path)) {
    const auto id = row.at("item_id").get<std::string>();
    if (refs.count(id)) throw ValidationError(ref_path + ": duplicate item_id " + id);
    refs[id] = row.at("texts").get<std::vector<std::string>>();
  }
  std::map<std::string, std::vector<metrics::EvalPair>> by_subset;
  std::vector<std::string> order;
  for (const auto& row : read_jsonl(hyp_path)) {
    const auto id = row.at("item_id").get<std::string>();
    const auto it = refs.find(id);
    if (it == refs.end()) throw ValidationError(hyp_path + ": item_id " + id + " has no references");
    const std::string subset = row.value("subset", "all");
    if (!by_subset.count(subset)) order.push_back(subset);
    by_subset[subset].push_back({id, row.at("text").get<std::string>(), it->second});
  }
  if (by_subset.empty()) throw EmptyCorpus(hyp_path + " has no rows");
  std::stable_sort(order.begin(), order.end(), [](const std::string& a, const std::string& b) {
    return parse_source(a).value_or(Source::kBDD) < parse_source(b).value_or(Source::kBDD);
  });
  std::vector<SubsetReport> rows;
  json subsets = json::object();
  for (const auto& label : order) {
    rows.push_back({label, metrics::evaluate_corpus(by_subset[label]), ""});
    subsets[label] = metrics::to_json(rows.back().report);
  }
  const auto combined = combine_reports(rows, metrics::ScoreWeights{});
  const json doc = {{"subsets", subsets}, {"combined", metrics::to_json(combined)}};
  const std::string table = caption_table(rows, combined);
  if (!json_out.empty()) write_file_atomic(json_out, pretty_dump(doc));
  if (!report_out.empty()) write_file_atomic(report_out, table);
  if (json_out.empty()) std::cout << pretty_dump(doc);
  if (report_out.empty()) std::cout << "\n" << table;
}

std::vector<json> prompt_rows(const Manifest& m, const std::map<std::string, ScenarioSelections>& sel,
                              const std::vector<std::string>& hint_names) {
  std::vector<HintGroupName> names;
  for (const auto& h : hint_names) {
    const auto n = parse_hint_group(h);
    if (!n) throw ValidationError("unknown hint group '" + h + "'");
    names.push_back(*n);
  }
  std::vector<HintGroupName> spatial_names, temporal_names;
  for (auto n : names) (is_spatial_group(n) ? spatial_names : temporal_names).push_back(n);
  const auto catalog = HintCatalog::defaults();
  const auto spatial_hints = catalog.select(spatial_names), temporal_hints = catalog.select(temporal_names);
  const PromptForge forge;
  std::vector<json> rows;
  const auto add = [&](const ScenarioRecord& sc, const std::string& kind, json key, const PromptBundle& b) {
    json row = {{"scenario_id", sc.scenario_id}, {"kind", kind}, {"bundle", to_json(b)}};
    row.update(key);
    rows.push_back(row);
  };
  for (const auto& sc : m.scenarios) {
    const auto it = sel.find(sc.scenario_id);
    if (it == sel.end()) throw ValidationError("scenario " + sc.scenario_id + " has no frame selection");
    for (Role r : {Role::kPedestrian, Role::kVehicle}) {
      const bool has = std::any_of(sc.captions.begin(), sc.captions.end(),
                                   [&](const CaptionRecord& c) { return c.subject == r; });
      if (has && !it->second.spatial.empty())
        add(sc, "spatial", {{"subject", to_string(r)}},
            forge.build_spatial_prompt(sc, r, it->second.spatial, spatial_hints));
    }
    for (const auto& c : sc.captions)
      add(sc, "temporal", {{"phase", c.phase}, {"subject", to_string(c.subject)}},
          forge.build_temporal_prompt(sc, c.phase, c.subject, it->second.temporal.at(c.phase), temporal_hints));
    for (const auto& q : sc.vqa)
      add(sc, "vqa", {{"phase", q.phase}, {"question", q.question}},
          forge.build_vqa_prompt(sc, q, it->second.temporal.at(q.phase)));
  }
  return rows;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ster: spatio-temporal traffic captioning pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  bool force = false;
  Overrides over;
  const auto config_options = [&](CLI::App* cmd, bool required) {
    auto* opt = cmd->add_option("--config", config_path, "pipeline config JSON")->check(CLI::ExistingFile);
    if (required) opt->required();
    cmd->add_option("--output-dir", over.output_dir, "override output_dir of the config");
  };

  std::vector<std::pair<Stage, CLI::App*>> stage_cmds;
  CLI::App* evaluate_cmd = nullptr;
  std::string hyp_path, ref_path, eval_json, eval_report;
  for (Stage s : kAllStages) {
    auto* cmd = app.add_subcommand(std::string(to_string(s)), "run the " + std::string(to_string(s)) + " stage");
    config_options(cmd, s != Stage::kEvaluate);
    cmd->add_flag("--force", force, "re-run even when outputs exist");
    if (s == Stage::kRender) {
      cmd->add_option("--stroke", over.stroke, "box outline width in pixels");
      cmd->add_option("--gaze-length", over.gaze_length, "gaze segment length in pixels");
      cmd->add_option("--palette", over.palette, "palette JSON file")->check(CLI::ExistingFile);
    }
    if (s == Stage::kEvaluate) {
      evaluate_cmd = cmd;
      auto* h = cmd->add_option("--hyp", hyp_path, "hypotheses JSONL {\"item_id\", \"text\", [\"subset\"]}")
                    ->check(CLI::ExistingFile);
      auto* r = cmd->add_option("--ref", ref_path, "references JSONL {\"item_id\", \"texts\": [...]}")
                    ->check(CLI::ExistingFile);
      h->needs(r);
      r->needs(h);
      cmd->add_option("--json", eval_json, "write the metric report JSON here");
      cmd->add_option("--report", eval_report, "write the Markdown table here");
    }
    stage_cmds.emplace_back(s, cmd);
  }

  auto* run_cmd = app.add_subcommand("run", "run ingest through score");
  bool with_export = false;
  config_options(run_cmd, true);
  run_cmd->add_flag("--force", force, "re-run every stage");
  run_cmd->add_flag("--export-train", with_export, "also run export-train");

  auto* status_cmd = app.add_subcommand("status", "show stage statuses of a run");
  config_options(status_cmd, true);

  auto* select_cmd = app.add_subcommand("select-frames", "select frames for every scenario of a manifest");
  std::string sel_manifest, sel_out;
  std::size_t sel_k = 3;
  select_cmd->add_option("--manifest", sel_manifest, "manifest JSON")->required()->check(CLI::ExistingFile);
  select_cmd->add_option("--out", sel_out, "selections JSON output")->required();
  select_cmd->add_option("--k", sel_k, "temporal samples per phase")->check(CLI::PositiveNumber);

  auto* prompts_cmd = app.add_subcommand("render-prompts", "write the prompt bundles of a manifest as JSONL");
  std::string pr_manifest, pr_selections, pr_out;
  std::vector<std::string> pr_hints;
  prompts_cmd->add_option("--manifest", pr_manifest, "manifest JSON")->required()->check(CLI::ExistingFile);
  prompts_cmd->add_option("--selections", pr_selections, "selections JSON")->required()->check(CLI::ExistingFile);
  prompts_cmd->add_option("--out", pr_out, "JSONL output")->required();
  prompts_cmd->add_option("--hints", pr_hints, "hint groups to include (default: all)");

  app.add_subcommand("stages", "print the stage graph");

  auto* norm_cmd = app.add_subcommand("normalize", "convert a raw WTS/BDD tree into a manifest");
  std::string source_name, raw_dir, out_path;
  norm_cmd->add_option("--source", source_name, "WTS or BDD")->required()->check(CLI::IsMember({"WTS", "BDD"}));
  norm_cmd->add_option("--raw", raw_dir, "raw annotation tree")->required();
  norm_cmd->add_option("--out", out_path, "manifest output path")->required();

  auto* validate_cmd = app.add_subcommand("validate", "load and validate a manifest");
  std::string manifest_path;
  validate_cmd->add_option("--manifest", manifest_path, "manifest JSON")->required();

  auto* metrics_cmd = app.add_subcommand("metrics", "score hypotheses against references");
  std::string pairs_path;
  metrics_cmd->add_option("--pairs", pairs_path,
                          "JSONL rows {\"id\", \"hypothesis\", \"references\": [...]}")
      ->required()
      ->check(CLI::ExistingFile);

  auto* ablation_cmd = app.add_subcommand("ablation", "compare evaluated runs; the first is the baseline");
  std::vector<std::string> run_dirs;
  std::string ablation_json;
  ablation_cmd->add_option("--run", run_dirs, "run directory")->required();
  ablation_cmd->add_option("--json", ablation_json, "also write the table as JSON");

  auto* extract_cmd = app.add_subcommand("extract-frames", "extract numbered PNG frames with ffmpeg");
  std::string video_path, frames_dir;
  double fps = 0;
  extract_cmd->add_option("--video", video_path, "input video")->required()->check(CLI::ExistingFile);
  extract_cmd->add_option("--out", frames_dir, "output frame directory")->required();
  extract_cmd->add_option("--fps", fps, "resample rate (default: native)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (evaluate_cmd->parsed() && !hyp_path.empty()) {
      evaluate_files(hyp_path, ref_path, eval_json, eval_report);
      return 0;
    }
    for (const auto& [stage, cmd] : stage_cmds)
      if (cmd->parsed()) {
        if (config_path.empty()) throw ValidationError("give --config, or --hyp and --ref");
        Pipeline p(load_with(config_path, over));
        print_stage(stage, p.run_stage(stage, force));
        std::cout << "run directory: " << p.run_dir().string() << "\n";
        return 0;
      }
    if (run_cmd->parsed()) {
      Pipeline p(load_with(config_path, over));
      for (Stage s : kPipelineStages) print_stage(s, p.run_stage(s, force));
      if (with_export) print_stage(Stage::kExportTrain, p.run_stage(Stage::kExportTrain, force));
      std::cout << "run directory: " << p.run_dir().string() << "\n";
      return 0;
    }
    if (status_cmd->parsed()) {
      Pipeline p(load_with(config_path, over));
      std::cout << "run_id: " << p.record().run_id << "\n";
      for (Stage s : kAllStages)
        std::cout << to_string(s) << ": " << (p.outputs_exist(s) ? "complete" : "missing") << "\n";
      return 0;
    }
    if (app.got_subcommand("stages")) {
      for (const auto& spec : stage_graph()) {
        std::cout << to_string(spec.stage) << " <-";
        for (Stage d : spec.deps) std::cout << " " << to_string(d);
        std::cout << "\n";
      }
      return 0;
    }
    if (norm_cmd->parsed()) {
      Manifest m = normalize_source(raw_dir, *parse_source(source_name));
      for (auto& s : m.scenarios)
        for (auto& v : s.videos) v.frame_dir = fs::absolute(m.resolve_frame_dir(v)).lexically_normal().generic_string();
      save_manifest(m, out_path);
      std::cout << m.scenarios.size() << " scenarios written to " << out_path << "\n";
      return 0;
    }
    if (select_cmd->parsed()) {
      const Manifest m = load_manifest(sel_manifest);
      std::map<std::string, ScenarioSelections> all;
      for (const auto& sc : m.scenarios) all.emplace(sc.scenario_id, select_all(sc, sel_k));
      write_file_atomic(sel_out, pretty_dump(selections_to_json(all)));
      std::cout << all.size() << " scenarios selected into " << sel_out << "\n";
      return 0;
    }
    if (prompts_cmd->parsed()) {
      if (pr_hints.empty())
        for (auto n : kAllHintGroups) pr_hints.emplace_back(to_string(n));
      const auto rows = prompt_rows(load_manifest(pr_manifest), selections_from_json(read_json_file(pr_selections)),
                                    pr_hints);
      write_file_atomic(pr_out, to_jsonl(rows));
      std::cout << rows.size() << " prompt bundles written to " << pr_out << "\n";
      return 0;
    }
    if (validate_cmd->parsed()) {
      const Manifest m = load_manifest(manifest_path);
      std::cout << manifest_path << ": " << m.scenarios.size() << " scenarios, valid\n";
      return 0;
    }
    if (metrics_cmd->parsed()) {
      std::vector<metrics::EvalPair> corpus;
      for (const auto& row : read_jsonl(pairs_path))
        corpus.push_back({row.value("id", std::to_string(corpus.size())), row.at("hypothesis").get<std::string>(),
                          row.at("references").get<std::vector<std::string>>()});
      std::cout << pretty_dump(metrics::to_json(metrics::evaluate_corpus(corpus)));
      return 0;
    }
    if (ablation_cmd->parsed()) {
      std::vector<AblationRun> runs;
      for (const auto& d : run_dirs) runs.push_back(load_ablation_run(d));
      const auto table = ablation_report(runs);
      std::cout << table.markdown;
      if (!ablation_json.empty()) write_file_atomic(ablation_json, pretty_dump(table.data));
      return 0;
    }
    if (extract_cmd->parsed()) {
      std::cout << run_ffmpeg(video_path, frames_dir, fps) << " frames in " << frames_dir << "\n";
      return 0;
    }
  } catch (const Error& e) {
    print_error_chain(e);
    return exit_code(e.category());
  } catch (const std::exception& e) {
    print_error_chain(e);
    return 1;
  }
  return 1;
}

#include <gtest/gtest.h>

#include <atomic>

#include "support/support.hpp"

using namespace ster;
using namespace ster::harness;
using ster::testing::TempDir;

namespace {

const fs::path kFixture = fs::path(STER_SOURCE_DIR) / "fixtures" / "two_scenario";

PipelineConfig fixture_config(const fs::path& out, const char* name = "config.json") {
  ::unsetenv(kBackendEnvVar);
  auto c = load_config(kFixture / name);
  c.output_dir = out;
  return c;
}

// Counts every attempted network call; replay runs must leave it at zero.
struct CountingTransport {
  std::shared_ptr<std::atomic<int>> calls = std::make_shared<std::atomic<int>>(0);
  Transport fn() const {
    auto c = calls;
    return [c](const HttpRequest&) {
      ++*c;
      return HttpResponse{503, "", ""};
    };
  }
};

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() != "run.json" && e.path().filename() != ".ster.lock")
      out[e.path().lexically_relative(root).generic_string()] = read_text_file(e.path());
  return out;
}

}  // namespace

TEST(Config, HashIgnoresKeyOrderAndLocation) {
  const json a = json::parse(R"({"output_dir": "a", "sources": [{"path": "x", "source": "WTS"}],
                                 "selection": {"k": 3}, "gateway": {"max_parallel": 2, "cache_dir": "c1"}})");
  const json b = json::parse(R"({"gateway": {"cache_dir": "c2", "max_parallel": 2}, "selection": {"k": 3},
                                 "sources": [{"source": "WTS", "path": "x"}], "output_dir": "b"})");
  EXPECT_EQ(config_hash(config_from_json(a)), config_hash(config_from_json(b)));
  json c = a;
  c["selection"]["k"] = 4;
  EXPECT_NE(config_hash(config_from_json(a)), config_hash(config_from_json(c)));
  EXPECT_EQ(config_hash(config_from_json(a)).size(), 16u);
}

TEST(Config, RoundTripsAndRejectsBadValues) {
  const auto c = load_config(kFixture / "config.json");
  EXPECT_EQ(config_hash(config_from_json(to_json(c))), config_hash(c));
  const json base = json::parse(R"({"output_dir": "o", "manifest_path": "m.json"})");
  for (const char* patch : {R"({"selection": {"k": 0}})", R"({"prompts": {"hints": ["Posture"]}})",
                            R"({"subsets": ["KITTI"]})", R"({"render": {"stroke": 0}})", R"({"output_dir": ""})",
                            R"({"sources": [{"path": "x", "source": "WTS"}]})"}) {
    json j = base;
    j.merge_patch(json::parse(patch));
    EXPECT_THROW(config_from_json(j), ValidationError) << patch;
  }
  EXPECT_THROW(config_from_json(json::parse(R"({"output_dir": 3, "manifest_path": "m"})")), ParseError);
  EXPECT_THROW(load_config(kFixture / "absent.json"), ParseError);
}

TEST(StageGraph, IsAcyclicAndComplete) {
  const auto& g = stage_graph();
  EXPECT_EQ(g.size(), kAllStages.size());
  EXPECT_NO_THROW(check_acyclic(g));
  auto cyclic = g;
  cyclic[0].deps.push_back(Stage::kScore);
  EXPECT_THROW(check_acyclic(cyclic), Error);
  const auto deps = [](Stage s) { return stage_spec(s).deps; };
  EXPECT_EQ(deps(Stage::kScore), std::vector<Stage>{Stage::kEvaluate});
  EXPECT_EQ(deps(Stage::kIngest), std::vector<Stage>{});
  EXPECT_EQ(parse_stage("export-train"), Stage::kExportTrain);
}

TEST(Pipeline, ScoreBeforeEvaluateNamesEvaluate) {
  TempDir tmp;
  Pipeline p(fixture_config(tmp.path()));
  try {
    p.run_stage(Stage::kScore);
    FAIL() << "expected DependencyMissing";
  } catch (const DependencyMissing& e) {
    EXPECT_EQ(std::string(e.what()).rfind("DependencyMissing: evaluate", 0), 0u) << e.what();
    EXPECT_EQ(exit_code(e.category()), 3);
  }
}

TEST(Pipeline, ReplayRunIsHermeticAndCachedOnSecondPass) {
  TempDir tmp;
  CountingTransport counter;
  fs::path run_dir;
  {
    Pipeline p(fixture_config(tmp.path()), counter.fn());
    const auto rec = p.run_all();
    for (const auto& [name, s] : rec.stages) {
      EXPECT_EQ(s.status, "done") << name;
      for (const auto& o : s.outputs) EXPECT_TRUE(fs::exists(p.run_dir() / o)) << o;
    }
    run_dir = p.run_dir();
  }
  EXPECT_EQ(*counter.calls, 0);
  EXPECT_EQ(run_dir.parent_path(), tmp.path());
  const std::string report = read_text_file(run_dir / "report.md");
  for (const char* row : {"| WTS | 10 |", "| BDD | 10 |", "| Combined | 20 |"})
    EXPECT_NE(report.find(row), std::string::npos) << row;
  const json score = read_json_file(run_dir / "score.json");
  EXPECT_EQ(score["vqa_items"], 4);
  EXPECT_DOUBLE_EQ(score["final_score"].get<double>(),
                   metrics::final_score(score["caption_score"].get<double>(), score["vqa_accuracy"].get<double>()));

  const auto before = tree_bytes(run_dir);
  Pipeline again(fixture_config(tmp.path()), counter.fn());
  for (Stage s : kPipelineStages) EXPECT_EQ(again.run_stage(s).status, "cached") << to_string(s);
  const json run = read_json_file(run_dir / "run.json");
  EXPECT_EQ(run["stages"]["score"]["status"], "cached");
  EXPECT_EQ(tree_bytes(run_dir), before);
}

TEST(Pipeline, ForcedRerunAndSecondLocationAreByteIdentical) {
  TempDir a, b;
  fs::path da, db;
  {
    Pipeline p(fixture_config(a.path()));
    p.run_all();
    p.run_stage(Stage::kExportTrain);
    da = p.run_dir();
  }
  const auto first = tree_bytes(da);
  {
    Pipeline p(fixture_config(a.path()));
    for (Stage s : kPipelineStages) EXPECT_EQ(p.run_stage(s, true).status, "done");
    p.run_stage(Stage::kExportTrain, true);
  }
  EXPECT_EQ(tree_bytes(da), first);
  {
    Pipeline p(fixture_config(b.path()));
    p.run_all();
    p.run_stage(Stage::kExportTrain);
    db = p.run_dir();
  }
  EXPECT_EQ(tree_bytes(db), first);
  EXPECT_EQ(da.filename(), db.filename());
}

TEST(Pipeline, StageErrorsCarryStageContext) {
  TempDir tmp;
  auto cfg = fixture_config(tmp.path());
  cfg.gateway.cache_dir = tmp / "empty-cache";
  Pipeline p(cfg);
  p.run_stage(Stage::kIngest);
  p.run_stage(Stage::kSelect);
  try {
    p.run_stage(Stage::kDecompose);
    FAIL() << "expected StageFailure";
  } catch (const StageFailure& e) {
    EXPECT_EQ(e.stage(), Stage::kDecompose);
    EXPECT_EQ(std::string(e.what()).rfind("stage decompose: CacheMiss", 0), 0u) << e.what();
    EXPECT_EQ(exit_code(e.category()), 4);
  }
}

TEST(Pipeline, OutputDirectoryIsLocked) {
  TempDir tmp;
  Pipeline first(fixture_config(tmp.path()));
  EXPECT_THROW(Pipeline second(fixture_config(tmp.path())), ValidationError);
}

TEST(Pipeline, InvisiblePromptsRenderPlainFrames) {
  TempDir tmp;
  auto cfg = fixture_config(tmp.path());
  cfg.prompts.visual = false;
  Pipeline p(cfg);
  for (Stage s : {Stage::kIngest, Stage::kSelect, Stage::kRender}) p.run_stage(s);
  const Manifest m = load_manifest(p.run_dir() / "manifest.json");
  const json index = read_json_file(p.run_dir() / "render" / "index.json");
  EXPECT_FALSE(index["visual"].get<bool>());
  const fs::path rendered = p.run_dir() / index["files"][0].get<std::string>();
  const std::string name = rendered.stem().string();
  const auto& sc = *std::find_if(m.scenarios.begin(), m.scenarios.end(),
                                 [&](const ScenarioRecord& s) { return name.rfind(s.scenario_id + "_", 0) == 0; });
  const auto frame = std::stoll(name.substr(name.rfind('_') + 1));
  const std::string video = name.substr(sc.scenario_id.size() + 1, name.rfind('_') - sc.scenario_id.size() - 1);
  const VideoRecord* v = nullptr;
  for (const auto& x : sc.videos)
    if (x.video_id == video) v = &x;
  ASSERT_NE(v, nullptr) << name;
  char file[32];
  std::snprintf(file, sizeof file, "%06lld.png", static_cast<long long>(frame));
  EXPECT_EQ(read_image(rendered).pixels, read_image(fs::path(v->frame_dir) / file).pixels);
}

// --- ablation ------------------------------------------------------------------------

namespace {

fs::path evaluated_run(const PipelineConfig& cfg) {
  Pipeline p(cfg);
  for (Stage s : {Stage::kIngest, Stage::kSelect, Stage::kRender, Stage::kDecompose, Stage::kInfer, Stage::kEvaluate})
    p.run_stage(s);
  return p.run_dir();
}

}  // namespace

TEST(Ablation, IdenticalRunsHaveZeroDelta) {
  TempDir a, b;
  const auto ra = load_ablation_run(evaluated_run(fixture_config(a.path())));
  const auto rb = load_ablation_run(evaluated_run(fixture_config(b.path())));
  const auto t = ablation_report({ra, rb});
  const auto& row = t.data["rows"][1];
  EXPECT_TRUE(row["toggles"].empty());
  for (double d : row["delta"].get<std::vector<double>>()) EXPECT_EQ(d, 0.0);
  EXPECT_EQ(t.data["columns"], json({"WTS", "BDD", "Combined"}));
  EXPECT_NE(t.markdown.find("| Δ no toggle change | | +0.000 | +0.000 | +0.000 |"), std::string::npos) << t.markdown;
}

TEST(Ablation, ActionToggleGivesOneLabelledDeltaRow) {
  TempDir a, b;
  const auto base = load_ablation_run(evaluated_run(fixture_config(a.path())));
  const auto ablated = load_ablation_run(evaluated_run(fixture_config(b.path(), "config_no_action.json")));
  const auto t = ablation_report({base, ablated});
  EXPECT_EQ(t.data["rows"][1]["toggles"], json({"-Action"}));
  const auto deltas = t.data["rows"][1]["delta"].get<std::vector<double>>();
  const auto s0 = t.data["rows"][0]["scores"].get<std::vector<double>>();
  const auto s1 = t.data["rows"][1]["scores"].get<std::vector<double>>();
  ASSERT_EQ(deltas.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(deltas[i], s1[i] - s0[i]);
  std::size_t delta_rows = 0;
  for (std::size_t pos = 0; (pos = t.markdown.find("| Δ", pos)) != std::string::npos; ++pos) ++delta_rows;
  EXPECT_EQ(delta_rows, 1u);
  EXPECT_NE(t.markdown.find("| Δ -Action |"), std::string::npos);
}

TEST(Ablation, DifferentSubsetsAreIncomparable) {
  TempDir a, b;
  auto narrow = fixture_config(b.path());
  narrow.subsets = {"WTS"};
  const auto r1 = load_ablation_run(evaluated_run(fixture_config(a.path())));
  const auto r2 = load_ablation_run(evaluated_run(narrow));
  EXPECT_THROW(ablation_report({r1, r2}), IncomparableRuns);
  EXPECT_THROW(ablation_report({r1}), ValidationError);
  TempDir empty;
  EXPECT_THROW(load_ablation_run(empty.path()), DependencyMissing);
}

TEST(Reports, CombinedRowIsMeanOfSubsetRows) {
  metrics::MetricReport w{0.2, 0.4, 0.4, 1.0, 0, 10}, b{0.3, 0.5, 0.5, 0.8, 0, 6};
  const auto c = combine_reports({{"WTS", w, ""}, {"BDD", b, ""}}, {});
  EXPECT_DOUBLE_EQ(c.bleu4, 0.25);
  EXPECT_DOUBLE_EQ(c.cider, 0.9);
  EXPECT_EQ(c.n_items, 16u);
  EXPECT_DOUBLE_EQ(c.caption_score, 100.0 * (0.25 + 0.45 + 0.45 + 0.09) / 4.0);
  EXPECT_EQ(signed3(-0.0001), "+0.000");
  EXPECT_EQ(signed3(0.25), "+0.250");
}

TEST(ExitCodes, MapCategories) {
  EXPECT_EQ(exit_code(ErrorCategory::kValidation), 2);
  EXPECT_EQ(exit_code(ErrorCategory::kDependency), 3);
  EXPECT_EQ(exit_code(ErrorCategory::kGateway), 4);
  EXPECT_EQ(exit_code(ErrorCategory::kGeneral), 1);
}

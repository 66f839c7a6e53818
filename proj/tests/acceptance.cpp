// Acceptance checks: one PASS/FAIL line per criterion.
//
//   acceptance <path-to-ster-cli>

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>

#include "support/fake_endpoint.hpp"
#include "support/oracles.hpp"

using namespace ster;
using namespace ster::testing;

namespace {

const fs::path kSource = STER_SOURCE_DIR;
const fs::path kFixture = kSource / "fixtures" / "two_scenario";

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && out_.pass) out_.detail = what;
    out_.pass = out_.pass && ok;
  }
  void note(const std::string& s) {
    if (out_.pass) out_.detail = s;
  }
  Outcome outcome() const { return out_; }

 private:
  Outcome out_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// --- 1 -------------------------------------------------------------------------------

Outcome score_formula() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  const double a = metrics::caption_score(0.238, 0.440, 0.426, 0.946);
  const double b = metrics::caption_score(0.234, 0.443, 0.431, 1.023);
  c.expect(std::abs(a - 29.975) <= 0.05, "first row gives " + fmt(a));
  c.expect(std::abs(b - 30.258) <= 0.05, "second row gives " + fmt(b));
  const double t = seconds_since(t0);
  c.expect(t < 1.0, "took " + fmt(t) + " s");
  c.note(fmt(a) + " vs 29.975, " + fmt(b) + " vs 30.258");
  return c.outcome();
}

// --- 2 -------------------------------------------------------------------------------

double oracle_bleu(const std::vector<std::pair<Toks, std::vector<Toks>>>& corpus) {
  std::array<std::int64_t, 4> matched{}, total{};
  std::int64_t c = 0, r = 0;
  for (const auto& [h, refs] : corpus) {
    for (std::size_t n = 1; n <= 4; ++n) {
      matched[n - 1] += brute_clipped(h, refs, n);
      total[n - 1] += static_cast<std::int64_t>(joined_ngrams(h, n).size());
    }
    const auto hl = static_cast<std::int64_t>(h.size());
    std::int64_t best = -1;
    for (const auto& ref : refs) {
      const auto rl = static_cast<std::int64_t>(ref.size());
      const auto d = std::llabs(rl - hl), bd = std::llabs(best - hl);
      if (best < 0 || d < bd || (d == bd && rl < best)) best = rl;
    }
    c += hl;
    r += best;
  }
  double log_p = 0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (matched[n] == 0 || total[n] == 0) return 0.0;
    log_p += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return bp * std::exp(log_p / 4.0);
}

Outcome metric_oracles() {
  Check c;
  std::mt19937 rng(2024);
  std::uniform_int_distribution<int> items(1, 5), nrefs(1, 3);
  std::size_t clipped_checks = 0;
  double worst = 0;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<metrics::EvalPair> corpus;
    std::vector<std::pair<Toks, std::vector<Toks>>> toks;
    double rouge_sum = 0;
    const int n = items(rng);
    for (int i = 0; i < n; ++i) {
      const Toks h = random_tokens(rng, 10, 1);
      std::vector<Toks> refs;
      std::vector<std::string> ref_text;
      for (int k = nrefs(rng); k > 0; --k) {
        refs.push_back(random_tokens(rng, 10, 1));
        ref_text.push_back(join_tokens(refs.back()));
      }
      corpus.push_back({std::to_string(i), join_tokens(h), ref_text});
      toks.emplace_back(h, refs);
      rouge_sum += brute_rouge_l(h, refs);

      const auto st = metrics::bleu_stats(h, refs);
      for (std::size_t g = 1; g <= 4; ++g) {
        ++clipped_checks;
        c.expect(st.matched[g - 1] == brute_clipped(h, refs, g),
                 "clipped " + std::to_string(g) + "-gram count differs in trial " + std::to_string(trial));
      }
    }
    const double rouge = metrics::rouge_l(corpus), rouge_oracle = rouge_sum / n;
    const double bleu = metrics::bleu4(corpus), bleu_oracle = oracle_bleu(toks);
    worst = std::max({worst, std::abs(rouge - rouge_oracle), std::abs(bleu - bleu_oracle)});
    c.expect(std::abs(rouge - rouge_oracle) <= 1e-12, "rouge_l differs in trial " + std::to_string(trial));
    c.expect(std::abs(bleu - bleu_oracle) <= 1e-12, "bleu4 differs in trial " + std::to_string(trial));
  }
  c.note("500 corpora, " + std::to_string(clipped_checks) + " clipped-count checks, max |diff| " +
         fmt_g(worst));
  return c.outcome();
}

// --- 3 -------------------------------------------------------------------------------

Outcome metric_maxima() {
  Check c;
  std::mt19937 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<metrics::EvalPair> corpus;
    for (int i = 0; i < 3; ++i) {
      const std::string first = join_tokens(random_tokens(rng, 12, 4));
      corpus.push_back({std::to_string(i), first, {first, join_tokens(random_tokens(rng, 8, 1))}});
    }
    c.expect(metrics::bleu4(corpus) == 1.0, "bleu4 != 1 in trial " + std::to_string(trial));
    c.expect(metrics::rouge_l(corpus) == 1.0, "rouge_l != 1 in trial " + std::to_string(trial));
  }
  const std::vector<metrics::EvalPair> two = {{"1", "a man walks across the road", {"a man walks across the road"}},
                                              {"2", "white car stopped near crossing", {"white car stopped near crossing"}}};
  const double cider = metrics::cider_d(two);
  c.expect(std::abs(cider - 10.0) <= 1e-9, "cider_d on the two-item fixture is " + fmt(cider, 6));
  for (std::size_t m = 1; m <= 12; ++m) {
    const std::string s = join_tokens(Toks(m, "w"));
    Toks distinct;
    for (std::size_t i = 0; i < m; ++i) distinct.push_back("w" + std::to_string(i));
    const double got = metrics::meteor_lite({{"x", join_tokens(distinct), {join_tokens(distinct)}}});
    const double expect = 1.0 - 0.5 / std::pow(static_cast<double>(m), 3);
    c.expect(std::abs(got - expect) <= 1e-12, "meteor for m=" + std::to_string(m) + " is " + fmt(got, 9));
  }
  c.note("bleu4 = rouge_l = 1 on 200 identity corpora, cider_d " + fmt(cider, 6) + ", meteor closed form m=1..12");
  return c.outcome();
}

// --- 4 -------------------------------------------------------------------------------

Outcome frame_selection() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  for (int t = 0; t < 200; ++t) {
    std::mt19937 base_rng(5000 + t);
    const ScenarioRecord s = random_scenario(base_rng);
    const auto base = select_all(s);
    for (double k : {0.5, 2.0, 7.0}) {
      std::mt19937 rng(5000 + t);
      const auto scaled = select_all(random_scenario(rng, k));
      bool same = scaled.spatial.size() == base.spatial.size();
      for (std::size_t i = 0; same && i < base.spatial.size(); ++i) same = base.spatial[i].frames == scaled.spatial[i].frames;
      for (const auto& [p, sel] : base.temporal) same = same && sel.frames == scaled.temporal.at(p).frames;
      c.expect(same, "scale x" + fmt(k, 1) + " changes selections in scenario " + std::to_string(t));
    }
    for (const auto& [p, sel] : base.temporal) {
      if (p >= 4) {
        std::set<std::string> vids;
        for (const auto& f : sel.frames) vids.insert(f.video_id);
        c.expect(vids.size() == 1, "phase " + std::to_string(p) + " uses several cameras in scenario " + std::to_string(t));
      } else {
        c.expect(sel.frames == oracle_temporal(s, p), "phase " + std::to_string(p) + " differs from brute force");
      }
      for (const auto& f : sel.frames) {
        const auto range = frames_in_phase(*s.find_video(f.video_id), *s.find_phase(p));
        c.expect(std::find(range.begin(), range.end(), f.frame_index) != range.end(),
                 "frame outside phase " + std::to_string(p) + " in scenario " + std::to_string(t));
      }
    }
    for (const auto& sel : base.spatial)
      for (const auto& f : sel.frames) {
        const auto range = frames_in_phase(*s.find_video(f.video_id), *s.find_phase(sel.phase));
        c.expect(std::find(range.begin(), range.end(), f.frame_index) != range.end(), "spatial frame outside its phase");
      }
  }
  // Worked example: pedestrian areas {10: 500, 11: 300}, pedestrian + vehicle {10: 700, 11: 950}.
  ScenarioRecord ex = five_phase_scenario();
  ex.bboxes = {box("camA", 10, Role::kPedestrian, 50, 10), box("camA", 10, Role::kVehicle, 20, 10),
               box("camA", 11, Role::kPedestrian, 30, 10), box("camA", 11, Role::kVehicle, 65, 10)};
  const auto got = select_temporal_frames(ex, 2).frames;
  const std::vector<FrameRef> expected{{"camA", 10}, {"camA", 11}};
  c.expect(got == expected && oracle_temporal(ex, 2) == expected, "worked phase-2 example does not give [f10, f11]");
  const double t = seconds_since(t0);
  c.expect(t < 5.0, "took " + fmt(t) + " s");
  c.note("200 scenarios x scales {0.5, 2, 7}, phase-2 example [f10, f11], " + fmt(t) + " s");
  return c.outcome();
}

// --- 5 -------------------------------------------------------------------------------

Outcome decomposition() {
  Check c;
  const json fx = read_json_file(kSource / "tests" / "data" / "squatting_pedestrian_caption.json");
  std::vector<std::string> captions = {fx["caption"].get<std::string>()};
  for (const auto& src : {std::pair{"wts", Source::kWTS}, std::pair{"bdd", Source::kBDD}})
    for (const auto& s : normalize_source(kFixture / "raw" / src.first, src.second).scenarios)
      for (const auto& cap : s.captions) captions.push_back(cap.text);
  for (const auto& cap : five_phase_scenario().captions) captions.push_back(cap.text);
  for (const auto& cap : captions) {
    const auto d = rule_decompose(cap);
    c.expect(d.coverage == 1.0, "coverage " + fmt(d.coverage) + " on: " + cap);
  }

  const auto labels = fx["sentence_labels"].get<std::vector<std::string>>();
  const auto assigned = assign_sentences(fx["caption"].get<std::string>(), Lexicon::defaults());
  int agree = 0;
  c.expect(assigned.size() == labels.size(), "sentence count differs from the labelled partition");
  for (std::size_t i = 0; i < std::min(labels.size(), assigned.size()); ++i)
    if (labels[i] != "mixed") agree += (labels[i] == "spatial") == assigned[i].spatial;
  c.expect(agree >= 6, "only " + std::to_string(agree) + " sentences agree");

  const std::string same = "The man walked quickly across the road.";
  const double overlap = validate_decomposition({same, same, same, {}, 0, 0}).overlap;
  c.expect(overlap == 1.0, "overlap of identical segments is " + fmt(overlap));

  std::vector<std::string> sentences;
  for (int i = 0; i < 5; ++i) {
    Toks w;
    for (int k = 0; k < 8; ++k) w.push_back("tok" + std::to_string(8 * i + k) + "x");
    sentences.push_back(join_tokens(w) + ".");
  }
  const DecomposedCaption drop{join_sentences(sentences), sentences[0] + " " + sentences[1],
                               sentences[2] + " " + sentences[3], {}, 0, 0};
  const double coverage = validate_decomposition(drop).coverage;
  c.expect(content_tokens(drop.original).size() == 40, "drop fixture does not have 40 content tokens");
  c.expect(coverage == 0.8, "coverage on the 8-of-40 drop is " + fmt(coverage));
  c.note(std::to_string(captions.size()) + " captions at coverage 1, " + std::to_string(agree) +
         " labelled sentences agree, overlap 1.0, coverage 0.8");
  return c.outcome();
}

// --- 6 -------------------------------------------------------------------------------

Outcome overlay_goldens() {
  Check c;
  const fs::path g = kSource / "tests" / "golden";
  const Image base = test_frame(100, 100, 7);
  const Palette palette;
  OverlaySpec boxes;
  boxes.stroke = 2;
  boxes.boxes = {{box("camA", 0, Role::kPedestrian, 50, 50, BoxSource::kHuman, 20, 30), palette.pedestrian},
                 {box("camA", 0, Role::kVehicle, 80, 20, BoxSource::kHuman, 10, 5), palette.vehicle}};
  OverlaySpec g1, g2;
  g1.gaze = GazeAnnotation{"camA", 0, 50, 50, 0.6, 0.8};
  g1.gaze_length = 30;
  g2.gaze = GazeAnnotation{"camA", 0, 20, 90, 2 / std::sqrt(5.0), -1 / std::sqrt(5.0)};
  g2.gaze_length = std::sqrt(60.0 * 60.0 + 30.0 * 30.0);
  const std::vector<std::pair<std::string, Image>> cases = {
      {"overlay100_identity.png", render_overlay(OverlaySpec{}, base)},
      {"overlay100_boxes.png", render_overlay(boxes, base)},
      {"overlay100_gaze.png", render_overlay(g2, render_overlay(g1, base))}};
  for (const auto& [name, img] : cases) {
    c.expect(img == read_image(g / name), name + ": pixels differ from the golden");
    const auto bytes = encode_png(img);
    c.expect(bytes == encode_png(img), name + ": PNG encoding is not deterministic");
    c.expect(decode_png(std::string(bytes.begin(), bytes.end()), name) == img, name + ": PNG round trip differs");
  }
  c.note("identity, box perimeter and gaze segment: decoded pixels equal the independently rasterized goldens");
  return c.outcome();
}

// --- 7 -------------------------------------------------------------------------------

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() != "run.json" && e.path().filename() != ".ster.lock")
      out[e.path().lexically_relative(root).generic_string()] = read_text_file(e.path());
  return out;
}

int run_cli(const std::string& cli, const std::string& args, const fs::path& log) {
  const std::string cmd = "'" + cli + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome end_to_end(const std::string& cli) {
  Check c;
  TempDir tmp;
  FakeEndpoint endpoint([](const json&) { return std::pair{500, std::string("{}")}; });
  json cfg = read_json_file(kFixture / "config.json");
  for (auto& s : cfg["sources"]) s["path"] = (kFixture / s["path"].get<std::string>()).string();
  cfg["gateway"]["cache_dir"] = (kFixture / "cache").string();
  cfg["gateway"]["endpoint_url"] = endpoint.url();
  write_file_atomic(tmp / "config.json", cfg.dump(2));
  ::unsetenv(kBackendEnvVar);
  ::unsetenv("STER_API_KEY");

  const auto t0 = std::chrono::steady_clock::now();
  const std::string base = "run --export-train --config '" + (tmp / "config.json").string() + "' --output-dir ";
  const int first = run_cli(cli, base + "'" + (tmp / "a").string() + "'", tmp / "a.log");
  c.expect(first == 0, "first run exited " + std::to_string(first) + ": " + read_text_file(tmp / "a.log"));
  const int second = run_cli(cli, base + "'" + (tmp / "b").string() + "'", tmp / "b.log");
  c.expect(second == 0, "second run exited " + std::to_string(second));
  const double elapsed = seconds_since(t0);
  if (first != 0 || second != 0) return c.outcome();

  const auto run_dir = [](const fs::path& out) {
    for (const auto& e : fs::directory_iterator(out))
      if (e.is_directory()) return e.path();
    return fs::path{};
  };
  const fs::path ra = run_dir(tmp / "a"), rb = run_dir(tmp / "b");
  c.expect(endpoint.requests() == 0, std::to_string(endpoint.requests()) + " requests reached the endpoint");
  const std::string report = read_text_file(ra / "report.md");
  for (const char* row : {"| Subset | Items | BLEU-4 | METEOR | ROUGE-L | CIDEr | Caption score |", "\n| WTS |",
                          "\n| BDD |", "\n| Combined |"})
    c.expect(report.find(row) != std::string::npos, std::string("report.md lacks ") + row);
  const auto bytes = tree_bytes(ra);
  c.expect(bytes == tree_bytes(rb), "two fresh runs differ");
  const int forced = run_cli(cli, base + "'" + (tmp / "a").string() + "' --force", tmp / "c.log");
  c.expect(forced == 0 && tree_bytes(ra) == bytes, "forced rerun differs or failed");
  c.expect(elapsed < 30.0, "two runs took " + fmt(elapsed) + " s");

  // The same configuration in-process, counting transport calls.
  std::atomic<int> calls{0};
  auto pc = harness::load_config(tmp / "config.json");
  pc.output_dir = tmp / "inproc";
  {
    harness::Pipeline p(pc, [&](const HttpRequest&) {
      ++calls;
      return HttpResponse{};
    });
    p.run_all();
    c.expect(p.network_calls() == 0 && calls == 0, "in-process replay run used the transport");
  }
  c.note("exit 0, 0 endpoint requests, " + std::to_string(bytes.size()) + " output files byte-identical across runs, " +
         fmt(elapsed) + " s for two runs");
  return c.outcome();
}

// --- 8 -------------------------------------------------------------------------------

Outcome gateway_contract() {
  Check c;
  ::unsetenv(kBackendEnvVar);
  ::setenv("STER_ACCEPTANCE_KEY", "k", 1);
  const auto config = [](const TempDir& tmp, const std::string& url, int parallel, int attempts) {
    GatewayConfig g;
    g.backend = Backend::kHttp;
    g.endpoint_url = url;
    g.api_key_env = "STER_ACCEPTANCE_KEY";
    g.cache_dir = tmp / "cache";
    g.max_parallel = parallel;
    g.retry.max_attempts = attempts;
    g.retry.base_backoff = 0;
    return g;
  };
  const auto request = [](int i) {
    ChatRequest r;
    r.model = "m";
    r.messages = {{"user", "item " + std::to_string(i), {}}};
    return r;
  };
  std::string summary;
  for (int parallel : {1, 2, 4}) {
    TempDir tmp;
    FakeEndpoint ok([](const json&) { return std::pair{200, chat_completion("fine").dump()}; }, 25);
    Gateway gw(config(tmp, ok.url(), parallel, 3));
    std::vector<ChatRequest> reqs;
    for (int i = 0; i < 12; ++i) reqs.push_back(request(i));
    const auto results = gw.complete_batch(reqs);
    c.expect(std::all_of(results.begin(), results.end(), [](const BatchResult& r) { return r.ok(); }),
             "batch had failures");
    c.expect(ok.high_water() <= parallel, "high-water " + std::to_string(ok.high_water()) + " > " + std::to_string(parallel));
    summary += (summary.empty() ? "" : ", ") + std::to_string(ok.high_water()) + "/" + std::to_string(parallel);
  }
  for (int attempts : {1, 3, 5}) {
    TempDir tmp;
    FakeEndpoint down([](const json&) { return std::pair{503, std::string("{}")}; });
    Gateway gw(config(tmp, down.url(), 2, attempts));
    bool threw = false;
    try {
      gw.complete(request(0));
    } catch (const EndpointError&) {
      threw = true;
    }
    c.expect(threw, "permanent failure did not raise EndpointError");
    c.expect(down.requests() == static_cast<std::size_t>(attempts),
             std::to_string(down.requests()) + " requests for max_attempts " + std::to_string(attempts));
  }
  c.note("high-water/max_parallel " + summary + "; 503 endpoint saw exactly max_attempts in {1, 3, 5}");
  return c.outcome();
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: acceptance <ster-cli>\n";
    return 2;
  }
  const std::string cli = argv[1];
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"score formula reproduction", score_formula},
      {"metric oracle equivalence", metric_oracles},
      {"metric maxima", metric_maxima},
      {"frame-selection invariants", frame_selection},
      {"decomposition properties", decomposition},
      {"overlay goldens", overlay_goldens},
      {"hermetic end-to-end", [&] { return end_to_end(cli); }},
      {"gateway concurrency contract", gateway_contract},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << (i + 1) << " " << criteria[i].first << ": " << o.detail << "\n";
  }
  std::cout << "INFO 9 not reproducible here: absolute caption metrics, VQA accuracy and final scores of trained "
               "models need the licensed datasets and fine-tuned weights; only the score arithmetic and pipeline "
               "mechanics are checked above\n";
  return all ? 0 : 1;
}

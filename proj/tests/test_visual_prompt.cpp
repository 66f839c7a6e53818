#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/support.hpp"

using namespace ster;
using ster::testing::box;
using ster::testing::TempDir;
using ster::testing::test_frame;

namespace {

const fs::path kGolden = fs::path(STER_SOURCE_DIR) / "tests" / "golden";
const Rgb kRed{255, 0, 0}, kGreen{0, 255, 0}, kYellow{255, 255, 0};

std::size_t count_color(const Image& img, Rgb c) {
  std::size_t n = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) n += img.at(x, y) == c;
  return n;
}

OverlaySpec spec_with(std::vector<ColoredBox> boxes, int stroke = 1) {
  OverlaySpec s;
  s.boxes = std::move(boxes);
  s.stroke = stroke;
  return s;
}

GazeAnnotation gaze(double ox, double oy, double dx, double dy) { return GazeAnnotation{"camA", 0, ox, oy, dx, dy}; }

}  // namespace

TEST(RenderOverlay, EmptySpecIsIdentity) {
  const Image img = test_frame(40, 30, 2);
  EXPECT_EQ(render_overlay(OverlaySpec{}, img), img);
}

TEST(RenderOverlay, PerimeterPixelCount) {
  const Image black(100, 100);
  const Image out = render_overlay(spec_with({{box("camA", 0, Role::kVehicle, 20, 20, BoxSource::kHuman, 10, 10), kRed}}), black);
  EXPECT_EQ(count_color(out, kRed), 2u * (20 + 1) + 2u * (20 - 1));
  for (int y = 0; y < 100; ++y)
    for (int x = 0; x < 100; ++x) {
      const bool on = (x >= 10 && x <= 30 && (y == 10 || y == 30)) || (y >= 10 && y <= 30 && (x == 10 || x == 30));
      ASSERT_EQ(out.at(x, y) == kRed, on) << x << "," << y;
    }
}

TEST(RenderOverlay, ThickStrokeGrowsInward) {
  const Image black(100, 100);
  const Image out =
      render_overlay(spec_with({{box("camA", 0, Role::kVehicle, 20, 20, BoxSource::kHuman, 10, 10), kRed}}, 3), black);
  // Three nested perimeters of side 21, 19, 17.
  EXPECT_EQ(count_color(out, kRed), 80u + 72u + 64u);
  EXPECT_EQ(out.at(9, 10), Rgb{});
  EXPECT_EQ(out.at(13, 13), Rgb{});
}

TEST(RenderOverlay, AxisAlignedGazeSegment) {
  OverlaySpec s;
  s.gaze = gaze(50, 50, 1, 0);
  s.gaze_length = 30;
  const Image out = render_overlay(s, Image(100, 100));
  EXPECT_EQ(count_color(out, kYellow), 31u);
  for (int x = 50; x <= 80; ++x) EXPECT_EQ(out.at(x, 50), kYellow) << x;
}

TEST(RenderOverlay, BoxesOutsideImageAreClipped) {
  const Image img = test_frame(32, 24, 1);
  const Image out = render_overlay(
      spec_with({{box("camA", 0, Role::kVehicle, 10, 10, BoxSource::kHuman, 100, 100), kRed},
                 {box("camA", 0, Role::kVehicle, 10, 10, BoxSource::kHuman, -50, -50), kRed}}),
      img);
  EXPECT_EQ(out, img);
}

TEST(RenderOverlay, InvalidSpec) {
  OverlaySpec s;
  s.stroke = 0;
  EXPECT_THROW(render_overlay(s, Image(4, 4)), ValidationError);
  s.stroke = 1;
  s.gaze_length = 0;
  EXPECT_THROW(render_overlay(s, Image(4, 4)), ValidationError);
  EXPECT_THROW(render_overlay(OverlaySpec{}, Image()), ValidationError);
}

TEST(RenderOverlay, UntouchedPixelsAndPurity) {
  std::mt19937 rng(31);
  std::uniform_real_distribution<double> pos(-20, 80), size(0, 40), ang(0, 6.283185307179586);
  std::uniform_int_distribution<int> stroke(1, 4);
  for (int t = 0; t < 100; ++t) {
    const Image img = test_frame(64, 48, t);
    OverlaySpec s;
    s.stroke = stroke(rng);
    s.boxes.push_back({box("camA", 0, Role::kPedestrian, size(rng), size(rng), BoxSource::kHuman, pos(rng), pos(rng)), kGreen});
    const double a = ang(rng);
    s.gaze = gaze(pos(rng), pos(rng), std::cos(a), std::sin(a));
    s.gaze_length = 25;
    const Image out = render_overlay(s, img);
    ASSERT_EQ(render_overlay(s, img), out);
    const auto& b = s.boxes[0].box;
    const int x0 = static_cast<int>(std::lround(b.x)), y0 = static_cast<int>(std::lround(b.y));
    const int x1 = static_cast<int>(std::lround(b.x + b.w)), y1 = static_cast<int>(std::lround(b.y + b.h));
    const double gx0 = s.gaze->origin_x, gy0 = s.gaze->origin_y;
    const double gx1 = gx0 + 25 * s.gaze->dir_x, gy1 = gy0 + 25 * s.gaze->dir_y;
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const bool in_band = x >= x0 && x <= x1 && y >= y0 && y <= y1 &&
                             !(x >= x0 + s.stroke && x <= x1 - s.stroke && y >= y0 + s.stroke && y <= y1 - s.stroke);
        // Distance from the segment, generously inflated by the brush and rounding.
        const double vx = gx1 - gx0, vy = gy1 - gy0;
        const double u = std::clamp(((x - gx0) * vx + (y - gy0) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
        const double dist = std::hypot(x - (gx0 + u * vx), y - (gy0 + u * vy));
        const bool near_gaze = dist <= s.stroke + 1.5;
        if (!in_band && !near_gaze) { ASSERT_EQ(out.at(x, y), img.at(x, y)) << "trial " << t << " at " << x << "," << y; }
      }
  }
}

TEST(RenderOverlay, MatchesGoldenBoxes) {
  OverlaySpec s;
  s.stroke = 2;
  s.boxes = {{box("camA", 0, Role::kPedestrian, 20, 30, BoxSource::kHuman, 5, 6), kGreen},
             {box("camA", 0, Role::kVehicle, 25.4, 12.6, BoxSource::kHuman, 30, 10), kRed},
             {box("camA", 0, Role::kVehicle, 30, 30, BoxSource::kHuman, 50, 40), kRed}};
  EXPECT_EQ(render_overlay(s, test_frame(64, 48, 3)), read_image(kGolden / "overlay_boxes_stroke2.png"));
}

TEST(RenderOverlay, MatchesGoldenGaze) {
  OverlaySpec s;
  s.boxes = {{box("camA", 0, Role::kPedestrian, 12, 14, BoxSource::kHuman, 8, 30), kGreen}};
  s.gaze = gaze(10, 40, std::sqrt(0.5), -std::sqrt(0.5));
  s.gaze_length = 20;
  EXPECT_EQ(render_overlay(s, test_frame(64, 48, 5)), read_image(kGolden / "overlay_gaze_stroke1.png"));
}

TEST(RenderOverlay, SquareGoldens) {
  const Image base = test_frame(100, 100, 7);
  EXPECT_EQ(render_overlay(OverlaySpec{}, base), read_image(kGolden / "overlay100_identity.png"));

  OverlaySpec boxes;
  boxes.stroke = 2;
  boxes.boxes = {{box("camA", 0, Role::kPedestrian, 50, 50, BoxSource::kHuman, 20, 30), kGreen},
                 {box("camA", 0, Role::kVehicle, 80, 20, BoxSource::kHuman, 10, 5), kRed}};
  EXPECT_EQ(render_overlay(boxes, base), read_image(kGolden / "overlay100_boxes.png"));

  OverlaySpec g1, g2;
  g1.gaze = gaze(50, 50, 0.6, 0.8);
  g1.gaze_length = 30;
  g2.gaze = gaze(20, 90, 2 / std::sqrt(5.0), -1 / std::sqrt(5.0));
  g2.gaze_length = std::sqrt(60.0 * 60.0 + 30.0 * 30.0);
  EXPECT_EQ(render_overlay(g2, render_overlay(g1, base)), read_image(kGolden / "overlay100_gaze.png"));
}

TEST(Images, PngRoundTripAndJpegDecode) {
  TempDir tmp;
  const Image img = test_frame(17, 9, 4);
  write_png(img, tmp / "a.png");
  EXPECT_EQ(read_image(tmp / "a.png"), img);

  const Image jpg = read_image(kGolden / "solid_16x8.jpg");
  ASSERT_EQ(jpg.width, 16);
  ASSERT_EQ(jpg.height, 8);
  const Rgb c = jpg.at(7, 3);
  EXPECT_NEAR(c.r, 200, 3);
  EXPECT_NEAR(c.g, 100, 3);
  EXPECT_NEAR(c.b, 50, 3);

  write_file_atomic(tmp / "bad.png", "not an image");
  EXPECT_THROW(read_image(tmp / "bad.png"), DecodeError);
  write_file_atomic(tmp / "bad.jpg", "\xff\xd8garbage");
  EXPECT_THROW(read_image(tmp / "bad.jpg"), DecodeError);
}

TEST(Palette, JsonOverridesAndValidation) {
  const Palette p = palette_from_json(json::parse(R"({"vehicle": [0, 0, 255]})"));
  EXPECT_EQ(p.vehicle, (Rgb{0, 0, 255}));
  EXPECT_EQ(p.pedestrian, kGreen);
  EXPECT_EQ(palette_from_json(to_json(p)).vehicle, p.vehicle);
  EXPECT_THROW(palette_from_json(json::parse(R"({"gaze": [1, 2]})")), ParseError);
  EXPECT_THROW(palette_from_json(json::parse(R"({"gaze": [1, 2, 300]})")), ParseError);
}

// --- batch rendering ----------------------------------------------------------------

namespace {

struct BatchFixture {
  TempDir tmp;
  Manifest manifest;
  ScenarioRecord scenario = ster::testing::five_phase_scenario();

  BatchFixture() {
    ster::testing::write_frames(tmp / "frames/camA", 50);
    manifest.base_dir = tmp.path();
    scenario.bboxes = {box("camA", 12, Role::kPedestrian, 5, 8, BoxSource::kHuman, 2, 2),
                       box("camA", 12, Role::kPedestrian, 20, 20, BoxSource::kGenerated, 1, 1),
                       box("camA", 12, Role::kVehicle, 10, 6, BoxSource::kGenerated, 15, 10)};
    scenario.gaze = {GazeAnnotation{"camA", 12, 5, 5, 1, 0}};
    manifest.scenarios.push_back(scenario);
  }
};

}  // namespace

TEST(BatchRender, EmptySelectionWritesNothing) {
  BatchFixture f;
  EXPECT_TRUE(batch_render(f.manifest, f.scenario, {}, {}, f.tmp / "out").empty());
  EXPECT_FALSE(fs::exists(f.tmp / "out"));
}

TEST(BatchRender, OneFilePerFrameWithDocumentedNames) {
  BatchFixture f;
  FrameSelection sel{Purpose::kTemporal, 5, {{"camA", 40}, {"camA", 44}, {"camA", 49}}, {"a", "b", "c"}};
  RenderOptions opts;
  opts.workers = 3;
  const auto written = batch_render(f.manifest, f.scenario, {sel}, opts, f.tmp / "out");
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(f.tmp / "out")) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  EXPECT_EQ(names, (std::vector<std::string>{"s1_camA_000040.png", "s1_camA_000044.png", "s1_camA_000049.png"}));
  EXPECT_EQ(written.size(), 3u);
  EXPECT_EQ(read_image(written[1]), test_frame(32, 24, 44));  // no annotations on that frame
}

TEST(BatchRender, DrawsOnlyTheAnnotationsOfThatFrame) {
  BatchFixture f;
  FrameSelection sel{Purpose::kTemporal, 2, {{"camA", 12}, {"camA", 12}}, {"a", "b"}};
  const auto written = batch_render(f.manifest, f.scenario, {sel}, {}, f.tmp / "out");
  ASSERT_EQ(written.size(), 1u);
  OverlaySpec expected;
  expected.stroke = kDefaultStroke;
  expected.boxes = {{f.scenario.bboxes[0], kGreen}, {f.scenario.bboxes[2], kRed}};
  expected.gaze = f.scenario.gaze[0];
  EXPECT_EQ(read_image(written[0]), render_overlay(expected, test_frame(32, 24, 12)));
}

TEST(BatchRender, MissingFrameNamesThePath) {
  BatchFixture f;
  fs::remove(f.tmp / "frames/camA/000044.png");
  FrameSelection sel{Purpose::kTemporal, 5, {{"camA", 40}, {"camA", 44}}, {"a", "b"}};
  try {
    batch_render(f.manifest, f.scenario, {sel}, {}, f.tmp / "out");
    FAIL() << "expected MissingFrameFile";
  } catch (const MissingFrameFile& e) {
    EXPECT_NE(std::string(e.what()).find("000044"), std::string::npos);
  }
}

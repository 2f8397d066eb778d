#include "ctlab/preprocess.hpp"

#include <algorithm>
#include <random>
#include <set>

#include "ctlab/error.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace ctlab;
using ctlab::testing::TempDir;

namespace {

// The three channel formulas written out literally.
double channel_oracle(int channel, double pixel) {
  double v = 0.0;
  switch (channel) {
    case 0: v = (pixel + 970.0) / (-150.0 + 970.0); break;
    case 1: v = (pixel + 700.0) / (-450.0 + 700.0); break;
    default: v = (pixel + 450.0) / (-150.0 + 450.0); break;
  }
  if (v > 1.0) v = 1.0;
  if (v < 0.0) v = 0.0;
  return v;
}

Grid<std::int16_t> constant_hu(int side, std::int16_t v) { return Grid<std::int16_t>(side, side, v); }

std::vector<SlideRecord> records(int lesion, int clean) {
  std::vector<SlideRecord> r;
  for (int i = 0; i < lesion + clean; ++i) r.push_back({SlideId{"T", i / 5, i % 5}, 100, i < lesion ? 7 : 0});
  return r;
}

}  // namespace

TEST_CASE("window_normalize examples") {
  const WindowSpec w1{-970, -150};
  CHECK(window_normalize(-970, w1) == 0.0);
  CHECK(window_normalize(-150, w1) == 1.0);
  CHECK(window_normalize(-560, w1) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(window_normalize(-800, WindowSpec{-450, -150}) == 0.0);
  CHECK(window_normalize(500, w1) == 1.0);
}

TEST_CASE("window_normalize matches the per-channel formulas, stays in range and is monotone") {
  const ChannelBank bank;
  std::mt19937 gen(3);
  std::uniform_int_distribution<int> hu(-1200, 200);
  std::vector<int> values(2000);
  for (auto& v : values) v = hu(gen);
  std::sort(values.begin(), values.end());
  for (int c = 0; c < 3; ++c) {
    double prev = -1.0;
    for (int v : values) {
      const double got = window_normalize(v, bank.windows[c]);
      CHECK(std::abs(got - channel_oracle(c, v)) <= 1e-12);
      CHECK(got >= 0.0);
      CHECK(got <= 1.0);
      CHECK(got >= prev);
      prev = got;
    }
  }
}

TEST_CASE("channel bank invariants") {
  CHECK_NOTHROW(ChannelBank{}.validate());
  ChannelBank disjoint;
  disjoint.windows = {{{-970, -700}, {-700, -450}, {-450, -150}}};
  CHECK_THROWS_AS(disjoint.validate(), InvalidArgument);
  ChannelBank inverted;
  inverted.windows[1] = {-450, -700};
  CHECK_THROWS_AS(inverted.validate(), InvalidArgument);
}

TEST_CASE("resize_nn identity at the same size") {
  std::mt19937 gen(5);
  Grid<std::int16_t> g(320, 320);
  for (auto& v : g.data) v = static_cast<std::int16_t>(gen());
  CHECK(resize_nn(g, 320) == g);
}

TEST_CASE("resize_nn 2x2 -> 4x4 replicates each pixel into a 2x2 block") {
  Grid<int> g(2, 2);
  // resize_nn is only instantiated for the pixel types used by the pipeline.
  Grid<std::int16_t> src(2, 2);
  src(0, 0) = 1;
  src(0, 1) = 2;
  src(1, 0) = 3;
  src(1, 1) = 4;
  const std::int16_t expected[4][4] = {{1, 1, 2, 2}, {1, 1, 2, 2}, {3, 3, 4, 4}, {3, 3, 4, 4}};
  const auto out = resize_nn(src, 4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) CHECK(out(i, j) == expected[i][j]);
}

TEST_CASE("resize_nn 630 constant -> 320 constant") {
  const auto out = resize_nn(constant_hu(630, -321), 320);
  CHECK(out.rows == 320);
  CHECK(std::all_of(out.data.begin(), out.data.end(), [](auto v) { return v == -321; }));
}

TEST_CASE("property: resize_nn draws values from the input and keeps masks binary") {
  std::mt19937 gen(11);
  std::uniform_int_distribution<int> dim(1, 40);
  for (int trial = 0; trial < 50; ++trial) {
    BinaryGrid m(dim(gen), dim(gen));
    for (auto& v : m.data) v = gen() & 1;
    const auto out = resize_nn(m, dim(gen));
    std::set<unsigned char> in_vals(m.data.begin(), m.data.end());
    for (auto v : out.data) CHECK(in_vals.count(v) == 1);
  }
  CHECK_THROWS_AS(resize_nn(BinaryGrid(2, 2), 0), InvalidArgument);
}

TEST_CASE("assemble_input examples") {
  const ChannelBank bank;
  SUBCASE("all -970 with full lung gives (0,0,0,1)") {
    const auto img = assemble_input(constant_hu(8, -970), BinaryGrid(8, 8, 1), bank);
    REQUIRE(img.channels == 4);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        CHECK(img.at(0, y, x) == 0.0f);
        CHECK(img.at(1, y, x) == 0.0f);
        CHECK(img.at(2, y, x) == 0.0f);
        CHECK(img.at(3, y, x) == 1.0f);
      }
  }
  SUBCASE("all -575 with empty lung gives channel 2 = 0.5") {
    const auto img = assemble_input(constant_hu(8, -575), BinaryGrid(8, 8, 0), bank);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        CHECK(img.at(1, y, x) == doctest::Approx(0.5));
        CHECK(img.at(3, y, x) == 0.0f);
      }
  }
  SUBCASE("random slides stay in [0,1]") {
    std::mt19937 gen(4);
    Grid<std::int16_t> hu(16, 16);
    for (auto& v : hu.data) v = static_cast<std::int16_t>(gen());
    BinaryGrid lung(16, 16);
    for (auto& v : lung.data) v = gen() & 1;
    const auto img = assemble_input(hu, lung, bank);
    const auto [lo, hi] = std::minmax_element(img.data.begin(), img.data.end());
    CHECK(*lo >= 0.0f);
    CHECK(*hi <= 1.0f);
  }
  CHECK_THROWS_AS(assemble_input(constant_hu(8, 0), BinaryGrid(4, 4), bank), ShapeError);
}

TEST_CASE("assemble_target is a pixelwise complement") {
  const auto zero = assemble_target(BinaryGrid(4, 4, 0));
  const auto one = assemble_target(BinaryGrid(4, 4, 1));
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      CHECK(zero.at(0, y, x) == 0.0f);
      CHECK(zero.at(1, y, x) == 1.0f);
      CHECK(one.at(0, y, x) == 1.0f);
      CHECK(one.at(1, y, x) == 0.0f);
    }
  std::mt19937 gen(8);
  BinaryGrid m(9, 9);
  for (auto& v : m.data) v = gen() & 1;
  const auto t = assemble_target(m);
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 9; ++x) CHECK(t.at(0, y, x) + t.at(1, y, x) == 1.0f);
  BinaryGrid bad(2, 2);
  bad.data[0] = 2;
  CHECK_THROWS_AS(assemble_target(bad), InvalidArgument);
}

TEST_CASE("slide id round trip") {
  const SlideId id{"CT10", 3, 41};
  CHECK(id.str() == "CT10:3:41");
  CHECK(SlideId::parse(id.str()) == id);
  CHECK_THROWS_AS(SlideId::parse("nonsense"), FormatError);
}

TEST_CASE("filter_slides keeps slides with lung pixels") {
  auto lung = MaskVolume::zeros(4, 4, 3, MaskRole::lung);
  auto lesion = MaskVolume::zeros(4, 4, 3, MaskRole::lesion);
  lung.at(1, 2, 2) = 1;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) lung.at(2, y, x) = 1;
  lesion.at(0, 1, 1) = 1;  // lesion on a lungless slide
  lesion.at(2, 0, 0) = 1;

  const auto kept = filter_slides(survey_slides(lung, lesion, "A", 0));
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].id.slide == 1);
  CHECK_FALSE(kept[0].has_lesion());
  CHECK(kept[1].id.slide == 2);
  CHECK(kept[1].has_lesion());

  CHECK(filter_slides(kept) == kept);

  const auto empty = MaskVolume::zeros(4, 4, 3, MaskRole::lung);
  CHECK(filter_slides(survey_slides(empty, lesion, "A", 0)).empty());
}

TEST_CASE("filter_slides over a manifest on disk") {
  TempDir dir("pre");
  auto ct = HounsfieldVolume::zeros(4, 4, 2);
  auto lung = MaskVolume::zeros(4, 4, 2, MaskRole::lung);
  auto lesion = MaskVolume::zeros(4, 4, 2, MaskRole::lesion);
  lung.at(1, 0, 0) = 1;
  write_volume(ct, dir / "ct");
  write_volume(lung, dir / "lung");
  write_volume(lesion, dir / "lesion");
  DatasetManifest m;
  m.entries.push_back({dir / "ct.ctv.json", dir / "lung.ctv.json", dir / "lesion.ctv.json", "A"});
  write_manifest(m, dir / "manifest.json");

  const auto back = read_manifest(dir / "manifest.json");
  REQUIRE(back.entries.size() == 1);
  CHECK(std::filesystem::equivalent(back.entries[0].ct, dir / "ct.ctv.json"));
  CHECK(ctlab::testing::slurp(dir / "manifest.json").find("\"ct.ctv.json\"") != std::string::npos);

  const auto kept = filter_slides(back);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].id == SlideId{"A", 0, 1});

  write_volume(MaskVolume::zeros(4, 4, 3, MaskRole::lung), dir / "lung");
  CHECK_THROWS_AS(filter_slides(back), ShapeError);
}

TEST_CASE("split_dataset class counts") {
  const auto slides = records(10, 10);
  SplitSpec spec;
  spec.train_count = 8;
  spec.val_count = 4;
  spec.seed = 42;
  const auto split = split_dataset(slides, spec);

  std::set<SlideId> lesion_ids;
  for (const auto& r : slides)
    if (r.has_lesion()) lesion_ids.insert(r.id);
  auto count_lesion = [&](const std::vector<SlideId>& v) {
    return std::count_if(v.begin(), v.end(), [&](const SlideId& id) { return lesion_ids.count(id) > 0; });
  };
  CHECK(split.train.size() == 8);
  CHECK(count_lesion(split.train) == 4);
  CHECK(split.val.size() == 4);
  CHECK(count_lesion(split.val) == 2);
  CHECK(split.test.size() == 8);

  std::set<SlideId> all;
  for (const auto* part : {&split.train, &split.val, &split.test})
    for (const auto& id : *part) CHECK(all.insert(id).second);
  CHECK(all.size() == slides.size());

  const auto again = split_dataset(slides, spec);
  CHECK(again.train == split.train);
  CHECK(again.val == split.val);
  CHECK(again.test == split.test);
}

TEST_CASE("split_dataset errors and rounding") {
  SplitSpec spec;
  spec.train_count = 12;
  spec.val_count = 0;
  spec.lesion_ratio = 1.0;
  CHECK_THROWS_AS(split_dataset(records(10, 10), spec), DataError);
  spec.lesion_ratio = 1.5;
  CHECK_THROWS_AS(split_dataset(records(10, 10), spec), InvalidArgument);
  CHECK(lesion_quota(5, 0.5) == 3);
  CHECK(lesion_quota(440, 0.5) == 220);
  CHECK(lesion_quota(7, 0.0) == 0);
}

TEST_CASE("split_dataset holdout volumes only land in test") {
  const auto slides = records(10, 10);  // volumes 0..3, 5 slides each
  SplitSpec spec;
  spec.train_count = 4;
  spec.val_count = 2;
  spec.holdout_volumes = {0};
  const auto split = split_dataset(slides, spec);
  for (const auto& id : split.train) CHECK(id.volume != 0);
  for (const auto& id : split.val) CHECK(id.volume != 0);
  CHECK(std::count_if(split.test.begin(), split.test.end(), [](const SlideId& id) { return id.volume == 0; }) == 5);
}

TEST_CASE("property: splits are disjoint, cover the input and are seed-deterministic") {
  std::mt19937 gen(17);
  for (int trial = 0; trial < 30; ++trial) {
    const int lesion = 8 + gen() % 20, clean = 8 + gen() % 20;
    const auto slides = records(lesion, clean);
    SplitSpec spec;
    spec.train_count = static_cast<int>(gen() % 8);
    spec.val_count = static_cast<int>(gen() % 4);
    spec.seed = gen();
    const auto a = split_dataset(slides, spec);
    const auto b = split_dataset(slides, spec);
    CHECK(a.train == b.train);
    CHECK(a.test == b.test);
    std::set<SlideId> seen;
    for (const auto* part : {&a.train, &a.val, &a.test})
      for (const auto& id : *part) CHECK(seen.insert(id).second);
    CHECK(seen.size() == slides.size());
  }
}

TEST_CASE("lint: 3-pixel lesion inside the lung is a tiny component") {
  auto lung = MaskVolume::zeros(10, 10, 1, MaskRole::lung);
  auto lesion = MaskVolume::zeros(10, 10, 1, MaskRole::lesion);
  std::fill(lung.voxels.begin(), lung.voxels.end(), 1);
  lesion.at(0, 4, 4) = 1;
  lesion.at(0, 4, 5) = 1;
  lesion.at(0, 5, 4) = 1;
  const auto f = lint_annotations(lung, lesion, 10);
  REQUIRE(f.size() == 1);
  CHECK(f[0].kind == LintKind::tiny_component);
  CHECK(f[0].pixel_count == 3);
  CHECK(f[0].location == BoundingBox{4, 4, 5, 5});
}

TEST_CASE("lint: 50-pixel lesion inside the lung is clean") {
  auto lung = MaskVolume::zeros(12, 12, 1, MaskRole::lung);
  auto lesion = MaskVolume::zeros(12, 12, 1, MaskRole::lesion);
  std::fill(lung.voxels.begin(), lung.voxels.end(), 1);
  for (int y = 1; y < 6; ++y)
    for (int x = 1; x < 11; ++x) lesion.at(0, y, x) = 1;
  CHECK(lint_annotations(lung, lesion, 10).empty());
}

TEST_CASE("lint: lesion overlapping lung=0 is flagged, matching a brute-force overlap check") {
  auto lung = MaskVolume::zeros(12, 12, 2, MaskRole::lung);
  auto lesion = MaskVolume::zeros(12, 12, 2, MaskRole::lesion);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 6; ++x) lung.at(1, y, x) = 1;
  for (int y = 2; y < 6; ++y)
    for (int x = 3; x < 9; ++x) lesion.at(1, y, x) = 1;  // straddles x = 6

  bool overlap = false;
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x) overlap |= lesion.at(1, y, x) && !lung.at(1, y, x);
  REQUIRE(overlap);

  const auto f = lint_annotations(lung, lesion, 10, "A", 2);
  REQUIRE(f.size() == 1);
  CHECK(f[0].kind == LintKind::lesion_outside_lung);
  CHECK(f[0].slide_id == SlideId{"A", 2, 1});
  CHECK(f[0].pixel_count == 24);

  const auto jsonl = lint_report_jsonl(f);
  CHECK(jsonl == "{\"bbox\":[3,2,8,5],\"kind\":\"lesion_outside_lung\",\"pixel_count\":24,\"slide_id\":\"A:2:1\"}\n");
}

TEST_CASE("lint: diagonal pixels are separate 4-connected components") {
  auto lung = MaskVolume::zeros(4, 4, 1, MaskRole::lung);
  auto lesion = MaskVolume::zeros(4, 4, 1, MaskRole::lesion);
  std::fill(lung.voxels.begin(), lung.voxels.end(), 1);
  lesion.at(0, 0, 0) = 1;
  lesion.at(0, 1, 1) = 1;
  CHECK(lint_annotations(lung, lesion, 2).size() == 2);
  CHECK_THROWS_AS(lint_annotations(lung, MaskVolume::zeros(4, 4, 2, MaskRole::lesion)), ShapeError);
}

TEST_CASE("make_sample resizes and assembles both modes") {
  auto ct = HounsfieldVolume::zeros(8, 8, 1);
  std::fill(ct.voxels.begin(), ct.voxels.end(), static_cast<std::int16_t>(-575));
  auto lung = MaskVolume::zeros(8, 8, 1, MaskRole::lung);
  auto lesion = MaskVolume::zeros(8, 8, 1, MaskRole::lesion);
  lung.at(0, 0, 0) = 1;
  lesion.at(0, 0, 0) = 1;
  PreprocessOptions opt;
  opt.side = 4;
  const auto s = make_sample(ct, lung, lesion, {"A", 0, 0}, opt);
  CHECK(s.input.channels == 4);
  CHECK(s.input.side == 4);
  CHECK(s.has_lesion);
  CHECK(s.input.at(3, 0, 0) == 1.0f);
  CHECK(s.target.at(0, 0, 0) == 1.0f);
  CHECK(s.input.at(1, 2, 2) == doctest::Approx(0.5));

  opt.mode = SampleMode::lung;
  const auto l = make_sample(ct, lung, lesion, {"A", 0, 0}, opt);
  CHECK(l.input.channels == 3);
  CHECK(l.target.at(0, 0, 0) == 1.0f);
  CHECK(l.target.at(1, 0, 0) == 0.0f);
}

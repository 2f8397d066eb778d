#include "ctlab/viz_export.hpp"

#include <algorithm>

#include "ctlab/error.hpp"
#include "ctlab/phantom.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace ctlab;

TEST_CASE("one row per lung pixel with z from the slide spacing") {
  auto ct = HounsfieldVolume::zeros(4, 4, 3, 2.5);
  auto lung = MaskVolume::zeros(4, 4, 3, MaskRole::lung, 2.5);
  lung.at(0, 0, 0) = 1;
  lung.at(1, 1, 2) = 1;
  lung.at(2, 3, 3) = 1;
  lung.at(2, 3, 2) = 1;
  lung.at(2, 0, 1) = 1;
  ct.at(1, 1, 2) = -560;
  const auto rows = export_pointcloud(ct, lung, {});
  REQUIRE(rows.size() == 5u);
  CHECK(rows[0] == PointRow{0, 0, 0.0, 1.0});
  CHECK(rows[1].x == 2);
  CHECK(rows[1].y == 1);
  CHECK(rows[1].z == 2.5);
  CHECK(rows[1].value == doctest::Approx(0.5));
  CHECK(rows[2] == PointRow{1, 0, 5.0, 1.0});
  CHECK(rows[4].x == 3);

  ExportOptions opt;
  opt.spacing = 0.7;
  const auto spaced = export_pointcloud(ct, lung, opt);
  const int slides[] = {0, 1, 2, 2, 2};
  for (int i = 0; i < 5; ++i) CHECK(spaced[i].z == slides[i] * 0.7);
}

TEST_CASE("mask sources") {
  auto ct = HounsfieldVolume::zeros(3, 3, 1);
  auto lung = MaskVolume::zeros(3, 3, 1, MaskRole::lung);
  std::fill(lung.voxels.begin(), lung.voxels.end(), 1);
  auto pred = MaskVolume::zeros(3, 3, 1, MaskRole::lesion);
  ExportOptions opt;
  opt.source = PointSource::prediction;
  const auto all = export_pointcloud(ct, lung, opt, &pred);
  CHECK(all.size() == 9u);
  CHECK(std::all_of(all.begin(), all.end(), [](const PointRow& r) { return r.value == 0.0; }));
  opt.nonzero_only = true;
  CHECK(export_pointcloud(ct, lung, opt, &pred).empty());
  pred.at(0, 1, 1) = 1;
  const auto one = export_pointcloud(ct, lung, opt, &pred);
  REQUIRE(one.size() == 1u);
  CHECK(one[0] == PointRow{1, 1, 0.0, 1.0});
  CHECK_THROWS_AS(export_pointcloud(ct, lung, opt), InvalidArgument);
}

TEST_CASE("source names") {
  CHECK(parse_point_source("ct") == PointSource::ct);
  CHECK(parse_point_source("ground_truth") == PointSource::ground_truth);
  CHECK(parse_point_source("prediction") == PointSource::prediction);
  CHECK_THROWS_AS(parse_point_source("density"), InvalidArgument);
}

TEST_CASE("phantom exports are sorted, in range and byte-stable") {
  PhantomSpec spec;
  spec.depth = 6;
  spec.volumes = 1;
  spec.seed = 4;
  spec.slice_spacing = 1.25;
  const auto vols = generate_dataset(spec);
  const auto rows = export_pointcloud(vols[0].ct, vols[0].lung, {});
  CHECK(rows.size() == static_cast<std::size_t>(std::count(vols[0].lung.voxels.begin(), vols[0].lung.voxels.end(), 1)));
  CHECK(std::is_sorted(rows.begin(), rows.end(), [](const PointRow& a, const PointRow& b) {
    return std::tie(a.z, a.y, a.x) < std::tie(b.z, b.y, b.x);
  }));
  for (const auto& r : rows) {
    CHECK(r.value >= 0.0);
    CHECK(r.value <= 1.0);
  }

  ctlab::testing::TempDir dir("viz");
  write_pointcloud_csv(rows, dir / "a.csv");
  write_pointcloud_csv(export_pointcloud(vols[0].ct, vols[0].lung, {}), dir / "b.csv");
  const auto a = ctlab::testing::slurp(dir / "a.csv");
  CHECK(a == ctlab::testing::slurp(dir / "b.csv"));
  CHECK(a.rfind("x,y,z,value\n", 0) == 0);
  CHECK(a == pointcloud_csv(rows));
}

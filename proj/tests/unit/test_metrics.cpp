#include "ctlab/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "ctlab/error.hpp"
#include "doctest.h"

using namespace ctlab;

namespace {

BinaryGrid grid(int rows, int cols, std::initializer_list<int> v) {
  BinaryGrid g(rows, cols);
  std::copy(v.begin(), v.end(), g.data.begin());
  return g;
}

}  // namespace

TEST_CASE("confusion examples") {
  const auto pred = grid(2, 2, {1, 1, 0, 0});
  const auto gt = grid(2, 2, {1, 0, 1, 0});
  CHECK(confusion(pred, gt) == ConfusionCounts{1, 1, 1, 1});
  CHECK(confusion(gt, gt) == ConfusionCounts{2, 0, 0, 2});
  CHECK_THROWS_AS(confusion(pred, BinaryGrid(3, 3)), ShapeError);
}

TEST_CASE("slice metrics worked example") {
  const auto m = slice_metrics({2, 1, 1, 12});
  CHECK(m.precision == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.recall == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.accuracy == 0.875);
}

TEST_CASE("zero denominators give zero") {
  const auto empty = slice_metrics({0, 0, 0, 16});
  CHECK(empty.precision == 0.0);
  CHECK(empty.recall == 0.0);
  CHECK(empty.f1 == 0.0);
  CHECK(empty.accuracy == 1.0);
  const auto missed = slice_metrics({0, 0, 5, 11});
  CHECK(missed.precision == 0.0);
  CHECK(missed.f1 == 0.0);
  CHECK_THROWS_AS(slice_metrics({0, 0, 0, 0}), InvalidArgument);
}

TEST_CASE("property: swapping prediction and truth swaps precision and recall") {
  std::mt19937 gen(1);
  for (int trial = 0; trial < 200; ++trial) {
    BinaryGrid a(8, 8), b(8, 8);
    for (auto& v : a.data) v = gen() & 1;
    for (auto& v : b.data) v = (gen() % 3) == 0;
    const auto ab = slice_metrics(confusion(a, b));
    const auto ba = slice_metrics(confusion(b, a));
    CHECK(ab.precision == ba.recall);
    CHECK(ab.recall == ba.precision);
    CHECK(ab.f1 == doctest::Approx(ba.f1).epsilon(1e-15));
    CHECK(ab.accuracy == ba.accuracy);
    for (double v : {ab.accuracy, ab.precision, ab.recall, ab.f1}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("aggregate averages lesion slides only") {
  std::vector<SliceMetrics> rows(3);
  rows[0].f1 = 0.8;
  rows[1].f1 = 0.6;
  rows[2].f1 = 0.0;
  const bool flags[] = {true, true, false};
  const auto agg = aggregate(rows, flags);
  CHECK(agg.mean.f1 == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(agg.slide_count == 2u);
  const bool none[] = {false, false, false};
  CHECK_THROWS_AS(aggregate(rows, none), DataError);
  CHECK_THROWS_AS(aggregate(rows, std::span<const bool>(flags, 2)), InvalidArgument);
}

TEST_CASE("property: aggregate is invariant under row permutation") {
  std::mt19937 gen(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<SliceMetrics> rows(40);
  bool flags[40];
  for (int i = 0; i < 40; ++i) {
    rows[i] = {SlideId{"A", 0, i}, u(gen), u(gen), u(gen), u(gen)};
    flags[i] = gen() & 1;
  }
  flags[0] = true;
  const auto base = aggregate(rows, flags);
  std::vector<int> idx(40);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), gen);
  std::vector<SliceMetrics> rows2;
  bool flags2[40];
  for (int i = 0; i < 40; ++i) {
    rows2.push_back(rows[idx[i]]);
    flags2[i] = flags[idx[i]];
  }
  const auto perm = aggregate(rows2, flags2);
  CHECK(perm.slide_count == base.slide_count);
  CHECK(perm.mean.f1 == doctest::Approx(base.mean.f1).epsilon(1e-14));
  CHECK(perm.mean.accuracy == doctest::Approx(base.mean.accuracy).epsilon(1e-14));
}

TEST_CASE("report csv layout") {
  std::vector<SliceMetrics> rows = {slice_metrics({2, 1, 1, 12}, {"A", 0, 3}), slice_metrics({0, 0, 0, 16}, {"A", 0, 4})};
  const bool flags[] = {true, false};
  const auto csv = metrics_report_csv(rows, flags);
  CHECK(csv.rfind("slide_id,accuracy,precision,recall,f1,has_lesion\n", 0) == 0);
  CHECK(csv.find("A:0:3,") != std::string::npos);
  CHECK(csv.find("A:0:3,0.875000,0.666667,0.666667,0.666667,1\n") != std::string::npos);
  CHECK(csv.substr(csv.size() - 55) == "MEAN(covid-only),0.875000,0.666667,0.666667,0.666667,1\n");
}

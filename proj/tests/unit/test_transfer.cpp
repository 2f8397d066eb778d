#include "ctlab/transfer.hpp"

#include "ctlab/error.hpp"
#include "ctlab/phantom.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace ctlab;

namespace {

DatasetSplits tiny_dataset(double shift, std::uint64_t seed) {
  PhantomSpec spec;
  spec.side = 16;
  spec.depth = 12;
  spec.volumes = 1;
  spec.shift = shift;
  spec.seed = seed;
  spec.lesion_fraction = 0.3;
  const auto vols = generate_dataset(spec);
  PreprocessOptions opt;
  opt.side = 16;
  DatasetSplits ds;
  for (int s = 0; s < spec.depth; ++s) {
    auto sample = make_sample(vols[0].ct, vols[0].lung, vols[0].lesion, {"D", 0, s}, opt);
    (s < 6 ? ds.train : s < 8 ? ds.val : ds.test).push_back(std::move(sample));
  }
  // Guarantee a lesion slide in every test split.
  ds.test.front().has_lesion = true;
  return ds;
}

DatasetRegistry tiny_registry() {
  return {{"A", tiny_dataset(0, 1)}, {"B", tiny_dataset(120, 2)}, {"C", tiny_dataset(-120, 3)}};
}

ExperimentDefaults tiny_defaults() {
  ExperimentDefaults d;
  d.network.depth = 2;
  d.network.base_width = 4;
  d.network.image_side = 16;
  d.training.learning_rate = 1e-3;
  d.training.batch_size = 3;
  d.training.max_epochs = 2;
  return d;
}

ResultsMatrix single(const std::string& name, const std::string& tag, double f1) {
  ResultsMatrix m;
  MatrixRow r;
  r.name = name;
  r.test_tag = tag;
  r.mean.f1 = f1;
  m.rows.push_back(r);
  return m;
}

}  // namespace

TEST_CASE("plan names") {
  const std::vector<std::string> none, two = {"2"}, two_three = {"2", "3"};
  CHECK(plan_name("1", none, "1") == "Tr1_R_None_Te1");
  CHECK(plan_name("1", two_three, "2") == "Tr1_R_2_R_3_Te2");
  CHECK(plan_name("2", two, "3") == "Tr2_R_2_Te3");
  CHECK(lineage_name("1", two) == "Tr1_R_2");
  CHECK_THROWS_AS(plan_name("A_B", none, "1"), InvalidArgument);
  CHECK_THROWS_AS(plan_name("1", none, ""), InvalidArgument);
}

TEST_CASE("forgetting delta on the published F1 sequence") {
  const auto first = single("Tr1_R_None_Te1", "1", 0.799373);
  const auto second = single("Tr1_R_2_Te1", "1", 0.690094);
  const auto third = single("Tr1_R_2_R_3_Te1", "1", 0.242582);
  CHECK(forgetting_delta(first, second, "1") == doctest::Approx(-0.109279).epsilon(1e-9));
  CHECK(forgetting_delta(second, third, "1") == doctest::Approx(-0.447512).epsilon(1e-9));
  CHECK_THROWS_AS(forgetting_delta(first, second, "2"), DataError);
  auto twice = first;
  twice.rows.push_back(twice.rows.front());
  CHECK_THROWS_AS(forgetting_delta(twice, second, "1"), DataError);
}

TEST_CASE("plan validation, prefix and file round trip") {
  ExperimentPlan p{"A", {"B", "C"}, {"A", "B"}, {3, 2, 2}, {4, 5}, true};
  CHECK_NOTHROW(p.validate());
  CHECK(p.stage_count() == 3);
  const auto p1 = p.prefix(1);
  CHECK(p1.retrain_tags == std::vector<std::string>{"B"});
  CHECK(p1.stage_epochs == std::vector<int>{3, 2});
  CHECK_THROWS_AS(p.prefix(3), InvalidArgument);

  auto bad = p;
  bad.stage_epochs = {3};
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = p;
  bad.test_tags.clear();
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);

  ctlab::testing::TempDir dir("plan");
  write_plan(p, dir / "plan.json");
  const auto back = read_plan(dir / "plan.json");
  CHECK(back.train_tag == "A");
  CHECK(back.retrain_tags == p.retrain_tags);
  CHECK(back.test_tags == p.test_tags);
  CHECK(back.stage_epochs == p.stage_epochs);
  CHECK(back.seeds.init == 4);
  CHECK(back.seeds.train == 5);
  CHECK(back.report_all_stages);
}

TEST_CASE("degenerate plan trains once and reports one row per test tag") {
  const auto registry = tiny_registry();
  ExperimentPlan plan{"A", {}, {"A", "B"}, {}, {1, 2}, false};
  const auto r = run_experiment(plan, registry, tiny_defaults());
  CHECK(r.lineage.name == "TrA_R_None");
  CHECK(r.lineage.checkpoints.size() == 1u);
  REQUIRE(r.matrix.rows.size() == 2u);
  CHECK(r.matrix.rows[0].name == "TrA_R_None_TeA");
  CHECK(r.matrix.rows[1].name == "TrA_R_None_TeB");
  CHECK(r.matrix.csv().rfind("name,Acc,Pre,Rec,F1,slides\nTrA_R_None_TeA,", 0) == 0);
}

TEST_CASE("experiments are deterministic and stage k equals the k-prefix plan") {
  const auto registry = tiny_registry();
  ExperimentPlan plan{"A", {"B", "C"}, {"A"}, {2, 1, 1}, {7, 8}, true};
  const auto a = run_experiment(plan, registry, tiny_defaults());
  const auto b = run_experiment(plan, registry, tiny_defaults());
  CHECK(a.matrix.csv() == b.matrix.csv());
  CHECK(a.lineage.checkpoints == b.lineage.checkpoints);
  REQUIRE(a.matrix.rows.size() == 3u);
  CHECK(a.matrix.rows[2].name == "TrA_R_B_R_C_TeA");
  CHECK(a.lineage.stage_seeds[0] != a.lineage.stage_seeds[1]);

  for (int k = 0; k < 3; ++k) {
    auto pk = plan.prefix(k);
    pk.report_all_stages = false;
    const auto rk = run_experiment(pk, registry, tiny_defaults());
    CHECK(rk.lineage.checkpoints.back() == a.lineage.checkpoints[k]);
    CHECK(rk.matrix.rows[0].mean.f1 == a.matrix.rows[k].mean.f1);
  }
}

TEST_CASE("unknown datasets are reported before training") {
  ExperimentPlan plan{"A", {"Z"}, {"A"}, {}, {}, false};
  CHECK_THROWS_AS(run_experiment(plan, tiny_registry(), tiny_defaults()), DataError);
}

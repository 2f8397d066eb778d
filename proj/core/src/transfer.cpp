#include "ctlab/transfer.hpp"

#include <fstream>
#include <memory>

#include "ctlab/error.hpp"
#include "ctlab/random.hpp"
#include "json.hpp"

namespace ctlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_tag(const std::string& tag) {
  if (tag.empty() || tag.find('_') != std::string::npos) {
    throw InvalidArgument("dataset tag '" + tag + "' must be non-empty and contain no underscores");
  }
}

}  // namespace

std::string lineage_name(const std::string& train_tag, std::span<const std::string> retrain_tags) {
  check_tag(train_tag);
  std::string name = "Tr" + train_tag;
  if (retrain_tags.empty()) return name + "_R_None";
  for (const auto& r : retrain_tags) {
    check_tag(r);
    name += "_R_" + r;
  }
  return name;
}

std::string plan_name(const std::string& train_tag, std::span<const std::string> retrain_tags,
                      const std::string& test_tag) {
  check_tag(test_tag);
  return lineage_name(train_tag, retrain_tags) + "_Te" + test_tag;
}

void ExperimentPlan::validate() const {
  check_tag(train_tag);
  for (const auto& t : retrain_tags) check_tag(t);
  for (const auto& t : test_tags) check_tag(t);
  if (test_tags.empty()) throw InvalidArgument("plan has no test tags");
  if (!stage_epochs.empty() && static_cast<int>(stage_epochs.size()) != stage_count()) {
    throw InvalidArgument("stage_epochs needs " + std::to_string(stage_count()) + " entries");
  }
  for (int e : stage_epochs) {
    if (e < 1) throw InvalidArgument("stage_epochs entries must be >= 1");
  }
}

ExperimentPlan ExperimentPlan::prefix(int stage) const {
  if (stage < 0 || stage >= stage_count()) throw InvalidArgument("stage out of range");
  ExperimentPlan p = *this;
  p.retrain_tags.resize(stage);
  if (!p.stage_epochs.empty()) p.stage_epochs.resize(stage + 1);
  return p;
}

ExperimentPlan read_plan(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open plan '" + path.string() + "'");
  ExperimentPlan p;
  try {
    json j;
    in >> j;
    p.train_tag = j.at("train").get<std::string>();
    p.retrain_tags = j.value("retrains", std::vector<std::string>{});
    p.test_tags = j.at("tests").get<std::vector<std::string>>();
    p.stage_epochs = j.value("stage_epochs", std::vector<int>{});
    if (j.contains("seeds")) {
      p.seeds.init = j["seeds"].value("init", std::uint64_t{0});
      p.seeds.train = j["seeds"].value("train", std::uint64_t{0});
    }
    p.report_all_stages = j.value("report_all_stages", false);
  } catch (const json::exception& e) {
    throw FormatError("malformed plan '" + path.string() + "': " + e.what());
  }
  p.validate();
  return p;
}

void write_plan(const ExperimentPlan& plan, const fs::path& path) {
  const json j{{"train", plan.train_tag},
               {"retrains", plan.retrain_tags},
               {"tests", plan.test_tags},
               {"stage_epochs", plan.stage_epochs},
               {"seeds", {{"init", plan.seeds.init}, {"train", plan.seeds.train}}},
               {"report_all_stages", plan.report_all_stages}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write plan '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

std::string ResultsMatrix::csv() const {
  std::string out = "name,Acc,Pre,Rec,F1,slides\n";
  char buf[320];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%zu\n", r.name.c_str(), r.mean.accuracy,
                  r.mean.precision, r.mean.recall, r.mean.f1, r.slide_count);
    out += buf;
  }
  return out;
}

std::vector<const MatrixRow*> ResultsMatrix::rows_for(const std::string& test_tag) const {
  std::vector<const MatrixRow*> out;
  for (const auto& r : rows)
    if (r.test_tag == test_tag) out.push_back(&r);
  return out;
}

std::vector<SliceMetrics> evaluate_slices(const ParamSet<float>& params, std::span<const Sample> samples,
                                          double threshold, int jobs) {
  const auto preds = predict_masks(params, samples, threshold, 32, jobs);
  std::vector<SliceMetrics> rows;
  rows.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& t = samples[i].target;
    BinaryGrid gt(t.side, t.side);
    for (std::size_t k = 0; k < gt.data.size(); ++k) gt.data[k] = t.data[k] >= 0.5f;
    rows.push_back(slice_metrics(confusion(preds[i], gt), samples[i].id));
  }
  return rows;
}

AggregateMetrics evaluate(const ParamSet<float>& params, std::span<const Sample> samples,
                          double threshold, int jobs) {
  const auto rows = evaluate_slices(params, samples, threshold, jobs);
  // std::vector<bool> is not contiguous, so the flags go through a plain array.
  auto flags = std::make_unique<bool[]>(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) flags[i] = samples[i].has_lesion;
  return aggregate(rows, std::span<const bool>(flags.get(), samples.size()));
}

namespace {

const DatasetSplits& lookup(const DatasetRegistry& registry, const std::string& tag) {
  const auto it = registry.find(tag);
  if (it == registry.end()) throw DataError("dataset '" + tag + "' is not registered");
  return it->second;
}

}  // namespace

ResultsMatrix evaluate_stage(const ExperimentPlan& plan, const ModelLineage& lineage, int stage,
                             const DatasetRegistry& registry, double threshold, int jobs) {
  if (stage < 0 || stage >= static_cast<int>(lineage.checkpoints.size())) {
    throw InvalidArgument("lineage has no stage " + std::to_string(stage));
  }
  const std::span<const std::string> retrains(plan.retrain_tags.data(), stage);
  ResultsMatrix m;
  for (const auto& tag : plan.test_tags) {
    const auto& ds = lookup(registry, tag);
    if (ds.test.empty()) throw DataError("dataset '" + tag + "' has an empty test split");
    const auto agg = evaluate(lineage.checkpoints[stage], ds.test, threshold, jobs);
    m.rows.push_back({plan_name(plan.train_tag, retrains, tag), tag, stage, agg.mean, agg.slide_count});
  }
  return m;
}

ExperimentResult run_experiment(const ExperimentPlan& plan, const DatasetRegistry& registry,
                                const ExperimentDefaults& defaults) {
  plan.validate();
  lookup(registry, plan.train_tag);
  for (const auto& t : plan.retrain_tags) lookup(registry, t);
  for (const auto& t : plan.test_tags) lookup(registry, t);

  ExperimentResult result;
  result.lineage.name = lineage_name(plan.train_tag, plan.retrain_tags);

  ParamSet<float> params = init_unet<float>(defaults.network, plan.seeds.init);
  for (int stage = 0; stage < plan.stage_count(); ++stage) {
    const std::string& tag = stage == 0 ? plan.train_tag : plan.retrain_tags[stage - 1];
    const auto& ds = lookup(registry, tag);
    TrainConfig cfg = defaults.training;
    cfg.seed = mix_seed(plan.seeds.train, static_cast<std::uint64_t>(stage));
    if (!plan.stage_epochs.empty()) cfg.max_epochs = plan.stage_epochs[stage];
    TrainResult<float> tr;
    try {
      tr = train(std::move(params), ds.train, ds.val, cfg);
    } catch (const TrainingDiverged& e) {
      throw TrainingDiverged(e.epoch(), "stage " + std::to_string(stage) + " (" + tag + "): " + e.what());
    }
    params = tr.params;
    result.lineage.checkpoints.push_back(std::move(tr.params));
    result.lineage.logs.push_back(std::move(tr.log));
    result.lineage.stage_seeds.push_back(cfg.seed);
  }

  const int last = plan.stage_count() - 1;
  for (int stage = plan.report_all_stages ? 0 : last; stage <= last; ++stage) {
    auto m = evaluate_stage(plan, result.lineage, stage, registry, defaults.threshold,
                            defaults.training.jobs);
    result.matrix.rows.insert(result.matrix.rows.end(), m.rows.begin(), m.rows.end());
  }
  return result;
}

double forgetting_delta(const ResultsMatrix& before, const ResultsMatrix& after, const std::string& test_tag) {
  const auto b = before.rows_for(test_tag);
  const auto a = after.rows_for(test_tag);
  if (b.empty() || a.empty()) throw DataError("no results row for test tag '" + test_tag + "'");
  if (b.size() > 1 || a.size() > 1) {
    throw DataError("several results rows for test tag '" + test_tag + "'; pass single-stage matrices");
  }
  return a.front()->mean.f1 - b.front()->mean.f1;
}

}  // namespace ctlab

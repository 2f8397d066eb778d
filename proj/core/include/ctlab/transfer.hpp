#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ctlab/metrics.hpp"
#include "ctlab/segnet.hpp"

namespace ctlab {

/// Train/validation/test samples of one registered dataset.
struct DatasetSplits {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
};

using DatasetRegistry = std::map<std::string, DatasetSplits>;

/// "Tr{t}" + "_R_{r}" per retrain (or "_R_None") + "_Te{e}".
std::string plan_name(const std::string& train_tag, std::span<const std::string> retrain_tags,
                      const std::string& test_tag);
/// The same name without the test suffix.
std::string lineage_name(const std::string& train_tag, std::span<const std::string> retrain_tags);

struct ExperimentSeeds {
  std::uint64_t init = 0;
  std::uint64_t train = 0;
};

struct ExperimentPlan {
  std::string train_tag;
  std::vector<std::string> retrain_tags;
  std::vector<std::string> test_tags;
  /// max_epochs per stage (1 + retrains entries); empty uses the default.
  std::vector<int> stage_epochs;
  ExperimentSeeds seeds;
  /// Also report every intermediate stage on every test tag.
  bool report_all_stages = false;

  void validate() const;
  int stage_count() const { return 1 + static_cast<int>(retrain_tags.size()); }
  /// The plan truncated after stage k (0 = no retrains).
  ExperimentPlan prefix(int stage) const;
};

/// Plan file: {"train", "retrains", "tests", "stage_epochs", "seeds": {"init", "train"}}.
/// Unknown top-level blocks ("network", "training") are left for the caller.
ExperimentPlan read_plan(const std::filesystem::path& path);
void write_plan(const ExperimentPlan& plan, const std::filesystem::path& path);

struct ModelLineage {
  std::string name;
  std::vector<ParamSet<float>> checkpoints;  ///< best parameters after each stage
  std::vector<TrainLog> logs;
  std::vector<std::uint64_t> stage_seeds;
};

struct MatrixRow {
  std::string name;
  std::string test_tag;
  int stage = 0;
  SliceMetrics mean;
  std::size_t slide_count = 0;
};

struct ResultsMatrix {
  std::vector<MatrixRow> rows;

  /// "name,Acc,Pre,Rec,F1,slides"
  std::string csv() const;
  std::vector<const MatrixRow*> rows_for(const std::string& test_tag) const;
};

struct ExperimentDefaults {
  UNetConfig network;
  TrainConfig training;
  double threshold = 0.5;
};

struct ExperimentResult {
  ModelLineage lineage;
  ResultsMatrix matrix;
};

/// Per-slice metrics of a model on a sample set.
std::vector<SliceMetrics> evaluate_slices(const ParamSet<float>& params, std::span<const Sample> samples,
                                          double threshold = 0.5, int jobs = 1);
/// Covid-only mean of evaluate_slices.
AggregateMetrics evaluate(const ParamSet<float>& params, std::span<const Sample> samples,
                          double threshold = 0.5, int jobs = 1);

/// Stage 0 trains from init_unet on the train tag; stage k resumes from stage
/// k-1's best checkpoint on retrain tag k-1 with fresh optimizer state. The
/// final (or every) stage is then scored on each test tag's test split.
ExperimentResult run_experiment(const ExperimentPlan& plan, const DatasetRegistry& registry,
                                const ExperimentDefaults& defaults);

/// Rows for `plan`'s test tags using an already-trained lineage at `stage`.
ResultsMatrix evaluate_stage(const ExperimentPlan& plan, const ModelLineage& lineage, int stage,
                             const DatasetRegistry& registry, double threshold = 0.5, int jobs = 1);

/// F1(after) - F1(before) on `test_tag`; negative means forgetting.
double forgetting_delta(const ResultsMatrix& before, const ResultsMatrix& after,
                        const std::string& test_tag);

}  // namespace ctlab

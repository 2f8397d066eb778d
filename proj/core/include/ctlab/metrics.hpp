#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctlab/grid.hpp"
#include "ctlab/preprocess.hpp"

namespace ctlab {

/// Pixel confusion counts; the positive class is lesion (value 1).
struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::int64_t total() const { return tp + fp + fn + tn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct SliceMetrics {
  SlideId slide_id;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

ConfusionCounts confusion(const BinaryGrid& pred, const BinaryGrid& gt);

/// Precision, recall and F1 fall back to 0 when their denominators vanish.
SliceMetrics slice_metrics(const ConfusionCounts& c, const SlideId& id = {});

struct AggregateMetrics {
  SliceMetrics mean;
  std::size_t slide_count = 0;
};

/// Unweighted mean over the rows whose flag is set. Throws DataError when no
/// row qualifies.
AggregateMetrics aggregate(std::span<const SliceMetrics> rows, std::span<const bool> lesion_flags);

/// "slide_id,accuracy,precision,recall,f1,has_lesion" plus a trailing
/// MEAN(covid-only) row.
std::string metrics_report_csv(std::span<const SliceMetrics> rows, std::span<const bool> lesion_flags);

}  // namespace ctlab

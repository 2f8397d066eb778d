#include "ctlab/metrics.hpp"

#include <cstdio>

#include "ctlab/error.hpp"

namespace ctlab {

ConfusionCounts confusion(const BinaryGrid& pred, const BinaryGrid& gt) {
  if (!pred.same_shape(gt)) throw ShapeError("prediction and ground truth shapes differ");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const auto p = pred.data[i], g = gt.data[i];
    if (p > 1 || g > 1) throw InvalidArgument("confusion expects binary masks");
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

SliceMetrics slice_metrics(const ConfusionCounts& c, const SlideId& id) {
  if (c.tp < 0 || c.fp < 0 || c.fn < 0 || c.tn < 0) throw InvalidArgument("negative confusion count");
  const auto total = c.total();
  if (total <= 0) throw InvalidArgument("slice has no pixels");
  SliceMetrics m;
  m.slide_id = id;
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(total);
  m.precision = c.tp + c.fp > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
  m.recall = c.tp + c.fn > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  const double pr = m.precision + m.recall;
  m.f1 = pr > 0.0 ? 2.0 * m.precision * m.recall / pr : 0.0;
  return m;
}

AggregateMetrics aggregate(std::span<const SliceMetrics> rows, std::span<const bool> lesion_flags) {
  if (rows.size() != lesion_flags.size()) throw InvalidArgument("metric rows and flags are not aligned");
  AggregateMetrics a;
  a.mean.slide_id = SlideId{"MEAN(covid-only)", 0, 0};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!lesion_flags[i]) continue;
    a.mean.accuracy += rows[i].accuracy;
    a.mean.precision += rows[i].precision;
    a.mean.recall += rows[i].recall;
    a.mean.f1 += rows[i].f1;
    ++a.slide_count;
  }
  if (a.slide_count == 0) throw DataError("no lesion-bearing slides to aggregate");
  const double n = static_cast<double>(a.slide_count);
  a.mean.accuracy /= n;
  a.mean.precision /= n;
  a.mean.recall /= n;
  a.mean.f1 /= n;
  return a;
}

std::string metrics_report_csv(std::span<const SliceMetrics> rows, std::span<const bool> lesion_flags) {
  if (rows.size() != lesion_flags.size()) throw InvalidArgument("metric rows and flags are not aligned");
  std::string out = "slide_id,accuracy,precision,recall,f1,has_lesion\n";
  char buf[256];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%d\n", r.slide_id.str().c_str(), r.accuracy,
                  r.precision, r.recall, r.f1, lesion_flags[i] ? 1 : 0);
    out += buf;
  }
  const auto a = aggregate(rows, lesion_flags);
  std::snprintf(buf, sizeof buf, "MEAN(covid-only),%.6f,%.6f,%.6f,%.6f,%zu\n", a.mean.accuracy,
                a.mean.precision, a.mean.recall, a.mean.f1, a.slide_count);
  out += buf;
  return out;
}

}  // namespace ctlab

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ctlab/preprocess.hpp"
#include "ctlab/volume_io.hpp"

namespace ctlab {

/// One lung pixel in viewer space.
struct PointRow {
  int x = 0;
  int y = 0;
  double z = 0.0;
  double value = 0.0;
  friend bool operator==(const PointRow&, const PointRow&) = default;
};

enum class PointSource { ct, ground_truth, prediction };
const char* to_string(PointSource s);
/// Throws InvalidArgument for anything but "ct", "ground_truth" or "prediction".
PointSource parse_point_source(const std::string& s);

struct ExportOptions {
  PointSource source = PointSource::ct;
  /// Slide spacing; <= 0 means use the CT header's slice_spacing.
  double spacing = 0.0;
  bool nonzero_only = false;
  /// Normalisation window for CT values.
  WindowSpec window{-970.0, -150.0};
};

/// One row per lung pixel, slide-major then row-major, z = slide * spacing.
/// `values` supplies the mask for ground_truth / prediction sources.
std::vector<PointRow> export_pointcloud(const HounsfieldVolume& ct, const MaskVolume& lung,
                                        const ExportOptions& options, const MaskVolume* values = nullptr);

/// "x,y,z,value" header, LF endings, reals with 6 significant digits.
std::string pointcloud_csv(const std::vector<PointRow>& rows);
void write_pointcloud_csv(const std::vector<PointRow>& rows, const std::filesystem::path& path);

}  // namespace ctlab

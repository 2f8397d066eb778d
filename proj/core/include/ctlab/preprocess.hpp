#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctlab/grid.hpp"
#include "ctlab/volume_io.hpp"

namespace ctlab {

/// A Hounsfield interval mapped linearly onto [0, 1].
struct WindowSpec {
  double lo = 0.0;
  double hi = 0.0;

  void validate() const;
  bool contains(const WindowSpec& other) const { return lo <= other.lo && other.hi <= hi; }
  friend bool operator==(const WindowSpec&, const WindowSpec&) = default;
};

/// Three stacked windows. The first must contain the other two: disjoint
/// windows lose the signal that lets a threshold separate lesion from lung.
struct ChannelBank {
  std::array<WindowSpec, 3> windows{{{-970.0, -150.0}, {-700.0, -450.0}, {-450.0, -150.0}}};

  void validate() const;
};

/// clamp((hu - lo) / (hi - lo), 0, 1)
double window_normalize(double hu, const WindowSpec& w);

/// Nearest-neighbour resampling to side x side with source index
/// floor(i * H / S). Output values are always drawn from the input.
template <class T>
Grid<T> resize_nn(const Grid<T>& image, int side);
/// General form: output(i, j) = input(floor(i * H / rows), floor(j * W / cols)).
template <class T>
Grid<T> resize_nn(const Grid<T>& image, int rows, int cols);

/// Row-major planar image, channel-major.
struct Image {
  int channels = 0;
  int side = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int s) : channels(c), side(s), data(static_cast<std::size_t>(c) * s * s, 0.0f) {}

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * side + y) * side + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * side + y) * side + x]; }
  std::size_t plane() const { return static_cast<std::size_t>(side) * side; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Channels 0-2 are the bank's windows, channel 3 the lung mask verbatim.
Image assemble_input(const Grid<std::int16_t>& hu, const BinaryGrid& lung, const ChannelBank& bank);

/// Window channels only, for the lung-segmentation configuration.
Image assemble_windows(const Grid<std::int16_t>& hu, const ChannelBank& bank);

/// Channel 0 = mask, channel 1 = 1 - mask.
Image assemble_target(const BinaryGrid& mask);

struct SlideId {
  std::string tag;
  int volume = 0;
  int slide = 0;

  std::string str() const;
  static SlideId parse(const std::string& s);
  friend bool operator==(const SlideId&, const SlideId&) = default;
  friend auto operator<=>(const SlideId&, const SlideId&) = default;
};

struct Sample {
  Image input;
  Image target;
  SlideId id;
  bool has_lesion = false;
};

struct ManifestEntry {
  std::filesystem::path ct;
  std::filesystem::path lung;
  std::filesystem::path lesion;
  std::string tag;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
};

/// Relative paths in the file are resolved against the manifest's directory.
DatasetManifest read_manifest(const std::filesystem::path& path);
/// Paths are written relative to `path`'s directory when they live below it.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Per-slide annotation summary; the unit filter_slides and split_dataset operate on.
struct SlideRecord {
  SlideId id;
  std::int64_t lung_pixels = 0;
  std::int64_t lesion_pixels = 0;

  bool has_lesion() const { return lesion_pixels > 0; }
  friend bool operator==(const SlideRecord&, const SlideRecord&) = default;
};

std::vector<SlideRecord> survey_slides(const MaskVolume& lung, const MaskVolume& lesion,
                                       const std::string& tag, int volume_index);

/// Keeps slides whose lung mask has at least one set pixel.
std::vector<SlideRecord> filter_slides(const std::vector<SlideRecord>& slides);

/// Loads every entry (validating CT/mask pairing) and filters its slides.
std::vector<SlideRecord> filter_slides(const DatasetManifest& manifest);

struct SplitSpec {
  int train_count = 440;
  int val_count = 60;
  double lesion_ratio = 0.5;
  std::uint64_t seed = 0;
  /// Volumes (by index within their tag) whose slides may only land in test.
  std::vector<int> holdout_volumes;

  void validate() const;
};

struct DatasetSplit {
  std::vector<SlideId> train;
  std::vector<SlideId> val;
  std::vector<SlideId> test;
};

/// round-half-up(count * ratio); the non-lesion class takes the remainder.
int lesion_quota(int count, double ratio);

DatasetSplit split_dataset(const std::vector<SlideRecord>& slides, const SplitSpec& spec);

enum class LintKind { lesion_outside_lung, tiny_component };
const char* to_string(LintKind k);

struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct LintFinding {
  SlideId slide_id;
  LintKind kind = LintKind::tiny_component;
  std::int64_t pixel_count = 0;
  BoundingBox location;
};

/// Scans 4-connected lesion components slide by slide.
std::vector<LintFinding> lint_annotations(const MaskVolume& lung, const MaskVolume& lesion,
                                          int min_component = 10, const std::string& tag = "",
                                          int volume_index = 0);

/// One JSON object per line.
std::string lint_report_jsonl(const std::vector<LintFinding>& findings);

/// How a volume triple becomes samples.
enum class SampleMode {
  lesion,  ///< 4-channel input, lesion target
  lung,    ///< 3-channel input, lung target
};

struct PreprocessOptions {
  int side = 320;
  ChannelBank bank;
  SampleMode mode = SampleMode::lesion;
};

/// Resizes one slide triple and builds its sample.
Sample make_sample(const HounsfieldVolume& ct, const MaskVolume& lung, const MaskVolume& lesion,
                   const SlideId& id, const PreprocessOptions& options);

}  // namespace ctlab

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctlab/preprocess.hpp"
#include "ctlab/volume_io.hpp"

namespace ctlab {

/// Synthetic chest-CT stand-in. `shift` moves every tissue centre (not the
/// noise) and plays the role of a different scanner.
struct PhantomSpec {
  int side = 32;
  int depth = 16;           ///< slides per volume
  int volumes = 4;
  double lung_hu_center = -650.0;
  double lung_hu_jitter = 20.0;  ///< per-slide uniform offset of the lung centre
  double lesion_hu_center = -300.0;
  double lesion_fraction = 0.2;  ///< share of lung pixels lesioned on lesion slides
  double lesion_slide_fraction = 0.5;
  double shift = 0.0;
  double noise_sd = 20.0;
  double background_hu = 0.0;
  double slice_spacing = 1.0;
  int model_depth = 2;  ///< side must be divisible by 2^model_depth; 0 skips the check
  int min_lesion_component = 10;
  bool inject_faults = false;
  std::uint64_t seed = 0;

  void validate() const;
};

PhantomSpec read_phantom_spec(const std::filesystem::path& path);
void write_phantom_spec(const PhantomSpec& spec, const std::filesystem::path& path);

/// An annotation fault planted on purpose.
struct PlantedDefect {
  int volume = 0;
  int slide = 0;
  LintKind kind = LintKind::tiny_component;
  std::int64_t pixel_count = 0;
  BoundingBox box;
};

struct PhantomVolume {
  HounsfieldVolume ct;
  MaskVolume lung;
  MaskVolume lesion;
  std::vector<PlantedDefect> defects;
};

/// Deterministic in spec.seed. Throws DataError when lesions are requested
/// but a slide ends up without lung pixels.
std::vector<PhantomVolume> generate_dataset(const PhantomSpec& spec);

/// Writes `<dir>/<tag>_v<i>_{ct,lung,lesion}.ctv.*` and `<dir>/<tag>.manifest.json`.
DatasetManifest write_phantom_dataset(const std::vector<PhantomVolume>& volumes,
                                      const std::filesystem::path& dir, const std::string& tag);

}  // namespace ctlab

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "ctlab/grid.hpp"

namespace ctlab {

enum class ValueKind { hounsfield_i16, mask_u8 };
enum class MaskRole { lung, lesion };

const char* to_string(ValueKind k);
const char* to_string(MaskRole r);
ValueKind parse_value_kind(const std::string& s);
MaskRole parse_mask_role(const std::string& s);

struct VolumeHeader {
  int width = 0;
  int height = 0;
  int depth = 0;
  double slice_spacing = 1.0;
  ValueKind value_kind = ValueKind::hounsfield_i16;

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(width) * height * depth;
  }
  std::size_t slice_size() const { return static_cast<std::size_t>(width) * height; }
  std::size_t bytes_per_voxel() const { return value_kind == ValueKind::hounsfield_i16 ? 2 : 1; }

  /// Throws InvalidArgument unless dimensions are positive and spacing > 0.
  void validate() const;

  friend bool operator==(const VolumeHeader&, const VolumeHeader&) = default;
};

/// Raw CT in Hounsfield units, stored slide-major then row-major.
struct HounsfieldVolume {
  VolumeHeader header;
  std::vector<std::int16_t> voxels;

  static HounsfieldVolume zeros(int width, int height, int depth, double spacing = 1.0);

  std::int16_t at(int z, int y, int x) const { return voxels[index(z, y, x)]; }
  std::int16_t& at(int z, int y, int x) { return voxels[index(z, y, x)]; }
  Grid<std::int16_t> slide(int z) const;
  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * header.height + y) * header.width + x;
  }

  void validate() const;
  friend bool operator==(const HounsfieldVolume&, const HounsfieldVolume&) = default;
};

/// Binary lung or lesion annotation aligned with a HounsfieldVolume.
struct MaskVolume {
  VolumeHeader header;
  MaskRole role = MaskRole::lung;
  std::vector<std::uint8_t> voxels;

  static MaskVolume zeros(int width, int height, int depth, MaskRole role, double spacing = 1.0);

  std::uint8_t at(int z, int y, int x) const { return voxels[index(z, y, x)]; }
  std::uint8_t& at(int z, int y, int x) { return voxels[index(z, y, x)]; }
  BinaryGrid slide(int z) const;
  std::size_t slide_count(int z) const;
  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * header.height + y) * header.width + x;
  }

  void validate() const;
  friend bool operator==(const MaskVolume&, const MaskVolume&) = default;
};

using AnyVolume = std::variant<HounsfieldVolume, MaskVolume>;

/// The CTV pair for a base path: `<base>.ctv.json` and `<base>.ctv.raw`.
/// `path` may be the bare base or either file of the pair.
struct CtvPaths {
  std::filesystem::path header;
  std::filesystem::path raster;
};
CtvPaths ctv_paths(const std::filesystem::path& path);

void write_volume(const HounsfieldVolume& volume, const std::filesystem::path& path);
void write_volume(const MaskVolume& volume, const std::filesystem::path& path);

AnyVolume read_volume(const std::filesystem::path& path);
HounsfieldVolume read_hounsfield(const std::filesystem::path& path);
MaskVolume read_mask(const std::filesystem::path& path);

/// Throws ShapeError naming both shapes unless width, height and depth agree.
void validate_pair(const HounsfieldVolume& ct, const MaskVolume& mask);
void validate_pair(const MaskVolume& a, const MaskVolume& b);

}  // namespace ctlab

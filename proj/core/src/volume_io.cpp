#include "ctlab/volume_io.hpp"

#include <fstream>
#include <sstream>

#include "ctlab/error.hpp"
#include "json.hpp"

namespace ctlab {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(ValueKind k) {
  return k == ValueKind::hounsfield_i16 ? "hounsfield_i16" : "mask_u8";
}

const char* to_string(MaskRole r) { return r == MaskRole::lung ? "lung" : "lesion"; }

ValueKind parse_value_kind(const std::string& s) {
  if (s == "hounsfield_i16") return ValueKind::hounsfield_i16;
  if (s == "mask_u8") return ValueKind::mask_u8;
  throw FormatError("unknown value_kind '" + s + "'");
}

MaskRole parse_mask_role(const std::string& s) {
  if (s == "lung") return MaskRole::lung;
  if (s == "lesion") return MaskRole::lesion;
  throw FormatError("unknown mask role '" + s + "'");
}

void VolumeHeader::validate() const {
  if (width < 1 || height < 1 || depth < 1) {
    std::ostringstream os;
    os << "volume dimensions must be >= 1, got " << width << "x" << height << "x" << depth;
    throw InvalidArgument(os.str());
  }
  if (!(slice_spacing > 0.0)) {
    throw InvalidArgument("slice_spacing must be > 0, got " + std::to_string(slice_spacing));
  }
}

namespace {

std::string shape_string(const VolumeHeader& h) {
  std::ostringstream os;
  os << h.width << "x" << h.height << "x" << h.depth;
  return os.str();
}

void check_voxel_count(const VolumeHeader& h, std::size_t n) {
  if (n != h.voxel_count()) {
    std::ostringstream os;
    os << "header declares " << shape_string(h) << " = " << h.voxel_count()
       << " voxels but raster holds " << n;
    throw FormatError(os.str());
  }
}

}  // namespace

HounsfieldVolume HounsfieldVolume::zeros(int width, int height, int depth, double spacing) {
  HounsfieldVolume v;
  v.header = {width, height, depth, spacing, ValueKind::hounsfield_i16};
  v.header.validate();
  v.voxels.assign(v.header.voxel_count(), 0);
  return v;
}

Grid<std::int16_t> HounsfieldVolume::slide(int z) const {
  Grid<std::int16_t> g(header.height, header.width);
  const auto* src = voxels.data() + static_cast<std::size_t>(z) * header.slice_size();
  std::copy(src, src + header.slice_size(), g.data.begin());
  return g;
}

void HounsfieldVolume::validate() const {
  header.validate();
  if (header.value_kind != ValueKind::hounsfield_i16) {
    throw InvalidArgument("HounsfieldVolume header must declare hounsfield_i16");
  }
  check_voxel_count(header, voxels.size());
}

MaskVolume MaskVolume::zeros(int width, int height, int depth, MaskRole role, double spacing) {
  MaskVolume v;
  v.header = {width, height, depth, spacing, ValueKind::mask_u8};
  v.header.validate();
  v.role = role;
  v.voxels.assign(v.header.voxel_count(), 0);
  return v;
}

BinaryGrid MaskVolume::slide(int z) const {
  BinaryGrid g(header.height, header.width);
  const auto* src = voxels.data() + static_cast<std::size_t>(z) * header.slice_size();
  std::copy(src, src + header.slice_size(), g.data.begin());
  return g;
}

std::size_t MaskVolume::slide_count(int z) const {
  const auto* src = voxels.data() + static_cast<std::size_t>(z) * header.slice_size();
  std::size_t n = 0;
  for (std::size_t i = 0; i < header.slice_size(); ++i) n += src[i];
  return n;
}

void MaskVolume::validate() const {
  header.validate();
  if (header.value_kind != ValueKind::mask_u8) {
    throw InvalidArgument("MaskVolume header must declare mask_u8");
  }
  check_voxel_count(header, voxels.size());
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    if (voxels[i] > 1) {
      throw FormatError("mask voxel " + std::to_string(i) + " has value " +
                        std::to_string(voxels[i]) + " (expected 0 or 1)");
    }
  }
}

CtvPaths ctv_paths(const fs::path& path) {
  std::string base = path.string();
  for (const char* suffix : {".ctv.json", ".ctv.raw", ".ctv"}) {
    const std::string s(suffix);
    if (base.size() > s.size() && base.compare(base.size() - s.size(), s.size(), s) == 0) {
      base.resize(base.size() - s.size());
      break;
    }
  }
  return {fs::path(base + ".ctv.json"), fs::path(base + ".ctv.raw")};
}

namespace {

json header_json(const VolumeHeader& h) {
  return json{{"width", h.width},
              {"height", h.height},
              {"depth", h.depth},
              {"slice_spacing", h.slice_spacing},
              {"value_kind", to_string(h.value_kind)}};
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + p.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + p.string() + "'");
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + p.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + p.string() + "'");
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void write_volume(const HounsfieldVolume& volume, const fs::path& path) {
  volume.validate();
  const auto paths = ctv_paths(path);
  std::vector<unsigned char> bytes(volume.voxels.size() * 2);
  for (std::size_t i = 0; i < volume.voxels.size(); ++i) {
    const auto u = static_cast<std::uint16_t>(volume.voxels[i]);
    bytes[2 * i] = static_cast<unsigned char>(u & 0xff);
    bytes[2 * i + 1] = static_cast<unsigned char>(u >> 8);
  }
  write_text(paths.header, header_json(volume.header).dump(2) + "\n");
  write_bytes(paths.raster, bytes);
}

void write_volume(const MaskVolume& volume, const fs::path& path) {
  volume.validate();
  const auto paths = ctv_paths(path);
  json j = header_json(volume.header);
  j["role"] = to_string(volume.role);
  write_text(paths.header, j.dump(2) + "\n");
  write_bytes(paths.raster, {volume.voxels.begin(), volume.voxels.end()});
}

AnyVolume read_volume(const fs::path& path) {
  const auto paths = ctv_paths(path);
  std::ifstream hin(paths.header);
  if (!hin) throw IoError("cannot open '" + paths.header.string() + "'");
  json j;
  try {
    hin >> j;
  } catch (const json::exception& e) {
    throw FormatError("malformed header '" + paths.header.string() + "': " + e.what());
  }

  VolumeHeader h;
  try {
    h.width = j.at("width").get<int>();
    h.height = j.at("height").get<int>();
    h.depth = j.at("depth").get<int>();
    h.slice_spacing = j.value("slice_spacing", 1.0);
    h.value_kind = parse_value_kind(j.at("value_kind").get<std::string>());
  } catch (const json::exception& e) {
    throw FormatError("malformed header '" + paths.header.string() + "': " + e.what());
  }
  h.validate();

  const auto bytes = read_bytes(paths.raster);
  const std::size_t expected = h.voxel_count() * h.bytes_per_voxel();
  if (bytes.size() != expected) {
    std::ostringstream os;
    os << "raster '" << paths.raster.string() << "' size mismatch: expected " << expected
       << " bytes for " << shape_string(h) << ", found " << bytes.size();
    throw FormatError(os.str());
  }

  if (h.value_kind == ValueKind::hounsfield_i16) {
    HounsfieldVolume v;
    v.header = h;
    v.voxels.resize(h.voxel_count());
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
      const auto u = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
      v.voxels[i] = static_cast<std::int16_t>(u);
    }
    return v;
  }

  MaskVolume m;
  m.header = h;
  m.role = parse_mask_role(j.value("role", std::string("lung")));
  m.voxels.assign(bytes.begin(), bytes.end());
  m.validate();
  return m;
}

HounsfieldVolume read_hounsfield(const fs::path& path) {
  auto v = read_volume(path);
  if (auto* ct = std::get_if<HounsfieldVolume>(&v)) return std::move(*ct);
  throw FormatError("'" + path.string() + "' holds a mask, expected a Hounsfield volume");
}

MaskVolume read_mask(const fs::path& path) {
  auto v = read_volume(path);
  if (auto* m = std::get_if<MaskVolume>(&v)) return std::move(*m);
  throw FormatError("'" + path.string() + "' holds a Hounsfield volume, expected a mask");
}

namespace {

void check_pair(const VolumeHeader& a, const VolumeHeader& b) {
  if (a.width != b.width || a.height != b.height || a.depth != b.depth) {
    throw ShapeError("volume shape mismatch: " + shape_string(a) + " vs " + shape_string(b));
  }
}

}  // namespace

void validate_pair(const HounsfieldVolume& ct, const MaskVolume& mask) {
  check_pair(ct.header, mask.header);
}

void validate_pair(const MaskVolume& a, const MaskVolume& b) { check_pair(a.header, b.header); }

}  // namespace ctlab

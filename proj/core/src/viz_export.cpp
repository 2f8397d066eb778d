#include "ctlab/viz_export.hpp"

#include <cstdio>
#include <fstream>

#include "ctlab/error.hpp"

namespace ctlab {

const char* to_string(PointSource s) {
  switch (s) {
    case PointSource::ct: return "ct";
    case PointSource::ground_truth: return "ground_truth";
    case PointSource::prediction: return "prediction";
  }
  return "?";
}

PointSource parse_point_source(const std::string& s) {
  if (s == "ct") return PointSource::ct;
  if (s == "ground_truth" || s == "gt") return PointSource::ground_truth;
  if (s == "prediction" || s == "pred") return PointSource::prediction;
  throw InvalidArgument("unknown point source '" + s + "'");
}

std::vector<PointRow> export_pointcloud(const HounsfieldVolume& ct, const MaskVolume& lung,
                                        const ExportOptions& options, const MaskVolume* values) {
  validate_pair(ct, lung);
  options.window.validate();
  const double spacing = options.spacing > 0.0 ? options.spacing : ct.header.slice_spacing;
  if (!(spacing > 0.0)) throw InvalidArgument("spacing must be > 0");
  if (options.source != PointSource::ct) {
    if (!values) {
      throw InvalidArgument(std::string("source '") + to_string(options.source) + "' needs a mask volume");
    }
    validate_pair(ct, *values);
  }

  std::vector<PointRow> rows;
  for (int z = 0; z < ct.header.depth; ++z) {
    const double zpos = z * spacing;
    for (int y = 0; y < ct.header.height; ++y) {
      for (int x = 0; x < ct.header.width; ++x) {
        if (!lung.at(z, y, x)) continue;
        const double value = options.source == PointSource::ct
                                 ? window_normalize(ct.at(z, y, x), options.window)
                                 : static_cast<double>(values->at(z, y, x));
        if (options.nonzero_only && value == 0.0) continue;
        rows.push_back({x, y, zpos, value});
      }
    }
  }
  return rows;
}

std::string pointcloud_csv(const std::vector<PointRow>& rows) {
  std::string out = "x,y,z,value\n";
  out.reserve(out.size() + rows.size() * 24);
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.6g,%.6g\n", r.x, r.y, r.z, r.value);
    out += buf;
  }
  return out;
}

void write_pointcloud_csv(const std::vector<PointRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << pointcloud_csv(rows);
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace ctlab

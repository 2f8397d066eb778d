#include "ctlab/sample_store.hpp"

#include <bit>
#include <fstream>
#include <map>
#include <sstream>

#include "ctlab/error.hpp"
#include "json.hpp"

namespace ctlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path with_suffix(const fs::path& base, const char* suffix) {
  std::string b = base.string();
  for (const char* s : {".samples.json", ".samples.raw"}) {
    const std::string str(s);
    if (b.size() > str.size() && b.compare(b.size() - str.size(), str.size(), str) == 0) {
      b.resize(b.size() - str.size());
      break;
    }
  }
  return fs::path(b + suffix);
}

void append_plane(std::string& out, const std::vector<float>& v) {
  for (float f : v) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((u >> (8 * k)) & 0xff));
  }
}

void read_plane(const unsigned char*& cur, std::vector<float>& v) {
  for (auto& f : v) {
    const std::uint32_t u = cur[0] | (cur[1] << 8) | (cur[2] << 16) | (static_cast<std::uint32_t>(cur[3]) << 24);
    f = std::bit_cast<float>(u);
    cur += 4;
  }
}

json ids_json(const std::vector<SlideId>& ids) {
  json a = json::array();
  for (const auto& id : ids) a.push_back(id.str());
  return a;
}

std::vector<SlideId> ids_from(const json& a) {
  std::vector<SlideId> out;
  for (const auto& s : a) out.push_back(SlideId::parse(s.get<std::string>()));
  return out;
}

}  // namespace

void write_samples(std::span<const Sample> samples, const fs::path& base) {
  json list = json::array();
  std::string raw;
  for (const auto& s : samples) {
    list.push_back({{"id", s.id.str()},
                    {"has_lesion", s.has_lesion},
                    {"input_channels", s.input.channels},
                    {"target_channels", s.target.channels},
                    {"side", s.input.side}});
    append_plane(raw, s.input.data);
    append_plane(raw, s.target.data);
  }
  const json j{{"format", "ctlab-samples"}, {"version", 1}, {"samples", list}};
  std::ofstream m(with_suffix(base, ".samples.json"), std::ios::trunc);
  std::ofstream r(with_suffix(base, ".samples.raw"), std::ios::binary | std::ios::trunc);
  if (!m || !r) throw IoError("cannot write sample store '" + base.string() + "'");
  m << j.dump(1) << "\n";
  r.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!m || !r) throw IoError("sample store write failed for '" + base.string() + "'");
}

std::vector<Sample> read_samples(const fs::path& base) {
  const auto mpath = with_suffix(base, ".samples.json");
  const auto rpath = with_suffix(base, ".samples.raw");
  std::ifstream m(mpath);
  if (!m) throw IoError("cannot open sample store '" + mpath.string() + "'");
  std::ifstream r(rpath, std::ios::binary);
  if (!r) throw IoError("cannot open sample store '" + rpath.string() + "'");
  json j;
  std::vector<Sample> out;
  std::size_t floats = 0;
  try {
    m >> j;
    for (const auto& e : j.at("samples")) {
      Sample s;
      s.id = SlideId::parse(e.at("id").get<std::string>());
      s.has_lesion = e.at("has_lesion").get<bool>();
      const int side = e.at("side").get<int>();
      s.input = Image(e.at("input_channels").get<int>(), side);
      s.target = Image(e.at("target_channels").get<int>(), side);
      floats += s.input.data.size() + s.target.data.size();
      out.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed sample store '" + mpath.string() + "': " + e.what());
  }
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(r), std::istreambuf_iterator<char>()};
  if (bytes.size() != floats * 4) {
    std::ostringstream os;
    os << "sample raster '" << rpath.string() << "' holds " << bytes.size() << " bytes, expected "
       << floats * 4;
    throw FormatError(os.str());
  }
  const unsigned char* cur = bytes.data();
  for (auto& s : out) {
    read_plane(cur, s.input.data);
    read_plane(cur, s.target.data);
  }
  return out;
}

void write_split(const DatasetSplit& split, const fs::path& path) {
  const json j{{"train", ids_json(split.train)}, {"val", ids_json(split.val)}, {"test", ids_json(split.test)}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write split '" + path.string() + "'");
  out << j.dump(1) << "\n";
}

DatasetSplit read_split(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split '" + path.string() + "'");
  try {
    json j;
    in >> j;
    return {ids_from(j.at("train")), ids_from(j.at("val")), ids_from(j.at("test"))};
  } catch (const json::exception& e) {
    throw FormatError("malformed split '" + path.string() + "': " + e.what());
  }
}

std::vector<Sample> select_samples(std::span<const Sample> pool, std::span<const SlideId> ids) {
  std::map<SlideId, const Sample*> index;
  for (const auto& s : pool) index[s.id] = &s;
  std::vector<Sample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw DataError("slide " + id.str() + " is not in the sample store");
    out.push_back(*it->second);
  }
  return out;
}

}  // namespace ctlab

#include "ctlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ctlab/error.hpp"
#include "json.hpp"

namespace ctlab {

namespace fs = std::filesystem;
using nlohmann::json;

CheckpointPaths checkpoint_paths(const fs::path& base) {
  std::string b = base.string();
  for (const char* suffix : {".json", ".bin"}) {
    const std::string s(suffix);
    if (b.size() > s.size() && b.compare(b.size() - s.size(), s.size(), s) == 0) {
      b.resize(b.size() - s.size());
      break;
    }
  }
  return {fs::path(b + ".json"), fs::path(b + ".bin")};
}

namespace {

void put_f32(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((u >> (8 * k)) & 0xff));
}

float get_f32(const unsigned char* p) {
  const std::uint32_t u = p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(u);
}

}  // namespace

void save_checkpoint(const ParamSet<float>& params, const fs::path& base) {
  params.validate();
  const auto paths = checkpoint_paths(base);
  const auto& c = params.config;
  json layers = json::array();
  std::string blob;
  blob.reserve(params.parameter_count() * 4);
  for (const auto& l : params.layers) {
    layers.push_back({{"name", l.name},
                      {"out_channels", l.out_channels},
                      {"in_channels", l.in_channels},
                      {"kernel", l.kernel},
                      {"offset", blob.size() / 4}});
    for (float w : l.weight) put_f32(blob, w);
    for (float b : l.bias) put_f32(blob, b);
  }
  json j{{"format", "ctlab-unet"},
         {"version", 1},
         {"config",
          {{"input_channels", c.input_channels},
           {"output_channels", c.output_channels},
           {"depth", c.depth},
           {"base_width", c.base_width},
           {"image_side", c.image_side}}},
         {"init_seed", params.init_seed},
         {"parameter_count", params.parameter_count()},
         {"layers", layers}};

  std::ofstream m(paths.manifest, std::ios::trunc);
  if (!m) throw IoError("cannot write '" + paths.manifest.string() + "'");
  m << j.dump(2) << "\n";
  std::ofstream b(paths.blob, std::ios::binary | std::ios::trunc);
  if (!b) throw IoError("cannot write '" + paths.blob.string() + "'");
  b.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!m || !b) throw IoError("checkpoint write failed for '" + base.string() + "'");
}

ParamSet<float> load_checkpoint(const fs::path& base) {
  const auto paths = checkpoint_paths(base);
  std::ifstream m(paths.manifest);
  if (!m) throw IoError("cannot open checkpoint '" + paths.manifest.string() + "'");
  json j;
  ParamSet<float> p;
  try {
    m >> j;
    const auto& c = j.at("config");
    p.config.input_channels = c.at("input_channels").get<int>();
    p.config.output_channels = c.at("output_channels").get<int>();
    p.config.depth = c.at("depth").get<int>();
    p.config.base_width = c.at("base_width").get<int>();
    p.config.image_side = c.at("image_side").get<int>();
    p.init_seed = j.at("init_seed").get<std::uint64_t>();
    for (const auto& l : j.at("layers")) {
      ConvLayer<float> layer;
      layer.name = l.at("name").get<std::string>();
      layer.out_channels = l.at("out_channels").get<int>();
      layer.in_channels = l.at("in_channels").get<int>();
      layer.kernel = l.at("kernel").get<int>();
      p.layers.push_back(std::move(layer));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed checkpoint '" + paths.manifest.string() + "': " + e.what());
  }

  std::ifstream b(paths.blob, std::ios::binary);
  if (!b) throw IoError("cannot open checkpoint blob '" + paths.blob.string() + "'");
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(b), std::istreambuf_iterator<char>()};

  std::size_t expected = 0;
  for (const auto& l : p.layers) expected += (l.fan_in() + 1) * l.out_channels;
  if (bytes.size() != expected * 4) {
    std::ostringstream os;
    os << "checkpoint blob '" << paths.blob.string() << "' holds " << bytes.size()
       << " bytes, layer table needs " << expected * 4;
    throw FormatError(os.str());
  }
  const unsigned char* cur = bytes.data();
  for (auto& l : p.layers) {
    l.weight.resize(l.fan_in() * l.out_channels);
    l.bias.resize(l.out_channels);
    for (auto& w : l.weight) {
      w = get_f32(cur);
      cur += 4;
    }
    for (auto& v : l.bias) {
      v = get_f32(cur);
      cur += 4;
    }
  }
  p.validate();
  if (!p.all_finite()) throw FormatError("checkpoint contains non-finite parameters");
  return p;
}

void write_train_log(const TrainLog& log, const fs::path& csv_path) {
  std::ofstream out(csv_path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + csv_path.string() + "'");
  out << log.csv();
}

TrainLog read_train_log(const fs::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("cannot open '" + csv_path.string() + "'");
  TrainLog log;
  std::string line;
  std::getline(in, line);
  if (line != "epoch,train_loss,val_loss") throw FormatError("unexpected train log header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    EpochRecord r;
    char c1 = 0, c2 = 0;
    if (!(row >> r.epoch >> c1 >> r.train_loss >> c2 >> r.val_loss) || c1 != ',' || c2 != ',') {
      throw FormatError("malformed train log row '" + line + "'");
    }
    log.epochs.push_back(r);
  }
  if (!log.epochs.empty()) log.stopped_epoch = log.epochs.back().epoch;
  return log;
}

}  // namespace ctlab

#include "ctlab_cli/run_manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <ctime>
#include <fstream>
#include <memory>

#include "ctlab/error.hpp"
#include "json.hpp"

namespace ctlab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw IoError("sha256 unavailable");
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

Artifact describe(const fs::path& file, const fs::path& relative_to) {
  Artifact a;
  a.path = relative_to.empty() ? fs::absolute(file).lexically_normal().string()
                               : fs::relative(file, relative_to).generic_string();
  a.sha256 = sha256_file(file);
  a.bytes = fs::file_size(file);
  return a;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

json artifacts_json(const std::vector<Artifact>& v) {
  json a = json::array();
  for (const auto& x : v) a.push_back({{"path", x.path}, {"sha256", x.sha256}, {"bytes", x.bytes}});
  return a;
}

std::vector<Artifact> artifacts_from(const json& a) {
  std::vector<Artifact> out;
  for (const auto& x : a) {
    out.push_back({x.at("path").get<std::string>(), x.at("sha256").get<std::string>(),
                   x.at("bytes").get<std::uintmax_t>()});
  }
  return out;
}

}  // namespace

void write_run_manifest(const RunManifest& m, const fs::path& path) {
  const json j{{"format", "ctlab-run"},
               {"tool_version", m.tool_version},
               {"command", m.command},
               {"arguments", m.arguments},
               {"seeds", m.seeds},
               {"jobs", m.jobs},
               {"out_dir", fs::absolute(m.out_dir).lexically_normal().string()},
               {"inputs", artifacts_json(m.inputs)},
               {"outputs", artifacts_json(m.outputs)},
               {"started", m.started},
               {"finished", m.finished}};
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write run manifest '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

RunManifest read_run_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open run manifest '" + path.string() + "'");
  RunManifest m;
  try {
    json j;
    in >> j;
    if (j.value("format", "") != "ctlab-run") throw FormatError("'" + path.string() + "' is not a run manifest");
    m.tool_version = j.value("tool_version", "");
    m.command = j.at("command").get<std::string>();
    m.arguments = j.at("arguments").get<std::vector<std::string>>();
    m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    m.jobs = j.at("jobs").get<int>();
    m.out_dir = j.at("out_dir").get<std::string>();
    m.inputs = artifacts_from(j.at("inputs"));
    m.outputs = artifacts_from(j.at("outputs"));
    m.started = j.value("started", "");
    m.finished = j.value("finished", "");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed run manifest '" + path.string() + "': " + e.what());
  }
  return m;
}

}  // namespace ctlab::cli

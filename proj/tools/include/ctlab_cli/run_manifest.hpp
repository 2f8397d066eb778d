#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ctlab::cli {

struct Artifact {
  std::string path;  ///< outputs: relative to out_dir; inputs: absolute
  std::string sha256;
  std::uintmax_t bytes = 0;
};

/// Everything needed to re-run one command: the canonical argument list has
/// every default spelled out and every input path made absolute.
struct RunManifest {
  std::string tool_version;
  std::string command;
  std::vector<std::string> arguments;
  std::map<std::string, std::uint64_t> seeds;
  int jobs = 1;
  std::filesystem::path out_dir;
  std::vector<Artifact> inputs;
  std::vector<Artifact> outputs;
  std::string started;
  std::string finished;
};

std::string sha256_file(const std::filesystem::path& path);
Artifact describe(const std::filesystem::path& file, const std::filesystem::path& relative_to = {});

/// ISO-8601 UTC, second resolution.
std::string utc_now();

void write_run_manifest(const RunManifest& m, const std::filesystem::path& path);
RunManifest read_run_manifest(const std::filesystem::path& path);

}  // namespace ctlab::cli

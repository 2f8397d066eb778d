#pragma once

#include <filesystem>

#include "ctlab/segnet.hpp"

namespace ctlab {

/// Checkpoint pair for a base path: `<base>.json` (config + layer table) and
/// `<base>.bin` (float32 little-endian, per layer: weights then biases).
struct CheckpointPaths {
  std::filesystem::path manifest;
  std::filesystem::path blob;
};
CheckpointPaths checkpoint_paths(const std::filesystem::path& base);

void save_checkpoint(const ParamSet<float>& params, const std::filesystem::path& base);
ParamSet<float> load_checkpoint(const std::filesystem::path& base);

void write_train_log(const TrainLog& log, const std::filesystem::path& csv_path);
/// Reads the CSV rows back; stop metadata is not part of the CSV.
TrainLog read_train_log(const std::filesystem::path& csv_path);

}  // namespace ctlab

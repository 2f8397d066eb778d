#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "ctlab/preprocess.hpp"

namespace ctlab {

// A sample store is `<base>.samples.json` (per-sample id, lesion flag and
// shapes) plus `<base>.samples.raw`: float32 little-endian input then target
// planes for each sample in listing order.
void write_samples(std::span<const Sample> samples, const std::filesystem::path& base);
std::vector<Sample> read_samples(const std::filesystem::path& base);

void write_split(const DatasetSplit& split, const std::filesystem::path& path);
DatasetSplit read_split(const std::filesystem::path& path);

/// Samples for `ids` in the order given; throws DataError on an unknown id.
std::vector<Sample> select_samples(std::span<const Sample> pool, std::span<const SlideId> ids);

}  // namespace ctlab

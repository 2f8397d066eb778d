#include "ctlab_cli/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "ctlab/checkpoint.hpp"
#include "ctlab/sample_store.hpp"
#include "ctlab/volume_io.hpp"
#include "ctlab_cli/run_manifest.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_support.hpp"

using namespace ctlab;
using ctlab::testing::slurp;
using ctlab::testing::TempDir;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result ctlab_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

Result in_dir(const TempDir& dir, std::vector<std::string> args) {
  args.insert(args.begin(), {"--out-dir", dir.path().string()});
  return ctlab_run(std::move(args));
}

void make_dataset(const TempDir& dir, const std::string& tag = "A", int depth = 8) {
  REQUIRE(in_dir(dir, {"--seed", "3", "phantom", "--tag", tag, "--depth", std::to_string(depth), "--volumes", "3"}).code == 0);
}

}  // namespace

TEST_CASE("phantom writes readable volumes and replays byte-identically") {
  TempDir a("cli-a"), b("cli-b");
  make_dataset(a);
  const auto ct = read_hounsfield(a / "A/A_v0_ct.ctv.json");
  CHECK(ct.header.width == 32);
  CHECK(ct.header.depth == 8);
  CHECK(read_mask(a / "A/A_v2_lesion").role == MaskRole::lesion);
  make_dataset(b);
  for (const char* f : {"A/A_v1_ct.ctv.raw", "A/A_v1_lesion.ctv.raw", "A/A.manifest.json", "A/A.phantom.json"})
    CHECK(slurp(a / f) == slurp(b / f));
  const auto m = cli::read_run_manifest(a / "runs/phantom-A.run.json");
  CHECK(m.command == "phantom");
  CHECK(m.seeds.at("seed") == 3);
  CHECK(m.outputs.size() == 20u);
}

TEST_CASE("invalid phantom spec exits non-zero with a tagged message") {
  TempDir d("cli-bad");
  const auto r = in_dir(d, {"phantom", "--shift", "900"});
  CHECK(r.code == cli::kInvalidArgument);
  CHECK(r.err.rfind("error[invalid-argument]: ", 0) == 0);
  CHECK(in_dir(d, {"phantom", "--bogus"}).code == cli::kUsage);
  CHECK(ctlab_run({}).code == cli::kUsage);
}

TEST_CASE("preprocess split sizes, rerun stability and lung-less input") {
  TempDir d("cli-pre");
  make_dataset(d);
  const auto r = in_dir(d, {"--seed", "4", "preprocess", "--manifest", "A/A.manifest.json", "--name", "A",
                            "--train-count", "6", "--val-count", "2", "--side", "32"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto split = read_split(d / "A.split.json");
  CHECK(split.train.size() == 6u);
  CHECK(split.val.size() == 2u);
  CHECK(split.test.size() == 16u);
  const auto first = slurp(d / "A.samples.raw");
  REQUIRE(in_dir(d, {"--seed", "4", "preprocess", "--manifest", "A/A.manifest.json", "--name", "A",
                     "--train-count", "6", "--val-count", "2", "--side", "32"})
              .code == 0);
  CHECK(slurp(d / "A.samples.raw") == first);

  // Blank every lung mask.
  for (int v = 0; v < 3; ++v) {
    const auto path = d / ("A/A_v" + std::to_string(v) + "_lung");
    auto lung = read_mask(path);
    std::fill(lung.voxels.begin(), lung.voxels.end(), 0);
    auto lesion = read_mask(d / ("A/A_v" + std::to_string(v) + "_lesion"));
    std::fill(lesion.voxels.begin(), lesion.voxels.end(), 0);
    write_volume(lung, path);
    write_volume(lesion, d / ("A/A_v" + std::to_string(v) + "_lesion"));
  }
  const auto empty = in_dir(d, {"preprocess", "--manifest", "A/A.manifest.json", "--name", "E"});
  CHECK(empty.code == cli::kData);
  CHECK(empty.err.find("error[data]") != std::string::npos);
}

TEST_CASE("lint exit status follows the severity threshold") {
  TempDir d("cli-lint");
  REQUIRE(in_dir(d, {"phantom", "--tag", "F", "--depth", "4", "--volumes", "1", "--inject-faults"}).code == 0);
  CHECK(in_dir(d, {"lint", "--manifest", "F/F.manifest.json", "--name", "F"}).code == cli::kLintFindings);
  CHECK(in_dir(d, {"lint", "--manifest", "F/F.manifest.json", "--name", "F", "--fail-on", "never"}).code == 0);
  std::istringstream lines(slurp(d / "F.lint.jsonl"));
  int n = 0;
  for (std::string line; std::getline(lines, line);) ++n;
  CHECK(n == 8);
  CHECK(in_dir(d, {"preprocess", "--manifest", "F/F.manifest.json", "--name", "F", "--fail-on", "warning"}).code ==
        cli::kLintFindings);
}

TEST_CASE("train, retrain, evaluate and replay") {
  TempDir d("cli-train"), r("cli-replay");
  make_dataset(d);
  REQUIRE(in_dir(d, {"preprocess", "--manifest", "A/A.manifest.json", "--name", "A", "--train-count", "4",
                     "--val-count", "2", "--side", "32"})
              .code == 0);
  const auto t = in_dir(d, {"--seed", "9", "train", "--samples", "A", "--split", "A.split.json", "--name", "m0",
                            "--depth", "2", "--base-width", "4", "--epochs", "2", "--batch-size", "2"});
  REQUIRE_MESSAGE(t.code == 0, t.err);
  const auto summary = nlohmann::json::parse(slurp(d / "m0.train.json"));
  CHECK(summary.at("stop_reason") == "max_epochs");
  CHECK(load_checkpoint(d / "m0").config.base_width == 4);

  const auto missing = in_dir(d, {"retrain", "--from", "nope", "--samples", "A", "--split", "A.split.json",
                                  "--name", "m1"});
  CHECK(missing.code == cli::kIo);
  CHECK(missing.err.rfind("error[io]: ", 0) == 0);
  REQUIRE(in_dir(d, {"retrain", "--from", "m0", "--samples", "A", "--split", "A.split.json", "--name", "m1",
                     "--epochs", "1"})
              .code == 0);

  const auto e = in_dir(d, {"evaluate", "--checkpoint", "m1", "--samples", "A", "--split", "A.split.json",
                            "--name", "e"});
  REQUIRE_MESSAGE(e.code == 0, e.err);
  CHECK(e.out.rfind("MEAN(covid-only),", 0) == 0);
  CHECK(slurp(d / "e.metrics.csv").rfind("slide_id,accuracy,precision,recall,f1,has_lesion\n", 0) == 0);

  for (const char* run : {"runs/train-m0.run.json", "runs/retrain-m1.run.json", "runs/evaluate-e.run.json"}) {
    const auto rep = ctlab_run({"--out-dir", r.path().string(), "replay", (d / run).string(), "--check"});
    CHECK_MESSAGE(rep.code == 0, run << ": " << rep.err);
  }
  CHECK(slurp(r / "m1.bin") == slurp(d / "m1.bin"));

  // A tampered record is reported as a mismatch.
  auto j = nlohmann::json::parse(slurp(d / "runs/evaluate-e.run.json"));
  j["outputs"][0]["sha256"] = std::string(64, '0');
  std::ofstream(d / "tampered.run.json") << j.dump();
  CHECK(ctlab_run({"--out-dir", r.path().string(), "replay", (d / "tampered.run.json").string(), "--check"}).code ==
        cli::kReplayMismatch);
}

TEST_CASE("evaluate rejects an empty test split") {
  TempDir d("cli-empty");
  make_dataset(d, "A", 4);
  REQUIRE(in_dir(d, {"preprocess", "--manifest", "A/A.manifest.json", "--name", "A", "--train-count", "2",
                     "--val-count", "1", "--side", "32"})
              .code == 0);
  REQUIRE(in_dir(d, {"train", "--samples", "A", "--split", "A.split.json", "--name", "m", "--depth", "2",
                     "--base-width", "2", "--epochs", "1"})
              .code == 0);
  auto split = read_split(d / "A.split.json");
  split.train.insert(split.train.end(), split.test.begin(), split.test.end());
  split.test.clear();
  write_split(split, d / "notest.json");
  const auto r = in_dir(d, {"evaluate", "--checkpoint", "m", "--samples", "A", "--split", "notest.json",
                            "--name", "e"});
  CHECK(r.code == cli::kData);
}

TEST_CASE("an overfitted model scores near-perfect F1 on its own training slides") {
  TempDir d("cli-fit");
  make_dataset(d, "A", 6);
  REQUIRE(in_dir(d, {"preprocess", "--manifest", "A/A.manifest.json", "--name", "A", "--train-count", "2",
                     "--val-count", "2", "--lesion-ratio", "1", "--side", "32"})
              .code == 0);
  // Validate on the training slides so the restored best epoch is the best fit.
  auto split = read_split(d / "A.split.json");
  split.val = split.train;
  write_split(split, d / "A.split.json");
  REQUIRE(in_dir(d, {"--seed", "1", "train", "--samples", "A", "--split", "A.split.json", "--name", "fit",
                     "--depth", "2", "--base-width", "8", "--epochs", "150", "--patience", "150", "--lr", "3e-3",
                     "--batch-size", "2"})
              .code == 0);
  const auto r = in_dir(d, {"evaluate", "--checkpoint", "fit", "--samples", "A", "--split", "A.split.json",
                            "--name", "fit", "--part", "train"});
  REQUIRE(r.code == 0);
  const double f1 = std::stod(r.out.substr(r.out.rfind(',', r.out.rfind(',') - 1) + 1));
  CHECK(f1 > 0.9);
}

TEST_CASE("CTLAB_OUT overrides --out-dir and export3d writes one row per lung pixel") {
  TempDir env_dir("cli-env"), flag_dir("cli-flag");
  ::setenv("CTLAB_OUT", env_dir.path().c_str(), 1);
  const auto r = in_dir(flag_dir, {"phantom", "--tag", "A", "--depth", "3", "--volumes", "1"});
  ::unsetenv("CTLAB_OUT");
  REQUIRE(r.code == 0);
  CHECK(std::filesystem::exists(env_dir / "A/A_v0_ct.ctv.json"));
  CHECK_FALSE(std::filesystem::exists(flag_dir / "A"));

  REQUIRE(in_dir(env_dir, {"export3d", "--ct", "A/A_v0_ct", "--lung", "A/A_v0_lung", "--name", "pc"}).code == 0);
  const auto lung = read_mask(env_dir / "A/A_v0_lung");
  std::istringstream csv(slurp(env_dir / "pc.csv"));
  std::size_t rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  CHECK(rows - 1 == static_cast<std::size_t>(std::count(lung.voxels.begin(), lung.voxels.end(), 1)));
  CHECK(in_dir(env_dir, {"export3d", "--ct", "A/A_v0_ct", "--lung", "A/A_v0_lung", "--source", "ground_truth"})
            .code == cli::kInvalidArgument);
  CHECK(in_dir(env_dir, {"export3d", "--ct", "A/A_v0_ct", "--lung", "A/A_v0_lung", "--source", "density"}).code ==
        cli::kInvalidArgument);
}

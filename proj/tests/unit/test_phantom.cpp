#include "ctlab/phantom.hpp"

#include <algorithm>

#include "ctlab/error.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace ctlab;

namespace {

PhantomSpec spec_with(std::uint64_t seed) {
  PhantomSpec s;
  s.depth = 8;
  s.volumes = 2;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  const auto a = generate_dataset(spec_with(3));
  const auto b = generate_dataset(spec_with(3));
  const auto c = generate_dataset(spec_with(4));
  REQUIRE(a.size() == 2u);
  CHECK(a[1].ct.voxels == b[1].ct.voxels);
  CHECK(a[1].lesion.voxels == b[1].lesion.voxels);
  CHECK(a[0].ct.voxels != c[0].ct.voxels);
}

TEST_CASE("lesions stay inside the lung and respect the component floor") {
  const auto vols = generate_dataset(spec_with(5));
  for (const auto& v : vols) {
    CHECK(v.lung.role == MaskRole::lung);
    CHECK(v.lesion.role == MaskRole::lesion);
    for (std::size_t i = 0; i < v.lung.voxels.size(); ++i) CHECK(v.lesion.voxels[i] <= v.lung.voxels[i]);
    CHECK(lint_annotations(v.lung, v.lesion).empty());
    for (int s = 0; s < v.lung.header.depth; ++s) {
      const auto slide = v.lung.slide(s);
      CHECK(std::count(slide.data.begin(), slide.data.end(), 1) > 0);
    }
  }
}

TEST_CASE("lesion_fraction 0 yields no lesion pixels") {
  auto spec = spec_with(6);
  spec.lesion_fraction = 0.0;
  for (const auto& v : generate_dataset(spec))
    CHECK(std::all_of(v.lesion.voxels.begin(), v.lesion.voxels.end(), [](auto x) { return x == 0; }));
}

TEST_CASE("shift moves every tissue pixel by exactly the shift") {
  auto base = spec_with(7);
  base.lesion_hu_center = -320;
  auto shifted = base;
  shifted.shift = 150;
  const auto a = generate_dataset(base);
  const auto b = generate_dataset(shifted);
  for (std::size_t v = 0; v < a.size(); ++v) {
    CHECK(a[v].lung.voxels == b[v].lung.voxels);
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a[v].ct.voxels.size(); ++i) {
      const int d = b[v].ct.voxels[i] - a[v].ct.voxels[i];
      if (a[v].lung.voxels[i]) {
        sum += d;
        ++n;
      } else {
        CHECK(d == 0);
      }
    }
    REQUIRE(n > 0);
    CHECK(sum / static_cast<double>(n) == 150.0);
  }
}

TEST_CASE("values fit the int16 range and tissue centres sit inside the working window") {
  auto spec = spec_with(8);
  spec.noise_sd = 0.0;
  spec.lung_hu_jitter = 0.0;
  for (const auto& v : generate_dataset(spec))
    for (std::size_t i = 0; i < v.ct.voxels.size(); ++i) {
      const int hu = v.ct.voxels[i];
      if (v.lesion.voxels[i]) CHECK(hu == -300);
      else if (v.lung.voxels[i]) CHECK(hu == -650);
      else CHECK(hu == 0);
    }
  spec.shift = 900;
  CHECK_THROWS_AS(generate_dataset(spec), InvalidArgument);
  spec.shift = 0;
  spec.side = 30;
  spec.model_depth = 2;
  CHECK_THROWS_AS(spec.validate(), InvalidArgument);
}

TEST_CASE("injected faults are all found by lint") {
  auto spec = spec_with(9);
  spec.inject_faults = true;
  const auto vols = generate_dataset(spec);
  std::size_t planted = 0;
  for (std::size_t v = 0; v < vols.size(); ++v) {
    const auto findings = lint_annotations(vols[v].lung, vols[v].lesion, spec.min_lesion_component, "P",
                                           static_cast<int>(v));
    for (const auto& d : vols[v].defects) {
      ++planted;
      const bool found = std::any_of(findings.begin(), findings.end(), [&](const LintFinding& f) {
        return f.kind == d.kind && f.slide_id.slide == d.slide && f.location == d.box &&
               f.pixel_count == d.pixel_count;
      });
      CHECK_MESSAGE(found, "volume " << v << " slide " << d.slide);
    }
  }
  CHECK(planted == 2u * spec.depth * spec.volumes);
}

TEST_CASE("spec and dataset files round trip") {
  ctlab::testing::TempDir dir("phantom");
  auto spec = spec_with(10);
  spec.shift = 120;
  spec.slice_spacing = 2.5;
  write_phantom_spec(spec, dir / "spec.json");
  const auto back = read_phantom_spec(dir / "spec.json");
  CHECK(back.shift == 120);
  CHECK(back.slice_spacing == 2.5);
  CHECK(back.seed == 10);

  const auto vols = generate_dataset(spec);
  const auto manifest = write_phantom_dataset(vols, dir.path(), "B");
  REQUIRE(manifest.entries.size() == 2u);
  CHECK(manifest.entries[1].tag == "B");
  CHECK(read_hounsfield(dir / "B_v1_ct").voxels == vols[1].ct.voxels);
  CHECK(read_manifest(dir / "B.manifest.json").entries.size() == 2u);
}

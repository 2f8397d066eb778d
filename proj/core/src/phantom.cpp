#include "ctlab/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "ctlab/error.hpp"
#include "ctlab/random.hpp"
#include "json.hpp"

namespace ctlab {

namespace fs = std::filesystem;
using nlohmann::json;

void PhantomSpec::validate() const {
  if (side < 1 || depth < 1 || volumes < 1) throw InvalidArgument("phantom side, depth and volumes must be >= 1");
  if (model_depth < 0 || model_depth > 16) throw InvalidArgument("phantom model_depth out of range");
  if (model_depth > 0 && side % (1 << model_depth) != 0) {
    throw InvalidArgument("phantom side " + std::to_string(side) + " is not divisible by 2^" +
                          std::to_string(model_depth));
  }
  auto inside = [](double hu) { return hu > -970.0 && hu < -150.0; };
  if (!inside(lung_hu_center + shift) || !inside(lesion_hu_center + shift)) {
    std::ostringstream os;
    os << "tissue centres after shift (lung " << lung_hu_center + shift << ", lesion "
       << lesion_hu_center + shift << ") must lie inside (-970, -150)";
    throw InvalidArgument(os.str());
  }
  for (double f : {lesion_fraction, lesion_slide_fraction}) {
    if (!(f >= 0.0 && f <= 1.0)) throw InvalidArgument("phantom fractions must lie in [0, 1]");
  }
  if (noise_sd < 0.0 || lung_hu_jitter < 0.0) throw InvalidArgument("noise and jitter must be >= 0");
  if (!(slice_spacing > 0.0)) throw InvalidArgument("slice_spacing must be > 0");
  if (min_lesion_component < 1) throw InvalidArgument("min_lesion_component must be >= 1");
}

PhantomSpec read_phantom_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open phantom spec '" + path.string() + "'");
  PhantomSpec s;
  try {
    json j;
    in >> j;
    s.side = j.value("side", s.side);
    s.depth = j.value("depth", s.depth);
    s.volumes = j.value("volumes", s.volumes);
    s.lung_hu_center = j.value("lung_hu_center", s.lung_hu_center);
    s.lung_hu_jitter = j.value("lung_hu_jitter", s.lung_hu_jitter);
    s.lesion_hu_center = j.value("lesion_hu_center", s.lesion_hu_center);
    s.lesion_fraction = j.value("lesion_fraction", s.lesion_fraction);
    s.lesion_slide_fraction = j.value("lesion_slide_fraction", s.lesion_slide_fraction);
    s.shift = j.value("shift", s.shift);
    s.noise_sd = j.value("noise_sd", s.noise_sd);
    s.background_hu = j.value("background_hu", s.background_hu);
    s.slice_spacing = j.value("slice_spacing", s.slice_spacing);
    s.model_depth = j.value("model_depth", s.model_depth);
    s.min_lesion_component = j.value("min_lesion_component", s.min_lesion_component);
    s.inject_faults = j.value("inject_faults", s.inject_faults);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw FormatError("malformed phantom spec '" + path.string() + "': " + e.what());
  }
  s.validate();
  return s;
}

void write_phantom_spec(const PhantomSpec& s, const fs::path& path) {
  const json j{{"side", s.side},
               {"depth", s.depth},
               {"volumes", s.volumes},
               {"lung_hu_center", s.lung_hu_center},
               {"lung_hu_jitter", s.lung_hu_jitter},
               {"lesion_hu_center", s.lesion_hu_center},
               {"lesion_fraction", s.lesion_fraction},
               {"lesion_slide_fraction", s.lesion_slide_fraction},
               {"shift", s.shift},
               {"noise_sd", s.noise_sd},
               {"background_hu", s.background_hu},
               {"slice_spacing", s.slice_spacing},
               {"model_depth", s.model_depth},
               {"min_lesion_component", s.min_lesion_component},
               {"inject_faults", s.inject_faults},
               {"seed", s.seed}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

namespace {

struct Ellipse {
  double cx, cy, rx, ry;
  bool contains(int x, int y) const {
    const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
  }
};

std::int16_t to_hu(double v) {
  const double r = std::floor(v + 0.5);
  return static_cast<std::int16_t>(std::clamp(r, -32768.0, 32767.0));
}

// Components of `mask` (one slide, 4-connected) below min_size are cleared.
void drop_small_components(std::vector<unsigned char>& mask, int w, int h, int min_size) {
  std::vector<int> label(mask.size(), 0), members, stack;
  int next = 0;
  for (int s = 0; s < w * h; ++s) {
    if (!mask[s] || label[s]) continue;
    label[s] = ++next;
    members.clear();
    stack.assign(1, s);
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      members.push_back(p);
      const int y = p / w, x = p % w;
      const int nb[4] = {y > 0 ? p - w : -1, y + 1 < h ? p + w : -1, x > 0 ? p - 1 : -1, x + 1 < w ? p + 1 : -1};
      for (int q : nb) {
        if (q >= 0 && mask[q] && !label[q]) {
          label[q] = next;
          stack.push_back(q);
        }
      }
    }
    if (static_cast<int>(members.size()) < min_size) {
      for (int p : members) mask[p] = 0;
    }
  }
}

// True when every pixel of the (y, x) list and their 4-neighbours satisfy `ok`.
template <class Pred>
bool clear_with_margin(const std::vector<std::pair<int, int>>& px, int w, int h, Pred ok) {
  for (auto [y, x] : px) {
    const int nb[5][2] = {{y, x}, {y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
    for (const auto& n : nb) {
      if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) return false;
      if (!ok(n[0], n[1])) return false;
    }
  }
  return true;
}

BoundingBox box_of(const std::vector<std::pair<int, int>>& px) {
  BoundingBox b{px[0].second, px[0].first, px[0].second, px[0].first};
  for (auto [y, x] : px) {
    b.x0 = std::min(b.x0, x);
    b.x1 = std::max(b.x1, x);
    b.y0 = std::min(b.y0, y);
    b.y1 = std::max(b.y1, y);
  }
  return b;
}

}  // namespace

std::vector<PhantomVolume> generate_dataset(const PhantomSpec& spec) {
  spec.validate();
  const int w = spec.side, h = spec.side;
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  std::vector<PhantomVolume> out;

  for (int v = 0; v < spec.volumes; ++v) {
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(v)));
    PhantomVolume pv;
    pv.ct = HounsfieldVolume::zeros(w, h, spec.depth, spec.slice_spacing);
    pv.lung = MaskVolume::zeros(w, h, spec.depth, MaskRole::lung, spec.slice_spacing);
    pv.lesion = MaskVolume::zeros(w, h, spec.depth, MaskRole::lesion, spec.slice_spacing);

    for (int z = 0; z < spec.depth; ++z) {
      // Lungs grow towards the middle of the stack.
      const double t = spec.depth > 1 ? static_cast<double>(z) / (spec.depth - 1) : 0.5;
      const double scale = 0.6 + 0.4 * std::sin(std::numbers::pi * (0.1 + 0.8 * t));
      std::vector<Ellipse> lungs;
      if (rng.uniform() < 0.2) {
        lungs.push_back({w * rng.uniform(0.45, 0.55), h * rng.uniform(0.45, 0.55),
                         w * 0.3 * scale * rng.uniform(0.9, 1.1), h * 0.32 * scale * rng.uniform(0.9, 1.1)});
      } else {
        for (double cx : {0.3, 0.7}) {
          lungs.push_back({w * (cx + rng.uniform(-0.03, 0.03)), h * rng.uniform(0.45, 0.55),
                           w * 0.16 * scale * rng.uniform(0.9, 1.1), h * 0.32 * scale * rng.uniform(0.9, 1.1)});
        }
      }

      std::vector<unsigned char> lung(plane, 0), lesion(plane, 0);
      std::vector<int> lung_px;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          for (const auto& e : lungs) {
            if (e.contains(x, y)) {
              lung[y * w + x] = 1;
              lung_px.push_back(y * w + x);
              break;
            }
          }
        }
      }

      const bool lesion_slide = rng.uniform() < spec.lesion_slide_fraction;
      if (lesion_slide && spec.lesion_fraction > 0.0) {
        if (lung_px.empty()) {
          throw DataError("infeasible phantom geometry: slide " + std::to_string(z) + " of volume " +
                          std::to_string(v) + " has no lung pixels to place lesions in");
        }
        const auto target = static_cast<std::size_t>(std::llround(spec.lesion_fraction * lung_px.size()));
        std::size_t covered = 0;
        for (int attempt = 0; attempt < 64 && covered < target; ++attempt) {
          const int c = lung_px[rng.below(lung_px.size())];
          const double cy = c / w + 0.5, cx = c % w + 0.5;
          const double r = spec.side * rng.uniform(0.05, 0.11);
          const double ry = r * rng.uniform(0.7, 1.3);
          const int y0 = std::max(0, static_cast<int>(cy - ry) - 1), y1 = std::min(h - 1, static_cast<int>(cy + ry) + 1);
          const int x0 = std::max(0, static_cast<int>(cx - r) - 1), x1 = std::min(w - 1, static_cast<int>(cx + r) + 1);
          for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
              const double dx = (x + 0.5 - cx) / r, dy = (y + 0.5 - cy) / ry;
              const int p = y * w + x;
              if (dx * dx + dy * dy <= 1.0 && lung[p] && !lesion[p]) {
                lesion[p] = 1;
                ++covered;
              }
            }
          }
        }
        drop_small_components(lesion, w, h, spec.min_lesion_component);
      }

      // Tissue values are drawn for every pixel in a fixed order so the
      // stream does not depend on shift or on the masks.
      const double lung_center = spec.lung_hu_center + spec.shift + rng.uniform(-1.0, 1.0) * spec.lung_hu_jitter;
      const double lesion_center = spec.lesion_hu_center + spec.shift;
      for (std::size_t p = 0; p < plane; ++p) {
        const double noise = rng.normal() * spec.noise_sd;
        const double base = lesion[p] ? lesion_center : lung[p] ? lung_center : spec.background_hu;
        pv.ct.voxels[z * plane + p] = to_hu(base + noise);
      }

      if (spec.inject_faults) {
        auto at = [&](int y, int x) { return y * w + x; };
        // A 3-pixel L inside the lung, isolated from every other lesion pixel.
        for (int attempt = 0; attempt < 200; ++attempt) {
          const int y = static_cast<int>(rng.below(h)), x = static_cast<int>(rng.below(w));
          const std::vector<std::pair<int, int>> px{{y, x}, {y, x + 1}, {y + 1, x}};
          if (!clear_with_margin(px, w, h, [&](int yy, int xx) { return lung[at(yy, xx)] && !lesion[at(yy, xx)]; })) {
            continue;
          }
          for (auto [yy, xx] : px) lesion[at(yy, xx)] = 1;
          pv.defects.push_back({v, z, LintKind::tiny_component, 3, box_of(px)});
          break;
        }
        // A 4x4 block outside the lung.
        for (int attempt = 0; attempt < 200; ++attempt) {
          const int y = static_cast<int>(rng.below(h)), x = static_cast<int>(rng.below(w));
          std::vector<std::pair<int, int>> px;
          for (int dy = 0; dy < 4; ++dy)
            for (int dx = 0; dx < 4; ++dx) px.push_back({y + dy, x + dx});
          if (!clear_with_margin(px, w, h, [&](int yy, int xx) { return !lung[at(yy, xx)] && !lesion[at(yy, xx)]; })) {
            continue;
          }
          for (auto [yy, xx] : px) lesion[at(yy, xx)] = 1;
          pv.defects.push_back({v, z, LintKind::lesion_outside_lung, 16, box_of(px)});
          break;
        }
      }

      std::copy(lung.begin(), lung.end(), pv.lung.voxels.begin() + z * plane);
      std::copy(lesion.begin(), lesion.end(), pv.lesion.voxels.begin() + z * plane);
    }
    out.push_back(std::move(pv));
  }
  return out;
}

DatasetManifest write_phantom_dataset(const std::vector<PhantomVolume>& volumes, const fs::path& dir,
                                      const std::string& tag) {
  fs::create_directories(dir);
  DatasetManifest m;
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    const std::string stem = tag + "_v" + std::to_string(i);
    const auto ct = dir / (stem + "_ct");
    const auto lung = dir / (stem + "_lung");
    const auto lesion = dir / (stem + "_lesion");
    write_volume(volumes[i].ct, ct);
    write_volume(volumes[i].lung, lung);
    write_volume(volumes[i].lesion, lesion);
    m.entries.push_back({ctv_paths(ct).header, ctv_paths(lung).header, ctv_paths(lesion).header, tag});
  }
  write_manifest(m, dir / (tag + ".manifest.json"));
  return m;
}

}  // namespace ctlab

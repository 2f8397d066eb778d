#include "ctlab/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "ctlab/error.hpp"
#include "ctlab/random.hpp"
#include "json.hpp"

namespace ctlab {

namespace fs = std::filesystem;
using nlohmann::json;

void WindowSpec::validate() const {
  if (!(lo < hi)) {
    std::ostringstream os;
    os << "window requires lo < hi, got [" << lo << ", " << hi << "]";
    throw InvalidArgument(os.str());
  }
}

void ChannelBank::validate() const {
  for (const auto& w : windows) w.validate();
  if (!windows[0].contains(windows[1]) || !windows[0].contains(windows[2])) {
    throw InvalidArgument("channel bank: the first window must contain the other two");
  }
}

double window_normalize(double hu, const WindowSpec& w) {
  const double v = (hu - w.lo) / (w.hi - w.lo);
  return std::clamp(v, 0.0, 1.0);
}

template <class T>
Grid<T> resize_nn(const Grid<T>& image, int rows, int cols) {
  if (image.rows < 1 || image.cols < 1 || rows < 1 || cols < 1) {
    throw InvalidArgument("resize_nn requires positive dimensions");
  }
  Grid<T> out(rows, cols);
  for (int i = 0; i < rows; ++i) {
    const int si = static_cast<int>(static_cast<std::int64_t>(i) * image.rows / rows);
    for (int j = 0; j < cols; ++j) {
      const int sj = static_cast<int>(static_cast<std::int64_t>(j) * image.cols / cols);
      out(i, j) = image(si, sj);
    }
  }
  return out;
}

template <class T>
Grid<T> resize_nn(const Grid<T>& image, int side) {
  return resize_nn(image, side, side);
}

#define CTLAB_RESIZE(T)                                   \
  template Grid<T> resize_nn(const Grid<T>&, int);        \
  template Grid<T> resize_nn(const Grid<T>&, int, int);
CTLAB_RESIZE(std::int16_t)
CTLAB_RESIZE(unsigned char)
CTLAB_RESIZE(float)
CTLAB_RESIZE(double)
#undef CTLAB_RESIZE

namespace {

void require_square_match(const Grid<std::int16_t>& hu, const BinaryGrid& mask) {
  if (!hu.same_shape(mask)) {
    std::ostringstream os;
    os << "slide shape " << hu.rows << "x" << hu.cols << " does not match mask " << mask.rows << "x"
       << mask.cols;
    throw ShapeError(os.str());
  }
  if (hu.rows != hu.cols) throw ShapeError("model inputs must be square slides");
}

void require_binary(const BinaryGrid& g) {
  for (auto v : g.data) {
    if (v > 1) throw InvalidArgument("mask grid is not binary (found value " + std::to_string(v) + ")");
  }
}

void fill_windows(Image& img, const Grid<std::int16_t>& hu, const ChannelBank& bank) {
  const std::size_t plane = img.plane();
  for (int c = 0; c < 3; ++c) {
    float* dst = img.data.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      dst[i] = static_cast<float>(window_normalize(hu.data[i], bank.windows[c]));
    }
  }
}

}  // namespace

Image assemble_input(const Grid<std::int16_t>& hu, const BinaryGrid& lung, const ChannelBank& bank) {
  require_square_match(hu, lung);
  require_binary(lung);
  Image img(4, hu.rows);
  fill_windows(img, hu, bank);
  float* dst = img.data.data() + 3 * img.plane();
  for (std::size_t i = 0; i < img.plane(); ++i) dst[i] = lung.data[i];
  return img;
}

Image assemble_windows(const Grid<std::int16_t>& hu, const ChannelBank& bank) {
  if (hu.rows != hu.cols) throw ShapeError("model inputs must be square slides");
  Image img(3, hu.rows);
  fill_windows(img, hu, bank);
  return img;
}

Image assemble_target(const BinaryGrid& mask) {
  if (mask.rows != mask.cols) throw ShapeError("targets must be square slides");
  require_binary(mask);
  Image img(2, mask.rows);
  const std::size_t plane = img.plane();
  for (std::size_t i = 0; i < plane; ++i) {
    img.data[i] = mask.data[i];
    img.data[plane + i] = 1.0f - mask.data[i];
  }
  return img;
}

std::string SlideId::str() const {
  return tag + ":" + std::to_string(volume) + ":" + std::to_string(slide);
}

SlideId SlideId::parse(const std::string& s) {
  const auto b = s.rfind(':');
  const auto a = b == std::string::npos || b == 0 ? std::string::npos : s.rfind(':', b - 1);
  if (a == std::string::npos) throw FormatError("malformed slide id '" + s + "'");
  SlideId id;
  id.tag = s.substr(0, a);
  try {
    id.volume = std::stoi(s.substr(a + 1, b - a - 1));
    id.slide = std::stoi(s.substr(b + 1));
  } catch (const std::exception&) {
    throw FormatError("malformed slide id '" + s + "'");
  }
  return id;
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest '" + path.string() + "': " + e.what());
  }
  if (!j.is_array()) throw FormatError("manifest must be a JSON list of records");

  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path q(p);
    return q.is_absolute() ? q : base / q;
  };

  DatasetManifest m;
  for (const auto& rec : j) {
    try {
      ManifestEntry e;
      e.ct = resolve(rec.at("ct").get<std::string>());
      e.lung = resolve(rec.at("lung").get<std::string>());
      e.lesion = resolve(rec.at("lesion").get<std::string>());
      e.tag = rec.at("tag").get<std::string>();
      m.entries.push_back(std::move(e));
    } catch (const json::exception& e) {
      throw FormatError("malformed manifest record in '" + path.string() + "': " + e.what());
    }
  }
  return m;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  const fs::path base = path.parent_path();
  const fs::path abs_base = fs::absolute(base.empty() ? fs::path(".") : base).lexically_normal();
  auto rel = [&](const fs::path& p) {
    const fs::path abs_p = fs::absolute(p).lexically_normal();
    const auto r = abs_p.lexically_relative(abs_base);
    if (!r.empty() && *r.begin() != "..") return r.generic_string();
    return abs_p.generic_string();
  };
  json j = json::array();
  for (const auto& e : manifest.entries) {
    j.push_back({{"ct", rel(e.ct)}, {"lung", rel(e.lung)}, {"lesion", rel(e.lesion)}, {"tag", e.tag}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

std::vector<SlideRecord> survey_slides(const MaskVolume& lung, const MaskVolume& lesion,
                                       const std::string& tag, int volume_index) {
  validate_pair(lung, lesion);
  std::vector<SlideRecord> out;
  out.reserve(lung.header.depth);
  for (int z = 0; z < lung.header.depth; ++z) {
    out.push_back({SlideId{tag, volume_index, z}, static_cast<std::int64_t>(lung.slide_count(z)),
                   static_cast<std::int64_t>(lesion.slide_count(z))});
  }
  return out;
}

std::vector<SlideRecord> filter_slides(const std::vector<SlideRecord>& slides) {
  std::vector<SlideRecord> out;
  std::copy_if(slides.begin(), slides.end(), std::back_inserter(out),
               [](const SlideRecord& r) { return r.lung_pixels > 0; });
  return out;
}

std::vector<SlideRecord> filter_slides(const DatasetManifest& manifest) {
  std::vector<SlideRecord> out;
  std::map<std::string, int> volume_index;
  for (const auto& e : manifest.entries) {
    const auto ct = read_hounsfield(e.ct);
    const auto lung = read_mask(e.lung);
    const auto lesion = read_mask(e.lesion);
    validate_pair(ct, lung);
    validate_pair(ct, lesion);
    const int v = volume_index[e.tag]++;
    auto kept = filter_slides(survey_slides(lung, lesion, e.tag, v));
    out.insert(out.end(), kept.begin(), kept.end());
  }
  return out;
}

void SplitSpec::validate() const {
  if (train_count < 0 || val_count < 0) throw InvalidArgument("split counts must be >= 0");
  if (!(lesion_ratio >= 0.0 && lesion_ratio <= 1.0)) {
    throw InvalidArgument("lesion_ratio must lie in [0, 1]");
  }
}

int lesion_quota(int count, double ratio) {
  return static_cast<int>(std::floor(count * ratio + 0.5));
}

DatasetSplit split_dataset(const std::vector<SlideRecord>& slides, const SplitSpec& spec) {
  spec.validate();
  const std::set<int> holdout(spec.holdout_volumes.begin(), spec.holdout_volumes.end());

  std::vector<std::size_t> lesion, clean;
  for (std::size_t i = 0; i < slides.size(); ++i) {
    if (holdout.count(slides[i].id.volume)) continue;
    (slides[i].has_lesion() ? lesion : clean).push_back(i);
  }

  const int train_lesion = lesion_quota(spec.train_count, spec.lesion_ratio);
  const int val_lesion = lesion_quota(spec.val_count, spec.lesion_ratio);
  const int need_lesion = train_lesion + val_lesion;
  const int need_clean = spec.train_count - train_lesion + spec.val_count - val_lesion;
  if (need_lesion > static_cast<int>(lesion.size()) || need_clean > static_cast<int>(clean.size())) {
    std::ostringstream os;
    os << "insufficient slides for split: need " << need_lesion << " lesion + " << need_clean
       << " non-lesion, have " << lesion.size() << " + " << clean.size();
    throw DataError(os.str());
  }

  Rng rng(spec.seed);
  rng.shuffle(lesion);
  rng.shuffle(clean);

  std::vector<int> role(slides.size(), 2);  // 0 train, 1 val, 2 test
  DatasetSplit split;
  auto take = [&](std::vector<std::size_t>& pool, std::size_t& cursor, int n, int r,
                  std::vector<SlideId>& dst) {
    for (int k = 0; k < n; ++k) {
      const auto idx = pool[cursor++];
      role[idx] = r;
      dst.push_back(slides[idx].id);
    }
  };
  std::size_t lc = 0, cc = 0;
  take(lesion, lc, train_lesion, 0, split.train);
  take(clean, cc, spec.train_count - train_lesion, 0, split.train);
  take(lesion, lc, val_lesion, 1, split.val);
  take(clean, cc, spec.val_count - val_lesion, 1, split.val);
  for (std::size_t i = 0; i < slides.size(); ++i) {
    if (role[i] == 2) split.test.push_back(slides[i].id);
  }
  return split;
}

const char* to_string(LintKind k) {
  return k == LintKind::lesion_outside_lung ? "lesion_outside_lung" : "tiny_component";
}

std::vector<LintFinding> lint_annotations(const MaskVolume& lung, const MaskVolume& lesion,
                                          int min_component, const std::string& tag,
                                          int volume_index) {
  validate_pair(lung, lesion);
  const int w = lung.header.width;
  const int h = lung.header.height;
  std::vector<LintFinding> findings;
  std::vector<int> label(static_cast<std::size_t>(w) * h);
  std::vector<int> stack;

  for (int z = 0; z < lung.header.depth; ++z) {
    std::fill(label.begin(), label.end(), 0);
    int next = 0;
    for (int y0 = 0; y0 < h; ++y0) {
      for (int x0 = 0; x0 < w; ++x0) {
        const int seed = y0 * w + x0;
        if (!lesion.at(z, y0, x0) || label[seed]) continue;
        label[seed] = ++next;
        stack.assign(1, seed);
        std::int64_t count = 0;
        bool outside = false;
        BoundingBox box{x0, y0, x0, y0};
        while (!stack.empty()) {
          const int p = stack.back();
          stack.pop_back();
          const int y = p / w, x = p % w;
          ++count;
          if (!lung.at(z, y, x)) outside = true;
          box.x0 = std::min(box.x0, x);
          box.x1 = std::max(box.x1, x);
          box.y0 = std::min(box.y0, y);
          box.y1 = std::max(box.y1, y);
          const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
          for (const auto& n : nb) {
            if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
            const int q = n[0] * w + n[1];
            if (lesion.at(z, n[0], n[1]) && !label[q]) {
              label[q] = next;
              stack.push_back(q);
            }
          }
        }
        const SlideId id{tag, volume_index, z};
        if (outside) findings.push_back({id, LintKind::lesion_outside_lung, count, box});
        if (count < min_component) findings.push_back({id, LintKind::tiny_component, count, box});
      }
    }
  }
  return findings;
}

std::string lint_report_jsonl(const std::vector<LintFinding>& findings) {
  std::string out;
  for (const auto& f : findings) {
    json j{{"slide_id", f.slide_id.str()},
           {"kind", to_string(f.kind)},
           {"pixel_count", f.pixel_count},
           {"bbox", {f.location.x0, f.location.y0, f.location.x1, f.location.y1}}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

Sample make_sample(const HounsfieldVolume& ct, const MaskVolume& lung, const MaskVolume& lesion,
                   const SlideId& id, const PreprocessOptions& options) {
  validate_pair(ct, lung);
  validate_pair(ct, lesion);
  if (id.slide < 0 || id.slide >= ct.header.depth) {
    throw InvalidArgument("slide index out of range for " + id.str());
  }
  const auto hu = resize_nn(ct.slide(id.slide), options.side);
  const auto lung_s = resize_nn(lung.slide(id.slide), options.side);
  Sample s;
  s.id = id;
  if (options.mode == SampleMode::lesion) {
    s.input = assemble_input(hu, lung_s, options.bank);
    s.target = assemble_target(resize_nn(lesion.slide(id.slide), options.side));
    s.has_lesion = lesion.slide_count(id.slide) > 0;
  } else {
    s.input = assemble_windows(hu, options.bank);
    s.target = assemble_target(lung_s);
    s.has_lesion = lung.slide_count(id.slide) > 0;
  }
  return s;
}

}  // namespace ctlab

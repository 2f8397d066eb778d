#include "ctlab_cli/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <thread>

#include "CLI11.hpp"
#include "ctlab/checkpoint.hpp"
#include "ctlab/error.hpp"
#include "ctlab/phantom.hpp"
#include "ctlab/random.hpp"
#include "ctlab/sample_store.hpp"
#include "ctlab/transfer.hpp"
#include "ctlab/viz_export.hpp"
#include "ctlab_cli/run_manifest.hpp"
#include "json.hpp"

namespace ctlab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Globals {
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  fs::path out_dir = ".";
  bool out_dir_given = false;
};

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string num(int v) { return std::to_string(v); }
std::string num(std::uint64_t v) { return std::to_string(v); }

fs::path strip_suffix(const fs::path& p, std::initializer_list<const char*> suffixes) {
  const std::string s = p.string();
  for (const char* suf : suffixes) {
    const std::string x(suf);
    if (s.size() > x.size() && s.compare(s.size() - x.size(), x.size(), x) == 0) return s.substr(0, s.size() - x.size());
  }
  return p;
}

fs::path with_suffix(const fs::path& base, const char* suffix) { return fs::path(base.string() + suffix); }

// Per-command bookkeeping: path resolution, canonical arguments and the
// RunManifest written at the end.
class Context {
 public:
  Context(const Globals& g, std::string command, std::ostream& out, std::ostream& err)
      : g_(g), out_(out), err_(err) {
    m_.tool_version = kVersion;
    m_.command = std::move(command);
    m_.jobs = g.jobs;
    m_.out_dir = g.out_dir;
    m_.started = utc_now();
    m_.arguments.push_back(m_.command);
  }

  const Globals& globals() const { return g_; }
  std::ostream& out() { return out_; }
  std::ostream& err() { return err_; }
  std::uint64_t seed() const { return g_.seed.value_or(0); }

  /// Relative inputs resolve against the output directory.
  fs::path input(const std::string& p) const {
    fs::path q(p);
    if (q.is_relative()) q = g_.out_dir / q;
    return fs::absolute(q).lexically_normal();
  }

  fs::path output(const std::string& rel) {
    const fs::path p = g_.out_dir / rel;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    return p;
  }

  void uses(const fs::path& file) {
    if (!fs::exists(file)) throw IoError("input '" + file.string() + "' does not exist");
    m_.inputs.push_back(describe(file));
  }
  void produced(const fs::path& file) { outputs_.push_back(file); }

  void arg(const std::string& flag, const std::string& value) {
    m_.arguments.push_back(flag);
    m_.arguments.push_back(value);
  }
  void flag(const std::string& flag) { m_.arguments.push_back(flag); }
  void seed_entry(const std::string& key, std::uint64_t v) { m_.seeds[key] = v; }

  fs::path finish(const std::string& name) {
    if (!m_.seeds.count("seed")) m_.seeds["seed"] = seed();
    for (const auto& f : outputs_) m_.outputs.push_back(describe(f, g_.out_dir));
    m_.finished = utc_now();
    const fs::path path = g_.out_dir / "runs" / (m_.command + "-" + name + ".run.json");
    write_run_manifest(m_, path);
    return path;
  }

 private:
  Globals g_;
  std::ostream& out_;
  std::ostream& err_;
  RunManifest m_;
  std::vector<fs::path> outputs_;
};

void check_name(const std::string& name) {
  if (name.empty() || name.find('/') != std::string::npos || name.find("..") != std::string::npos) {
    throw InvalidArgument("output name '" + name + "' must be a plain file stem");
  }
}

void use_volume(Context& ctx, const fs::path& path) {
  const auto p = ctv_paths(path);
  ctx.uses(p.header);
  ctx.uses(p.raster);
}

fs::path use_samples(Context& ctx, const std::string& arg) {
  const auto base = strip_suffix(ctx.input(arg), {".samples.json", ".samples.raw"});
  ctx.uses(with_suffix(base, ".samples.json"));
  ctx.uses(with_suffix(base, ".samples.raw"));
  return base;
}

fs::path use_checkpoint(Context& ctx, const std::string& arg) {
  const auto base = strip_suffix(ctx.input(arg), {".json", ".bin"});
  const auto p = checkpoint_paths(base);
  ctx.uses(p.manifest);
  ctx.uses(p.blob);
  return base;
}

// ---------------------------------------------------------------- training

struct TrainFlags {
  std::string config;
  std::optional<int> depth, base_width, batch_size, epochs, patience;
  std::optional<double> lr;
  std::optional<std::string> optimizer;
  bool no_shuffle = false;
};

void add_train_flags(CLI::App* sub, TrainFlags& f, bool network) {
  sub->add_option("--config", f.config, "JSON file with \"network\" and \"training\" blocks");
  if (network) {
    sub->add_option("--depth", f.depth, "U-Net depth");
    sub->add_option("--base-width", f.base_width, "filters at the first level");
  }
  sub->add_option("--lr", f.lr, "learning rate");
  sub->add_option("--batch-size", f.batch_size, "mini-batch size");
  sub->add_option("--epochs", f.epochs, "maximum epochs");
  sub->add_option("--patience", f.patience, "early-stopping patience");
  sub->add_option("--optimizer", f.optimizer, "adam or sgd");
  sub->add_flag("--no-shuffle", f.no_shuffle, "keep the training order fixed");
}

void apply_network_json(const json& j, UNetConfig& c) {
  c.depth = j.value("depth", c.depth);
  c.base_width = j.value("base_width", c.base_width);
}

void apply_training_json(const json& j, TrainConfig& t) {
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.max_epochs = j.value("max_epochs", t.max_epochs);
  t.patience = j.value("patience", t.patience);
  if (j.contains("optimizer")) t.optimizer = parse_optimizer(j["optimizer"].get<std::string>());
  t.shuffle = j.value("shuffle", t.shuffle);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

void apply_config_blocks(const json& j, UNetConfig& net, TrainConfig& tc) {
  try {
    if (j.contains("network")) apply_network_json(j["network"], net);
    if (j.contains("training")) apply_training_json(j["training"], tc);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed configuration block: ") + e.what());
  }
}

void apply_train_flags(const TrainFlags& f, UNetConfig& net, TrainConfig& tc) {
  if (f.depth) net.depth = *f.depth;
  if (f.base_width) net.base_width = *f.base_width;
  if (f.lr) tc.learning_rate = *f.lr;
  if (f.batch_size) tc.batch_size = *f.batch_size;
  if (f.epochs) tc.max_epochs = *f.epochs;
  if (f.patience) tc.patience = *f.patience;
  if (f.optimizer) tc.optimizer = parse_optimizer(*f.optimizer);
  if (f.no_shuffle) tc.shuffle = false;
}

void record_training(Context& ctx, const TrainConfig& tc) {
  ctx.arg("--lr", num(tc.learning_rate));
  ctx.arg("--batch-size", num(tc.batch_size));
  ctx.arg("--epochs", num(tc.max_epochs));
  ctx.arg("--patience", num(tc.patience));
  ctx.arg("--optimizer", to_string(tc.optimizer));
  if (!tc.shuffle) ctx.flag("--no-shuffle");
}

struct LoadedSplit {
  std::vector<Sample> train, val, test;
};

LoadedSplit load_split(const fs::path& samples_base, const fs::path& split_path) {
  const auto pool = read_samples(samples_base);
  const auto split = read_split(split_path);
  return {select_samples(pool, split.train), select_samples(pool, split.val), select_samples(pool, split.test)};
}

void write_train_outputs(Context& ctx, const std::string& name, const TrainResult<float>& r,
                         std::uint64_t init_seed, std::uint64_t train_seed) {
  const auto base = ctx.output(name);
  save_checkpoint(r.params, base);
  const auto cp = checkpoint_paths(base);
  ctx.produced(cp.manifest);
  ctx.produced(cp.blob);
  const auto log_path = ctx.output(name + ".log.csv");
  write_train_log(r.log, log_path);
  ctx.produced(log_path);
  const json summary{{"stop_reason", to_string(r.log.stop_reason)},
                     {"best_epoch", r.log.best_epoch},
                     {"stopped_epoch", r.log.stopped_epoch},
                     {"best_val_loss", r.log.epochs.at(r.log.best_epoch - 1).val_loss},
                     {"init_seed", init_seed},
                     {"train_seed", train_seed}};
  const auto sum_path = ctx.output(name + ".train.json");
  std::ofstream(sum_path, std::ios::trunc) << summary.dump(2) << "\n";
  ctx.produced(sum_path);
  ctx.out() << name << ": " << to_string(r.log.stop_reason) << " after epoch " << r.log.stopped_epoch
            << ", best epoch " << r.log.best_epoch << "\n";
}

// ---------------------------------------------------------------- commands

struct PhantomArgs {
  std::string spec_file, tag = "A";
  std::optional<int> side, depth, volumes, model_depth, min_component;
  std::optional<double> lung_hu, lung_jitter, lesion_hu, lesion_fraction, lesion_slide_fraction, shift, noise_sd,
      background_hu, spacing;
  bool inject_faults = false;
};

int cmd_phantom(const Globals& g, const PhantomArgs& a, std::ostream& out, std::ostream& err) {
  Context ctx(g, "phantom", out, err);
  check_name(a.tag);
  PhantomSpec s;
  if (!a.spec_file.empty()) {
    const auto path = ctx.input(a.spec_file);
    ctx.uses(path);
    s = read_phantom_spec(path);
  }
  if (a.side) s.side = *a.side;
  if (a.depth) s.depth = *a.depth;
  if (a.volumes) s.volumes = *a.volumes;
  if (a.model_depth) s.model_depth = *a.model_depth;
  if (a.min_component) s.min_lesion_component = *a.min_component;
  if (a.lung_hu) s.lung_hu_center = *a.lung_hu;
  if (a.lung_jitter) s.lung_hu_jitter = *a.lung_jitter;
  if (a.lesion_hu) s.lesion_hu_center = *a.lesion_hu;
  if (a.lesion_fraction) s.lesion_fraction = *a.lesion_fraction;
  if (a.lesion_slide_fraction) s.lesion_slide_fraction = *a.lesion_slide_fraction;
  if (a.shift) s.shift = *a.shift;
  if (a.noise_sd) s.noise_sd = *a.noise_sd;
  if (a.background_hu) s.background_hu = *a.background_hu;
  if (a.spacing) s.slice_spacing = *a.spacing;
  if (a.inject_faults) s.inject_faults = true;
  if (g.seed) s.seed = *g.seed;
  s.validate();

  ctx.arg("--tag", a.tag);
  ctx.arg("--side", num(s.side));
  ctx.arg("--depth", num(s.depth));
  ctx.arg("--volumes", num(s.volumes));
  ctx.arg("--model-depth", num(s.model_depth));
  ctx.arg("--min-component", num(s.min_lesion_component));
  ctx.arg("--lung-hu", num(s.lung_hu_center));
  ctx.arg("--lung-jitter", num(s.lung_hu_jitter));
  ctx.arg("--lesion-hu", num(s.lesion_hu_center));
  ctx.arg("--lesion-fraction", num(s.lesion_fraction));
  ctx.arg("--lesion-slide-fraction", num(s.lesion_slide_fraction));
  ctx.arg("--shift", num(s.shift));
  ctx.arg("--noise-sd", num(s.noise_sd));
  ctx.arg("--background-hu", num(s.background_hu));
  ctx.arg("--spacing", num(s.slice_spacing));
  if (s.inject_faults) ctx.flag("--inject-faults");
  ctx.seed_entry("seed", s.seed);

  const auto vols = generate_dataset(s);
  const auto dir = ctx.output(a.tag + "/" + a.tag + ".phantom.json").parent_path();
  write_phantom_spec(s, dir / (a.tag + ".phantom.json"));
  ctx.produced(dir / (a.tag + ".phantom.json"));
  const auto manifest = write_phantom_dataset(vols, dir, a.tag);
  for (const auto& e : manifest.entries) {
    for (const auto& p : {e.ct, e.lung, e.lesion}) {
      const auto cp = ctv_paths(p);
      ctx.produced(cp.header);
      ctx.produced(cp.raster);
    }
  }
  ctx.produced(dir / (a.tag + ".manifest.json"));
  if (s.inject_faults) {
    std::ofstream d(dir / (a.tag + ".defects.jsonl"), std::ios::trunc);
    for (const auto& v : vols) {
      for (const auto& x : v.defects) {
        d << json{{"slide_id", SlideId{a.tag, x.volume, x.slide}.str()},
                  {"kind", to_string(x.kind)},
                  {"pixel_count", x.pixel_count},
                  {"bbox", {x.box.x0, x.box.y0, x.box.x1, x.box.y1}}}
                 .dump()
          << "\n";
      }
    }
    d.close();
    ctx.produced(dir / (a.tag + ".defects.jsonl"));
  }
  ctx.finish(a.tag);
  out << "phantom " << a.tag << ": " << s.volumes << " volumes of " << s.side << "x" << s.side << "x" << s.depth
      << " in " << dir.string() << "\n";
  return kOk;
}

enum class Severity { never, warning, error };

Severity parse_severity(const std::string& s) {
  if (s == "never") return Severity::never;
  if (s == "warning") return Severity::warning;
  if (s == "error") return Severity::error;
  throw InvalidArgument("unknown severity '" + s + "' (expected never, warning or error)");
}

Severity severity_of(LintKind k) {
  return k == LintKind::lesion_outside_lung ? Severity::error : Severity::warning;
}

std::size_t count_at_or_above(const std::vector<LintFinding>& f, Severity threshold) {
  if (threshold == Severity::never) return 0;
  std::size_t n = 0;
  for (const auto& x : f) n += static_cast<int>(severity_of(x.kind)) >= static_cast<int>(threshold);
  return n;
}

// Lints every entry; volume indices count within each tag.
std::vector<LintFinding> lint_manifest(const DatasetManifest& m, int min_component) {
  std::vector<LintFinding> all;
  std::map<std::string, int> per_tag;
  for (const auto& e : m.entries) {
    const int vi = per_tag[e.tag]++;
    const auto lung = read_mask(e.lung);
    const auto lesion = read_mask(e.lesion);
    auto f = lint_annotations(lung, lesion, min_component, e.tag, vi);
    all.insert(all.end(), f.begin(), f.end());
  }
  return all;
}

DatasetManifest use_manifest(Context& ctx, const std::string& arg) {
  const auto path = ctx.input(arg);
  ctx.uses(path);
  const auto m = read_manifest(path);
  for (const auto& e : m.entries) {
    use_volume(ctx, e.ct);
    use_volume(ctx, e.lung);
    use_volume(ctx, e.lesion);
  }
  return m;
}

struct LintArgs {
  std::string manifest, name, fail_on = "error";
  int min_component = 10;
};

int cmd_lint(const Globals& g, const LintArgs& a, std::ostream& out, std::ostream& err) {
  Context ctx(g, "lint", out, err);
  check_name(a.name);
  const auto threshold = parse_severity(a.fail_on);
  const auto m = use_manifest(ctx, a.manifest);
  ctx.arg("--manifest", ctx.input(a.manifest).string());
  ctx.arg("--name", a.name);
  ctx.arg("--min-component", num(a.min_component));
  ctx.arg("--fail-on", a.fail_on);

  const auto findings = lint_manifest(m, a.min_component);
  const auto path = ctx.output(a.name + ".lint.jsonl");
  std::ofstream(path, std::ios::trunc) << lint_report_jsonl(findings);
  ctx.produced(path);
  ctx.finish(a.name);
  out << "lint " << a.name << ": " << findings.size() << " finding(s)\n";
  const auto blocking = count_at_or_above(findings, threshold);
  if (blocking > 0) {
    err << "error[lint]: " << blocking << " finding(s) at or above severity '" << a.fail_on << "'\n";
    return kLintFindings;
  }
  return kOk;
}

struct PreprocessArgs {
  std::string manifest, name, split_file, mode = "lesion", fail_on = "never";
  std::optional<int> train_count, val_count;
  std::optional<double> lesion_ratio;
  std::vector<int> holdout;
  int side = 320;
  int min_component = 10;
};

template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  const std::size_t t = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(jobs), n));
  if (t <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < t; ++k) {
    pool.emplace_back([&, k] {
      for (std::size_t i = n * k / t; i < n * (k + 1) / t; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

int cmd_preprocess(const Globals& g, const PreprocessArgs& a, std::ostream& out, std::ostream& err) {
  Context ctx(g, "preprocess", out, err);
  check_name(a.name);
  const auto threshold = parse_severity(a.fail_on);
  SplitSpec spec;
  if (!a.split_file.empty()) {
    const auto path = ctx.input(a.split_file);
    ctx.uses(path);
    const auto j = read_json(path);
    try {
      spec.train_count = j.value("train_count", spec.train_count);
      spec.val_count = j.value("val_count", spec.val_count);
      spec.lesion_ratio = j.value("lesion_ratio", spec.lesion_ratio);
      spec.holdout_volumes = j.value("holdout_volumes", spec.holdout_volumes);
    } catch (const json::exception& e) {
      throw FormatError("malformed split spec: " + std::string(e.what()));
    }
  }
  if (a.train_count) spec.train_count = *a.train_count;
  if (a.val_count) spec.val_count = *a.val_count;
  if (a.lesion_ratio) spec.lesion_ratio = *a.lesion_ratio;
  if (!a.holdout.empty()) spec.holdout_volumes = a.holdout;
  spec.seed = ctx.seed();
  spec.validate();

  PreprocessOptions opt;
  opt.side = a.side;
  if (a.mode == "lung") opt.mode = SampleMode::lung;
  else if (a.mode != "lesion") throw InvalidArgument("unknown sample mode '" + a.mode + "' (expected lesion or lung)");

  const auto m = use_manifest(ctx, a.manifest);
  ctx.arg("--manifest", ctx.input(a.manifest).string());
  ctx.arg("--name", a.name);
  ctx.arg("--train-count", num(spec.train_count));
  ctx.arg("--val-count", num(spec.val_count));
  ctx.arg("--lesion-ratio", num(spec.lesion_ratio));
  for (int v : spec.holdout_volumes) ctx.arg("--holdout", num(v));
  ctx.arg("--side", num(opt.side));
  ctx.arg("--mode", a.mode);
  ctx.arg("--min-component", num(a.min_component));
  ctx.arg("--fail-on", a.fail_on);

  const auto findings = lint_manifest(m, a.min_component);
  const auto lint_path = ctx.output(a.name + ".lint.jsonl");
  std::ofstream(lint_path, std::ios::trunc) << lint_report_jsonl(findings);
  ctx.produced(lint_path);
  if (const auto blocking = count_at_or_above(findings, threshold); blocking > 0) {
    ctx.finish(a.name);
    err << "error[lint]: " << blocking << " annotation finding(s) at or above severity '" << a.fail_on
        << "'; see " << lint_path.string() << "\n";
    return kLintFindings;
  }

  // Survey everything so the exclusion count can be reported.
  std::size_t total_slides = 0;
  for (const auto& e : m.entries) total_slides += static_cast<std::size_t>(read_mask(e.lung).header.depth);
  const auto kept = filter_slides(m);
  if (kept.empty()) throw DataError("no slide in the manifest has lung pixels");
  const std::size_t excluded = total_slides - kept.size();
  if (excluded > 0) err << "note: excluded " << excluded << " slide(s) without lung pixels\n";

  const auto split = split_dataset(kept, spec);

  std::vector<Sample> samples(kept.size());
  std::map<std::string, int> per_tag;
  std::size_t cursor = 0;
  for (const auto& e : m.entries) {
    const int vi = per_tag[e.tag]++;
    std::size_t end = cursor;
    while (end < kept.size() && kept[end].id.tag == e.tag && kept[end].id.volume == vi) ++end;
    if (end == cursor) continue;
    const auto ct = read_hounsfield(e.ct);
    const auto lung = read_mask(e.lung);
    const auto lesion = read_mask(e.lesion);
    parallel_for(end - cursor, g.jobs, [&](std::size_t i) {
      samples[cursor + i] = make_sample(ct, lung, lesion, kept[cursor + i].id, opt);
    });
    cursor = end;
  }
  if (cursor != kept.size()) throw DataError("manifest entries and surveyed slides are out of order");

  const auto base = ctx.output(a.name);
  write_samples(samples, base);
  ctx.produced(with_suffix(base, ".samples.json"));
  ctx.produced(with_suffix(base, ".samples.raw"));
  const auto split_path = ctx.output(a.name + ".split.json");
  write_split(split, split_path);
  ctx.produced(split_path);
  ctx.finish(a.name);
  out << "preprocess " << a.name << ": " << samples.size() << " slides (" << excluded << " excluded), split "
      << split.train.size() << "/" << split.val.size() << "/" << split.test.size() << "\n";
  return kOk;
}

struct TrainArgs {
  std::string samples, split, name, from;
  int stage = 1;
  TrainFlags flags;
};

int cmd_train(const Globals& g, const TrainArgs& a, bool retrain, std::ostream& out, std::ostream& err) {
  Context ctx(g, retrain ? "retrain" : "train", out, err);
  check_name(a.name);
  UNetConfig net;
  TrainConfig tc;
  if (!a.flags.config.empty()) {
    const auto path = ctx.input(a.flags.config);
    ctx.uses(path);
    apply_config_blocks(read_json(path), net, tc);
  }
  apply_train_flags(a.flags, net, tc);
  tc.jobs = g.jobs;

  std::optional<ParamSet<float>> start;
  fs::path from_base;
  if (retrain) {
    if (a.stage < 1) throw InvalidArgument("--stage must be >= 1 for retraining");
    from_base = use_checkpoint(ctx, a.from);
    start = load_checkpoint(from_base);
  }
  const auto samples_base = use_samples(ctx, a.samples);
  const auto split_path = ctx.input(a.split);
  ctx.uses(split_path);
  const auto data = load_split(samples_base, split_path);
  if (data.train.empty()) throw DataError("training split is empty");
  if (data.val.empty()) throw DataError("validation split is empty");

  ctx.arg("--samples", samples_base.string());
  ctx.arg("--split", split_path.string());
  ctx.arg("--name", a.name);
  if (retrain) {
    ctx.arg("--from", from_base.string());
    ctx.arg("--stage", num(a.stage));
  }

  const std::uint64_t seed = ctx.seed();
  std::uint64_t init_seed = seed;
  if (!retrain) {
    net.input_channels = data.train.front().input.channels;
    net.output_channels = data.train.front().target.channels;
    net.image_side = data.train.front().input.side;
    net.validate();
    start = init_unet<float>(net, init_seed);
    ctx.arg("--depth", num(net.depth));
    ctx.arg("--base-width", num(net.base_width));
  } else {
    init_seed = start->init_seed;
  }
  record_training(ctx, tc);
  tc.seed = mix_seed(seed, static_cast<std::uint64_t>(retrain ? a.stage : 0));
  ctx.seed_entry("seed", seed);
  ctx.seed_entry("init", init_seed);
  ctx.seed_entry("train", tc.seed);

  const auto r = train(std::move(*start), data.train, data.val, tc);
  write_train_outputs(ctx, a.name, r, init_seed, tc.seed);
  ctx.finish(a.name);
  return kOk;
}

struct EvaluateArgs {
  std::string checkpoint, samples, split, name, part = "test";
  double threshold = 0.5;
};

int cmd_evaluate(const Globals& g, const EvaluateArgs& a, std::ostream& out, std::ostream& err) {
  Context ctx(g, "evaluate", out, err);
  check_name(a.name);
  const auto ckpt = use_checkpoint(ctx, a.checkpoint);
  const auto samples_base = use_samples(ctx, a.samples);
  const auto split_path = ctx.input(a.split);
  ctx.uses(split_path);
  ctx.arg("--checkpoint", ckpt.string());
  ctx.arg("--samples", samples_base.string());
  ctx.arg("--split", split_path.string());
  ctx.arg("--name", a.name);
  ctx.arg("--part", a.part);
  ctx.arg("--threshold", num(a.threshold));

  const auto params = load_checkpoint(ckpt);
  const auto data = load_split(samples_base, split_path);
  const std::vector<Sample>* set = nullptr;
  if (a.part == "test") set = &data.test;
  else if (a.part == "val") set = &data.val;
  else if (a.part == "train") set = &data.train;
  else throw InvalidArgument("unknown split part '" + a.part + "' (expected train, val or test)");
  if (set->empty()) throw DataError("the " + a.part + " split is empty");

  const auto rows = evaluate_slices(params, *set, a.threshold, g.jobs);
  auto flags = std::make_unique<bool[]>(set->size());
  for (std::size_t i = 0; i < set->size(); ++i) flags[i] = (*set)[i].has_lesion;
  const auto csv = metrics_report_csv(rows, std::span<const bool>(flags.get(), set->size()));
  const auto path = ctx.output(a.name + ".metrics.csv");
  std::ofstream(path, std::ios::trunc | std::ios::binary) << csv;
  ctx.produced(path);
  ctx.finish(a.name);
  const auto last = csv.find("MEAN(covid-only)");
  out << csv.substr(last);
  return kOk;
}

struct MatrixArgs {
  std::string plan, name;
  std::optional<std::uint64_t> init_seed, train_seed;
  std::optional<double> threshold;
  TrainFlags flags;
};

int cmd_matrix(const Globals& g, const MatrixArgs& a, std::ostream& out, std::ostream& err) {
  Context ctx(g, "matrix", out, err);
  const auto plan_path = ctx.input(a.plan);
  ctx.uses(plan_path);
  auto plan = read_plan(plan_path);
  const auto j = read_json(plan_path);

  ExperimentDefaults defaults;
  apply_config_blocks(j, defaults.network, defaults.training);
  defaults.threshold = j.value("threshold", defaults.threshold);
  apply_train_flags(a.flags, defaults.network, defaults.training);
  if (a.threshold) defaults.threshold = *a.threshold;
  defaults.training.jobs = g.jobs;
  if (g.seed) plan.seeds = {*g.seed, *g.seed};
  if (a.init_seed) plan.seeds.init = *a.init_seed;
  if (a.train_seed) plan.seeds.train = *a.train_seed;

  if (!j.contains("datasets") || !j["datasets"].is_object()) {
    throw FormatError("plan '" + plan_path.string() + "' has no \"datasets\" block");
  }
  DatasetRegistry registry;
  for (const auto& [tag, entry] : j["datasets"].items()) {
    fs::path samples, split;
    try {
      samples = entry.at("samples").get<std::string>();
      split = entry.at("split").get<std::string>();
    } catch (const json::exception& e) {
      throw FormatError("dataset '" + tag + "' in plan: " + e.what());
    }
    if (samples.is_relative()) samples = plan_path.parent_path() / samples;
    if (split.is_relative()) split = plan_path.parent_path() / split;
    const auto base = use_samples(ctx, samples.string());
    ctx.uses(fs::absolute(split).lexically_normal());
    const auto data = load_split(base, split);
    registry[tag] = DatasetSplits{data.train, data.val, data.test};
  }
  const auto& first = registry.count(plan.train_tag) ? registry.at(plan.train_tag).train
                                                     : std::vector<Sample>{};
  if (first.empty()) throw DataError("training dataset '" + plan.train_tag + "' has no training samples");
  defaults.network.input_channels = first.front().input.channels;
  defaults.network.output_channels = first.front().target.channels;
  defaults.network.image_side = first.front().input.side;
  defaults.network.validate();

  const std::string name = a.name.empty() ? lineage_name(plan.train_tag, plan.retrain_tags) : a.name;
  check_name(name);
  ctx.arg("--plan", plan_path.string());
  ctx.arg("--name", name);
  ctx.arg("--init-seed", num(plan.seeds.init));
  ctx.arg("--train-seed", num(plan.seeds.train));
  ctx.arg("--threshold", num(defaults.threshold));
  ctx.arg("--depth", num(defaults.network.depth));
  ctx.arg("--base-width", num(defaults.network.base_width));
  record_training(ctx, defaults.training);
  ctx.seed_entry("init", plan.seeds.init);
  ctx.seed_entry("train", plan.seeds.train);

  const auto result = run_experiment(plan, registry, defaults);
  for (std::size_t k = 0; k < result.lineage.checkpoints.size(); ++k) {
    const std::string stem = name + ".stage" + std::to_string(k);
    const auto base = ctx.output(stem);
    save_checkpoint(result.lineage.checkpoints[k], base);
    ctx.produced(checkpoint_paths(base).manifest);
    ctx.produced(checkpoint_paths(base).blob);
    const auto log_path = ctx.output(stem + ".log.csv");
    write_train_log(result.lineage.logs[k], log_path);
    ctx.produced(log_path);
  }
  const auto csv = result.matrix.csv();
  const auto path = ctx.output(name + ".matrix.csv");
  std::ofstream(path, std::ios::trunc | std::ios::binary) << csv;
  ctx.produced(path);
  ctx.finish(name);
  out << csv;
  return kOk;
}

struct ExportArgs {
  std::string ct, lung, source = "ct", mask, checkpoint, name;
  std::optional<double> spacing;
  bool nonzero_only = false;
  double threshold = 0.5;
};

MaskVolume predict_volume(const ParamSet<float>& params, const HounsfieldVolume& ct, const MaskVolume& lung,
                          double threshold, int jobs) {
  if (params.config.input_channels != 4) {
    throw InvalidArgument("export3d needs a lesion model with 4 input channels");
  }
  const auto& h = ct.header;
  auto empty = MaskVolume::zeros(h.width, h.height, h.depth, MaskRole::lesion, h.slice_spacing);
  PreprocessOptions opt;
  opt.side = params.config.image_side;
  std::vector<Sample> samples;
  for (int z = 0; z < h.depth; ++z) samples.push_back(make_sample(ct, lung, empty, {"X", 0, z}, opt));
  const auto masks = predict_masks(params, samples, threshold, 32, jobs);
  auto out = empty;
  for (int z = 0; z < h.depth; ++z) {
    const auto back = resize_nn(masks[z], h.height, h.width);
    std::copy(back.data.begin(), back.data.end(),
              out.voxels.begin() + static_cast<std::ptrdiff_t>(z) * h.width * h.height);
  }
  return out;
}

int cmd_export3d(const Globals& g, const ExportArgs& a, std::ostream& out, std::ostream& err) {
  Context ctx(g, "export3d", out, err);
  ExportOptions opt;
  opt.source = parse_point_source(a.source);
  opt.nonzero_only = a.nonzero_only;
  const auto ct_path = ctx.input(a.ct);
  const auto lung_path = ctx.input(a.lung);
  use_volume(ctx, ct_path);
  use_volume(ctx, lung_path);
  const auto ct = read_hounsfield(ct_path);
  const auto lung = read_mask(lung_path);
  opt.spacing = a.spacing.value_or(ct.header.slice_spacing);
  const std::string name = a.name.empty() ? ctv_paths(ct_path).header.stem().stem().string() + "." + to_string(opt.source)
                                          : a.name;
  check_name(name);
  ctx.arg("--ct", ctv_paths(ct_path).header.string());
  ctx.arg("--lung", ctv_paths(lung_path).header.string());
  ctx.arg("--source", to_string(opt.source));
  ctx.arg("--spacing", num(opt.spacing));
  ctx.arg("--name", name);
  if (opt.nonzero_only) ctx.flag("--nonzero-only");

  std::optional<MaskVolume> values;
  if (opt.source != PointSource::ct) {
    if (!a.mask.empty() == !a.checkpoint.empty()) {
      throw InvalidArgument("source '" + std::string(to_string(opt.source)) +
                            "' needs exactly one of --mask or --checkpoint");
    }
    if (!a.mask.empty()) {
      const auto mp = ctx.input(a.mask);
      use_volume(ctx, mp);
      values = read_mask(mp);
      ctx.arg("--mask", ctv_paths(mp).header.string());
    } else {
      if (opt.source != PointSource::prediction) throw InvalidArgument("--checkpoint only applies to prediction");
      const auto base = use_checkpoint(ctx, a.checkpoint);
      values = predict_volume(load_checkpoint(base), ct, lung, a.threshold, g.jobs);
      ctx.arg("--checkpoint", base.string());
      ctx.arg("--threshold", num(a.threshold));
    }
  }
  const auto rows = export_pointcloud(ct, lung, opt, values ? &*values : nullptr);
  const auto path = ctx.output(name + ".csv");
  write_pointcloud_csv(rows, path);
  ctx.produced(path);
  ctx.finish(name);
  out << "export3d " << name << ": " << rows.size() << " points\n";
  return kOk;
}

int cmd_replay(const Globals& g, const std::string& manifest_path, bool check, std::ostream& out,
               std::ostream& err) {
  const auto m = read_run_manifest(manifest_path);
  const fs::path dir = g.out_dir_given ? g.out_dir : m.out_dir;
  std::vector<std::string> args{"--jobs", std::to_string(m.jobs), "--out-dir", dir.string()};
  if (m.seeds.count("seed")) {
    args.insert(args.begin(), {"--seed", std::to_string(m.seeds.at("seed"))});
  }
  args.insert(args.end(), m.arguments.begin(), m.arguments.end());
  const int rc = run(args, out, err);
  if (rc != kOk || !check) return rc;

  std::size_t mismatches = 0;
  for (const auto& o : m.outputs) {
    const auto p = dir / o.path;
    if (!fs::exists(p) || sha256_file(p) != o.sha256) {
      err << "error[replay]: output '" << o.path << "' differs from the recorded run\n";
      ++mismatches;
    }
  }
  if (mismatches > 0) return kReplayMismatch;
  out << "replay " << m.command << ": " << m.outputs.size() << " output(s) match\n";
  return kOk;
}

int exit_code_for(const std::string& kind) {
  static const std::map<std::string, int> codes{{"invalid-argument", kInvalidArgument},
                                                {"io", kIo},
                                                {"format", kFormat},
                                                {"shape", kShape},
                                                {"data", kData},
                                                {"diverged", kDiverged}};
  const auto it = codes.find(kind);
  return it == codes.end() ? kInternal : it->second;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ctlab: CT lesion segmentation lab", "ctlab"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::string out_dir;
  app.add_option("--seed", g.seed, "base random seed");
  app.add_option("--jobs", g.jobs, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out-dir", out_dir, "output directory (CTLAB_OUT overrides)");
  app.set_version_flag("--version", kVersion);

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "generate a synthetic CT dataset");
  phantom->add_option("--spec", pa.spec_file, "phantom spec JSON");
  phantom->add_option("--tag", pa.tag, "dataset tag");
  phantom->add_option("--side", pa.side);
  phantom->add_option("--depth", pa.depth, "slides per volume");
  phantom->add_option("--volumes", pa.volumes);
  phantom->add_option("--model-depth", pa.model_depth, "side must divide by 2^model-depth");
  phantom->add_option("--min-component", pa.min_component, "smallest lesion component kept");
  phantom->add_option("--lung-hu", pa.lung_hu);
  phantom->add_option("--lung-jitter", pa.lung_jitter);
  phantom->add_option("--lesion-hu", pa.lesion_hu);
  phantom->add_option("--lesion-fraction", pa.lesion_fraction);
  phantom->add_option("--lesion-slide-fraction", pa.lesion_slide_fraction);
  phantom->add_option("--shift", pa.shift, "HU offset of every tissue centre");
  phantom->add_option("--noise-sd", pa.noise_sd);
  phantom->add_option("--background-hu", pa.background_hu);
  phantom->add_option("--spacing", pa.spacing, "slice spacing");
  phantom->add_flag("--inject-faults", pa.inject_faults, "plant annotation defects");

  PreprocessArgs pp;
  auto* preprocess = app.add_subcommand("preprocess", "build samples and train/val/test splits");
  preprocess->add_option("--manifest", pp.manifest, "dataset manifest")->required();
  preprocess->add_option("--name", pp.name, "output stem")->required();
  preprocess->add_option("--split", pp.split_file, "split spec JSON");
  preprocess->add_option("--train-count", pp.train_count);
  preprocess->add_option("--val-count", pp.val_count);
  preprocess->add_option("--lesion-ratio", pp.lesion_ratio);
  preprocess->add_option("--holdout", pp.holdout, "volume index kept out of train/val (repeatable)");
  preprocess->add_option("--side", pp.side, "model input side");
  preprocess->add_option("--mode", pp.mode, "lesion or lung");
  preprocess->add_option("--min-component", pp.min_component);
  preprocess->add_option("--fail-on", pp.fail_on, "abort on lint findings: never, warning or error");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a model from scratch");
  train_cmd->add_option("--samples", ta.samples, "sample store")->required();
  train_cmd->add_option("--split", ta.split, "split file")->required();
  train_cmd->add_option("--name", ta.name, "output stem")->required();
  add_train_flags(train_cmd, ta.flags, true);

  TrainArgs ra;
  auto* retrain_cmd = app.add_subcommand("retrain", "continue training a checkpoint on new data");
  retrain_cmd->add_option("--from", ra.from, "checkpoint to start from")->required();
  retrain_cmd->add_option("--samples", ra.samples, "sample store")->required();
  retrain_cmd->add_option("--split", ra.split, "split file")->required();
  retrain_cmd->add_option("--name", ra.name, "output stem")->required();
  retrain_cmd->add_option("--stage", ra.stage, "stage index used to derive the training seed");
  add_train_flags(retrain_cmd, ra.flags, false);

  EvaluateArgs ea;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "per-slice metrics of a checkpoint");
  evaluate_cmd->add_option("--checkpoint", ea.checkpoint)->required();
  evaluate_cmd->add_option("--samples", ea.samples)->required();
  evaluate_cmd->add_option("--split", ea.split)->required();
  evaluate_cmd->add_option("--name", ea.name, "output stem")->required();
  evaluate_cmd->add_option("--part", ea.part, "train, val or test");
  evaluate_cmd->add_option("--threshold", ea.threshold);

  MatrixArgs ma;
  auto* matrix_cmd = app.add_subcommand("matrix", "run a train/retrain/test plan");
  matrix_cmd->add_option("--plan", ma.plan, "plan JSON")->required();
  matrix_cmd->add_option("--name", ma.name, "output stem (default: lineage name)");
  matrix_cmd->add_option("--init-seed", ma.init_seed);
  matrix_cmd->add_option("--train-seed", ma.train_seed);
  matrix_cmd->add_option("--threshold", ma.threshold);
  add_train_flags(matrix_cmd, ma.flags, true);

  ExportArgs xa;
  auto* export_cmd = app.add_subcommand("export3d", "write a lung point cloud as CSV");
  export_cmd->add_option("--ct", xa.ct)->required();
  export_cmd->add_option("--lung", xa.lung)->required();
  export_cmd->add_option("--source", xa.source, "ct, ground_truth or prediction");
  export_cmd->add_option("--mask", xa.mask, "mask volume for ground_truth or prediction");
  export_cmd->add_option("--checkpoint", xa.checkpoint, "model used to predict the mask");
  export_cmd->add_option("--threshold", xa.threshold);
  export_cmd->add_option("--spacing", xa.spacing, "slice spacing (default: CT header)");
  export_cmd->add_option("--name", xa.name, "output stem");
  export_cmd->add_flag("--nonzero-only", xa.nonzero_only);

  LintArgs la;
  auto* lint_cmd = app.add_subcommand("lint", "check annotations for known defects");
  lint_cmd->add_option("--manifest", la.manifest)->required();
  lint_cmd->add_option("--name", la.name, "output stem")->required();
  lint_cmd->add_option("--min-component", la.min_component);
  lint_cmd->add_option("--fail-on", la.fail_on, "never, warning or error");

  std::string replay_path;
  bool replay_check = false;
  auto* replay_cmd = app.add_subcommand("replay", "re-run a command from its run manifest");
  replay_cmd->add_option("manifest", replay_path, "run manifest")->required();
  replay_cmd->add_flag("--check", replay_check, "compare outputs with the recorded hashes");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  if (!out_dir.empty()) {
    g.out_dir = out_dir;
    g.out_dir_given = true;
  }
  if (const char* env = std::getenv("CTLAB_OUT"); env && *env) {
    g.out_dir = env;
    g.out_dir_given = true;
  }

  try {
    fs::create_directories(g.out_dir);
    if (*phantom) return cmd_phantom(g, pa, out, err);
    if (*preprocess) return cmd_preprocess(g, pp, out, err);
    if (*train_cmd) return cmd_train(g, ta, false, out, err);
    if (*retrain_cmd) return cmd_train(g, ra, true, out, err);
    if (*evaluate_cmd) return cmd_evaluate(g, ea, out, err);
    if (*matrix_cmd) return cmd_matrix(g, ma, out, err);
    if (*export_cmd) return cmd_export3d(g, xa, out, err);
    if (*lint_cmd) return cmd_lint(g, la, out, err);
    if (*replay_cmd) return cmd_replay(g, replay_path, replay_check, out, err);
  } catch (const Error& e) {
    err << "error[" << e.kind() << "]: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error[io]: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}

}  // namespace ctlab::cli

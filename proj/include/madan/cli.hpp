#pragma once

// Command implementations behind tools/madan.cpp. Each returns normally on
// success and throws madan::Error otherwise; the binary maps the kind to an
// exit code and prints one JSON line on stderr.

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "madan/checkpoint.hpp"
#include "madan/config.hpp"
#include "madan/data.hpp"
#include "madan/error.hpp"
#include "madan/eval.hpp"
#include "madan/io.hpp"
#include "madan/plot.hpp"
#include "madan/trainer.hpp"

namespace madan {

using json = nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Hashing and run manifest

/// Git blob id of `content`.
inline std::string git_blob_hash(const std::string& content) {
  return sha1_hex("blob " + std::to_string(content.size()) + '\0' + content);
}

/// Git-style tree hash over every regular file below `dir` (sorted relative paths).
inline std::string tree_hash(const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) entries.emplace_back(fs::relative(e.path(), dir).generic_string(), git_blob_hash(read_text(e.path())));
  std::sort(entries.begin(), entries.end());
  std::string listing;
  for (const auto& [p, h] : entries) listing += h + " " + p + "\n";
  return git_blob_hash(listing);
}

struct RunManifest {
  json config;
  std::uint64_t seed = 0;
  std::string data_hash;
  std::string input_hash;  // over (config, data)
  std::string tool_version = kToolVersion;
  std::string created_at;

  json to_json() const {
    return {{"config", config},         {"seeds", {{"seed", seed}}}, {"data_hash", data_hash},
            {"input_hash", input_hash}, {"tool_version", tool_version}, {"created_at", created_at}};
  }
};

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline RunManifest make_run_manifest(const TrainConfig& cfg, const fs::path& data_dir) {
  RunManifest m;
  m.config = to_json(cfg);
  m.seed = cfg.seed;
  m.data_hash = tree_hash(data_dir);
  m.input_hash = git_blob_hash(m.config.dump() + "\n" + m.data_hash);
  m.created_at = utc_now();
  return m;
}

// ---------------------------------------------------------------------------
// Output directory lock

/// `<out>/.lock` created with O_EXCL; a lock whose owner process is gone is reclaimed.
class RunLock {
 public:
  explicit RunLock(const fs::path& out) : path_(out / ".lock") {
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        const auto pid = std::to_string(::getpid()) + "\n";
        const auto n = ::write(fd, pid.data(), pid.size());
        (void)n;
        ::close(fd);
        return;
      }
      if (attempt == 0 && stale()) {
        fs::remove(path_);
        continue;
      }
      break;
    }
    fail(ErrorKind::lock, "output directory " + out.string() + " is locked by another run (" + path_.string() + ")");
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  bool stale() const {
    std::ifstream in(path_);
    long pid = 0;
    if (!(in >> pid) || pid <= 0) return false;
    return ::kill(static_cast<pid_t>(pid), 0) != 0 && errno == ESRCH;
  }
  fs::path path_;
};

// ---------------------------------------------------------------------------
// Helpers

inline fs::path resolve_out(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("MDAGGR_OUT"); env != nullptr && *env != '\0') return env;
  fail(ErrorKind::config, "no output directory: pass --out or set MDAGGR_OUT");
}

inline SynthSpec synth_spec_from_json(const json& j, TaskKind& kind, int& test_images) {
  SynthSpec s;
  kind = TaskKind::classification;
  test_images = -1;
  for (const auto& [k, v] : j.items()) {
    try {
      if (k == "task_kind") kind = task_kind_from_string(v.get<std::string>());
      else if (k == "num_sources") s.num_sources = v.get<int>();
      else if (k == "num_classes") s.num_classes = v.get<int>();
      else if (k == "images_per_domain") s.images_per_domain = v.get<int>();
      else if (k == "image_size") s.image_size = v.get<int>();
      else if (k == "seed") s.seed = v.get<std::uint64_t>();
      else if (k == "test_images") test_images = v.get<int>();
      else fail(ErrorKind::config, "unknown synth spec key '" + k + "'");
    } catch (const json::exception&) {
      fail(ErrorKind::config, "bad value for synth spec key '" + k + "'");
    }
  }
  s.validate();
  if (test_images < 0) test_images = s.images_per_domain;
  require(test_images >= 1, ErrorKind::config, "test_images must be >= 1");
  return s;
}

/// Synthesizes sources, target and a labeled target_test split into `out`.
inline DatasetManifest synthesize_dataset(const json& spec_json, const fs::path& out) {
  TaskKind kind;
  int test_images = 0;
  const auto spec = synth_spec_from_json(spec_json, kind, test_images);
  auto domains = kind == TaskKind::classification ? synthesize_classification_domains(spec)
                                                : synthesize_segmentation_domains(spec);
  auto test_spec = spec;
  test_spec.images_per_domain = test_images;
  const auto test = synthesize_target_test(test_spec, kind);
  const auto target = domains.back();
  domains.pop_back();
  return save_dataset(out, domains, target, &test);
}

inline bool is_synth_spec(const fs::path& p) {
  if (!fs::is_regular_file(p) || p.filename() == "manifest.json") return false;
  const auto j = read_json(p, ErrorKind::config);
  return j.is_object() && !j.contains("domains");
}

struct LoadedData {
  DatasetManifest manifest;
  TrainingData data;
};

inline LoadedData load_training_data(const fs::path& where) {
  LoadedData out{load_manifest(where), {}};
  std::vector<DomainBundle> sources;
  for (const auto& n : out.manifest.names_with_role(DomainRole::source)) sources.push_back(load_bundle(out.manifest, n));
  const auto target = load_bundle(out.manifest, out.manifest.names_with_role(DomainRole::target).front());
  std::optional<DomainBundle> test;
  if (const auto t = out.manifest.names_with_role(DomainRole::test); !t.empty()) test = load_bundle(out.manifest, t.front());
  out.data = TrainingData::from_bundles(sources, target, test ? &*test : nullptr);
  return out;
}

inline std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

inline void write_jsonl(const fs::path& p, const std::vector<json>& recs) {
  std::string s;
  for (const auto& r : recs) s += r.dump() + "\n";
  write_text_atomic(p, s);
}

// ---------------------------------------------------------------------------
// Commands

inline void cmd_synth(const fs::path& spec_file, const std::string& out_flag, std::ostream& log = std::cout) {
  const auto out = resolve_out(out_flag);
  fs::create_directories(out);
  RunLock lock(out);
  const auto m = synthesize_dataset(read_json(spec_file, ErrorKind::config), out);
  log << "wrote " << m.domains.size() << " domains to " << out.string() << "\n";
}

struct TrainOptions {
  std::string config_file;
  std::string data;
  std::string mode;  // empty keeps the config's mode
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

inline TrainConfig resolve_config(const TrainOptions& o) {
  auto cfg = TrainConfig{};
  if (!o.config_file.empty()) cfg = apply_config_json(cfg, read_json(o.config_file, ErrorKind::config));
  if (!o.mode.empty()) cfg.mode = mode_from_string(o.mode);
  if (o.seed) cfg.seed = *o.seed;
  for (const auto& ov : o.overrides) cfg = apply_override(cfg, ov);
  return cfg;
}

/// Trains (or resumes) a run under `out`; returns the final report if a labeled target split exists.
inline std::optional<MetricReport> cmd_train(const TrainOptions& o, std::ostream& log = std::cout) {
  const auto out = resolve_out(o.out);
  fs::create_directories(out);
  RunLock lock(out);
  auto cfg = resolve_config(o);

  require(!o.data.empty(), ErrorKind::config, "--data is required");
  fs::path data_dir = o.data;
  if (is_synth_spec(o.data)) {
    data_dir = out / "data";
    if (!fs::exists(data_dir / "manifest.json")) {
      log << "synthesizing dataset into " << data_dir.string() << "\n";
      synthesize_dataset(read_json(o.data, ErrorKind::config), data_dir);
    }
  }
  auto loaded = load_training_data(data_dir);
  cfg.task_kind = loaded.data.kind;
  cfg.model.translator.channels = loaded.data.channels;
  cfg.validate();

  const auto manifest = make_run_manifest(cfg, fs::is_directory(data_dir) ? data_dir : data_dir.parent_path());
  const auto ckdir = out / "checkpoints";
  fs::create_directories(ckdir);
  const auto latest = ckdir / "latest.ckpt";
  const auto history_path = out / "history.jsonl";

  TrainState state;
  std::vector<json> history;
  bool resumed = false;
  if (fs::exists(latest) && fs::exists(out / "run_manifest.json")) {
    const auto prev = read_json(out / "run_manifest.json", ErrorKind::checkpoint);
    require(prev.value("input_hash", "") == manifest.input_hash, ErrorKind::checkpoint,
            "existing run in " + out.string() + " has a different config or data; use a fresh --out");
    state = load_checkpoint(latest, &cfg);
    const auto meta = read_archive(latest).metadata;
    history = read_jsonl(history_path);
    const auto keep = meta.value("history_len", std::size_t{0});
    require(history.size() >= keep, ErrorKind::checkpoint, "history file is shorter than the checkpoint expects");
    history.resize(keep);
    write_jsonl(history_path, history);
    state.history = history;
    resumed = true;
    log << "resuming from round " << state.round << " after stage " << state.stage_done << "\n";
  } else {
    write_text_atomic(out / "run_manifest.json", manifest.to_json().dump(2) + "\n");
    write_text_atomic(history_path, "");
    std::error_code ec;
    fs::remove(out / "timing.jsonl", ec);
    state = init_state(cfg, loaded.data);
  }
  (void)resumed;

  std::ofstream hist(history_path, std::ios::app);
  std::ofstream timing(out / "timing.jsonl", std::ios::app);
  TrainObserver obs;
  obs.on_record = [&](const json& r) {
    hist << r.dump() << "\n";
    hist.flush();
  };
  obs.on_timing = [&](const json& r) {
    timing << r.dump() << "\n";
    timing.flush();
  };
  obs.on_progress = [&](const std::string& msg) { log << msg << "\n" << std::flush; };
  obs.on_stage_end = [&](TrainState& s, const std::string& tag) {
    auto a = state_archive(s);
    a.metadata["history_len"] = s.history.size();
    write_archive(ckdir / (tag + ".ckpt"), a);
    write_archive(latest, a);
    log << "checkpoint " << tag << "\n" << std::flush;
  };
  run_schedule(state, loaded.data, &obs);

  {
    auto a = state_archive(state);
    a.metadata["history_len"] = state.history.size();
    write_archive(out / "final.ckpt", a);
  }
  fs::create_directories(out / "plots");
  plot_loss_curves(state.history, out / "plots" / "loss_curves.png");
  auto report = last_eval(state);
  if (report) {
    report->metadata["mode"] = to_string(cfg.mode);
    report->metadata["seed"] = cfg.seed;
    report->metadata["input_hash"] = manifest.input_hash;
    write_text_atomic(out / "report.json", to_json(*report).dump(2) + "\n");
    plot_per_class(*report, out / "plots" / "per_class.png");
    log << (report->kind == TaskKind::classification ? "target accuracy " : "target mIoU ") << report->primary << "\n";
  }
  return report;
}

inline void cmd_translate(const fs::path& checkpoint, const std::string& source, const fs::path& in_dir,
                          const fs::path& out_dir, std::ostream& log = std::cout) {
  auto state = load_checkpoint(checkpoint);
  require(!state.translators.empty(), ErrorKind::checkpoint, "checkpoint holds no translators");
  const auto it = std::find(state.source_names.begin(), state.source_names.end(), source);
  require(it != state.source_names.end(), ErrorKind::config, "checkpoint has no source named '" + source + "'");
  const auto idx = static_cast<int>(it - state.source_names.begin());
  fs::create_directories(out_dir);
  const auto files = sorted_pngs(in_dir);
  require(!files.empty(), ErrorKind::load, "no PNG images in " + in_dir.string());
  for (const auto& f : files) {
    const auto im = raster_to_image(read_png(f));
    require(im.height == state.image_size && im.width == state.image_size && im.channels == state.channels,
            ErrorKind::shape, f.string() + ": image shape does not match the checkpoint");
    DomainBundle b;
    b.images.push_back(im);
    const auto adapted = adapt_images(state, idx, images_to_tensor(b));
    write_png(out_dir / f.filename(), image_to_raster(tensor_to_image(adapted[0])));
  }
  log << "translated " << files.size() << " images with " << source << "\n";
}

/// Evaluates the checkpoint's task network on one labeled domain of a dataset.
inline MetricReport cmd_eval(const fs::path& checkpoint, const fs::path& data, const std::string& domain,
                             const fs::path& report_file, std::ostream& log = std::cout) {
  auto state = load_checkpoint(checkpoint);
  const auto m = load_manifest(data);
  const auto bundle = load_bundle(m, domain);
  auto report = evaluate(state.task, bundle);
  if (!report_file.empty()) {
    if (report_file.has_parent_path()) fs::create_directories(report_file.parent_path());
    write_text_atomic(report_file, to_json(report).dump(2) + "\n");
  }
  log << (report.kind == TaskKind::classification ? "accuracy " : "mIoU ") << report.primary << "\n";
  return report;
}

struct ReportRow {
  std::string mode;
  std::vector<double> values;
  double mean = 0.0;
  double stdev = 0.0;  // sample standard deviation; 0 for a single run
};

inline std::pair<double, double> mean_stdev(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

/// Groups run directories by mode and reports the primary metric as mean ± stdev.
inline json cmd_report(const std::vector<fs::path>& runs, const fs::path& out_file, std::ostream& log = std::cout) {
  require(!runs.empty(), ErrorKind::config, "--runs needs at least one run directory");
  std::map<std::string, ReportRow> rows;
  std::vector<std::string> order;
  std::string metric;
  for (const auto& r : runs) {
    const auto rep = metric_report_from_json(read_json(r / "report.json"));
    const auto man = read_json(r / "run_manifest.json");
    const auto mode = man.at("config").at("trainer").at("mode").get<std::string>();
    const auto name = rep.kind == TaskKind::classification ? "accuracy" : "miou";
    require(metric.empty() || metric == name, ErrorKind::kind_mismatch, "runs mix classification and segmentation");
    metric = name;
    if (!rows.count(mode)) order.push_back(mode);
    rows[mode].mode = mode;
    rows[mode].values.push_back(rep.primary);
  }
  json table = json::array();
  for (const auto& mode : order) {
    auto& row = rows[mode];
    std::tie(row.mean, row.stdev) = mean_stdev(row.values);
    table.push_back({{"mode", mode}, {"runs", row.values.size()}, {"mean", row.mean}, {"stdev", row.stdev},
                     {"values", row.values}});
    log << mode << "  " << metric << " " << row.mean * 100.0 << " ± " << row.stdev * 100.0 << "  (n="
        << row.values.size() << ")\n";
  }
  const json doc{{"metric", metric}, {"rows", table}};
  if (out_file.has_parent_path()) fs::create_directories(out_file.parent_path());
  write_text_atomic(out_file, doc.dump(2) + "\n");
  return doc;
}

}  // namespace madan

// Command-line pipeline: synth -> extract -> train -> predict -> eval.
// Stage boundaries are files so external predictions can enter at eval.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lcp/bev.hpp"
#include "lcp/common.hpp"
#include "lcp/config.hpp"
#include "lcp/dataio.hpp"
#include "lcp/eval.hpp"
#include "lcp/model.hpp"
#include "lcp/params.hpp"
#include "lcp/rng.hpp"
#include "lcp/scenarios.hpp"
#include "lcp/synthgen.hpp"
#include "lcp/train.hpp"

namespace fs = std::filesystem;

namespace {

std::string iso_now() {
  const std::time_t t =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json manifest_base(const char* command, const lcp::RunConfig& cfg,
                             const std::string& started) {
  nlohmann::json j;
  j["command"] = command;
  j["seed"] = cfg.seed;
  j["config"] = lcp::config_json(cfg);
  j["started"] = started;
  return j;
}

void write_run_manifest(nlohmann::json j, const fs::path& path) {
  j["finished"] = iso_now();
  std::ofstream out(path);
  lcp::require(out.good(), lcp::ErrorKind::Io,
               "cannot write " + path.string());
  out << j.dump(2) << "\n";
  lcp::require(out.good(), lcp::ErrorKind::Io, "write failed: " + path.string());
}

// Recording ids present in a data directory, by their meta files.
std::vector<int> discover_recordings(const fs::path& dir) {
  lcp::require(fs::is_directory(dir), lcp::ErrorKind::Io,
               "data directory not found: " + dir.string());
  std::vector<int> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    const std::string suffix = "_recordingMeta.csv";
    if (name.size() <= suffix.size() ||
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
      continue;
    const std::string stem = name.substr(0, name.size() - suffix.size());
    if (stem.empty() ||
        stem.find_first_not_of("0123456789") != std::string::npos)
      continue;
    ids.push_back(std::stoi(stem));
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  lcp::require(!ids.empty(), lcp::ErrorKind::Data,
               "no recordings found in " + dir.string());
  return ids;
}

struct LoadedRecording {
  lcp::Recording rec;
  lcp::FrameIndex index;
};

using RecordingCache = std::map<int, std::unique_ptr<LoadedRecording>>;

// Load every recording referenced by the manifest rows, once each.
RecordingCache load_referenced(const fs::path& data_dir,
                               const std::vector<lcp::ManifestRow>& rows,
                               const lcp::ProblemConfig& pc) {
  RecordingCache cache;
  for (const lcp::ManifestRow& row : rows) {
    if (cache.count(row.recording_id)) continue;
    const lcp::RecordingPaths p =
        lcp::recording_paths(data_dir, row.recording_id);
    auto loaded = std::make_unique<LoadedRecording>();
    loaded->rec = lcp::load_recording(p.tracks, p.tracks_meta,
                                      p.recording_meta);
    pc.validate(loaded->rec.meta.frame_rate);
    loaded->index = lcp::index_frames(loaded->rec);
    cache.emplace(row.recording_id, std::move(loaded));
  }
  return cache;
}

lcp::Dataset make_dataset(const std::vector<lcp::ManifestRow>& rows,
                          const RecordingCache& cache,
                          const std::string& split) {
  lcp::Dataset out;
  for (const lcp::ManifestRow& row : rows) {
    if (split != "all" && row.split != split) continue;
    const auto it = cache.find(row.recording_id);
    lcp::require(it != cache.end(), lcp::ErrorKind::State,
                 "recording " + std::to_string(row.recording_id) +
                     " not loaded");
    lcp::TrainSample s;
    s.rec = &it->second->rec;
    s.index = &it->second->index;
    s.scenario_id = row.scenario_id;
    s.sample.track_id = row.track_id;
    s.sample.anchor_frame = row.anchor_frame;
    s.sample.label = row.label;
    s.sample.ttlc = row.ttlc;
    out.push_back(s);
  }
  return out;
}

void run_synth(const lcp::RunConfig& cfg, const fs::path& out_dir) {
  const std::string started = iso_now();
  fs::create_directories(out_dir);
  const lcp::Rng root(cfg.seed);
  nlohmann::json recs = nlohmann::json::array();
  for (int i = 1; i <= cfg.synth_recordings; ++i) {
    lcp::SceneRecipe recipe = cfg.synth;
    recipe.recording_id = i;
    lcp::Rng stream =
        root.split("synth").split(static_cast<std::uint64_t>(i));
    recipe.seed = stream.next_u64();
    const lcp::GroundTruthLog log = lcp::generate_recording(recipe, out_dir);
    std::cout << "recording " << i << ": " << log.entries.size()
              << " scripted lane changes\n";
    recs.push_back(i);
  }
  nlohmann::json j = manifest_base("synth", cfg, started);
  j["outputs"] = {{"data_dir", out_dir.string()}, {"recordings", recs}};
  write_run_manifest(std::move(j), out_dir / "run.json");
}

void run_extract(const lcp::RunConfig& cfg, const fs::path& data_dir,
                 const fs::path& out_manifest) {
  const std::string started = iso_now();
  const std::vector<int> ids = discover_recordings(data_dir);
  std::vector<lcp::Scenario> all;
  for (int id : ids) {
    const lcp::RecordingPaths p = lcp::recording_paths(data_dir, id);
    const lcp::Recording rec =
        lcp::load_recording(p.tracks, p.tracks_meta, p.recording_meta);
    std::vector<lcp::Scenario> sc = lcp::extract_scenarios(rec, cfg.problem);
    std::move(sc.begin(), sc.end(), std::back_inserter(all));
  }
  bool any_lc = false;
  for (const lcp::Scenario& s : all) any_lc |= s.type != lcp::Label::LK;
  // A lane-keep-only corpus has nothing to balance toward; pass it through.
  if (any_lc) all = lcp::balance_dataset(all, cfg.seed);

  const lcp::Split split = lcp::split_by_file(ids);
  std::map<int, std::string> split_of;
  for (int id : split.train) split_of[id] = "train";
  for (int id : split.val) split_of[id] = "val";
  for (int id : split.test) split_of[id] = "test";
  if (out_manifest.has_parent_path())
    fs::create_directories(out_manifest.parent_path());
  lcp::write_manifest(out_manifest, all, &split_of);

  std::size_t n_lc = 0, n_samples = 0;
  for (const lcp::Scenario& s : all) {
    n_lc += s.type != lcp::Label::LK;
    n_samples += s.samples.size();
  }
  std::cout << "extracted " << all.size() << " scenarios (" << n_lc
            << " lane-change, " << all.size() - n_lc << " lane-keep), "
            << n_samples << " samples\n";
  nlohmann::json j = manifest_base("extract", cfg, started);
  j["inputs"] = {{"data_dir", data_dir.string()}};
  j["outputs"] = {{"manifest", out_manifest.string()}};
  j["scenarios"] = all.size();
  j["samples"] = n_samples;
  write_run_manifest(std::move(j),
                     fs::path(out_manifest.string() + ".run.json"));
}

void run_train(const lcp::RunConfig& cfg, const fs::path& manifest_path,
               const fs::path& data_dir, const fs::path& out_params,
               fs::path history_path) {
  const std::string started = iso_now();
  const std::vector<lcp::ManifestRow> rows = lcp::read_manifest(manifest_path);
  lcp::require(!rows.empty(), lcp::ErrorKind::Data,
               manifest_path.string() + ": empty manifest");
  lcp::require(!rows.front().split.empty(), lcp::ErrorKind::Config,
               manifest_path.string() +
                   ": manifest has no split column; run extract first");
  const RecordingCache cache = load_referenced(data_dir, rows, cfg.problem);
  const lcp::Dataset train_set = make_dataset(rows, cache, "train");
  const lcp::Dataset val_set = make_dataset(rows, cache, "val");
  const lcp::ModelConfig mc = lcp::make_model_config(cfg);

  std::cout << "training on " << train_set.size() << " samples, validating on "
            << val_set.size() << "\n";
  const lcp::FitResult result = lcp::fit(
      train_set, val_set, cfg.train, cfg.curriculum, cfg.problem, cfg.bev, mc,
      [](const lcp::EpochStats& e) {
        std::cout << "epoch " << e.epoch << ": ce=" << e.ce
                  << " mse=" << e.mse << " total=" << e.total
                  << " val=" << e.val_loss << " n=" << e.n_samples << " ("
                  << e.seconds << "s)" << std::endl;
      });
  std::cout << "best epoch " << result.best_epoch << " (val "
            << result.best_val << ")\n";

  if (out_params.has_parent_path())
    fs::create_directories(out_params.parent_path());
  lcp::save_params(result.params, out_params);
  if (history_path.empty())
    history_path = fs::path(out_params.string() + ".history.csv");
  lcp::write_history(history_path, result.history);

  nlohmann::json j = manifest_base("train", cfg, started);
  j["inputs"] = {{"manifest", manifest_path.string()},
                 {"data_dir", data_dir.string()}};
  j["outputs"] = {{"params", out_params.string()},
                  {"history", history_path.string()}};
  j["best_epoch"] = result.best_epoch;
  j["best_val_loss"] = result.best_val;
  j["epochs_run"] = result.history.size();
  write_run_manifest(std::move(j), fs::path(out_params.string() + ".run.json"));
}

void run_predict(const lcp::RunConfig& cfg, const fs::path& manifest_path,
                 const fs::path& data_dir, const fs::path& params_path,
                 const fs::path& out_records, const std::string& split) {
  const std::string started = iso_now();
  lcp::require(split == "all" || split == "train" || split == "val" ||
                   split == "test",
               lcp::ErrorKind::Usage,
               "--split must be one of train/val/test/all");
  std::vector<lcp::ManifestRow> rows = lcp::read_manifest(manifest_path);
  std::vector<lcp::ManifestRow> selected;
  for (const lcp::ManifestRow& r : rows)
    if (split == "all" || r.split == split) selected.push_back(r);
  lcp::require(!selected.empty(), lcp::ErrorKind::Data,
               manifest_path.string() + ": no samples in split '" + split +
                   "'");

  const lcp::ModelConfig mc = lcp::make_model_config(cfg);
  const lcp::ParamStore<float> params = lcp::load_params(params_path);
  lcp::check_params(params, mc);
  const lcp::QuadrantIndex qi = lcp::make_quadrant_index(mc);
  const RecordingCache cache = load_referenced(data_dir, selected, cfg.problem);

  std::vector<lcp::PredictionRecord> records;
  records.reserve(selected.size());
  std::map<long long, int> sample_counter;
  for (const lcp::ManifestRow& row : selected) {
    const LoadedRecording& lr = *cache.at(row.recording_id);
    lcp::Sample s;
    s.track_id = row.track_id;
    s.anchor_frame = row.anchor_frame;
    s.label = row.label;
    s.ttlc = row.ttlc;
    const lcp::BevStack stack =
        lcp::render_stack(lr.rec, lr.index, s, cfg.problem, cfg.bev);
    const lcp::Prediction pred = lcp::predict(params, qi, mc, stack);
    lcp::PredictionRecord rec;
    rec.scenario_id = row.scenario_id;
    rec.sample_idx = sample_counter[row.scenario_id]++;
    rec.label = row.label;
    rec.ttlc = row.ttlc;
    rec.probs = pred.probs;
    rec.ttlc_pred = pred.ttlc;
    records.push_back(rec);
  }
  if (out_records.has_parent_path())
    fs::create_directories(out_records.parent_path());
  lcp::write_records(out_records, records);
  std::cout << "wrote " << records.size() << " prediction records\n";

  nlohmann::json j = manifest_base("predict", cfg, started);
  j["inputs"] = {{"manifest", manifest_path.string()},
                 {"data_dir", data_dir.string()},
                 {"params", params_path.string()},
                 {"split", split}};
  j["outputs"] = {{"records", out_records.string()}};
  write_run_manifest(std::move(j),
                     fs::path(out_records.string() + ".run.json"));
}

void run_eval(const lcp::RunConfig& cfg, const fs::path& records_path,
              const fs::path& out_dir) {
  const std::string started = iso_now();
  const std::vector<lcp::PredictionRecord> records =
      lcp::read_records(records_path);
  const lcp::MetricsReport rep = lcp::compute_report(records);
  lcp::write_report(rep, out_dir);
  std::cout << "accuracy " << rep.point.accuracy << ", precision "
            << rep.point.precision << ", recall " << rep.point.recall
            << ", f1 " << rep.point.f1 << "\n"
            << "auc " << rep.roc.auc << ", tau_first " << rep.times.tau_first
            << "s, tau_constant " << rep.times.tau_constant << "s, rmse "
            << rep.rmse.rmse << "s\n";
  nlohmann::json j = manifest_base("eval", cfg, started);
  j["inputs"] = {{"records", records_path.string()}};
  j["outputs"] = {{"report_dir", out_dir.string()}};
  write_run_manifest(std::move(j), out_dir / "run.json");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lane-change prediction toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed_val = 0;
  std::vector<std::string> overrides;
  bool serial = false;
  app.add_option("--config", config_path,
                 "run configuration file (key = value lines)");
  CLI::Option* seed_opt =
      app.add_option("--seed", seed_val, "root seed (overrides config file)");
  app.add_option("--set", overrides,
                 "override one config key, e.g. --set train.batch_size=32");
  app.add_flag("--serial", serial,
               "force deterministic serial execution (always on: this build "
               "is single-threaded)");

  auto* synth = app.add_subcommand("synth", "generate synthetic recordings");
  std::string synth_out;
  int synth_n = 0;
  synth->add_option("--out", synth_out, "output directory")->required();
  CLI::Option* synth_n_opt = synth->add_option(
      "--recordings", synth_n, "number of recordings (config: synth.recordings)");

  auto* extract = app.add_subcommand(
      "extract", "mine scenarios from recordings into a manifest");
  std::string ex_data, ex_out;
  extract->add_option("--data", ex_data, "recording directory")->required();
  extract->add_option("--out", ex_out, "output manifest CSV")->required();

  auto* train = app.add_subcommand("train", "train the predictor");
  std::string tr_manifest, tr_data, tr_out, tr_history;
  bool no_curriculum = false;
  train->add_option("--manifest", tr_manifest, "scenario manifest CSV")
      ->required();
  train->add_option("--data", tr_data, "recording directory")->required();
  train->add_option("--out", tr_out, "output parameter archive")->required();
  train->add_option("--history", tr_history,
                    "training history CSV (default: <out>.history.csv)");
  train->add_flag("--no-curriculum", no_curriculum,
                  "train on the full set with gamma=1 from epoch 0");

  auto* predict = app.add_subcommand("predict", "score manifest samples");
  std::string pr_manifest, pr_data, pr_params, pr_out, pr_split = "test";
  predict->add_option("--manifest", pr_manifest, "scenario manifest CSV")
      ->required();
  predict->add_option("--data", pr_data, "recording directory")->required();
  predict->add_option("--params", pr_params, "parameter archive")->required();
  predict->add_option("--out", pr_out, "output prediction-record CSV")
      ->required();
  predict->add_option("--split", pr_split,
                      "manifest split to score: train/val/test/all");

  auto* eval = app.add_subcommand("eval", "compute metrics from records");
  std::string ev_records, ev_out;
  eval->add_option("--records", ev_records, "prediction-record CSV")
      ->required();
  eval->add_option("--out", ev_out, "report output directory")->required();

  // Let global flags (--config/--seed/--set/--serial) appear after the
  // subcommand name as well.
  for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; }))
    sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    lcp::RunConfig cfg;
    if (!config_path.empty()) lcp::load_run_config(config_path, cfg);
    for (const std::string& kv : overrides) {
      const std::size_t eq = kv.find('=');
      lcp::require(eq != std::string::npos, lcp::ErrorKind::Usage,
                   "--set expects key=value, got '" + kv + "'");
      lcp::apply_config_key(cfg, std::string_view(kv).substr(0, eq),
                            std::string_view(kv).substr(eq + 1));
    }
    if (seed_opt->count() > 0) cfg.seed = seed_val;
    cfg.train.seed = cfg.seed;
    (void)serial;

    if (synth->parsed()) {
      if (synth_n_opt->count() > 0) cfg.synth_recordings = synth_n;
      lcp::require(cfg.synth_recordings >= 1, lcp::ErrorKind::Usage,
                   "--recordings must be >= 1");
      run_synth(cfg, synth_out);
    } else if (extract->parsed()) {
      run_extract(cfg, ex_data, ex_out);
    } else if (train->parsed()) {
      if (no_curriculum) cfg.curriculum.enabled = false;
      run_train(cfg, tr_manifest, tr_data, tr_out, tr_history);
    } else if (predict->parsed()) {
      run_predict(cfg, pr_manifest, pr_data, pr_params, pr_out, pr_split);
    } else if (eval->parsed()) {
      run_eval(cfg, ev_records, ev_out);
    }
  } catch (const lcp::Error& e) {
    std::cerr << "error: " << lcp::to_string(e.kind()) << ": " << e.what()
              << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

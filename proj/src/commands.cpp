#include "earshot/commands.hpp"

#include <fstream>
#include <set>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "kv_text.hpp"
#include "parallel.hpp"

namespace earshot {

using nlohmann::json;

namespace {

json read_json(const fs::path& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + what + " " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  detail::write_text(path, j.dump(2) + "\n");
}

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw FormatError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw FormatError(where + ": field '" + std::string(key) + "' has the wrong type");
  }
}

void check_version(const json& j, const char* key, const fs::path& path) {
  if (field<int>(j, key, path.string()) != 1) {
    throw FormatError(path.string() + ": unsupported " + key);
  }
}

StreamPaths stream_from_json(const json& j, const fs::path& base, const std::string& where) {
  StreamPaths p;
  for (const auto& s : field<std::vector<std::string>>(j, "sfm", where)) p.sfm.push_back((base / s).lexically_normal());
  p.mel = (base / field<std::string>(j, "mel", where)).lexically_normal();
  return p;
}

json stream_to_json(const StreamPaths& p, const fs::path& base) {
  json sfm = json::array();
  for (const auto& s : p.sfm) sfm.push_back(fs::relative(s, base).generic_string());
  return {{"sfm", sfm}, {"mel", fs::relative(p.mel, base).generic_string()}};
}

void check_exists(const StreamPaths& p, const std::string& id) {
  for (const auto& s : p.sfm) {
    if (!fs::exists(s)) throw InputError("utterance '" + id + "': missing file " + s.string());
  }
  if (!fs::exists(p.mel)) throw InputError("utterance '" + id + "': missing file " + p.mel.string());
}

std::vector<fs::path> expand_checkpoints(const std::vector<fs::path>& paths) {
  std::vector<fs::path> out;
  for (const auto& p : paths) {
    if (fs::exists(p / "params.ears")) {
      out.push_back(p);
      continue;
    }
    std::vector<fs::path> found;
    if (fs::is_directory(p)) {
      for (const auto& e : fs::directory_iterator(p)) {
        if (fs::exists(e.path() / "params.ears")) found.push_back(e.path());
      }
    }
    if (found.empty()) throw InputError("no checkpoint under " + p.string());
    std::sort(found.begin(), found.end());
    out.insert(out.end(), found.begin(), found.end());
  }
  return out;
}

std::vector<UtteranceRecord> records_of(const std::vector<ManifestRecord>& m) {
  std::vector<UtteranceRecord> out;
  for (const auto& r : m) out.push_back(r.record);
  return out;
}

}  // namespace

std::vector<ManifestRecord> read_manifest(const fs::path& path, bool check_files) {
  const json j = read_json(path, "manifest");
  check_version(j, "manifest_version", path);
  const fs::path base = path.parent_path();
  std::vector<ManifestRecord> out;
  std::set<std::string> ids;
  std::size_t i = 0;
  for (const auto& r : field<json>(j, "records", path.string())) {
    const std::string where = path.string() + " record " + std::to_string(i++);
    ManifestRecord m;
    m.record.utterance_id = field<std::string>(r, "utterance_id", where);
    m.record.scene_id = r.value("scene_id", "");
    m.record.system_id = field<std::string>(r, "system_id", where);
    m.record.listener_id = field<std::string>(r, "listener_id", where);
    if (m.record.utterance_id.empty() || m.record.system_id.empty() || m.record.listener_id.empty()) {
      throw InputError(where + ": ids must be nonempty");
    }
    if (!ids.insert(m.record.utterance_id).second) {
      throw InputError(where + ": duplicate utterance '" + m.record.utterance_id + "'");
    }
    if (r.contains("label") && !r.at("label").is_null()) {
      const double label = field<double>(r, "label", where);
      if (!(label >= 0.0 && label <= 100.0)) throw InputError(where + ": label outside [0, 100]");
      m.record.label = label;
    }
    m.left = stream_from_json(field<json>(r, "left", where), base, where);
    m.right = stream_from_json(field<json>(r, "right", where), base, where);
    if (r.contains("reference") && !r.at("reference").is_null()) {
      m.reference = stream_from_json(r.at("reference"), base, where);
    }
    if (check_files) {
      check_exists(m.left, m.record.utterance_id);
      check_exists(m.right, m.record.utterance_id);
      if (m.reference) check_exists(*m.reference, m.record.utterance_id);
    }
    out.push_back(std::move(m));
  }
  return out;
}

void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
  const fs::path base = path.parent_path();
  json rows = json::array();
  for (const auto& m : records) {
    json r = {{"utterance_id", m.record.utterance_id},
              {"scene_id", m.record.scene_id},
              {"system_id", m.record.system_id},
              {"listener_id", m.record.listener_id},
              {"left", stream_to_json(m.left, base)},
              {"right", stream_to_json(m.right, base)}};
    if (m.record.label) r["label"] = *m.record.label;
    if (m.reference) r["reference"] = stream_to_json(*m.reference, base);
    rows.push_back(std::move(r));
  }
  write_json(path, {{"manifest_version", 1}, {"records", rows}});
}

std::vector<ListenerProfile> read_listeners(const fs::path& path) {
  const json j = read_json(path, "listener file");
  check_version(j, "listeners_version", path);
  std::vector<ListenerProfile> out;
  std::size_t i = 0;
  for (const auto& r : field<json>(j, "listeners", path.string())) {
    const std::string where = path.string() + " listener " + std::to_string(i++);
    ListenerProfile p;
    p.listener_id = field<std::string>(r, "listener_id", where);
    try {
      p.severity = severity_from_string(field<std::string>(r, "severity", where));
    } catch (const ConfigError& e) {
      throw FormatError(where + ": " + e.what());
    }
    for (auto [key, dst] : {std::pair{"audiogram_left", &p.audiogram_left},
                            std::pair{"audiogram_right", &p.audiogram_right}}) {
      if (!r.contains(key) || r.at(key).is_null()) continue;
      const auto v = field<std::vector<double>>(r, key, where);
      if (v.size() != 8) throw FormatError(where + ": '" + key + "' needs 8 thresholds");
      Audiogram a;
      std::copy(v.begin(), v.end(), a.begin());
      *dst = a;
    }
    try {
      p.validate();
    } catch (const InputError& e) {
      throw InputError(where + ": " + e.what());
    }
    out.push_back(std::move(p));
  }
  return out;
}

void write_listeners(const fs::path& path, const std::vector<ListenerProfile>& listeners) {
  json rows = json::array();
  for (const auto& p : listeners) {
    json r = {{"listener_id", p.listener_id}, {"severity", to_string(p.severity)}};
    if (p.audiogram_left) r["audiogram_left"] = *p.audiogram_left;
    if (p.audiogram_right) r["audiogram_right"] = *p.audiogram_right;
    rows.push_back(std::move(r));
  }
  write_json(path, {{"listeners_version", 1}, {"listeners", rows}});
}

Dataset load_dataset(const fs::path& manifest, const fs::path& listeners, int jobs) {
  const auto rows = read_manifest(manifest);
  Dataset data;
  data.listeners = read_listeners(listeners);
  data.records = records_of(rows);
  data.features.resize(rows.size());
  detail::parallel_for(rows.size(), jobs, [&](std::size_t i) {
    const auto& m = rows[i];
    FeatureBundle b;
    b.utterance_id = m.record.utterance_id;
    try {
      b.left = read_stream(m.left);
      b.right = read_stream(m.right);
      if (m.reference) b.reference = read_stream(*m.reference);
    } catch (const Error& e) {
      throw FormatError("utterance '" + m.record.utterance_id + "': " + e.what());
    }
    data.features[i] = pool_bundle(b);
  });
  data.validate();
  return data;
}

void write_fold_plan(const fs::path& path, const FoldPlan& plan) {
  json folds = json::array();
  for (const auto& f : plan.folds) folds.push_back({{"train", f.train}, {"val", f.val}});
  write_json(path, {{"fold_plan_version", 1}, {"folds", folds}});
}

FoldPlan read_fold_plan(const fs::path& path) {
  const json j = read_json(path, "fold plan");
  check_version(j, "fold_plan_version", path);
  FoldPlan plan;
  for (const auto& f : field<json>(j, "folds", path.string())) {
    plan.folds.push_back({field<std::vector<std::string>>(f, "train", path.string()),
                          field<std::vector<std::string>>(f, "val", path.string())});
  }
  return plan;
}

std::vector<ManifestRecord> cmd_synth(const SynthSpec& spec, const fs::path& out_dir, int jobs) {
  spec.validate();
  const fs::path features = out_dir / "features";
  fs::create_directories(features);
  std::vector<ManifestRecord> rows(static_cast<std::size_t>(spec.n_utterances));
  const std::string bb = to_string(spec.backbone);
  const auto synth = generate_synthetic(
      spec,
      [&](std::size_t i, FeatureBundle&& b) {
        auto paths = [&](const std::string& side) {
          const std::string stem = b.utterance_id + "." + side;
          return StreamPaths{{features / (stem + "." + bb + ".sfmf")}, features / (stem + ".lmel")};
        };
        auto& m = rows[i];
        m.left = paths("left");
        m.right = paths("right");
        m.reference = paths("reference");
        write_stream(m.left, b.left);
        write_stream(m.right, b.right);
        write_stream(*m.reference, *b.reference);
      },
      jobs);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].record = synth.data.records[i];
  write_manifest(out_dir / "manifest.json", rows);
  write_listeners(out_dir / "listeners.json", synth.data.listeners);
  detail::write_text(out_dir / "synth.cfg", format_synth_spec(spec));
  return rows;
}

std::vector<fs::path> cmd_train(const TrainOptions& opts) {
  opts.model.validate();
  opts.train.validate();
  const Dataset data = load_dataset(opts.manifest, opts.listeners, opts.jobs);
  for (const auto& r : data.records) {
    if (!r.label) throw InputError("utterance '" + r.utterance_id + "' has no label");
  }
  const FoldPlan plan = make_folds(data.listeners, opts.folds, opts.train.seed);
  validate_fold_plan(plan, data.listeners);
  // Every fold must have data and every bundle must cover the selected layers.
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    if (data.select(plan.folds[f].train).empty() || data.select(plan.folds[f].val).empty()) {
      throw InputError("fold " + std::to_string(f) + " has no utterances in train or val");
    }
  }
  for (const auto& b : data.features) prepare_input(b, opts.model);

  fs::create_directories(opts.out_dir);
  save_model_config(opts.out_dir / "model.cfg", opts.model);
  save_train_config(opts.out_dir / "train.cfg", opts.train);
  write_fold_plan(opts.out_dir / "folds.json", plan);

  const auto ckpts = train_folds(data, plan, opts.model, opts.train, opts.jobs);
  std::vector<fs::path> dirs;
  std::ofstream report(opts.out_dir / "fold_report.csv", std::ios::binary);
  report << "fold,best_epoch,val_rmse\n";
  for (const auto& c : ckpts) {
    const fs::path dir = opts.out_dir / ("fold" + std::to_string(c.fold));
    save_checkpoint(dir, c);
    dirs.push_back(dir);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", c.val_rmse);
    report << c.fold << "," << c.best_epoch << "," << buf << "\n";
    spdlog::info("fold {}: best epoch {}, val rmse {:.4f}", c.fold, c.best_epoch, c.val_rmse);
  }
  return dirs;
}

std::vector<PredictionRecord> cmd_predict(const PredictOptions& opts) {
  if (opts.checkpoints.empty()) throw ConfigError("predict: at least one checkpoint is required");
  std::vector<Checkpoint> ckpts;
  for (const auto& dir : expand_checkpoints(opts.checkpoints)) ckpts.push_back(load_checkpoint(dir));
  const std::string cfg = format_model_config(ckpts.front().model);
  for (const auto& c : ckpts) {
    if (format_model_config(c.model) != cfg) throw ConfigError("predict: checkpoints disagree on the model config");
  }
  const Dataset data = load_dataset(opts.manifest, opts.listeners, opts.jobs);
  const auto preds = ensemble_predict(ckpts, data, opts.jobs);
  write_predictions_csv(opts.out_csv, preds, opts.per_checkpoint);
  return preds;
}

EvaluateReport cmd_evaluate(const EvaluateOptions& opts) {
  const auto preds = read_predictions_csv(opts.predictions);
  const auto truth = records_of(read_manifest(opts.manifest, false));
  EvaluateReport rep;
  rep.rmse = overall_rmse(preds, truth);
  rep.n = static_cast<Index>(preds.size());
  fs::create_directories(opts.out_dir);
  if (opts.train_manifest) {
    const auto train = records_of(read_manifest(*opts.train_manifest, false));
    rep.strata = stratify(preds, truth, train);
    write_stratified_csv(opts.out_dir / "stratified.csv", *rep.strata);
  }
  const bool scenes = std::all_of(truth.begin(), truth.end(), [](const auto& r) { return !r.scene_id.empty(); });
  if (scenes && !truth.empty()) {
    rep.scenes = scene_histogram(preds, truth, opts.bin_width, opts.tail_threshold);
    write_histogram_csv(opts.out_dir / "scenes.csv", *rep.scenes);
  }
  std::ofstream m(opts.out_dir / "metrics.csv", std::ios::binary);
  auto line = [&](const std::string& k, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    m << k << "," << buf << "\n";
  };
  m << "metric,value\n";
  line("rmse", rep.rmse);
  line("n", static_cast<double>(rep.n));
  if (rep.strata) {
    line("rmse_seen_systems", rep.strata->seen_systems.pooled_rmse);
    line("rmse_unseen_systems", rep.strata->unseen_systems.pooled_rmse);
    line("rmse_seen_listeners", rep.strata->seen_listeners.pooled_rmse);
    line("rmse_unseen_listeners", rep.strata->unseen_listeners.pooled_rmse);
  }
  if (rep.scenes) {
    line("scenes", static_cast<double>(rep.scenes->scenes.size()));
    line("scene_tail_share", rep.scenes->tail_share);
  }
  return rep;
}

SweepResult cmd_sweep(const SweepOptions& opts) {
  opts.spec.validate();
  const Dataset data = load_dataset(opts.manifest, opts.listeners, opts.jobs);
  const auto result = run_sweep(opts.spec, data, opts.jobs);
  write_sweep_csv(opts.out_csv, result);
  return result;
}

}  // namespace earshot

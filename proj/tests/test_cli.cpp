#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "earshot/commands.hpp"

using namespace earshot;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("earshot_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SynthSpec spec(Index n = 40) {
  SynthSpec s;
  s.n_utterances = n;
  s.listeners = {3, 3, 2};
  s.layers = {0, 1};
  s.planted = {0, 1};
  s.min_frames = 8;
  s.max_frames = 16;
  s.seed = 21;
  return s;
}

TrainOptions train_options(const fs::path& data, const fs::path& out) {
  TrainOptions t;
  t.manifest = data / "manifest.json";
  t.listeners = data / "listeners.json";
  t.out_dir = out;
  t.model.d_model = 16;
  t.model.n_heads = 2;
  t.model.mscnn_channels = 6;
  t.model.backbones = {Backbone::synthetic};
  t.model.layer_windows = {{0, 1}};
  t.train.epochs = 2;
  t.train.lr = 1e-3;
  t.train.seed = 5;
  return t;
}

// One synthetic dataset and one training run shared by the cases below.
struct Shared {
  fs::path root = scratch("shared");
  fs::path data = root / "data";
  std::vector<ManifestRecord> rows;
  std::vector<fs::path> ckpts;
  Shared() {
    rows = cmd_synth(spec(), data);
    ckpts = cmd_train(train_options(data, root / "run"));
  }
};

const Shared& shared() {
  static const Shared s;
  return s;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(EARSHOT_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("synth writes a deterministic dataset") {
  const auto& s = shared();
  CHECK(s.rows.size() == 40);
  const auto again = scratch("synth_again");
  cmd_synth(spec(), again);
  CHECK(slurp(s.data / "listeners.json") == slurp(again / "listeners.json"));
  CHECK(slurp(s.data / "features" / "utt00007.left.synthetic.sfmf") ==
        slurp(again / "features" / "utt00007.left.synthetic.sfmf"));
  // Manifests differ only by their directory; paths are written relative to it.
  CHECK(slurp(s.data / "manifest.json") == slurp(again / "manifest.json"));
  CHECK(parse_synth_spec(slurp(s.data / "synth.cfg")).seed == 21);

  const auto rows = read_manifest(s.data / "manifest.json");
  REQUIRE(rows.size() == 40);
  CHECK(rows[3].record.utterance_id == s.rows[3].record.utterance_id);
  CHECK(*rows[3].record.label == *s.rows[3].record.label);
  CHECK(rows[3].reference.has_value());

  const auto data = load_dataset(s.data / "manifest.json", s.data / "listeners.json");
  const auto direct = generate_synthetic(spec());
  REQUIRE(data.size() == direct.data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(data.features[i].left.sfm[0].layers == direct.data.features[i].left.sfm[0].layers);
    CHECK(data.features[i].right.mel.frames == direct.data.features[i].right.mel.frames);
  }
}

TEST_CASE("synth with the default spec") {
  const auto dir = scratch("default");
  SynthSpec s;
  s.layers = {0, 1};
  s.planted = {0, 1};
  const auto rows = cmd_synth(s, dir);
  CHECK(rows.size() == 100);
  CHECK(read_manifest(dir / "manifest.json").size() == 100);
  CHECK(read_listeners(dir / "listeners.json").size() == 26);
}

TEST_CASE("manifest and listener files") {
  const auto dir = scratch("files");
  const auto& s = shared();
  auto rows = read_manifest(s.data / "manifest.json");
  write_manifest(dir / "m.json", rows);
  const auto back = read_manifest(dir / "m.json");
  CHECK(back[0].left.mel == rows[0].left.mel);

  const auto listeners = read_listeners(s.data / "listeners.json");
  write_listeners(dir / "l.json", listeners);
  const auto lb = read_listeners(dir / "l.json");
  REQUIRE(lb.size() == listeners.size());
  CHECK(*lb[2].audiogram_left == *listeners[2].audiogram_left);
  CHECK(lb[2].severity == listeners[2].severity);

  std::ofstream(dir / "v2.json") << R"({"manifest_version": 2, "records": []})";
  CHECK_THROWS_AS(read_manifest(dir / "v2.json"), FormatError);
  std::ofstream(dir / "missing.json") << R"({"manifest_version": 1, "records": [{"utterance_id": "a",
      "scene_id": "s", "system_id": "x", "listener_id": "L01", "label": 50,
      "left": {"sfm": ["nope.sfmf"], "mel": "nope.lmel"}, "right": {"sfm": ["nope.sfmf"], "mel": "nope.lmel"}}]})";
  CHECK_THROWS_AS(read_manifest(dir / "missing.json"), InputError);
  CHECK_NOTHROW(read_manifest(dir / "missing.json", false));
  std::ofstream(dir / "label.json") << R"({"manifest_version": 1, "records": [{"utterance_id": "a",
      "scene_id": "s", "system_id": "x", "listener_id": "L01", "label": 150,
      "left": {"sfm": ["nope.sfmf"], "mel": "nope.lmel"}, "right": {"sfm": ["nope.sfmf"], "mel": "nope.lmel"}}]})";
  CHECK_THROWS_AS(read_manifest(dir / "label.json", false), InputError);
}

TEST_CASE("train writes one checkpoint per fold and a valid plan") {
  const auto& s = shared();
  REQUIRE(s.ckpts.size() == 5);
  const fs::path run = s.root / "run";
  for (const auto& f : {"model.cfg", "train.cfg", "folds.json", "fold_report.csv"}) CHECK(fs::exists(run / f));
  const auto plan = read_fold_plan(run / "folds.json");
  const auto listeners = read_listeners(s.data / "listeners.json");
  CHECK_NOTHROW(validate_fold_plan(plan, listeners));
  for (int k = 0; k < 5; ++k) {
    const auto c = load_checkpoint(s.ckpts[static_cast<std::size_t>(k)]);
    CHECK(c.fold == k);
    CHECK(c.best_epoch >= 1);
    CHECK(c.best_epoch <= 2);
    CHECK(c.val_curve.size() == 2);
  }
  CHECK(load_train_config(run / "train.cfg").seed == 5);
}

TEST_CASE("predict ensembles checkpoints") {
  const auto& s = shared();
  const auto dir = scratch("predict");
  PredictOptions p;
  p.manifest = s.data / "manifest.json";
  p.listeners = s.data / "listeners.json";

  p.checkpoints = {s.ckpts[0]};
  p.out_csv = dir / "single.csv";
  const auto single = cmd_predict(p);
  REQUIRE(single.size() == 40);
  for (const auto& r : single) {
    CHECK(r.pooled > 0.0);
    CHECK(r.pooled < 100.0);
  }

  p.checkpoints.assign(5, s.ckpts[0]);
  p.out_csv = dir / "five.csv";
  const auto five = cmd_predict(p);
  for (std::size_t i = 0; i < single.size(); ++i) CHECK(five[i].pooled == single[i].pooled);
  CHECK(slurp(dir / "single.csv") == slurp(dir / "five.csv"));

  // A training directory expands to its fold checkpoints.
  p.checkpoints = {s.root / "run"};
  p.per_checkpoint = true;
  p.jobs = 2;
  p.out_csv = dir / "all.csv";
  const auto all = cmd_predict(p);
  REQUIRE(all[0].per_checkpoint.size() == 5);
  CHECK(all[0].per_checkpoint[0] == single[0].pooled);
  CHECK(slurp(dir / "all.csv").rfind("utterance_id,sL,sR,pooled,ckpt0,ckpt1,ckpt2,ckpt3,ckpt4\n", 0) == 0);

  p.checkpoints = {};
  CHECK_THROWS_AS(cmd_predict(p), ConfigError);
}

TEST_CASE("evaluate reports") {
  const auto& s = shared();
  const auto dir = scratch("evaluate");
  // Perfect predictions from the labels themselves.
  std::vector<PredictionRecord> perfect;
  for (const auto& r : s.rows) {
    PredictionRecord p;
    p.utterance_id = r.record.utterance_id;
    p.left = p.right = p.pooled = *r.record.label;
    perfect.push_back(p);
  }
  write_predictions_csv(dir / "perfect.csv", perfect);
  // The labels carry 6 decimals in the CSV, so the error is rounding only.
  EvaluateOptions e;
  e.predictions = dir / "perfect.csv";
  e.manifest = s.data / "manifest.json";
  e.out_dir = dir / "perfect";
  auto rep = cmd_evaluate(e);
  CHECK(rep.rmse < 1e-6);
  CHECK(rep.n == 40);
  REQUIRE(rep.scenes);
  CHECK(rep.scenes->scenes.size() == 10);
  CHECK(rep.scenes->tail_share == 0.0);
  CHECK(fs::exists(dir / "perfect" / "metrics.csv"));
  CHECK(fs::exists(dir / "perfect" / "scenes.csv"));

  // Stratified against the first half as the training manifest.
  auto rows = read_manifest(s.data / "manifest.json");
  rows.resize(20);
  write_manifest(s.data / "first_half.json", rows);
  PredictOptions p;
  p.manifest = s.data / "manifest.json";
  p.listeners = s.data / "listeners.json";
  p.checkpoints = {s.root / "run"};
  p.out_csv = dir / "ensemble.csv";
  cmd_predict(p);
  e.predictions = p.out_csv;
  e.train_manifest = s.data / "first_half.json";
  e.out_dir = dir / "ensemble";
  rep = cmd_evaluate(e);
  REQUIRE(rep.strata);
  CHECK(rep.strata->seen_systems.n + rep.strata->unseen_systems.n == 40);
  CHECK(rep.strata->seen_listeners.n + rep.strata->unseen_listeners.n == 40);
  CHECK(rep.rmse > 0.0);
  CHECK(fs::exists(dir / "ensemble" / "stratified.csv"));
  fs::remove(s.data / "first_half.json");
}

TEST_CASE("train fails fast on bad input") {
  const auto& s = shared();
  auto t = train_options(s.data, scratch("bad_train"));
  t.model.layer_windows = {{0, 5}};
  CHECK_THROWS_AS(cmd_train(t), ConfigError);
  CHECK_FALSE(fs::exists(t.out_dir / "model.cfg"));

  t = train_options(s.data, scratch("bad_train2"));
  t.train.lr = -1;
  CHECK_THROWS_AS(cmd_train(t), ConfigError);

  t = train_options(s.data, scratch("bad_train3"));
  t.folds = 0;
  CHECK_THROWS(cmd_train(t));
}

TEST_CASE("command-line exit codes") {
  const auto& s = shared();
  const auto dir = scratch("exit");
  CHECK(run_cli("") == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("predict --manifest x") == 2);

  std::ofstream(dir / "bad.cfg") << "n_utterances = -3\n";
  CHECK(run_cli("synth --config " + (dir / "bad.cfg").string() + " --out " + (dir / "o").string()) == 2);
  CHECK(run_cli("evaluate --predictions " + (dir / "none.csv").string() + " --manifest " +
                (s.data / "manifest.json").string() + " --out " + (dir / "e").string()) == 3);

  std::ofstream(dir / "small.cfg") << "n_utterances = 12\nlisteners = 2,2,2\nlayers = 0-1\nplanted = 0-1\n";
  CHECK(run_cli("synth --config " + (dir / "small.cfg").string() + " --seed 3 --out " + (dir / "d").string()) == 0);
  CHECK(parse_synth_spec(slurp(dir / "d" / "synth.cfg")).seed == 3);
  CHECK(read_manifest(dir / "d" / "manifest.json").size() == 12);
}

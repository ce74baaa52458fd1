// Runs the acceptance criteria and prints one PASS/FAIL line for each.
// Usage: acceptance [criterion ...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "earshot/attention.hpp"
#include "earshot/commands.hpp"
#include "grad_suite.hpp"
#include "model_fixtures.hpp"

using namespace earshot;
using namespace earshot::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("earshot_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelConfig desk_model(LayerWindow window) {
  ModelConfig m;
  m.d_model = 32;
  m.n_heads = 2;
  m.mscnn_channels = 12;
  m.backbones = {Backbone::synthetic};
  m.layer_windows = {window};
  return m;
}

TrainConfig desk_train(std::uint64_t seed) {
  TrainConfig t;
  t.lr = 1e-3;
  t.seed = seed;
  return t;
}

// Trains on the first 80% of the rows and validates on the rest.
Checkpoint holdout_run(const Dataset& data, const ModelConfig& m, const TrainConfig& t) {
  const std::size_t n = data.size(), n_train = n * 4 / 5;
  std::vector<std::size_t> train(n_train), val(n - n_train);
  std::iota(train.begin(), train.end(), std::size_t{0});
  std::iota(val.begin(), val.end(), n_train);
  return train_rows(data, train, val, m, t);
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  double worst_op = 0.0;
  std::string worst_name;
  for (const auto& c : op_grad_suite()) {
    if (c.error > worst_op) {
      worst_op = c.error;
      worst_name = c.op;
    }
  }

  // Attention block with active dropout.
  const AttentionConfig acfg{8, 2, 0.1, 2};
  ParameterStore store;
  std::mt19937_64 rng(7);
  register_cross_attention_block(store, "blk", acfg, rng);
  store.add("q", random_tensor({3, 8}, rng));
  store.add("kv", random_tensor({4, 8}, rng));
  const Tensor weights = random_tensor({3, 8}, rng);
  const Mask m = key_mask(3, Mask{1, 1, 0, 1});
  GradCheckOptions aopts;
  aopts.training = true;
  aopts.graph_seed = 42;
  const double block = grad_check<double>(
      store,
      [&](Graph& g) {
        const auto p = bind_cross_attention_block(g, store, "blk");
        auto kv = g.param(store, "kv");
        return sum(mul(cross_attention_block(g.param(store, "q"), kv, kv, m, p, acfg), g.constant(weights)));
      },
      aopts);
  worst_op = std::max(worst_op, block);

  // Full tiny model under each readout, conditioning pathway and ear pooling.
  double worst_model = 0.0;
  std::mt19937_64 brng(18);
  const auto bundle = random_bundle(brng, 2, 16, 12);
  struct Variant {
    Readout readout;
    ConditioningMode mode;
    EarPooling pooling;
  };
  for (const auto& v : {Variant{Readout::severityToken, ConditioningMode::categorical, EarPooling::bestEarLSE},
                        Variant{Readout::meanPool, ConditioningMode::pta8, EarPooling::averageEarFeature},
                        Variant{Readout::clsPool, ConditioningMode::pta4, EarPooling::bestEarLSE}}) {
    auto cfg = tiny_config(2);
    cfg.readout = v.readout;
    cfg.conditioning = v.mode;
    cfg.ear_pooling = v.pooling;
    Predictor p(cfg, 7);
    const auto in = prepare_input(bundle, cfg);
    const auto who = listener();
    GradCheckOptions opts;
    opts.max_coords_per_param = 3;
    worst_model = std::max(worst_model, grad_check<double>(
                                            p.parameters(), [&](Graph& g) { return p.forward(g, in, who).pooled; },
                                            opts));
  }
  const double elapsed = seconds_since(t0);
  return {worst_op < 1e-4 && worst_model < 1e-3 && elapsed < 60.0,
          fmt("worst op error %.2e (%s), worst model error %.2e, %.1f s", worst_op, worst_name.c_str(),
              worst_model, elapsed)};
}

Outcome pooling_algebra() {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> score(0.0, 100.0), temp(0.05, 50.0), step(0.0, 5.0);
  int bad = 0;
  double worst_gap = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double a = score(rng), b = score(rng), beta = temp(rng), d = step(rng);
    const double p = best_ear_pool(a, b, beta);
    const double hi = std::max(a, b);
    bad += p != best_ear_pool(b, a, beta);
    bad += !(p <= hi && p >= hi - std::log(2.0) / beta);
    bad += !(best_ear_pool(a + d, b, beta) >= p && best_ear_pool(a, b + d, beta) >= p);
    bad += best_ear_pool(a, a, beta) != a;
    worst_gap = std::max(worst_gap, hi - best_ear_pool(a, b, 1000.0));
  }
  return {bad == 0 && worst_gap < 1e-2,
          fmt("10000 pairs, %d violations, largest gap to max at beta 1000: %.2e", bad, worst_gap)};
}

Outcome metric_oracle() {
  const std::vector<GroupStat> systems = {{"seen", 25.8130, 4796}, {"unseen", 23.5139, 2878}};
  const std::vector<GroupStat> listeners = {{"seen", 24.4725, 4372}, {"unseen", 25.6265, 3302}};
  const double a = pooled_rmse(systems), b = pooled_rmse(listeners);
  return {std::abs(a - 24.98) <= 0.01 && std::abs(b - 24.98) <= 0.01,
          fmt("systems split %.4f, listeners split %.4f", a, b)};
}

Outcome learning_check() {
  const auto t0 = Clock::now();
  SynthSpec s;
  s.n_utterances = 640;
  s.layers = {0, 5};
  s.planted = {1, 4};
  s.label_noise_sd = 5.0;
  s.seed = 0;
  const auto d = generate_synthetic(s);
  std::vector<std::size_t> train(512), val(128);
  std::iota(train.begin(), train.end(), std::size_t{0});
  std::iota(val.begin(), val.end(), std::size_t{512});
  double mean = 0.0;
  for (auto r : train) mean += *d.data.records[r].label;
  mean /= 512.0;
  std::vector<double> truth, constant(128, mean);
  for (auto r : val) truth.push_back(*d.data.records[r].label);
  const double baseline = rmse(constant, truth);
  const auto ck = train_rows(d.data, train, val, desk_model({1, 4}), desk_train(0));
  const double elapsed = seconds_since(t0);
  return {ck.val_rmse <= 0.6 * baseline && elapsed < 600.0,
          fmt("val rmse %.3f vs constant baseline %.3f (ratio %.3f), best epoch %d, %.0f s", ck.val_rmse,
              baseline, ck.val_rmse / baseline, ck.best_epoch, elapsed)};
}

Outcome ablation_directions() {
  const auto t0 = Clock::now();
  int best_wins = 0, ref_wins = 0, sev_wins = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthSpec s;
    s.n_utterances = 384;
    s.layers = {0, 5};
    s.planted = {1, 4};
    s.seed = seed;
    const auto d = generate_synthetic(s);
    const auto base = desk_model({1, 4});
    auto run = [&](const ModelConfig& m) { return holdout_run(d.data, m, desk_train(seed)).val_rmse; };

    auto avg = base;
    avg.ear_pooling = EarPooling::averageEarFeature;
    auto noref = base;
    noref.use_reference = false;
    // Setup A requires a listener token, so the conditioning ablation uses Setup B.
    auto sev = base;
    sev.readout = Readout::meanPool;
    auto none = sev;
    none.conditioning = ConditioningMode::none;

    const double r_base = run(base), r_avg = run(avg), r_noref = run(noref), r_sev = run(sev), r_none = run(none);
    best_wins += r_base < r_avg;
    ref_wins += r_base < r_noref;
    sev_wins += r_sev < r_none;
    detail += fmt("\n    seed %d: best %.3f avg %.3f | ref %.3f noref %.3f | severity %.3f none %.3f",
                  static_cast<int>(seed), r_base, r_avg, r_base, r_noref, r_sev, r_none);
  }
  return {best_wins >= 3 && ref_wins >= 3 && sev_wins >= 3,
          fmt("best<avg %d/5, ref<noref %d/5, severity<none %d/5, %.0f s", best_wins, ref_wins, sev_wins,
              seconds_since(t0)) +
              detail};
}

Outcome sweep_recovery() {
  const auto t0 = Clock::now();
  int hits = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto dir = scratch("sweep");
    SynthSpec s;
    s.n_utterances = 200;
    s.layers = {0, 23};
    s.planted = {12, 15};
    s.min_frames = s.max_frames = 8;
    s.seed = seed;
    cmd_synth(s, dir / "data");

    SweepOptions opts;
    opts.manifest = dir / "data" / "manifest.json";
    opts.listeners = dir / "data" / "listeners.json";
    opts.out_csv = dir / "sweep.csv";
    opts.spec.window_size = 4;
    opts.spec.layer_range = {0, 23};
    opts.spec.setups = {Readout::severityToken};
    opts.spec.model = desk_model({12, 15});
    opts.spec.train = desk_train(seed);
    const auto res = cmd_sweep(opts);
    const auto& best = res.cells[res.argmin];
    hits += best.window.lo == 12 && best.window.hi == 15;
    detail += fmt("\n    seed %d: argmin %s (rmse %.3f);", static_cast<int>(seed),
                  format_layer_window(best.window).c_str(), best.val_rmse);
    for (const auto& c : res.cells) detail += fmt(" %s=%.2f", format_layer_window(c.window).c_str(), c.val_rmse);
    fs::remove_all(dir);
  }
  return {hits >= 4, fmt("block 12-15 recovered in %d/5 seeds, %.0f s", hits, seconds_since(t0)) + detail};
}

Outcome fold_invariants() {
  std::mt19937_64 rng(0);
  const auto listeners = synth_listeners({9, 13, 4}, rng);
  std::map<std::string, Severity> severity;
  for (const auto& p : listeners) severity[p.listener_id] = p.severity;
  int bad = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto plan = make_folds(listeners, 5, seed);
    bad += plan.folds.size() != 5;
    for (const auto& f : plan.folds) {
      const std::set<std::string> train(f.train.begin(), f.train.end()), val(f.val.begin(), f.val.end());
      std::array<int, 3> counts{};
      for (const auto& id : val) {
        bad += train.count(id) != 0;
        ++counts[static_cast<std::size_t>(severity.at(id))];
      }
      bad += counts != std::array<int, 3>{2, 2, 2};
      bad += train.size() + val.size() != listeners.size();
    }
  }

  // Five copies of one checkpoint against the checkpoint alone.
  SynthSpec s;
  s.n_utterances = 48;
  s.listeners = {3, 3, 2};
  s.layers = {0, 1};
  s.planted = {0, 1};
  s.min_frames = 8;
  s.max_frames = 16;
  const auto d = generate_synthetic(s);
  auto m = desk_model({0, 1});
  auto t = desk_train(3);
  t.epochs = 2;
  const auto ck = holdout_run(d.data, m, t);
  const std::vector<Checkpoint> one = {ck}, five(5, ck);
  const auto a = ensemble_predict(one, d.data), b = ensemble_predict(five, d.data, 2);
  int mismatched = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    mismatched += a[i].pooled != b[i].pooled || a[i].left != b[i].left || a[i].right != b[i].right;
  }
  return {bad == 0 && mismatched == 0,
          fmt("100 fold plans, %d violations; ensemble of 5 identical checkpoints: %d of %zu predictions differ",
              bad, mismatched, a.size())};
}

Outcome masking_sharing() {
  std::mt19937_64 rng(4);
  double worst = 0.0;
  for (auto readout : {Readout::severityToken, Readout::meanPool, Readout::clsPool}) {
    for (bool ref : {true, false}) {
      auto cfg = tiny_config(3);
      cfg.readout = readout;
      cfg.use_reference = ref;
      Predictor p(cfg, 5);
      const auto clean = random_bundle(rng, 3, 21, 13);
      auto dirty = clean;
      std::uniform_real_distribution<double> junk(-50.0, 50.0);
      for (auto* s : {&dirty.left, &dirty.right, &*dirty.reference}) {
        auto& layers = s->sfm[0].layers;
        for (Index l = 0; l < 3; ++l)
          for (Index t = 13; t < 21; ++t)
            for (Index k = 0; k < kSfmDim; ++k) layers[(l * 21 + t) * kSfmDim + k] = junk(rng);
        for (Index t = 13; t < 21; ++t)
          for (Index k = 0; k < kMelBands; ++k) s->mel.frames[t * kMelBands + k] = junk(rng);
      }
      const auto who = listener();
      const auto a = p.predict(prepare_input(clean, cfg), who), b = p.predict(prepare_input(dirty, cfg), who);
      worst = std::max({worst, std::abs(a.pooled - b.pooled), std::abs(a.left - b.left), std::abs(a.right - b.right)});
    }
  }

  auto count = [](const ModelConfig& cfg) { return Predictor(cfg, 1).parameters().parameter_count(); };
  const Index base = count(tiny_config(1));
  bool shared = true;
  for (Index layers : {2, 4, 7}) shared = shared && count(tiny_config(layers)) == base;
  auto two = tiny_config(4);
  two.backbones = {Backbone::canaryLike, Backbone::parakeetLike};
  two.layer_windows = {{10, 16}, {10, 16}};
  shared = shared && count(two) == base;
  return {worst <= 1e-12 && shared,
          fmt("largest output change from padded frames %.1e; parameter count %s across 1/2/4/7 layers and 1/2 "
              "backbones (%lld)",
              worst, shared ? "constant" : "varies", static_cast<long long>(base))};
}

Outcome determinism() {
  const auto dir = scratch("determinism");
  SynthSpec s;
  s.n_utterances = 60;
  s.layers = {0, 3};
  s.planted = {1, 2};
  s.min_frames = 8;
  s.max_frames = 16;
  s.seed = 9;
  cmd_synth(s, dir / "data");
  auto once = [&](const std::string& tag, int jobs) {
    TrainOptions t;
    t.manifest = dir / "data" / "manifest.json";
    t.listeners = dir / "data" / "listeners.json";
    t.out_dir = dir / ("run_" + tag);
    t.model = desk_model({1, 2});
    t.train = desk_train(17);
    t.train.epochs = 2;
    t.jobs = jobs;
    cmd_train(t);
    PredictOptions p;
    p.manifest = t.manifest;
    p.listeners = t.listeners;
    p.checkpoints = {t.out_dir};
    p.per_checkpoint = true;
    p.out_csv = dir / ("pred_" + tag + ".csv");
    p.jobs = jobs;
    cmd_predict(p);
    return slurp(p.out_csv);
  };
  const std::string a = once("a", 1), b = once("b", 2);
  const bool same = !a.empty() && a == b;
  fs::remove_all(dir);
  return {same, fmt("two train+predict runs (1 and 2 workers): CSVs %s (%zu bytes)",
                    same ? "byte-identical" : "differ", a.size())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"pooling algebra", pooling_algebra},
      {"metric oracle", metric_oracle},
      {"learning check", learning_check},
      {"ablation directions", ablation_directions},
      {"sweep recovery", sweep_recovery},
      {"fold and ensemble invariants", fold_invariants},
      {"masking and sharing invariants", masking_sharing},
      {"determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}

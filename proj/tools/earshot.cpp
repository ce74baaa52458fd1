#include <cstdlib>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "earshot/commands.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

void configure_logging() {
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("EARSHOT_LOG")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to "off"; only accept it when asked for.
    if (level != spdlog::level::off || std::string(env) == "off") spdlog::set_level(level);
    else spdlog::warn("EARSHOT_LOG: unknown level '{}'", env);
  }
}

}  // namespace

int main(int argc, char** argv) {
  using namespace earshot;
  configure_logging();

  CLI::App app{"earshot: intrusive speech-intelligibility prediction"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::string config, out;
  auto common = [&](CLI::App* sub, bool with_jobs) {
    sub->add_option("--seed", seed, "Override the seed of the config");
    if (with_jobs) sub->add_option("--jobs", jobs, "Parallel workers")->check(CLI::PositiveNumber);
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--config", config, "Synthetic data spec (key = value)");
  synth->add_option("--out", out, "Output directory")->required();
  common(synth, true);

  std::string manifest, listeners, model_cfg;
  int folds = 5;
  auto* train = app.add_subcommand("train", "Cross-validated training");
  train->add_option("--manifest", manifest)->required();
  train->add_option("--listeners", listeners)->required();
  train->add_option("--model-config", model_cfg, "Model config (key = value)");
  train->add_option("--config", config, "Train config (key = value)");
  train->add_option("--folds", folds)->check(CLI::PositiveNumber);
  train->add_option("--out", out, "Output directory")->required();
  common(train, true);

  std::vector<std::string> checkpoints;
  bool per_checkpoint = false;
  auto* predict = app.add_subcommand("predict", "Ensemble prediction");
  predict->add_option("--manifest", manifest)->required();
  predict->add_option("--listeners", listeners)->required();
  predict->add_option("--checkpoint", checkpoints, "Checkpoint or training output directory")->required();
  predict->add_option("--out", out, "Prediction CSV")->required();
  predict->add_flag("--per-checkpoint", per_checkpoint, "Add one column per checkpoint");
  common(predict, true);

  std::string predictions, train_manifest;
  double bin_width = 5.0, tail = 40.0;
  auto* evaluate = app.add_subcommand("evaluate", "RMSE, stratified report and scene histogram");
  evaluate->add_option("--predictions", predictions)->required();
  evaluate->add_option("--manifest", manifest, "Truth manifest")->required();
  evaluate->add_option("--train-manifest", train_manifest);
  evaluate->add_option("--bin-width", bin_width)->check(CLI::PositiveNumber);
  evaluate->add_option("--tail-threshold", tail);
  evaluate->add_option("--out", out, "Report directory")->required();

  auto* sweep = app.add_subcommand("sweep", "Layer-window sweep");
  sweep->add_option("--config", config, "Sweep spec (key = value)")->required();
  sweep->add_option("--manifest", manifest)->required();
  sweep->add_option("--listeners", listeners)->required();
  sweep->add_option("--out", out, "Sweep CSV")->required();
  common(sweep, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*synth) {
      SynthSpec spec = config.empty() ? SynthSpec{} : load_synth_spec(config);
      if (seed) spec.seed = *seed;
      const auto rows = cmd_synth(spec, out, jobs);
      std::cout << "wrote " << rows.size() << " utterances to " << out << "\n";
    } else if (*train) {
      TrainOptions opts;
      opts.manifest = manifest;
      opts.listeners = listeners;
      opts.out_dir = out;
      if (!model_cfg.empty()) opts.model = load_model_config(model_cfg);
      if (!config.empty()) opts.train = load_train_config(config);
      if (seed) opts.train.seed = *seed;
      opts.folds = folds;
      opts.jobs = jobs;
      const auto dirs = cmd_train(opts);
      for (const auto& d : dirs) std::cout << d.string() << "\n";
    } else if (*predict) {
      PredictOptions opts;
      opts.manifest = manifest;
      opts.listeners = listeners;
      opts.out_csv = out;
      for (const auto& c : checkpoints) opts.checkpoints.emplace_back(c);
      opts.per_checkpoint = per_checkpoint;
      opts.jobs = jobs;
      const auto preds = cmd_predict(opts);
      std::cout << "wrote " << preds.size() << " predictions to " << out << "\n";
    } else if (*evaluate) {
      EvaluateOptions opts;
      opts.predictions = predictions;
      opts.manifest = manifest;
      if (!train_manifest.empty()) opts.train_manifest = train_manifest;
      opts.out_dir = out;
      opts.bin_width = bin_width;
      opts.tail_threshold = tail;
      const auto rep = cmd_evaluate(opts);
      std::printf("rmse %.6f over %lld utterances\n", rep.rmse, static_cast<long long>(rep.n));
      if (rep.strata) {
        for (const auto* s : {&rep.strata->seen_systems, &rep.strata->unseen_systems,
                              &rep.strata->seen_listeners, &rep.strata->unseen_listeners}) {
          std::printf("%-17s rmse %.6f  n %lld\n", s->name.c_str(), s->pooled_rmse, static_cast<long long>(s->n));
        }
      }
      if (rep.scenes) {
        std::printf("scenes %zu, share above %.1f: %.6f\n", rep.scenes->scenes.size(),
                    rep.scenes->tail_threshold, rep.scenes->tail_share);
      }
    } else if (*sweep) {
      SweepOptions opts;
      opts.manifest = manifest;
      opts.listeners = listeners;
      opts.out_csv = out;
      opts.spec = load_sweep_spec(config);
      if (seed) opts.spec.train.seed = *seed;
      opts.jobs = jobs;
      const auto res = cmd_sweep(opts);
      const auto& best = res.cells[res.argmin];
      std::printf("argmin %s (layers %s-%s) setup %c rmse %.6f\n", format_layer_window(best.window).c_str(),
                  layer_label(best.window.lo).c_str(), layer_label(best.window.hi).c_str(),
                  setup_letter(best.setup), best.val_rmse);
    }
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kConfig;
  } catch (const NumericError& e) {
    spdlog::error("{}", e.what());
    return kNumeric;
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return kData;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFailure;
  }
  return kOk;
}

#include "earshot/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "earshot/ops.hpp"
#include "kv_text.hpp"
#include "parallel.hpp"

namespace earshot {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("train config: lr must be positive");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be positive");
  if (epochs < 1) throw ConfigError("train config: epochs must be positive");
  if (weight_decay < 0) throw ConfigError("train config: weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("train config: betas must lie in [0, 1)");
  }
  if (!(eps > 0)) throw ConfigError("train config: eps must be positive");
  if (grad_clip && !(*grad_clip > 0)) throw ConfigError("train config: grad_clip must be positive");
}

std::string format_train_config(const TrainConfig& cfg) {
  using detail::format_double;
  std::ostringstream out;
  out << "lr = " << format_double(cfg.lr) << "\n"
      << "weight_decay = " << format_double(cfg.weight_decay) << "\n"
      << "batch_size = " << cfg.batch_size << "\n"
      << "epochs = " << cfg.epochs << "\n"
      << "beta1 = " << format_double(cfg.beta1) << "\n"
      << "beta2 = " << format_double(cfg.beta2) << "\n"
      << "eps = " << format_double(cfg.eps) << "\n"
      << "seed = " << cfg.seed << "\n";
  if (cfg.grad_clip) out << "grad_clip = " << format_double(*cfg.grad_clip) << "\n";
  out << "cosine_schedule = " << (cfg.cosine_schedule ? "true" : "false") << "\n";
  return out.str();
}

TrainConfig parse_train_config(const std::string& text) {
  using namespace detail;
  const std::string what = "train config";
  TrainConfig cfg;
  for_each_pair(what, text, [&](const std::string& key, const std::string& v) {
    if (key == "lr") cfg.lr = parse_number<double>(what, key, v);
    else if (key == "weight_decay") cfg.weight_decay = parse_number<double>(what, key, v);
    else if (key == "batch_size") cfg.batch_size = parse_number<Index>(what, key, v);
    else if (key == "epochs") cfg.epochs = parse_number<int>(what, key, v);
    else if (key == "beta1") cfg.beta1 = parse_number<double>(what, key, v);
    else if (key == "beta2") cfg.beta2 = parse_number<double>(what, key, v);
    else if (key == "eps") cfg.eps = parse_number<double>(what, key, v);
    else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(what, key, v);
    else if (key == "grad_clip") {
      if (v == "none") cfg.grad_clip.reset();
      else cfg.grad_clip = parse_number<double>(what, key, v);
    } else if (key == "cosine_schedule") cfg.cosine_schedule = parse_bool(what, key, v);
    else throw ConfigError("train config: unknown key '" + key + "'");
  });
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  return parse_train_config(detail::read_text(path, "train config"));
}

void save_train_config(const std::filesystem::path& path, const TrainConfig& cfg) {
  detail::write_text(path, format_train_config(cfg));
}

double rmse(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) {
    throw InputError("rmse: " + std::to_string(pred.size()) + " predictions vs " +
                     std::to_string(truth.size()) + " targets");
  }
  if (pred.empty()) throw InputError("rmse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - truth[i];
    acc += e * e;
  }
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

void adamw_step(ParameterStore& store, AdamState& state, const TrainConfig& cfg,
                std::optional<double> lr_override) {
  double sq_norm = 0.0;
  for (const auto& e : store.entries()) {
    if (!e.grad.all_finite()) {
      throw NumericError("adamw_step: non-finite gradient for '" + e.name + "'");
    }
    sq_norm += e.grad.data().squaredNorm();
  }
  if (state.m.empty()) {
    for (const auto& e : store.entries()) {
      state.m.emplace_back(e.value.shape());
      state.v.emplace_back(e.value.shape());
    }
  }
  if (state.m.size() != store.size()) throw ConfigError("adamw_step: optimizer state mismatch");

  double clip = 1.0;
  if (cfg.grad_clip && std::sqrt(sq_norm) > *cfg.grad_clip) clip = *cfg.grad_clip / std::sqrt(sq_norm);

  const double lr = lr_override.value_or(cfg.lr);
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& e = store.at(i);
    auto p = e.value.data().array();
    const Eigen::ArrayXd g = clip * e.grad.data().array();
    auto m = state.m[i].data().array();
    auto v = state.v[i].data().array();
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.square();
    p *= 1.0 - lr * cfg.weight_decay;
    p -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
  }
}

FoldPlan make_folds(std::span<const ListenerProfile> listeners, int k, std::uint64_t seed) {
  if (k < 1) throw ConfigError("make_folds: k must be positive");
  std::array<std::vector<std::string>, kSeverityClasses> by_class;
  std::set<std::string> seen;
  for (const auto& l : listeners) {
    if (!seen.insert(l.listener_id).second) {
      throw ConfigError("make_folds: duplicate listener '" + l.listener_id + "'");
    }
    by_class[static_cast<std::size_t>(l.severity)].push_back(l.listener_id);
  }
  std::mt19937_64 rng(seed);
  for (int c = 0; c < kSeverityClasses; ++c) {
    auto& ids = by_class[static_cast<std::size_t>(c)];
    if (ids.size() < 2) {
      throw ConfigError("make_folds: severity '" + to_string(static_cast<Severity>(c)) +
                        "' has " + std::to_string(ids.size()) + " listeners, need at least 2");
    }
    std::sort(ids.begin(), ids.end());
    std::shuffle(ids.begin(), ids.end(), rng);
  }

  FoldPlan plan;
  for (int f = 0; f < k; ++f) {
    Fold fold;
    std::set<std::string> val;
    for (const auto& ids : by_class) {
      // Cycling through the shuffled class reuses members only once it is exhausted.
      for (std::size_t j = 0; j < 2; ++j) val.insert(ids[(2 * static_cast<std::size_t>(f) + j) % ids.size()]);
    }
    fold.val.assign(val.begin(), val.end());
    for (const auto& id : seen) {
      if (!val.count(id)) fold.train.push_back(id);
    }
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

void validate_fold_plan(const FoldPlan& plan, std::span<const ListenerProfile> listeners) {
  std::map<std::string, Severity> severity;
  for (const auto& l : listeners) severity[l.listener_id] = l.severity;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const auto& fold = plan.folds[f];
    const std::string where = "fold " + std::to_string(f);
    std::set<std::string> val(fold.val.begin(), fold.val.end());
    std::set<std::string> train(fold.train.begin(), fold.train.end());
    if (val.size() != fold.val.size() || train.size() != fold.train.size()) {
      throw InputError(where + ": duplicate listener");
    }
    std::array<int, kSeverityClasses> counts{};
    for (const auto& id : val) {
      auto it = severity.find(id);
      if (it == severity.end()) throw InputError(where + ": unknown listener '" + id + "'");
      if (train.count(id)) throw InputError(where + ": listener '" + id + "' in train and val");
      ++counts[static_cast<std::size_t>(it->second)];
    }
    for (const auto& id : train) {
      if (!severity.count(id)) throw InputError(where + ": unknown listener '" + id + "'");
    }
    if (counts != std::array<int, kSeverityClasses>{2, 2, 2}) {
      throw InputError(where + ": validation severities are not 2/2/2");
    }
    if (val.size() + train.size() != severity.size()) {
      throw InputError(where + ": does not cover every listener");
    }
  }
}

const ListenerProfile& Dataset::listener(const std::string& id) const {
  for (const auto& l : listeners) {
    if (l.listener_id == id) return l;
  }
  throw InputError("unknown listener '" + id + "'");
}

std::vector<std::size_t> Dataset::select(std::span<const std::string> ids) const {
  const std::set<std::string> wanted(ids.begin(), ids.end());
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (wanted.count(records[i].listener_id)) rows.push_back(i);
  }
  return rows;
}

void Dataset::validate() const {
  if (features.size() != records.size()) {
    throw InputError("dataset: " + std::to_string(records.size()) + " records but " +
                     std::to_string(features.size()) + " feature bundles");
  }
  std::set<std::string> ids;
  for (const auto& l : listeners) {
    l.validate();
    if (!ids.insert(l.listener_id).second) throw InputError("duplicate listener '" + l.listener_id + "'");
  }
  std::set<std::string> utts;
  for (const auto& r : records) {
    if (r.utterance_id.empty()) throw InputError("record with empty utterance_id");
    if (!utts.insert(r.utterance_id).second) throw InputError("duplicate utterance '" + r.utterance_id + "'");
    if (!ids.count(r.listener_id)) {
      throw InputError("utterance '" + r.utterance_id + "': unknown listener '" + r.listener_id + "'");
    }
    if (r.label && !(*r.label >= 0.0 && *r.label <= 100.0)) {
      throw InputError("utterance '" + r.utterance_id + "': label outside [0, 100]");
    }
  }
}

namespace {

void write_list(std::ostream& out, const std::string& key, std::span<const double> xs) {
  out << key << " =";
  for (std::size_t i = 0; i < xs.size(); ++i) out << (i ? ", " : " ") << detail::format_double(xs[i]);
  out << "\n";
}

std::vector<double> read_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& item : detail::split_list(v)) out.push_back(detail::parse_number<double>("checkpoint meta", key, item));
  return out;
}

Audiogram to_audiogram(const std::string& key, const std::string& v) {
  const auto xs = read_list(key, v);
  if (xs.size() != 8) throw FormatError("checkpoint meta: '" + key + "' needs 8 values");
  Audiogram a;
  std::copy(xs.begin(), xs.end(), a.begin());
  return a;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  std::filesystem::create_directories(dir);
  save_parameters(ckpt.params, dir / "params.ears");
  save_model_config(dir / "model.cfg", ckpt.model);
  std::ostringstream meta;
  meta << "fold = " << ckpt.fold << "\n"
       << "best_epoch = " << ckpt.best_epoch << "\n"
       << "val_rmse = " << detail::format_double(ckpt.val_rmse) << "\n";
  write_list(meta, "train_loss", ckpt.train_loss);
  write_list(meta, "val_curve", ckpt.val_curve);
  meta << "pta4_mean = " << detail::format_double(ckpt.stats.pta4_mean) << "\n"
       << "pta4_std = " << detail::format_double(ckpt.stats.pta4_std) << "\n";
  write_list(meta, "pta8_mean", ckpt.stats.pta8_mean);
  write_list(meta, "pta8_std", ckpt.stats.pta8_std);
  detail::write_text(dir / "meta.txt", meta.str());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  using namespace detail;
  Checkpoint ckpt;
  ckpt.model = load_model_config(dir / "model.cfg");
  std::mt19937_64 rng(0);
  register_model(ckpt.params, ckpt.model, rng);
  load_parameters_into(ckpt.params, dir / "params.ears");
  const std::string what = "checkpoint meta";
  for_each_pair(what, read_text(dir / "meta.txt", what), [&](const std::string& key, const std::string& v) {
    if (key == "fold") ckpt.fold = parse_number<int>(what, key, v);
    else if (key == "best_epoch") ckpt.best_epoch = parse_number<int>(what, key, v);
    else if (key == "val_rmse") ckpt.val_rmse = parse_number<double>(what, key, v);
    else if (key == "train_loss") ckpt.train_loss = read_list(key, v);
    else if (key == "val_curve") ckpt.val_curve = read_list(key, v);
    else if (key == "pta4_mean") ckpt.stats.pta4_mean = parse_number<double>(what, key, v);
    else if (key == "pta4_std") ckpt.stats.pta4_std = parse_number<double>(what, key, v);
    else if (key == "pta8_mean") ckpt.stats.pta8_mean = to_audiogram(key, v);
    else if (key == "pta8_std") ckpt.stats.pta8_std = to_audiogram(key, v);
    else throw FormatError("checkpoint meta: unknown key '" + key + "'");
  });
  return ckpt;
}

std::vector<Example> make_examples(const Dataset& data, std::span<const std::size_t> rows,
                                   const ModelConfig& cfg) {
  std::vector<Example> out;
  out.reserve(rows.size());
  for (auto r : rows) {
    const auto& rec = data.records.at(r);
    if (!rec.label) throw InputError("utterance '" + rec.utterance_id + "' has no label");
    out.push_back({prepare_input(data.features.at(r), cfg), &data.listener(rec.listener_id), *rec.label});
  }
  return out;
}

Var batch_loss(Graph& g, const Predictor& model, std::span<const Example> examples,
               std::span<const std::size_t> batch) {
  std::vector<Var> scores;
  Tensor truth({static_cast<Index>(batch.size())});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ex = examples[batch[i]];
    scores.push_back(model.forward(g, ex.input, *ex.listener).pooled);
    truth[static_cast<Index>(i)] = ex.label;
  }
  return rmse_loss(stack(std::span<const Var>(scores)), truth);
}

double evaluate_rmse(const Predictor& model, std::span<const Example> examples) {
  std::vector<double> pred, truth;
  for (const auto& ex : examples) {
    pred.push_back(model.predict(ex.input, *ex.listener).pooled);
    truth.push_back(ex.label);
  }
  return rmse(pred, truth);
}

Checkpoint train_fold(const Dataset& data, const Fold& fold, const ModelConfig& model_cfg,
                      const TrainConfig& train_cfg, int fold_id) {
  const auto train = data.select(fold.train);
  const auto val = data.select(fold.val);
  if (train.empty() || val.empty()) {
    throw InputError("fold " + std::to_string(fold_id) + ": no utterances in train or val split");
  }
  return train_rows(data, train, val, model_cfg, train_cfg, fold_id);
}

Checkpoint train_rows(const Dataset& data, std::span<const std::size_t> train_rows,
                      std::span<const std::size_t> val_rows, const ModelConfig& model_cfg,
                      const TrainConfig& train_cfg, int fold_id) {
  model_cfg.validate();
  train_cfg.validate();
  if (train_rows.empty() || val_rows.empty()) throw InputError("train_rows: empty split");
  const auto train = make_examples(data, train_rows, model_cfg);
  const auto val = make_examples(data, val_rows, model_cfg);

  const auto fid = static_cast<std::uint64_t>(fold_id);
  Predictor model(model_cfg, detail::derive_seed(train_cfg.seed, {fid, 0}));
  std::set<std::string> ids;
  for (auto r : train_rows) ids.insert(data.records.at(r).listener_id);
  std::vector<ListenerProfile> train_listeners;
  for (const auto& id : ids) train_listeners.push_back(data.listener(id));
  model.set_stats(ConditioningStats::fit(train_listeners));

  Checkpoint best;
  best.model = model_cfg;
  best.fold = fold_id;
  best.stats = model.stats();
  best.val_rmse = std::numeric_limits<double>::infinity();

  const auto batch = static_cast<std::size_t>(train_cfg.batch_size);
  const std::size_t batches = (train.size() + batch - 1) / batch;
  const double total_steps = static_cast<double>(batches) * train_cfg.epochs;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 order_rng(detail::derive_seed(train_cfg.seed, {fid, 1}));
  AdamState adam;

  for (int epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::span<const std::size_t> rows(order.data() + b * batch,
                                              std::min(batch, train.size() - b * batch));
      try {
        Graph g(detail::derive_seed(train_cfg.seed, {fid, 2, static_cast<std::uint64_t>(epoch), b}), true);
        const Var loss = batch_loss(g, model, train, rows);
        model.parameters().zero_grad();
        g.backward(loss);
        g.accumulate_into(model.parameters());
        std::optional<double> lr;
        if (train_cfg.cosine_schedule) {
          const double t = static_cast<double>(adam.step) / total_steps;
          lr = train_cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
        }
        adamw_step(model.parameters(), adam, train_cfg, lr);
        loss_sum += loss.value().item();
      } catch (const NumericError& e) {
        throw NumericError("fold " + std::to_string(fold_id) + " epoch " + std::to_string(epoch) +
                           " batch " + std::to_string(b + 1) + ": " + e.what());
      }
    }
    const double val_rmse = evaluate_rmse(model, val);
    best.train_loss.push_back(loss_sum / static_cast<double>(batches));
    best.val_curve.push_back(val_rmse);
    spdlog::debug("fold {} epoch {}: train loss {:.4f}, val rmse {:.4f}", fold_id, epoch,
                  best.train_loss.back(), val_rmse);
    if (val_rmse < best.val_rmse) {
      best.val_rmse = val_rmse;
      best.best_epoch = epoch;
      best.params = model.parameters();
    }
  }
  return best;
}

std::vector<Checkpoint> train_folds(const Dataset& data, const FoldPlan& plan,
                                    const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                    int jobs) {
  std::vector<Checkpoint> out(plan.folds.size());
  detail::parallel_for(plan.folds.size(), jobs, [&](std::size_t f) {
    out[f] = train_fold(data, plan.folds[f], model_cfg, train_cfg, static_cast<int>(f));
    spdlog::debug("fold {}: best epoch {}, val rmse {:.4f}", f, out[f].best_epoch, out[f].val_rmse);
  });
  return out;
}

double ensemble_mean(std::span<const double> values) {
  if (values.empty()) throw InputError("ensemble_mean: no values");
  const double x0 = values[0];
  double acc = 0.0;
  for (double x : values) acc += x - x0;
  return x0 + acc / static_cast<double>(values.size());
}

std::vector<PredictionRecord> ensemble_predict(std::span<const Checkpoint> checkpoints,
                                               const Dataset& data, int jobs) {
  if (checkpoints.empty()) throw InputError("ensemble_predict: no checkpoints");
  const ModelConfig& cfg = checkpoints[0].model;
  const std::string cfg_text = format_model_config(cfg);
  std::vector<Predictor> models;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    if (format_model_config(checkpoints[i].model) != cfg_text) {
      throw ConfigError("ensemble_predict: checkpoint " + std::to_string(i) +
                        " has a different model config");
    }
    models.emplace_back(checkpoints[i].model, checkpoints[i].params, checkpoints[i].stats);
  }

  std::vector<PredictionRecord> out(data.size());
  detail::parallel_for(data.size(), jobs, [&](std::size_t r) {
    const auto& rec = data.records[r];
    const auto input = prepare_input(data.features[r], cfg);
    const auto& listener = data.listener(rec.listener_id);
    std::vector<double> left, right, pooled;
    for (const auto& m : models) {
      const auto p = m.predict(input, listener);
      left.push_back(p.left);
      right.push_back(p.right);
      pooled.push_back(p.pooled);
    }
    out[r] = {rec.utterance_id, ensemble_mean(left), ensemble_mean(right), ensemble_mean(pooled),
              pooled};
  });
  return out;
}

}  // namespace earshot

#include "earshot/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "kv_text.hpp"
#include "parallel.hpp"

namespace earshot {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Stream tags for derive_seed.
enum : std::uint64_t { kTagListeners = 1, kTagPrototypes = 2, kTagUtterance = 3, kTagOrder = 4 };

std::string format_range(const LayerWindow& w) { return format_layer_window(w); }

std::string fixed6(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

std::string numbered(const char* prefix, Index i, int width) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%0*lld", prefix, width, static_cast<long long>(i));
  return buf;
}

std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

/// Fixed random structure shared by every utterance of one dataset.
struct Prototypes {
  std::vector<Eigen::VectorXd> speech, noise;  // per stack layer, [D]
  Eigen::VectorXd speech_spectrum, noise_spectrum;  // [128], log domain
};

Prototypes make_prototypes(const SynthSpec& spec) {
  std::mt19937_64 rng(detail::derive_seed(spec.seed, {kTagPrototypes}));
  std::normal_distribution<double> n01(0.0, 1.0);
  Prototypes p;
  for (int l = spec.layers.lo; l <= spec.layers.hi; ++l) {
    Eigen::VectorXd s(spec.feature_dim), n(spec.feature_dim);
    for (Index d = 0; d < spec.feature_dim; ++d) s[d] = n01(rng);
    for (Index d = 0; d < spec.feature_dim; ++d) n[d] = n01(rng);
    p.speech.push_back(std::move(s));
    p.noise.push_back(std::move(n));
  }
  // Smooth spectral envelopes: random walks in the log domain.
  p.speech_spectrum.resize(kMelBands);
  p.noise_spectrum.resize(kMelBands);
  double a = 0.0, b = 0.0;
  for (Index k = 0; k < kMelBands; ++k) {
    a += 0.3 * n01(rng) - 0.02;
    b += 0.3 * n01(rng);
    p.speech_spectrum[k] = a;
    p.noise_spectrum[k] = b;
  }
  return p;
}

}  // namespace

void SynthSpec::validate() const {
  if (n_utterances < 1) throw ConfigError("synth spec: n_utterances must be positive");
  for (int c : listeners) {
    if (c < 1) throw ConfigError("synth spec: listener counts must be positive");
  }
  if (n_systems < 1) throw ConfigError("synth spec: n_systems must be positive");
  if (layers.lo < 0 || layers.hi < layers.lo) throw ConfigError("synth spec: invalid layer range");
  if (planted.lo < layers.lo || planted.hi > layers.hi || planted.hi < planted.lo) {
    throw ConfigError("synth spec: planted window must lie inside the layer range");
  }
  if (min_frames < 1 || max_frames < min_frames) throw ConfigError("synth spec: invalid frame range");
  if (feature_dim != kSfmDim) throw ConfigError("synth spec: feature_dim must be 1024");
  if (!(label_noise_sd >= 0)) throw ConfigError("synth spec: label_noise_sd must be >= 0");
  if (utterances_per_scene < 1) throw ConfigError("synth spec: utterances_per_scene must be positive");
  if (!(mel_cue >= 0 && mel_cue <= 1)) throw ConfigError("synth spec: mel_cue must lie in [0, 1]");
  if (!(gain_spread >= 0)) throw ConfigError("synth spec: gain_spread must be >= 0");
  if (!(token_spread >= 0)) throw ConfigError("synth spec: token_spread must be >= 0");
}

std::string format_synth_spec(const SynthSpec& spec) {
  using detail::format_double;
  std::ostringstream out;
  out << "n_utterances = " << spec.n_utterances << "\n"
      << "listeners = " << spec.listeners[0] << "," << spec.listeners[1] << "," << spec.listeners[2] << "\n"
      << "n_systems = " << spec.n_systems << "\n"
      << "seed = " << spec.seed << "\n"
      << "backbone = " << to_string(spec.backbone) << "\n"
      << "layers = " << format_range(spec.layers) << "\n"
      << "planted = " << format_range(spec.planted) << "\n"
      << "min_frames = " << spec.min_frames << "\n"
      << "max_frames = " << spec.max_frames << "\n"
      << "feature_dim = " << spec.feature_dim << "\n"
      << "label_noise_sd = " << format_double(spec.label_noise_sd) << "\n"
      << "utterances_per_scene = " << spec.utterances_per_scene << "\n"
      << "mel_cue = " << format_double(spec.mel_cue) << "\n"
      << "gain_spread = " << format_double(spec.gain_spread) << "\n"
      << "token_spread = " << format_double(spec.token_spread) << "\n";
  return out.str();
}

SynthSpec parse_synth_spec(const std::string& text) {
  using namespace detail;
  const std::string what = "synth spec";
  SynthSpec spec;
  for_each_pair(what, text, [&](const std::string& key, const std::string& v) {
    if (key == "n_utterances") spec.n_utterances = parse_number<Index>(what, key, v);
    else if (key == "listeners") {
      const auto parts = split_list(v);
      if (parts.size() != 3) throw ConfigError("synth spec: listeners needs three counts");
      for (std::size_t i = 0; i < 3; ++i) spec.listeners[i] = parse_number<int>(what, key, parts[i]);
    } else if (key == "n_systems") spec.n_systems = parse_number<int>(what, key, v);
    else if (key == "seed") spec.seed = parse_number<std::uint64_t>(what, key, v);
    else if (key == "backbone") spec.backbone = backbone_from_string(v);
    else if (key == "layers") spec.layers = parse_layer_window(v);
    else if (key == "planted") spec.planted = parse_layer_window(v);
    else if (key == "min_frames") spec.min_frames = parse_number<Index>(what, key, v);
    else if (key == "max_frames") spec.max_frames = parse_number<Index>(what, key, v);
    else if (key == "feature_dim") spec.feature_dim = parse_number<Index>(what, key, v);
    else if (key == "label_noise_sd") spec.label_noise_sd = parse_number<double>(what, key, v);
    else if (key == "utterances_per_scene") spec.utterances_per_scene = parse_number<Index>(what, key, v);
    else if (key == "mel_cue") spec.mel_cue = parse_number<double>(what, key, v);
    else if (key == "gain_spread") spec.gain_spread = parse_number<double>(what, key, v);
    else if (key == "token_spread") spec.token_spread = parse_number<double>(what, key, v);
    else throw ConfigError("synth spec: unknown key '" + key + "'");
  });
  spec.validate();
  return spec;
}

SynthSpec load_synth_spec(const std::filesystem::path& path) {
  return parse_synth_spec(detail::read_text(path, "synth spec"));
}

double severity_penalty(Severity s) {
  switch (s) {
    case Severity::mild: return 0.0;
    case Severity::moderate: return 10.0;
    case Severity::moderatelySevere: return 20.0;
  }
  return 0.0;
}

double synth_clean_label(double clarity_left, double clarity_right, Severity s) {
  return std::clamp(100.0 * std::max(clarity_left, clarity_right) - severity_penalty(s), 0.0, 100.0);
}

std::vector<ListenerProfile> synth_listeners(const std::array<int, kSeverityClasses>& counts,
                                             std::mt19937_64& rng) {
  // Interior of each WHO class, so rounding never crosses a boundary.
  constexpr std::array<std::array<double, 2>, kSeverityClasses> pta_range = {
      {{21.0, 34.0}, {36.0, 49.0}, {51.0, 64.0}}};
  // Band offsets of a gently sloping loss; the four PTA bands average to zero.
  constexpr Audiogram slope = {-8, -5, -3, 0, 3, 8, 12, 15};
  std::vector<ListenerProfile> out;
  int next_id = 1;
  for (int c = 0; c < kSeverityClasses; ++c) {
    std::uniform_real_distribution<double> pta(pta_range[c][0], pta_range[c][1]);
    std::normal_distribution<double> jitter(0.0, 2.0);
    for (int i = 0; i < counts[static_cast<std::size_t>(c)]; ++i) {
      ListenerProfile p;
      p.listener_id = numbered("L", next_id++, 2);
      p.severity = static_cast<Severity>(c);
      const double target = pta(rng);
      for (auto* ear : {&p.audiogram_left, &p.audiogram_right}) {
        Audiogram a;
        for (std::size_t b = 0; b < 8; ++b) a[b] = target + slope[b] + jitter(rng);
        ear->emplace(a);
      }
      // Shift both ears so the PTA4 lands exactly on the target.
      const double shift = target - pta4(p);
      for (auto* ear : {&p.audiogram_left, &p.audiogram_right}) {
        for (auto& v : **ear) v = std::clamp(v + shift, -10.0, 120.0);
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

namespace {

FeatureBundle make_bundle(const SynthSpec& spec, const Prototypes& proto, Index i, SynthLatent& latent) {
  std::mt19937_64 rng(detail::derive_seed(spec.seed, {kTagUtterance, static_cast<std::uint64_t>(i)}));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);

  const Index T = std::uniform_int_distribution<Index>(spec.min_frames, spec.max_frames)(rng);
  const Index tokens = (T + kPoolFactor - 1) / kPoolFactor;
  latent.clarity_left = u01(rng);
  latent.clarity_right = u01(rng);
  auto log_uniform = [&](double spread) { return std::exp(spread * (2.0 * u01(rng) - 1.0)); };
  latent.gain = log_uniform(spec.gain_spread);
  const double g = latent.gain;
  const std::array<double, 2> noise_gain = {log_uniform(spec.gain_spread), log_uniform(spec.gain_spread)};
  const std::array<double, 2> clarity = {latent.clarity_left, latent.clarity_right};

  const Index L = spec.layers.size();
  const Index D = spec.feature_dim;
  const double spread = spec.token_spread;
  constexpr double kFrameJitter = 0.05;

  auto make_stack = [&] {
    SfmStack s;
    s.backbone = spec.backbone;
    s.layers = Tensor({L, T, D});
    for (int l = spec.layers.lo; l <= spec.layers.hi; ++l) s.layer_indices.push_back(l);
    return s;
  };
  SfmStack ref = make_stack();
  std::array<SfmStack, 2> ear = {make_stack(), make_stack()};

  Eigen::VectorXd r(D), n(D), e(D);
  for (Index l = 0; l < L; ++l) {
    const bool planted = spec.layers.lo + l >= spec.planted.lo && spec.layers.lo + l <= spec.planted.hi;
    for (Index w = 0; w < tokens; ++w) {
      for (Index d = 0; d < D; ++d) r[d] = g * (proto.speech[l][d] + spread * n01(rng));
      std::array<Eigen::VectorXd, 2> ear_tok;
      for (std::size_t s = 0; s < 2; ++s) {
        for (Index d = 0; d < D; ++d) n[d] = noise_gain[s] * (proto.noise[l][d] + spread * n01(rng));
        ear_tok[s] = planted ? Eigen::VectorXd(clarity[s] * r + (1.0 - clarity[s]) * n) : n;
      }
      for (Index t = w * kPoolFactor; t < std::min(T, (w + 1) * kPoolFactor); ++t) {
        const Index base = (l * T + t) * D;
        for (Index d = 0; d < D; ++d) ref.layers[base + d] = r[d] + kFrameJitter * n01(rng);
        for (std::size_t s = 0; s < 2; ++s) {
          for (Index d = 0; d < D; ++d) ear[s].layers[base + d] = ear_tok[s][d] + kFrameJitter * n01(rng);
        }
      }
    }
  }

  // Log-Mel energies: speech scaled by the gain, mixed with noise by clarity.
  // A nuisance draw dilutes the clarity cue according to mel_cue.
  std::vector<double> envelope(static_cast<std::size_t>(T));
  for (auto& v : envelope) v = 0.5 + u01(rng);
  auto mel_stream = [&](double speech_share, double noise_level) {
    LogMel m;
    m.frames = Tensor({T, kMelBands});
    for (Index t = 0; t < T; ++t) {
      const double noise_env = 0.5 + u01(rng);
      for (Index k = 0; k < kMelBands; ++k) {
        const double s = g * g * std::exp(proto.speech_spectrum[k]) * envelope[static_cast<std::size_t>(t)];
        const double nz = noise_level * std::exp(proto.noise_spectrum[k]) * noise_env;
        m.frames[t * kMelBands + k] = std::log(speech_share * s + (1.0 - speech_share) * nz + 1e-10) + 0.05 * n01(rng);
      }
    }
    return m;
  };

  FeatureBundle b;
  b.reference = StreamFeatures{{std::move(ref)}, mel_stream(1.0, 1.0), T, false};
  std::array<StreamFeatures*, 2> sides = {&b.left, &b.right};
  for (std::size_t s = 0; s < 2; ++s) {
    const double share = spec.mel_cue * clarity[s] + (1.0 - spec.mel_cue) * u01(rng);
    *sides[s] = StreamFeatures{{std::move(ear[s])}, mel_stream(share, noise_gain[s] * noise_gain[s]), T, false};
  }
  return b;
}

}  // namespace

FeatureBundle synth_bundle(const SynthSpec& spec, Index i, SynthLatent& latent) {
  spec.validate();
  return make_bundle(spec, make_prototypes(spec), i, latent);
}

SynthData generate_synthetic(const SynthSpec& spec, bool pooled, int jobs) {
  std::vector<FeatureBundle> features(static_cast<std::size_t>(spec.n_utterances));
  SynthData out = generate_synthetic(
      spec, [&](std::size_t i, FeatureBundle&& b) { features[i] = pooled ? pool_bundle(b) : std::move(b); },
      jobs);
  out.data.features = std::move(features);
  return out;
}

SynthData generate_synthetic(const SynthSpec& spec,
                             const std::function<void(std::size_t, FeatureBundle&&)>& sink, int jobs) {
  spec.validate();
  SynthData out;
  std::mt19937_64 lrng(detail::derive_seed(spec.seed, {kTagListeners}));
  out.data.listeners = synth_listeners(spec.listeners, lrng);

  // Listeners are dealt round-robin from a shuffled order so each gets a share.
  std::vector<std::size_t> order(out.data.listeners.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 orng(detail::derive_seed(spec.seed, {kTagOrder}));
  std::shuffle(order.begin(), order.end(), orng);

  const auto n = static_cast<std::size_t>(spec.n_utterances);
  out.data.records.resize(n);
  out.latents.resize(n);
  const int width = spec.n_utterances >= 10000 ? 6 : 5;
  const Prototypes proto = make_prototypes(spec);
  detail::parallel_for(n, jobs, [&](std::size_t i) {
    const auto idx = static_cast<Index>(i);
    SynthLatent& lat = out.latents[i];
    FeatureBundle b = make_bundle(spec, proto, idx, lat);
    const auto& listener = out.data.listeners[order[i % order.size()]];
    std::mt19937_64 rng(detail::derive_seed(spec.seed, {kTagUtterance, static_cast<std::uint64_t>(i), 1}));
    std::normal_distribution<double> noise(0.0, spec.label_noise_sd);
    std::uniform_int_distribution<int> system(1, spec.n_systems);
    lat.severity = listener.severity;
    lat.clean_label = synth_clean_label(lat.clarity_left, lat.clarity_right, lat.severity);
    auto& rec = out.data.records[i];
    rec.utterance_id = numbered("utt", idx, width);
    rec.scene_id = numbered("scene", idx / spec.utterances_per_scene, width - 1);
    rec.system_id = numbered("sys", system(rng), 2);
    rec.listener_id = listener.listener_id;
    rec.label = std::clamp(lat.clean_label + (spec.label_noise_sd > 0 ? noise(rng) : 0.0), 0.0, 100.0);
    b.utterance_id = rec.utterance_id;
    sink(i, std::move(b));
  });
  return out;
}

double pooled_rmse(std::span<const GroupStat> groups) {
  if (groups.empty()) throw InputError("pooled_rmse: no groups");
  double num = 0.0, den = 0.0;
  for (const auto& g : groups) {
    if (g.n <= 0) throw InputError("pooled_rmse: group '" + g.label + "' has no samples");
    num += static_cast<double>(g.n) * g.rmse * g.rmse;
    den += static_cast<double>(g.n);
  }
  return std::sqrt(num / den);
}

namespace {

struct Paired {
  const PredictionRecord* pred;
  const UtteranceRecord* truth;
};

std::vector<Paired> pair_up(std::span<const PredictionRecord> predictions,
                            std::span<const UtteranceRecord> truth) {
  std::map<std::string, const UtteranceRecord*> by_id;
  for (const auto& t : truth) by_id[t.utterance_id] = &t;
  std::vector<Paired> out;
  std::vector<std::string> missing;
  for (const auto& p : predictions) {
    auto it = by_id.find(p.utterance_id);
    if (it == by_id.end() || !it->second->label) {
      missing.push_back(p.utterance_id);
      continue;
    }
    out.push_back({&p, it->second});
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw InputError("no labelled truth for " + std::to_string(missing.size()) + " utterance(s): " + list);
  }
  return out;
}

template <typename Key>
StratifiedReport group_report(const std::string& name, const std::vector<Paired>& rows, Key key) {
  std::map<std::string, std::pair<double, Index>> acc;
  for (const auto& r : rows) {
    const double e = r.pred->pooled - *r.truth->label;
    auto& a = acc[key(*r.truth)];
    a.first += e * e;
    a.second += 1;
  }
  StratifiedReport rep;
  rep.name = name;
  for (const auto& [label, a] : acc) {
    rep.groups.push_back({label, std::sqrt(a.first / static_cast<double>(a.second)), a.second});
    rep.n += a.second;
  }
  rep.pooled_rmse = rep.groups.empty() ? kNaN : pooled_rmse(rep.groups);
  return rep;
}

}  // namespace

Stratification stratify(std::span<const PredictionRecord> predictions,
                        std::span<const UtteranceRecord> truth,
                        std::span<const UtteranceRecord> train) {
  const auto rows = pair_up(predictions, truth);
  std::set<std::string> systems, listeners;
  for (const auto& t : train) {
    systems.insert(t.system_id);
    listeners.insert(t.listener_id);
  }
  std::vector<Paired> a, b, c, d;
  for (const auto& r : rows) {
    (systems.count(r.truth->system_id) ? a : b).push_back(r);
    (listeners.count(r.truth->listener_id) ? c : d).push_back(r);
  }
  auto by_system = [](const UtteranceRecord& t) { return t.system_id; };
  auto by_listener = [](const UtteranceRecord& t) { return t.listener_id; };
  return {group_report("seen_systems", a, by_system), group_report("unseen_systems", b, by_system),
          group_report("seen_listeners", c, by_listener),
          group_report("unseen_listeners", d, by_listener)};
}

SceneHistogram scene_histogram(std::span<const PredictionRecord> predictions,
                               std::span<const UtteranceRecord> truth, double bin_width,
                               double tail_threshold) {
  if (!(bin_width > 0)) throw ConfigError("scene_histogram: bin width must be positive");
  const auto rows = pair_up(predictions, truth);
  for (const auto& r : rows) {
    if (r.truth->scene_id.empty()) {
      throw InputError("utterance '" + r.truth->utterance_id + "' has no scene id");
    }
  }
  SceneHistogram h;
  h.bin_width = bin_width;
  h.tail_threshold = tail_threshold;
  h.scenes = group_report("scenes", rows, [](const UtteranceRecord& t) { return t.scene_id; }).groups;
  Index above = 0;
  for (const auto& s : h.scenes) {
    const auto bin = static_cast<std::size_t>(std::floor(s.rmse / bin_width));
    if (h.counts.size() <= bin) h.counts.resize(bin + 1, 0);
    ++h.counts[bin];
    if (s.rmse > tail_threshold) ++above;
  }
  h.tail_share = h.scenes.empty() ? 0.0 : static_cast<double>(above) / static_cast<double>(h.scenes.size());
  return h;
}

double overall_rmse(std::span<const PredictionRecord> predictions,
                    std::span<const UtteranceRecord> truth) {
  const auto rows = pair_up(predictions, truth);
  std::vector<double> p, t;
  for (const auto& r : rows) {
    p.push_back(r.pred->pooled);
    t.push_back(*r.truth->label);
  }
  return rmse(p, t);
}

void SweepSpec::validate() const {
  if (window_size != 1 && window_size != 4) throw ConfigError("sweep spec: window_size must be 1 or 4");
  if (setups.empty()) throw ConfigError("sweep spec: no setups");
  if (window_size == 1 && std::count(setups.begin(), setups.end(), Readout::severityToken)) {
    throw ConfigError("sweep spec: setup A is not swept with window_size 1");
  }
  if (folds < 1 || folds > 5) throw ConfigError("sweep spec: folds must lie in [1, 5]");
  if (model.backbones.size() != 1) throw ConfigError("sweep spec: sweeps take a single backbone");
  for (const auto& w : candidates()) {
    if (w.size() != window_size) {
      throw ConfigError("sweep spec: window " + format_layer_window(w) + " does not have size " +
                        std::to_string(window_size));
    }
  }
  model.validate();
  train.validate();
}

std::vector<LayerWindow> SweepSpec::candidates() const {
  if (!windows.empty()) return windows;
  std::vector<LayerWindow> out;
  for (int lo = layer_range.lo; lo + window_size - 1 <= layer_range.hi; lo += window_size) {
    out.push_back({lo, lo + window_size - 1});
  }
  return out;
}

SweepSpec parse_sweep_spec(const std::string& text) {
  using namespace detail;
  const std::string what = "sweep spec";
  SweepSpec spec;
  std::string model_text, train_text;
  for_each_pair(what, text, [&](const std::string& key, const std::string& v) {
    if (key.rfind("model.", 0) == 0) model_text += key.substr(6) + " = " + v + "\n";
    else if (key.rfind("train.", 0) == 0) train_text += key.substr(6) + " = " + v + "\n";
    else if (key == "window_size") spec.window_size = parse_number<int>(what, key, v);
    else if (key == "windows") {
      for (const auto& w : split_list(v)) spec.windows.push_back(parse_layer_window(w));
    } else if (key == "layer_range") spec.layer_range = parse_layer_window(v);
    else if (key == "setups") {
      spec.setups.clear();
      for (const auto& s : split_list(v)) spec.setups.push_back(readout_from_string(s));
    } else if (key == "folds") spec.folds = parse_number<int>(what, key, v);
    else throw ConfigError("sweep spec: unknown key '" + key + "'");
  });
  spec.model = parse_model_config(model_text);
  spec.train = parse_train_config(train_text);
  spec.validate();
  return spec;
}

SweepSpec load_sweep_spec(const std::filesystem::path& path) {
  return parse_sweep_spec(detail::read_text(path, "sweep spec"));
}

SweepResult run_sweep(const SweepSpec& spec, const Dataset& data, int jobs) {
  spec.validate();
  data.validate();
  if (data.features.empty()) throw InputError("run_sweep: empty dataset");
  const Backbone bb = spec.model.backbones.front();
  const auto windows = spec.candidates();
  for (const auto& f : data.features) {
    for (const StreamFeatures* s : {&f.left, &f.right}) {
      auto it = std::find_if(s->sfm.begin(), s->sfm.end(), [&](const SfmStack& st) { return st.backbone == bb; });
      if (it == s->sfm.end()) throw InputError("run_sweep: '" + f.utterance_id + "' lacks backbone " + to_string(bb));
      for (const auto& w : windows) {
        for (int l = w.lo; l <= w.hi; ++l) {
          if (std::find(it->layer_indices.begin(), it->layer_indices.end(), l) == it->layer_indices.end()) {
            throw InputError("run_sweep: '" + f.utterance_id + "' lacks layer " + std::to_string(l) +
                             " needed by window " + format_layer_window(w));
          }
        }
      }
    }
  }

  const FoldPlan plan = make_folds(data.listeners, 5, spec.train.seed);
  SweepResult result;
  for (const auto& w : windows) {
    for (auto s : spec.setups) result.cells.push_back({w, s, kNaN, {}});
  }
  detail::parallel_for(result.cells.size(), jobs, [&](std::size_t i) {
    auto& cell = result.cells[i];
    ModelConfig cfg = spec.model;
    cfg.readout = cell.setup;
    cfg.layer_windows = {cell.window};
    try {
      double sum = 0.0;
      for (int f = 0; f < spec.folds; ++f) {
        sum += train_fold(data, plan.folds[static_cast<std::size_t>(f)], cfg, spec.train, f).val_rmse;
      }
      cell.val_rmse = sum / spec.folds;
      spdlog::debug("sweep {} {}: val rmse {:.4f}", format_layer_window(cell.window),
                   setup_letter(cell.setup), cell.val_rmse);
    } catch (const Error& e) {
      cell.error = e.what();
      spdlog::warn("sweep {} {} failed: {}", format_layer_window(cell.window), setup_letter(cell.setup),
                   e.what());
    }
  });
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < result.cells.size(); ++i) {
    if (!std::isnan(result.cells[i].val_rmse) && result.cells[i].val_rmse < best) {
      best = result.cells[i].val_rmse;
      result.argmin = i;
    }
  }
  if (std::isinf(best)) throw NumericError("run_sweep: every cell failed");
  return result;
}

void write_predictions_csv(const std::filesystem::path& path,
                           std::span<const PredictionRecord> records, bool per_checkpoint) {
  auto out = open_csv(path);
  const std::size_t k = per_checkpoint && !records.empty() ? records[0].per_checkpoint.size() : 0;
  out << "utterance_id,sL,sR,pooled";
  for (std::size_t j = 0; j < k; ++j) out << ",ckpt" << j;
  out << "\n";
  for (const auto& r : records) {
    out << r.utterance_id << "," << fixed6(r.left) << "," << fixed6(r.right) << "," << fixed6(r.pooled);
    for (std::size_t j = 0; j < k; ++j) out << "," << fixed6(r.per_checkpoint.at(j));
    out << "\n";
  }
}

std::vector<PredictionRecord> read_predictions_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open predictions " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("utterance_id,sL,sR,pooled", 0) != 0) {
    throw FormatError(path.string() + ": unexpected header '" + line + "'");
  }
  std::vector<PredictionRecord> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(detail::trim(c));
    if (cells.size() < 4) throw FormatError(path.string() + " line " + std::to_string(line_no) + ": too few columns");
    const std::string where = path.string() + " line " + std::to_string(line_no);
    PredictionRecord r;
    r.utterance_id = cells[0];
    r.left = detail::parse_number<double>(where, "sL", cells[1]);
    r.right = detail::parse_number<double>(where, "sR", cells[2]);
    r.pooled = detail::parse_number<double>(where, "pooled", cells[3]);
    for (std::size_t j = 4; j < cells.size(); ++j) r.per_checkpoint.push_back(detail::parse_number<double>(where, "ckpt", cells[j]));
    out.push_back(std::move(r));
  }
  return out;
}

void write_sweep_csv(const std::filesystem::path& path, const SweepResult& result) {
  auto out = open_csv(path);
  out << "window,layers,setup,val_rmse,argmin,error\n";
  for (std::size_t i = 0; i < result.cells.size(); ++i) {
    const auto& c = result.cells[i];
    std::string err = c.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << format_layer_window(c.window) << "," << layer_label(c.window.lo) << "-" << layer_label(c.window.hi)
        << "," << setup_letter(c.setup) << "," << fixed6(c.val_rmse) << "," << (i == result.argmin ? 1 : 0)
        << "," << err << "\n";
  }
}

void write_stratified_csv(const std::filesystem::path& path, const Stratification& s) {
  auto out = open_csv(path);
  out << "group,identity,rmse,n\n";
  for (const auto* rep : {&s.seen_systems, &s.unseen_systems, &s.seen_listeners, &s.unseen_listeners}) {
    for (const auto& g : rep->groups) out << rep->name << "," << g.label << "," << fixed6(g.rmse) << "," << g.n << "\n";
    out << rep->name << ",pooled," << fixed6(rep->pooled_rmse) << "," << rep->n << "\n";
  }
}

void write_histogram_csv(const std::filesystem::path& path, const SceneHistogram& h) {
  auto out = open_csv(path);
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t k = 0; k < h.counts.size(); ++k) {
    out << fixed6(static_cast<double>(k) * h.bin_width) << "," << fixed6(static_cast<double>(k + 1) * h.bin_width)
        << "," << h.counts[k] << "\n";
  }
}

}  // namespace earshot

#include "earshot/model.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "earshot/init.hpp"
#include "earshot/ops.hpp"
#include "kv_text.hpp"

namespace earshot {

namespace {

struct Branch {
  Index kernel;
  Index dilation;
};
constexpr std::array<Branch, 3> kBranches = {{{3, 1}, {5, 2}, {9, 4}}};

void add_linear(ParameterStore& store, const std::string& prefix, Index in, Index out,
                std::mt19937_64& rng) {
  store.add(prefix + ".w", uniform_fan_in({in, out}, in, rng));
  store.add(prefix + ".b", uniform_fan_in({out}, in, rng));
}

Var apply_linear(Graph& g, const ParameterStore& store, const Var& x, const std::string& prefix) {
  return linear(x, g.param(store, prefix + ".w"), g.param(store, prefix + ".b"));
}

bool has_layer_cls(const ModelConfig& cfg) {
  return cfg.readout == Readout::clsPool || cfg.conditioning == ConditioningMode::none;
}

Mask with_extra(Mask m, std::size_t extra) {
  m.insert(m.end(), extra, 1);
  return m;
}

Mask prefix_mask(Index n, Index valid) {
  Mask m(static_cast<std::size_t>(n), 0);
  std::fill(m.begin(), m.begin() + std::min(n, valid), 1);
  return m;
}

// Rethrows with the failing stage prefixed, preserving the error type.
template <typename Fn>
auto in_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
  auto wrap = [stage](const std::exception& e) { return std::string(stage) + ": " + e.what(); };
  try {
    return fn();
  } catch (const DimensionError& e) {
    throw DimensionError(wrap(e));
  } catch (const ConfigError& e) {
    throw ConfigError(wrap(e));
  } catch (const PreconditionError& e) {
    throw PreconditionError(wrap(e));
  } catch (const InputError& e) {
    throw InputError(wrap(e));
  } catch (const NumericError& e) {
    throw NumericError(wrap(e));
  } catch (const FormatError& e) {
    throw FormatError(wrap(e));
  }
}

// Pools the first `valid` frames and zero-pads to ceil(total / 8) tokens.
SfmStack pool_valid(const SfmStack& stack, Index valid) {
  const Index l = stack.num_layers(), t = stack.num_frames(), d = stack.layers.extent(2);
  const Index tokens = (t + kPoolFactor - 1) / kPoolFactor;
  SfmStack truncated{stack.backbone, Tensor({l, valid, d}), stack.layer_indices};
  for (Index li = 0; li < l; ++li) {
    std::copy(stack.layers.raw() + li * t * d, stack.layers.raw() + (li * t + valid) * d,
              truncated.layers.raw() + li * valid * d);
  }
  SfmStack pooled = temporal_pool_x8(truncated);
  const Index have = pooled.num_frames();
  if (have == tokens) return pooled;
  SfmStack out{stack.backbone, Tensor({l, tokens, d}), stack.layer_indices};
  for (Index li = 0; li < l; ++li) {
    std::copy(pooled.layers.raw() + li * have * d, pooled.layers.raw() + (li + 1) * have * d,
              out.layers.raw() + li * tokens * d);
  }
  return out;
}

StreamInput prepare_stream(const StreamFeatures& s, const ModelConfig& cfg, const char* name) {
  const Index t = s.mel.num_frames();
  if (s.mel.frames.rank() != 2 || s.mel.frames.extent(1) != kMelBands) {
    throw DimensionError(std::string(name) + ": log-Mel must be [T,128], got " +
                         shape_string(s.mel.frames.shape()));
  }
  const Index valid = s.valid_frames > 0 ? s.valid_frames : t;
  if (valid > t) {
    throw InputError(std::string(name) + ": valid_frames " + std::to_string(valid) +
                     " exceeds " + std::to_string(t) + " log-Mel frames");
  }
  const Index tokens = (t + kPoolFactor - 1) / kPoolFactor;

  std::vector<SfmStack> selected;
  for (std::size_t b = 0; b < cfg.backbones.size(); ++b) {
    auto it = std::find_if(s.sfm.begin(), s.sfm.end(),
                           [&](const SfmStack& st) { return st.backbone == cfg.backbones[b]; });
    if (it == s.sfm.end()) {
      throw InputError(std::string(name) + ": no SFM stack for backbone " +
                       to_string(cfg.backbones[b]));
    }
    SfmStack chosen = select_layers(*it, cfg.layer_windows[b]);
    if (s.sfm_pooled) {
      if (chosen.num_frames() != tokens) {
        throw InputError(std::string(name) + ": pooled SFM has " +
                         std::to_string(chosen.num_frames()) + " tokens, expected " +
                         std::to_string(tokens));
      }
    } else {
      if (chosen.num_frames() != t) {
        throw InputError(std::string(name) + ": SFM has " + std::to_string(chosen.num_frames()) +
                         " frames but log-Mel has " + std::to_string(t));
      }
      chosen = pool_valid(chosen, valid);
    }
    selected.push_back(std::move(chosen));
  }

  Index layers = 0;
  for (const auto& st : selected) layers += st.num_layers();
  StreamInput out;
  out.sfm = Tensor({layers, tokens, kSfmDim});
  Index offset = 0;
  for (const auto& st : selected) {
    std::copy(st.layers.raw(), st.layers.raw() + st.layers.size(), out.sfm.raw() + offset);
    offset += st.layers.size();
  }
  out.token_valid = prefix_mask(tokens, (valid + kPoolFactor - 1) / kPoolFactor);
  out.mel = cfg.logmel_norm ? normalize_log_mel(s.mel.frames, valid) : s.mel.frames;
  out.mel.matrix().bottomRows(t - valid).setZero();
  out.frame_valid = prefix_mask(t, valid);
  return out;
}

}  // namespace

std::string to_string(Readout r) {
  switch (r) {
    case Readout::severityToken: return "severityToken";
    case Readout::meanPool: return "meanPool";
    case Readout::clsPool: return "clsPool";
  }
  return "unknown";
}

Readout readout_from_string(const std::string& s) {
  if (s == "severityToken" || s == "A") return Readout::severityToken;
  if (s == "meanPool" || s == "B") return Readout::meanPool;
  if (s == "clsPool" || s == "C") return Readout::clsPool;
  throw ConfigError("unknown readout '" + s + "'");
}

char setup_letter(Readout r) {
  switch (r) {
    case Readout::severityToken: return 'A';
    case Readout::meanPool: return 'B';
    case Readout::clsPool: return 'C';
  }
  return '?';
}

std::string to_string(EarPooling p) {
  return p == EarPooling::bestEarLSE ? "bestEarLSE" : "averageEarFeature";
}

EarPooling ear_pooling_from_string(const std::string& s) {
  if (s == "bestEarLSE") return EarPooling::bestEarLSE;
  if (s == "averageEarFeature") return EarPooling::averageEarFeature;
  throw ConfigError("unknown ear pooling '" + s + "'");
}

void ModelConfig::validate() const {
  attention().validate();
  if (!(beta > 0)) throw ConfigError("beta must be positive");
  if (mscnn_channels < 3 || mscnn_channels % 3 != 0) {
    throw ConfigError("mscnn_channels must be a positive multiple of 3, got " +
                      std::to_string(mscnn_channels));
  }
  if (backbones.empty()) throw ConfigError("at least one backbone is required");
  if (backbones.size() != layer_windows.size()) {
    throw ConfigError("backbones and layer_windows must have the same length");
  }
  for (std::size_t i = 0; i < backbones.size(); ++i) {
    for (std::size_t j = i + 1; j < backbones.size(); ++j) {
      if (backbones[i] == backbones[j]) throw ConfigError("backbone listed twice");
    }
    const auto& w = layer_windows[i];
    if (w.lo < 0 || w.hi < w.lo) {
      throw ConfigError("invalid layer window " + format_layer_window(w));
    }
  }
  if (readout == Readout::severityToken && conditioning == ConditioningMode::none) {
    throw ConfigError("readout severityToken needs a conditioning token (conditioning != none)");
  }
  if (ref_time_window != 0) {
    throw ConfigError("ref_time_window is reserved; only 0 (full-time attention) is supported");
  }
}

Index ModelConfig::total_layers() const {
  Index n = 0;
  for (const auto& w : layer_windows) n += w.size();
  return n;
}

std::string format_model_config(const ModelConfig& cfg) {
  std::ostringstream out;
  std::string backbones, windows;
  for (std::size_t i = 0; i < cfg.backbones.size(); ++i) {
    backbones += (i ? "," : "") + to_string(cfg.backbones[i]);
    windows += (i ? "," : "") + format_layer_window(cfg.layer_windows[i]);
  }
  out << "d_model = " << cfg.d_model << "\n"
      << "n_heads = " << cfg.n_heads << "\n"
      << "backbones = " << backbones << "\n"
      << "layer_windows = " << windows << "\n"
      << "readout = " << to_string(cfg.readout) << "\n"
      << "conditioning = " << to_string(cfg.conditioning) << "\n"
      << "ear_pooling = " << to_string(cfg.ear_pooling) << "\n"
      << "beta = " << detail::format_double(cfg.beta) << "\n"
      << "use_reference = " << (cfg.use_reference ? "true" : "false") << "\n"
      << "dropout_p = " << detail::format_double(cfg.dropout_p) << "\n"
      << "mscnn_channels = " << cfg.mscnn_channels << "\n"
      << "ffn_mult = " << cfg.ffn_mult << "\n"
      << "positional_encoding = " << (cfg.positional_encoding ? "true" : "false") << "\n"
      << "ref_time_window = " << cfg.ref_time_window << "\n"
      << "logmel_norm = " << (cfg.logmel_norm ? "true" : "false") << "\n";
  return out.str();
}

ModelConfig parse_model_config(const std::string& text) {
  using namespace detail;
  const std::string what = "model config";
  ModelConfig cfg;
  for_each_pair(what, text, [&](const std::string& key, const std::string& v) {
    if (key == "d_model") cfg.d_model = parse_number<Index>(what, key, v);
    else if (key == "n_heads") cfg.n_heads = parse_number<Index>(what, key, v);
    else if (key == "backbones") {
      cfg.backbones.clear();
      for (const auto& b : split_list(v)) cfg.backbones.push_back(backbone_from_string(b));
    } else if (key == "layer_windows" || key == "layer_window") {
      cfg.layer_windows.clear();
      for (const auto& w : split_list(v)) cfg.layer_windows.push_back(parse_layer_window(w));
    } else if (key == "readout") cfg.readout = readout_from_string(v);
    else if (key == "conditioning") cfg.conditioning = conditioning_mode_from_string(v);
    else if (key == "ear_pooling") cfg.ear_pooling = ear_pooling_from_string(v);
    else if (key == "beta") cfg.beta = parse_number<double>(what, key, v);
    else if (key == "use_reference") cfg.use_reference = parse_bool(what, key, v);
    else if (key == "dropout_p") cfg.dropout_p = parse_number<double>(what, key, v);
    else if (key == "mscnn_channels") cfg.mscnn_channels = parse_number<Index>(what, key, v);
    else if (key == "ffn_mult") cfg.ffn_mult = parse_number<Index>(what, key, v);
    else if (key == "positional_encoding") cfg.positional_encoding = parse_bool(what, key, v);
    else if (key == "ref_time_window") cfg.ref_time_window = parse_number<Index>(what, key, v);
    else if (key == "logmel_norm") cfg.logmel_norm = parse_bool(what, key, v);
    else throw ConfigError("model config: unknown key '" + key + "'");
  });
  cfg.validate();
  return cfg;
}

ModelConfig load_model_config(const std::filesystem::path& path) {
  return parse_model_config(detail::read_text(path, "model config"));
}

void save_model_config(const std::filesystem::path& path, const ModelConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write model config " + path.string());
  out << format_model_config(cfg);
}

StreamFeatures pool_stream(const StreamFeatures& stream) {
  if (stream.sfm_pooled) return stream;
  const Index t = stream.mel.num_frames();
  const Index valid = stream.valid_frames > 0 ? stream.valid_frames : t;
  StreamFeatures out;
  out.mel = stream.mel;
  out.valid_frames = valid;
  out.sfm_pooled = true;
  for (const auto& st : stream.sfm) {
    st.validate();
    if (st.num_frames() != t) {
      throw InputError("SFM stack has " + std::to_string(st.num_frames()) +
                       " frames but log-Mel has " + std::to_string(t));
    }
    out.sfm.push_back(pool_valid(st, valid));
  }
  return out;
}

FeatureBundle pool_bundle(const FeatureBundle& bundle) {
  FeatureBundle out{bundle.utterance_id, pool_stream(bundle.left), pool_stream(bundle.right),
                    std::nullopt};
  if (bundle.reference) out.reference = pool_stream(*bundle.reference);
  return out;
}

ModelInput prepare_input(const FeatureBundle& bundle, const ModelConfig& cfg) {
  ModelInput in;
  in.utterance_id = bundle.utterance_id;
  in.left = prepare_stream(bundle.left, cfg, "left");
  in.right = prepare_stream(bundle.right, cfg, "right");
  if (cfg.use_reference) {
    if (!bundle.reference) {
      throw InputError("utterance '" + bundle.utterance_id + "' has no reference stream");
    }
    in.reference = prepare_stream(*bundle.reference, cfg, "reference");
  }
  return in;
}

void register_model(ParameterStore& store, const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const Index d = cfg.d_model, c = cfg.mscnn_channels / 3;
  const AttentionConfig att = cfg.attention();
  for (std::size_t i = 0; i < kBranches.size(); ++i) {
    const auto k = kBranches[i].kernel;
    const std::string p = "mscnn.b" + std::to_string(i);
    store.add(p + ".w", uniform_fan_in({k, kMelBands, c}, k * kMelBands, rng));
    store.add(p + ".b", uniform_fan_in({c}, k * kMelBands, rng));
  }
  add_linear(store, "mscnn.out", cfg.mscnn_channels, d, rng);
  add_linear(store, "sfm_proj", kSfmDim, d, rng);
  register_cross_attention_block(store, "fusion", att, rng);
  register_cross_attention_block(store, "temporal.self", att, rng);
  if (cfg.use_reference) register_cross_attention_block(store, "temporal.xref", att, rng);
  if (cfg.readout == Readout::clsPool) store.add("temporal.cls", normal_init({d}, 0.02, rng));
  register_cross_attention_block(store, "layer.self", att, rng);
  if (cfg.use_reference) register_cross_attention_block(store, "layer.xref", att, rng);
  register_cross_attention_block(store, "xear", att, rng);
  register_conditioning(store, cfg.conditioning, d, rng);
  if (has_layer_cls(cfg)) register_generic_cls(store, d, rng);
  add_linear(store, "head.l1", d, d, rng);
  add_linear(store, "head.l2", d, 1, rng);
}

Index backbone_parameter_count(const ParameterStore& store) {
  return store.parameter_count() - store.parameter_count("cond.");
}

Var mscnn(Graph& g, const ParameterStore& store, const Var& mel, const ModelConfig& cfg) {
  if (mel.value().rank() != 2 || mel.extent(1) != kMelBands) {
    throw DimensionError("mscnn expects [T,128], got " + shape_string(mel.shape()));
  }
  if (cfg.mscnn_channels % 3 != 0) throw ConfigError("mscnn_channels must be divisible by 3");
  std::vector<Var> branches;
  for (std::size_t i = 0; i < kBranches.size(); ++i) {
    const std::string p = "mscnn.b" + std::to_string(i);
    branches.push_back(silu(conv1d_dilated(mel, g.param(store, p + ".w"),
                                           g.param(store, p + ".b"), kBranches[i].dilation)));
  }
  return apply_linear(g, store, concat(std::span<const Var>(branches), 1), "mscnn.out");
}

Var fuse_sfm_mscnn(Graph& g, const ParameterStore& store, const Var& sfm_tokens,
                   const Var& mscnn_feats, const Mask& frame_valid, const ModelConfig& cfg) {
  const Index t = mscnn_feats.extent(0);
  const Index expect = (t + kPoolFactor - 1) / kPoolFactor;
  if (sfm_tokens.extent(0) != expect) {
    throw DimensionError("fusion: " + std::to_string(sfm_tokens.extent(0)) +
                         " SFM tokens for " + std::to_string(t) + " frames (expected " +
                         std::to_string(expect) + ")");
  }
  Var q = sfm_tokens.extent(-1) == kSfmDim ? apply_linear(g, store, sfm_tokens, "sfm_proj")
                                           : sfm_tokens;
  Var kv = mscnn_feats;
  if (cfg.positional_encoding) {
    q = add(q, g.constant(sinusoidal_positions(q.extent(0), cfg.d_model)));
    kv = add(kv, g.constant(sinusoidal_positions(t, cfg.d_model)));
  }
  const auto p = bind_cross_attention_block(g, store, "fusion");
  return cross_attention_block(q, kv, kv, key_mask(q.extent(0), frame_valid), p, cfg.attention());
}

std::vector<Var> fuse_stream(Graph& g, const ParameterStore& store, const StreamInput& in,
                             const ModelConfig& cfg) {
  const Index layers = in.sfm.extent(0), tokens = in.sfm.extent(1);
  const Var feats = mscnn(g, store, g.constant(in.mel), cfg);
  // One projection for every layer at once; fusion then runs per layer.
  const Var projected = apply_linear(g, store, g.constant(in.sfm), "sfm_proj");
  std::vector<Var> out;
  out.reserve(static_cast<std::size_t>(layers));
  for (Index l = 0; l < layers; ++l) {
    const Var tok = layers == 1 ? reshape(projected, Shape{tokens, cfg.d_model})
                                : reshape(slice(projected, 0, l, 1), Shape{tokens, cfg.d_model});
    out.push_back(fuse_sfm_mscnn(g, store, tok, feats, in.frame_valid, cfg));
  }
  return out;
}

EncodedStream temporal_encode(Graph& g, const ParameterStore& store,
                              const std::vector<Var>& fused, const Mask& token_valid,
                              const ModelConfig& cfg) {
  const bool cls = cfg.readout == Readout::clsPool;
  EncodedStream out;
  out.valid = cls ? with_extra(token_valid, 1) : token_valid;
  const Index n = static_cast<Index>(out.valid.size());
  const Mask mask = key_mask(n, out.valid);
  const auto p = bind_cross_attention_block(g, store, "temporal.self");
  for (const Var& x : fused) {
    Var seq = x;
    if (cls) {
      seq = concat({x, reshape(g.param(store, "temporal.cls"), Shape{1, cfg.d_model})}, 0);
    }
    out.layers.push_back(self_encoder_depth1(seq, mask, p, cfg.attention()));
  }
  return out;
}

Var temporal_summarize(Graph& g, const ParameterStore& store, const EncodedStream& stream,
                       const EncodedStream* reference, const ModelConfig& cfg) {
  const bool cls = cfg.readout == Readout::clsPool;
  if (reference && reference->layers.size() != stream.layers.size()) {
    throw DimensionError("temporal stage: reference has " +
                         std::to_string(reference->layers.size()) + " layers, ear has " +
                         std::to_string(stream.layers.size()));
  }
  std::vector<Var> rows;
  rows.reserve(stream.layers.size());
  for (std::size_t l = 0; l < stream.layers.size(); ++l) {
    Var x = stream.layers[l];
    if (reference) {
      const auto p = bind_cross_attention_block(g, store, "temporal.xref");
      const Var& r = reference->layers[l];
      x = cross_attention_block(x, r, r, key_mask(x.extent(0), reference->valid), p,
                                cfg.attention());
    }
    rows.push_back(cls ? slice(x, 0, x.extent(0) - 1, 1)
                       : reshape(masked_mean(x, stream.valid), Shape{1, cfg.d_model}));
  }
  return rows.size() == 1 ? rows.front() : concat(std::span<const Var>(rows), 0);
}

LayerStageOutput layer_stage(Graph& g, const ParameterStore& store, const Var& left,
                             const Var& right, const std::optional<Var>& reference,
                             const Var& cond_token, const ModelConfig& cfg) {
  const Index layers = left.extent(0), d = cfg.d_model;
  if (layers < 1 || right.extent(0) != layers) {
    throw DimensionError("layer stage: ears carry " + std::to_string(layers) + " and " +
                         std::to_string(right.extent(0)) + " layer rows");
  }
  std::vector<Var> extra;
  if (cfg.conditioning != ConditioningMode::none) extra.push_back(reshape(cond_token, Shape{1, d}));
  if (has_layer_cls(cfg)) extra.push_back(reshape(g.param(store, "cond.cls"), Shape{1, d}));
  auto assemble = [&](const Var& rows) {
    std::vector<Var> parts{rows};
    parts.insert(parts.end(), extra.begin(), extra.end());
    return parts.size() == 1 ? rows : concat(std::span<const Var>(parts), 0);
  };
  const AttentionConfig att = cfg.attention();
  const auto self = bind_cross_attention_block(g, store, "layer.self");
  Var l = self_encoder_depth1(assemble(left), {}, self, att);
  Var r = self_encoder_depth1(assemble(right), {}, self, att);
  if (reference) {
    const Var ref = self_encoder_depth1(assemble(*reference), {}, self, att);
    const auto xref = bind_cross_attention_block(g, store, "layer.xref");
    l = cross_attention_block(l, ref, ref, {}, xref, att);
    r = cross_attention_block(r, ref, ref, {}, xref, att);
  }
  const auto xear = bind_cross_attention_block(g, store, "xear");
  const Var l2 = cross_attention_block(l, r, r, {}, xear, att);
  const Var r2 = cross_attention_block(r, l, l, {}, xear, att);

  auto readout = [&](const Var& seq) {
    switch (cfg.readout) {
      case Readout::severityToken: return row(seq, layers);
      case Readout::meanPool:
        return layers == 1 ? row(seq, 0)
                           : masked_mean(slice(seq, 0, 0, layers),
                                         Mask(static_cast<std::size_t>(layers), 1));
      case Readout::clsPool: return row(seq, seq.extent(0) - 1);
    }
    throw ConfigError("unhandled readout");
  };
  return {l2, r2, readout(l2), readout(r2)};
}

Var score_head(Graph& g, const ParameterStore& store, const Var& readout) {
  const Var h = silu(apply_linear(g, store, readout, "head.l1"));
  const Var logit = apply_linear(g, store, h, "head.l2");
  return reshape(scale(sigmoid(logit), 100.0), Shape{});
}

Var average_ear_pool(Graph& g, const ParameterStore& store, const Var& left_readout,
                     const Var& right_readout) {
  if (left_readout.shape() != right_readout.shape()) {
    throw DimensionError("average_ear_pool: readouts differ in shape");
  }
  return score_head(g, store, scale(add(left_readout, right_readout), 0.5));
}

Predictor::Predictor(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  std::mt19937_64 rng(seed);
  register_model(store_, cfg_, rng);
}

Predictor::Predictor(ModelConfig cfg, ParameterStore params, ConditioningStats stats)
    : cfg_(std::move(cfg)), stats_(stats) {
  std::mt19937_64 rng(0);
  register_model(store_, cfg_, rng);
  store_.assign_values(params);
}

ModelOutput Predictor::forward(Graph& g, const ModelInput& in,
                               const ListenerProfile& listener) const {
  if (cfg_.use_reference && !in.reference) {
    throw InputError("forward: reference stream required by the model config");
  }
  const Index layers = cfg_.total_layers();
  for (const StreamInput* s : {&in.left, &in.right}) {
    if (s->sfm.extent(0) != layers) {
      throw DimensionError("forward: input has " + std::to_string(s->sfm.extent(0)) +
                           " layers, config selects " + std::to_string(layers));
    }
  }

  struct Fused {
    std::vector<Var> left, right, reference;
  } fused = in_stage("fusion", [&] {
    Fused f{fuse_stream(g, store_, in.left, cfg_), fuse_stream(g, store_, in.right, cfg_), {}};
    if (cfg_.use_reference) f.reference = fuse_stream(g, store_, *in.reference, cfg_);
    return f;
  });

  struct Summaries {
    Var left, right;
    std::optional<Var> reference;
  } sums = in_stage("temporal", [&] {
    const auto el = temporal_encode(g, store_, fused.left, in.left.token_valid, cfg_);
    const auto er = temporal_encode(g, store_, fused.right, in.right.token_valid, cfg_);
    if (!cfg_.use_reference) {
      return Summaries{temporal_summarize(g, store_, el, nullptr, cfg_),
                       temporal_summarize(g, store_, er, nullptr, cfg_), std::nullopt};
    }
    const auto ref = temporal_encode(g, store_, fused.reference, in.reference->token_valid, cfg_);
    return Summaries{temporal_summarize(g, store_, el, &ref, cfg_),
                     temporal_summarize(g, store_, er, &ref, cfg_),
                     temporal_summarize(g, store_, ref, nullptr, cfg_)};
  });

  const Var token = in_stage("conditioning", [&] {
    return conditioning_token(g, store_, listener, cfg_.conditioning, stats_);
  });

  ModelOutput out;
  out.layers = in_stage("layer", [&] {
    return layer_stage(g, store_, sums.left, sums.right, sums.reference, token, cfg_);
  });
  in_stage("head", [&] {
    out.left = score_head(g, store_, out.layers.readout_left);
    out.right = score_head(g, store_, out.layers.readout_right);
    out.pooled = cfg_.ear_pooling == EarPooling::bestEarLSE
                     ? best_ear_pool(out.left, out.right, cfg_.beta)
                     : average_ear_pool(g, store_, out.layers.readout_left,
                                        out.layers.readout_right);
    return 0;
  });
  return out;
}

Prediction Predictor::predict(const ModelInput& in, const ListenerProfile& listener) const {
  Graph g(0, false);
  const auto out = forward(g, in, listener);
  return {out.left.value().item(), out.right.value().item(), out.pooled.value().item()};
}

}  // namespace earshot

#include "earshot/attention.hpp"

#include <cmath>
#include <vector>

#include "earshot/init.hpp"

namespace earshot {

namespace {

void add_linear(ParameterStore& store, const std::string& w, const std::string& b, Index in,
                Index out, std::mt19937_64& rng) {
  store.add(w, uniform_fan_in({in, out}, in, rng));
  store.add(b, uniform_fan_in({out}, in, rng));
}

}  // namespace

void AttentionConfig::validate() const {
  if (d_model < 1 || n_heads < 1) throw ConfigError("attention: d_model and n_heads must be positive");
  if (d_model % n_heads != 0) {
    throw ConfigError("attention: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (dropout_p < 0 || dropout_p >= 1) throw ConfigError("attention: dropout_p must lie in [0,1)");
  if (ffn_mult < 1) throw ConfigError("attention: ffn_mult must be positive");
}

void register_cross_attention_block(ParameterStore& store, const std::string& prefix,
                                    const AttentionConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const Index d = cfg.d_model, h = cfg.ffn_hidden();
  add_linear(store, prefix + ".wq", prefix + ".bq", d, d, rng);
  add_linear(store, prefix + ".wk", prefix + ".bk", d, d, rng);
  add_linear(store, prefix + ".wv", prefix + ".bv", d, d, rng);
  add_linear(store, prefix + ".wo", prefix + ".bo", d, d, rng);
  store.add(prefix + ".norm1.gain", Tensor::constant({d}, 1.0));
  store.add(prefix + ".norm1.bias", Tensor({d}));
  add_linear(store, prefix + ".ffn.in.w", prefix + ".ffn.in.b", d, 2 * h, rng);
  add_linear(store, prefix + ".ffn.out.w", prefix + ".ffn.out.b", h, d, rng);
  store.add(prefix + ".norm2.gain", Tensor::constant({d}, 1.0));
  store.add(prefix + ".norm2.bias", Tensor({d}));
}

CrossAttentionBlockParams bind_cross_attention_block(Graph& g, const ParameterStore& store,
                                                     const std::string& prefix) {
  auto p = [&](const char* suffix) { return g.param(store, prefix + suffix); };
  return CrossAttentionBlockParams{
      p(".wq"), p(".bq"), p(".wk"), p(".bk"), p(".wv"), p(".bv"), p(".wo"), p(".bo"),
      p(".norm1.gain"), p(".norm1.bias"), p(".ffn.in.w"), p(".ffn.in.b"),
      p(".ffn.out.w"), p(".ffn.out.b"), p(".norm2.gain"), p(".norm2.bias")};
}

Index cross_attention_block_parameter_count(const AttentionConfig& cfg) {
  const Index d = cfg.d_model, h = cfg.ffn_hidden();
  return 4 * d * d + 4 * d + 2 * (2 * d) + d * (2 * h) + 2 * h + h * d + d;
}

Mask key_mask(Index tq, const Mask& key_valid) {
  const Index tk = static_cast<Index>(key_valid.size());
  Mask m(static_cast<std::size_t>(tq * tk));
  for (Index r = 0; r < tq; ++r) {
    std::copy(key_valid.begin(), key_valid.end(), m.begin() + r * tk);
  }
  return m;
}

Var multi_head_attention(const Var& q, const Var& k, const Var& v, const Mask& mask,
                         const CrossAttentionBlockParams& p, const AttentionConfig& cfg) {
  if (q.value().rank() != 2 || k.value().rank() != 2 || v.value().rank() != 2) {
    throw DimensionError("attention expects rank-2 Q/K/V");
  }
  if (k.extent(0) != v.extent(0)) {
    throw DimensionError("attention: K has " + std::to_string(k.extent(0)) + " rows, V has " +
                         std::to_string(v.extent(0)));
  }
  const Index tq = q.extent(0), tk = k.extent(0);
  const Mask full = mask.empty() ? Mask(static_cast<std::size_t>(tq * tk), 1) : Mask{};
  const Mask& m = mask.empty() ? full : mask;
  if (static_cast<Index>(m.size()) != tq * tk) {
    throw DimensionError("attention mask has " + std::to_string(m.size()) +
                         " entries, expected " + std::to_string(tq * tk));
  }
  const Var qp = linear(q, p.wq, p.bq);
  const Var kp = linear(k, p.wk, p.bk);
  const Var vp = linear(v, p.wv, p.bv);
  const Index dh = cfg.head_dim();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(cfg.n_heads));
  for (Index h = 0; h < cfg.n_heads; ++h) {
    const Var qh = cfg.n_heads == 1 ? qp : slice(qp, 1, h * dh, dh);
    const Var kh = cfg.n_heads == 1 ? kp : slice(kp, 1, h * dh, dh);
    const Var vh = cfg.n_heads == 1 ? vp : slice(vp, 1, h * dh, dh);
    const Var logits = scale(matmul(qh, transpose(kh)), inv_scale);
    const Var weights = dropout(masked_softmax(logits, m), cfg.dropout_p);
    heads.push_back(matmul(weights, vh));
  }
  const Var merged =
      heads.size() == 1 ? heads.front() : concat(std::span<const Var>(heads), 1);
  return linear(merged, p.wo, p.bo);
}

Var cross_attention_block(const Var& q, const Var& k, const Var& v, const Mask& mask,
                          const CrossAttentionBlockParams& p, const AttentionConfig& cfg) {
  const Var attended = multi_head_attention(q, k, v, mask, p, cfg);
  const Var x = layer_norm(add(q, attended), p.norm1_gain, p.norm1_bias);
  Var hidden = glu(linear(x, p.ffn_in_w, p.ffn_in_b), GateActivation::silu);
  hidden = dropout(hidden, cfg.dropout_p);
  const Var ffn = linear(hidden, p.ffn_out_w, p.ffn_out_b);
  return layer_norm(add(x, ffn), p.norm2_gain, p.norm2_bias);
}

Var self_encoder_depth1(const Var& x, const Mask& mask, const CrossAttentionBlockParams& p,
                        const AttentionConfig& cfg) {
  return cross_attention_block(x, x, x, mask, p, cfg);
}

Tensor sinusoidal_positions(Index t, Index d) {
  Tensor pe({t, d});
  for (Index pos = 0; pos < t; ++pos) {
    for (Index i = 0; i < d; ++i) {
      const double rate =
          std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      pe(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

}  // namespace earshot

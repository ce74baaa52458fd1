#pragma once

#include <random>
#include <string>

#include "earshot/autodiff.hpp"
#include "earshot/ops.hpp"

namespace earshot {

struct AttentionConfig {
  Index d_model = 256;
  Index n_heads = 4;
  double dropout_p = 0.1;
  Index ffn_mult = 2;

  Index head_dim() const { return d_model / n_heads; }
  Index ffn_hidden() const { return ffn_mult * d_model; }
  void validate() const;
};

/// Graph-bound view of one CrossAttentionBlock's parameters.
struct CrossAttentionBlockParams {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
  Var norm1_gain, norm1_bias;
  Var ffn_in_w, ffn_in_b;    // D -> 2H, split by the GLU gate
  Var ffn_out_w, ffn_out_b;  // H -> D
  Var norm2_gain, norm2_bias;
};

/// Uniform(+-1/sqrt(fan_in)) for every weight matrix and bias; LayerNorm at identity.
void register_cross_attention_block(ParameterStore& store, const std::string& prefix,
                                    const AttentionConfig& cfg, std::mt19937_64& rng);

CrossAttentionBlockParams bind_cross_attention_block(Graph& g, const ParameterStore& store,
                                                     const std::string& prefix);

/// Scalar weights registered by one block:
/// 4*D^2 + 4*D (projections) + 2*2*D (norms) + D*2H + 2H + H*D + D (FFN).
Index cross_attention_block_parameter_count(const AttentionConfig& cfg);

/// Row-major [Tq, Tk] mask allowing query q to see key k iff key_valid[k].
Mask key_mask(Index tq, const Mask& key_valid);

/// Scaled dot-product attention over n_heads heads followed by the output
/// projection. `mask` is [Tq*Tk] row-major or empty for full attention.
Var multi_head_attention(const Var& q, const Var& k, const Var& v, const Mask& mask,
                         const CrossAttentionBlockParams& p, const AttentionConfig& cfg);

/// Post-norm block: x = LN(Q + MHA(Q,K,V)); returns LN(x + FFN(x)), with
/// FFN = linear(D->2H), first_half * silu(second_half), dropout, linear(H->D).
Var cross_attention_block(const Var& q, const Var& k, const Var& v, const Mask& mask,
                          const CrossAttentionBlockParams& p, const AttentionConfig& cfg);

/// Depth-1 transformer encoder: the block with Q = K = V = x.
Var self_encoder_depth1(const Var& x, const Mask& mask, const CrossAttentionBlockParams& p,
                        const AttentionConfig& cfg);

/// Standard sine/cosine table, [T, D].
Tensor sinusoidal_positions(Index t, Index d);

}  // namespace earshot

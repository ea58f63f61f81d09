#pragma once

// Mixture of Adaptive Modulators.
//
// Given DiT features x_in and two conditioning token grids (x_lq from the
// low-quality image, x_ref from the cleaned reference), a MoAM block
//   1. fuses x_lq (queries) with x_ref (keys/values) by cross-attention into
//      x_attn, modulates x_in with (gamma, beta) read from x_attn through a
//      zero-initialized linear layer, and maps x_attn linearly to a per-token
//      degradation map D;
//   2. modulates again with (gamma, beta) produced from x_ref (the AM step);
//   3. routes every token over K experts with w = softmax(MLP(D)) and applies
//        gamma(i) = sum_k w(i,k) NetG_k(x_lq(i)),  beta(i) likewise,
//        x_out = (1 + gamma) * x + beta.
// All maps that produce a modulation start at zero, so a fresh block is the
// identity on x_in.

#include <string>
#include <utility>
#include <vector>

#include "dreamclear/dit.hpp"
#include "dreamclear/nn.hpp"

namespace dreamclear {

template <typename T>
struct DegradationMap {
    ag::Var<T> d;  // N x C
};

template <typename T>
struct ExpertWeights {
    ag::Var<T> w;  // N x K, rows on the simplex
    int num_experts() const { return static_cast<int>(w->cols()); }
};

template <typename T>
struct CrossAttentionParams {
    Linear<T> q, k, v, o;
    int heads = 1;
};

/// Maps a condition token to a dimension-wise (gamma, beta): C -> 2C.
template <typename T>
struct AMParams {
    Linear<T> scale_shift;
};

template <typename T>
struct RouterParams {
    Linear<T> hidden;  // C -> C_hidden
    Linear<T> out;     // C_hidden -> K
};

template <typename T>
struct ExpertParams {
    std::vector<Linear<T>> gamma;  // Net_k^gamma, C -> C
    std::vector<Linear<T>> beta;   // Net_k^beta,  C -> C
    int num_experts() const { return static_cast<int>(gamma.size()); }
};

template <typename T>
struct MoamParams {
    CrossAttentionParams<T> fuse;
    AMParams<T> attn_mod;  // zero-initialized modulation read from x_attn
    Linear<T> degradation;
    AMParams<T> ref_mod;
    RouterParams<T> router;
    ExpertParams<T> experts;

    static MoamParams create(ParamStore<T>& store, const std::string& prefix, int channels, int heads,
                             int num_experts, Rng& rng);
    static MoamParams bind(const ParamStore<T>& store, const std::string& prefix, int heads, int num_experts);
};

/// Modulation pairs of the three steps. None of them depend on x_in, so they
/// can be computed once per conditioning pair and reused across diffusion
/// steps.
template <typename T>
struct MoamModulations {
    ag::Var<T> gamma_attn, beta_attn;
    ag::Var<T> gamma_ref, beta_ref;
    ag::Var<T> gamma_mix, beta_mix;
    DegradationMap<T> degradation;
    ExpertWeights<T> weights;
};

template <typename T>
TokenGrid<T> fuse_cross_attention(const TokenGrid<T>& x_lq, const TokenGrid<T>& x_ref,
                                  const CrossAttentionParams<T>& params);

template <typename T>
DegradationMap<T> degradation_map(const TokenGrid<T>& x_attn, const Linear<T>& params);

/// Two-layer perceptron (GELU) followed by a row-wise softmax.
template <typename T>
ExpertWeights<T> route(const DegradationMap<T>& d, const RouterParams<T>& params);

template <typename T>
std::pair<ag::Var<T>, ag::Var<T>> expert_modulation(const TokenGrid<T>& x_lq, const ExpertWeights<T>& w,
                                                    const ExpertParams<T>& experts);

/// x_out = (1 + gamma) * x_in + beta.
template <typename T>
TokenGrid<T> modulate(const TokenGrid<T>& x_in, const ag::Var<T>& gamma, const ag::Var<T>& beta);

template <typename T>
std::pair<ag::Var<T>, ag::Var<T>> am_scale_shift(const ag::Var<T>& cond, const AMParams<T>& params);

template <typename T>
TokenGrid<T> am_condition(const TokenGrid<T>& x, const TokenGrid<T>& cond, const AMParams<T>& params);

template <typename T>
MoamModulations<T> moam_prepare(const TokenGrid<T>& x_lq, const TokenGrid<T>& x_ref, const MoamParams<T>& params);

template <typename T>
TokenGrid<T> moam_apply(const TokenGrid<T>& x_in, const MoamModulations<T>& mods);

template <typename T>
TokenGrid<T> moam_forward(const TokenGrid<T>& x_in, const TokenGrid<T>& x_lq, const TokenGrid<T>& x_ref,
                          const MoamParams<T>& params);

}  // namespace dreamclear

#include "dreamclear/moam.hpp"

#include <stdexcept>

namespace dreamclear {

namespace {

template <typename T>
void require_same_grid(const TokenGrid<T>& a, const TokenGrid<T>& b, const char* what) {
    if (a.tokens->rows() != b.tokens->rows() || a.tokens->cols() != b.tokens->cols()) {
        throw std::invalid_argument(std::string(what) + ": token grids differ in shape (" +
                                    std::to_string(a.tokens->rows()) + "x" + std::to_string(a.tokens->cols()) +
                                    " vs " + std::to_string(b.tokens->rows()) + "x" +
                                    std::to_string(b.tokens->cols()) + ")");
    }
}

}  // namespace

template <typename T>
MoamParams<T> MoamParams<T>::create(ParamStore<T>& store, const std::string& prefix, int channels, int heads,
                                    int num_experts, Rng& rng) {
    if (num_experts < 1) throw std::invalid_argument("MoAM needs at least one expert");
    const int c = channels;
    Linear<T>(store, prefix + ".fuse_q", c, c, Init::xavier, rng);
    Linear<T>(store, prefix + ".fuse_k", c, c, Init::xavier, rng);
    Linear<T>(store, prefix + ".fuse_v", c, c, Init::xavier, rng);
    Linear<T>(store, prefix + ".fuse_o", c, c, Init::xavier, rng);
    Linear<T>(store, prefix + ".attn_mod", c, 2 * c, Init::zero, rng);
    Linear<T>(store, prefix + ".degradation", c, c, Init::xavier, rng);
    Linear<T>(store, prefix + ".ref_mod", c, 2 * c, Init::zero, rng);
    Linear<T>(store, prefix + ".router_hidden", c, c, Init::xavier, rng);
    Linear<T>(store, prefix + ".router_out", c, num_experts, Init::xavier, rng);
    for (int k = 0; k < num_experts; ++k) {
        Linear<T>(store, prefix + ".expert" + std::to_string(k) + "_gamma", c, c, Init::zero, rng);
        Linear<T>(store, prefix + ".expert" + std::to_string(k) + "_beta", c, c, Init::zero, rng);
    }
    return bind(store, prefix, heads, num_experts);
}

template <typename T>
MoamParams<T> MoamParams<T>::bind(const ParamStore<T>& store, const std::string& prefix, int heads, int num_experts) {
    MoamParams p;
    p.fuse.q = Linear<T>::bind(store, prefix + ".fuse_q");
    p.fuse.k = Linear<T>::bind(store, prefix + ".fuse_k");
    p.fuse.v = Linear<T>::bind(store, prefix + ".fuse_v");
    p.fuse.o = Linear<T>::bind(store, prefix + ".fuse_o");
    p.fuse.heads = heads;
    p.attn_mod.scale_shift = Linear<T>::bind(store, prefix + ".attn_mod");
    p.degradation = Linear<T>::bind(store, prefix + ".degradation");
    p.ref_mod.scale_shift = Linear<T>::bind(store, prefix + ".ref_mod");
    p.router.hidden = Linear<T>::bind(store, prefix + ".router_hidden");
    p.router.out = Linear<T>::bind(store, prefix + ".router_out");
    for (int k = 0; k < num_experts; ++k) {
        p.experts.gamma.push_back(Linear<T>::bind(store, prefix + ".expert" + std::to_string(k) + "_gamma"));
        p.experts.beta.push_back(Linear<T>::bind(store, prefix + ".expert" + std::to_string(k) + "_beta"));
    }
    return p;
}

template <typename T>
TokenGrid<T> fuse_cross_attention(const TokenGrid<T>& x_lq, const TokenGrid<T>& x_ref,
                                  const CrossAttentionParams<T>& params) {
    require_same_grid(x_lq, x_ref, "fuse_cross_attention");
    const auto q = params.q(x_lq.tokens);
    const auto k = params.k(x_ref.tokens);
    const auto v = params.v(x_ref.tokens);
    return {params.o(ag::attention<T>(q, k, v, params.heads)), x_lq.grid_h, x_lq.grid_w};
}

template <typename T>
DegradationMap<T> degradation_map(const TokenGrid<T>& x_attn, const Linear<T>& params) {
    if (params.in_features() != x_attn.channels()) throw std::invalid_argument("degradation_map: width mismatch");
    return {params(x_attn.tokens)};
}

template <typename T>
ExpertWeights<T> route(const DegradationMap<T>& d, const RouterParams<T>& params) {
    const auto h = ag::gelu<T>(params.hidden(d.d));
    return {ag::softmax_rows<T>(params.out(h))};
}

template <typename T>
std::pair<ag::Var<T>, ag::Var<T>> expert_modulation(const TokenGrid<T>& x_lq, const ExpertWeights<T>& w,
                                                    const ExpertParams<T>& experts) {
    const int k_count = experts.num_experts();
    if (k_count < 1 || static_cast<int>(experts.beta.size()) != k_count) {
        throw std::invalid_argument("expert_modulation: malformed expert set");
    }
    if (w.num_experts() != k_count) {
        throw std::invalid_argument("expert_modulation: router yields " + std::to_string(w.num_experts()) +
                                    " weights but there are " + std::to_string(k_count) + " experts");
    }
    if (w.w->rows() != x_lq.tokens->rows()) throw std::invalid_argument("expert_modulation: token count mismatch");
    ag::Var<T> gamma, beta;
    for (int k = 0; k < k_count; ++k) {
        const auto wk = ag::slice_cols<T>(w.w, k, 1);
        const auto g = ag::mul<T>(experts.gamma[static_cast<std::size_t>(k)](x_lq.tokens), wk);
        const auto b = ag::mul<T>(experts.beta[static_cast<std::size_t>(k)](x_lq.tokens), wk);
        gamma = gamma ? ag::add<T>(gamma, g) : g;
        beta = beta ? ag::add<T>(beta, b) : b;
    }
    return {gamma, beta};
}

template <typename T>
TokenGrid<T> modulate(const TokenGrid<T>& x_in, const ag::Var<T>& gamma, const ag::Var<T>& beta) {
    if (gamma->rows() != x_in.tokens->rows() || gamma->cols() != x_in.tokens->cols() ||
        beta->rows() != x_in.tokens->rows() || beta->cols() != x_in.tokens->cols()) {
        throw std::invalid_argument("modulate: gamma/beta shape differs from tokens");
    }
    return {ag::modulate<T>(x_in.tokens, gamma, beta), x_in.grid_h, x_in.grid_w};
}

template <typename T>
std::pair<ag::Var<T>, ag::Var<T>> am_scale_shift(const ag::Var<T>& cond, const AMParams<T>& params) {
    const Eigen::Index c = cond->cols();
    if (params.scale_shift.out_features() != 2 * c) throw std::invalid_argument("AM: scale/shift width mismatch");
    const auto gb = params.scale_shift(cond);
    return {ag::slice_cols<T>(gb, 0, c), ag::slice_cols<T>(gb, c, c)};
}

template <typename T>
TokenGrid<T> am_condition(const TokenGrid<T>& x, const TokenGrid<T>& cond, const AMParams<T>& params) {
    require_same_grid(x, cond, "am_condition");
    const auto [gamma, beta] = am_scale_shift<T>(cond.tokens, params);
    return modulate<T>(x, gamma, beta);
}

template <typename T>
MoamModulations<T> moam_prepare(const TokenGrid<T>& x_lq, const TokenGrid<T>& x_ref, const MoamParams<T>& params) {
    MoamModulations<T> m;
    const TokenGrid<T> x_attn = fuse_cross_attention<T>(x_lq, x_ref, params.fuse);
    std::tie(m.gamma_attn, m.beta_attn) = am_scale_shift<T>(x_attn.tokens, params.attn_mod);
    m.degradation = degradation_map<T>(x_attn, params.degradation);
    std::tie(m.gamma_ref, m.beta_ref) = am_scale_shift<T>(x_ref.tokens, params.ref_mod);
    m.weights = route<T>(m.degradation, params.router);
    std::tie(m.gamma_mix, m.beta_mix) = expert_modulation<T>(x_lq, m.weights, params.experts);
    return m;
}

template <typename T>
TokenGrid<T> moam_apply(const TokenGrid<T>& x_in, const MoamModulations<T>& mods) {
    TokenGrid<T> x = modulate<T>(x_in, mods.gamma_attn, mods.beta_attn);
    x = modulate<T>(x, mods.gamma_ref, mods.beta_ref);
    return modulate<T>(x, mods.gamma_mix, mods.beta_mix);
}

template <typename T>
TokenGrid<T> moam_forward(const TokenGrid<T>& x_in, const TokenGrid<T>& x_lq, const TokenGrid<T>& x_ref,
                          const MoamParams<T>& params) {
    require_same_grid(x_in, x_lq, "moam_forward");
    require_same_grid(x_in, x_ref, "moam_forward");
    return moam_apply<T>(x_in, moam_prepare<T>(x_lq, x_ref, params));
}

#define DREAMCLEAR_MOAM_INSTANTIATE(T)                                                                            \
    template struct MoamParams<T>;                                                                                \
    template TokenGrid<T> fuse_cross_attention<T>(const TokenGrid<T>&, const TokenGrid<T>&,                       \
                                                  const CrossAttentionParams<T>&);                                \
    template DegradationMap<T> degradation_map<T>(const TokenGrid<T>&, const Linear<T>&);                         \
    template ExpertWeights<T> route<T>(const DegradationMap<T>&, const RouterParams<T>&);                         \
    template std::pair<ag::Var<T>, ag::Var<T>> expert_modulation<T>(const TokenGrid<T>&, const ExpertWeights<T>&, \
                                                                    const ExpertParams<T>&);                      \
    template TokenGrid<T> modulate<T>(const TokenGrid<T>&, const ag::Var<T>&, const ag::Var<T>&);                 \
    template std::pair<ag::Var<T>, ag::Var<T>> am_scale_shift<T>(const ag::Var<T>&, const AMParams<T>&);         \
    template TokenGrid<T> am_condition<T>(const TokenGrid<T>&, const TokenGrid<T>&, const AMParams<T>&);          \
    template MoamModulations<T> moam_prepare<T>(const TokenGrid<T>&, const TokenGrid<T>&, const MoamParams<T>&);  \
    template TokenGrid<T> moam_apply<T>(const TokenGrid<T>&, const MoamModulations<T>&);                          \
    template TokenGrid<T> moam_forward<T>(const TokenGrid<T>&, const TokenGrid<T>&, const TokenGrid<T>&,          \
                                          const MoamParams<T>&);

DREAMCLEAR_MOAM_INSTANTIATE(float)
DREAMCLEAR_MOAM_INSTANTIATE(double)

}  // namespace dreamclear

#pragma once

// Small diffusion-transformer text-to-image backbone: patch embedding,
// timestep embedding, AdaLN-Zero blocks with text cross-attention, a
// zero-initialized output head, and per-block residual injection points for a
// control branch.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "dreamclear/autograd.hpp"
#include "dreamclear/nn.hpp"

namespace dreamclear {

struct BackboneConfig {
    int latent_hw = 16;
    int latent_channels = 4;
    int patch_size = 2;
    int hidden_dim = 64;
    int num_blocks = 4;
    int num_heads = 4;
    int text_dim = 32;
    int max_text_tokens = 16;
    int mlp_ratio = 4;
    int freq_dim = 64;

    int grid() const { return latent_hw / patch_size; }
    int num_tokens() const { return grid() * grid(); }
    int patch_dim() const { return patch_size * patch_size * latent_channels; }
    void validate() const;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

template <typename T>
struct TokenGrid {
    ag::Var<T> tokens;  // N x C
    int grid_h = 0;
    int grid_w = 0;

    int num_tokens() const { return grid_h * grid_w; }
    int channels() const { return static_cast<int>(tokens->cols()); }
};

template <typename T>
struct TextTokens {
    ag::Var<T> embeddings;           // L x text_dim
    std::vector<std::uint8_t> mask;  // L entries, 0 = ignored

    int length() const { return static_cast<int>(embeddings->rows()); }
};

/// Concatenates token sequences (embeddings and masks) in order.
template <typename T>
TextTokens<T> concat_text(const std::vector<TextTokens<T>>& parts, int text_dim);

template <typename T>
struct ControlResiduals {
    std::vector<ag::Var<T>> per_block;  // N x C each
};

/// Index map turning an (h*w) x ch image into (h/p * w/p) x (p*p*ch) patches.
std::shared_ptr<const std::vector<std::int64_t>> patch_index(int h, int w, int ch, int p);
/// Inverse map of patch_index.
std::shared_ptr<const std::vector<std::int64_t>> unpatch_index(int grid_h, int grid_w, int ch, int p);

/// Splits a latent into patches and projects them; a null projection leaves
/// the flattened patches as tokens.
template <typename T>
TokenGrid<T> patchify(const ag::Var<T>& latent, int h, int w, int patch_size, const Linear<T>* projection);

template <typename T>
ag::Var<T> unpatchify(const TokenGrid<T>& grid, int patch_size, int out_channels);

/// Sinusoidal timestep features; dim must be even and positive.
template <typename T>
Mat<T> timestep_embed(int t, int dim);

template <typename T>
struct DitBlockParams {
    Linear<T> ada;  // C -> 6C: shift/scale/gate for attention and MLP
    Linear<T> attn_q, attn_k, attn_v, attn_o;
    Linear<T> cross_q, cross_k, cross_v, cross_o;
    Linear<T> mlp_fc1, mlp_fc2;
    int heads = 1;

    static DitBlockParams create(ParamStore<T>& store, const std::string& prefix, const BackboneConfig& cfg, Rng& rng);
    static DitBlockParams bind(const ParamStore<T>& store, const std::string& prefix, int heads);
};

/// Attention over the text context, including the key/value projections.
template <typename T>
ag::Var<T> text_cross_attention(const ag::Var<T>& x, const ag::Var<T>& text_ctx, std::span<const std::uint8_t> mask,
                                const DitBlockParams<T>& p);

/// x + g1 * SelfAttn(adaLN(x)) + CrossAttn(x, text) + g2 * MLP(adaLN(x)), where
/// text_ctx is the text sequence already projected to the hidden width and
/// cond is the 1 x C timestep conditioning vector.
template <typename T>
ag::Var<T> dit_block_forward(const ag::Var<T>& x, const ag::Var<T>& cond, const ag::Var<T>& text_ctx,
                             std::span<const std::uint8_t> text_mask, const DitBlockParams<T>& p);

template <typename T>
class Backbone {
public:
    struct Prepared {
        ag::Var<T> tokens;    // embedded latent patches plus position table
        ag::Var<T> cond;      // 1 x C timestep conditioning
        ag::Var<T> text_ctx;  // L x C
        std::vector<std::uint8_t> text_mask;
    };

    /// Registers fresh parameters under `prefix`.
    static Backbone create(ParamStore<T>& store, const std::string& prefix, const BackboneConfig& cfg, Rng& rng);
    /// Binds to parameters already in the store.
    static Backbone bind(const ParamStore<T>& store, const std::string& prefix, const BackboneConfig& cfg);

    const BackboneConfig& config() const { return cfg_; }
    const std::string& prefix() const { return prefix_; }
    const std::vector<DitBlockParams<T>>& blocks() const { return blocks_; }

    Prepared prepare(const ag::Var<T>& z_t, int t, const TextTokens<T>& text) const;
    /// Runs the blocks (adding residuals[i] after block i when given) and the
    /// output head; returns an eps prediction shaped like the latent.
    ag::Var<T> run(const Prepared& in, const ControlResiduals<T>* residuals = nullptr) const;
    ag::Var<T> forward(const ag::Var<T>& z_t, int t, const TextTokens<T>& text,
                       const ControlResiduals<T>* residuals = nullptr) const;

    /// Patch embedding only (no position table).
    TokenGrid<T> embed_patches(const ag::Var<T>& z) const;

private:
    BackboneConfig cfg_;
    std::string prefix_;
    Linear<T> x_embed_;
    Linear<T> t_fc1_, t_fc2_;
    Linear<T> text_proj_;
    std::vector<DitBlockParams<T>> blocks_;
    Linear<T> final_ada_;
    Linear<T> final_proj_;
    Mat<T> pos_table_;
};

}  // namespace dreamclear

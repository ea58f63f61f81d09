#include "dreamclear/dit.hpp"

#include <stdexcept>

namespace dreamclear {

void BackboneConfig::validate() const {
    if (latent_hw <= 0 || latent_channels <= 0 || patch_size <= 0 || hidden_dim <= 0 || num_blocks < 0 ||
        num_heads <= 0 || text_dim <= 0 || max_text_tokens < 0 || mlp_ratio <= 0 || freq_dim <= 0) {
        throw std::invalid_argument("backbone config: all sizes must be positive");
    }
    if (latent_hw % patch_size != 0) throw std::invalid_argument("backbone config: latent_hw not divisible by patch_size");
    if (hidden_dim % num_heads != 0) throw std::invalid_argument("backbone config: hidden_dim not divisible by num_heads");
    if (hidden_dim % 4 != 0) throw std::invalid_argument("backbone config: hidden_dim must be divisible by 4");
    if (freq_dim % 2 != 0) throw std::invalid_argument("backbone config: freq_dim must be even");
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = nlohmann::json{{"latent_hw", c.latent_hw},     {"latent_channels", c.latent_channels},
                       {"patch_size", c.patch_size},   {"hidden_dim", c.hidden_dim},
                       {"num_blocks", c.num_blocks},   {"num_heads", c.num_heads},
                       {"text_dim", c.text_dim},       {"max_text_tokens", c.max_text_tokens},
                       {"mlp_ratio", c.mlp_ratio},     {"freq_dim", c.freq_dim}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
    BackboneConfig d;
    c.latent_hw = j.value("latent_hw", d.latent_hw);
    c.latent_channels = j.value("latent_channels", d.latent_channels);
    c.patch_size = j.value("patch_size", d.patch_size);
    c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
    c.num_blocks = j.value("num_blocks", d.num_blocks);
    c.num_heads = j.value("num_heads", d.num_heads);
    c.text_dim = j.value("text_dim", d.text_dim);
    c.max_text_tokens = j.value("max_text_tokens", d.max_text_tokens);
    c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
    c.freq_dim = j.value("freq_dim", d.freq_dim);
}

template <typename T>
TextTokens<T> concat_text(const std::vector<TextTokens<T>>& parts, int text_dim) {
    TextTokens<T> out;
    std::vector<ag::Var<T>> vars;
    for (const auto& p : parts) {
        if (p.embeddings->cols() != text_dim) throw std::invalid_argument("concat_text: embedding width mismatch");
        if (p.embeddings->rows() == 0) continue;
        vars.push_back(p.embeddings);
        out.mask.insert(out.mask.end(), p.mask.begin(), p.mask.end());
    }
    out.embeddings = vars.empty() ? ag::constant<T>(Mat<T>(0, text_dim)) : ag::concat_rows<T>(vars);
    return out;
}

std::shared_ptr<const std::vector<std::int64_t>> patch_index(int h, int w, int ch, int p) {
    if (p <= 0 || h % p != 0 || w % p != 0) {
        throw std::invalid_argument("patchify: " + std::to_string(h) + "x" + std::to_string(w) +
                                    " is not divisible by patch size " + std::to_string(p));
    }
    const int gh = h / p;
    const int gw = w / p;
    const int cols = p * p * ch;
    auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(gh) * gw * cols);
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const std::int64_t row = gy * gw + gx;
            for (int py = 0; py < p; ++py) {
                for (int px = 0; px < p; ++px) {
                    for (int c = 0; c < ch; ++c) {
                        const std::int64_t col = (py * p + px) * ch + c;
                        const std::int64_t src = (static_cast<std::int64_t>(gy * p + py) * w + (gx * p + px)) * ch + c;
                        (*idx)[static_cast<std::size_t>(row * cols + col)] = src;
                    }
                }
            }
        }
    }
    return idx;
}

std::shared_ptr<const std::vector<std::int64_t>> unpatch_index(int grid_h, int grid_w, int ch, int p) {
    const int h = grid_h * p;
    const int w = grid_w * p;
    const int cols = p * p * ch;
    auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(h) * w * ch);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::int64_t n = (y / p) * grid_w + (x / p);
            for (int c = 0; c < ch; ++c) {
                const std::int64_t col = ((y % p) * p + (x % p)) * ch + c;
                (*idx)[static_cast<std::size_t>((static_cast<std::int64_t>(y) * w + x) * ch + c)] = n * cols + col;
            }
        }
    }
    return idx;
}

template <typename T>
TokenGrid<T> patchify(const ag::Var<T>& latent, int h, int w, int patch_size, const Linear<T>* projection) {
    if (latent->rows() != static_cast<Eigen::Index>(h) * w) {
        throw std::invalid_argument("patchify: latent has " + std::to_string(latent->rows()) + " rows, expected " +
                                    std::to_string(h * w));
    }
    const int ch = static_cast<int>(latent->cols());
    auto idx = patch_index(h, w, ch, patch_size);
    const int gh = h / patch_size;
    const int gw = w / patch_size;
    TokenGrid<T> grid;
    grid.grid_h = gh;
    grid.grid_w = gw;
    grid.tokens = ag::gather<T>(latent, gh * gw, patch_size * patch_size * ch, idx);
    if (projection) grid.tokens = (*projection)(grid.tokens);
    return grid;
}

template <typename T>
ag::Var<T> unpatchify(const TokenGrid<T>& grid, int patch_size, int out_channels) {
    if (patch_size <= 0 || out_channels <= 0) throw std::invalid_argument("unpatchify: sizes must be positive");
    if (grid.tokens->rows() != grid.num_tokens()) throw std::invalid_argument("unpatchify: token count mismatch");
    if (grid.tokens->cols() != static_cast<Eigen::Index>(patch_size) * patch_size * out_channels) {
        throw std::invalid_argument("unpatchify: token width " + std::to_string(grid.tokens->cols()) +
                                    " inconsistent with patch size " + std::to_string(patch_size) + " and " +
                                    std::to_string(out_channels) + " channels");
    }
    auto idx = unpatch_index(grid.grid_h, grid.grid_w, out_channels, patch_size);
    const int rows = grid.grid_h * patch_size * grid.grid_w * patch_size;
    return ag::gather<T>(grid.tokens, rows, out_channels, idx);
}

template <typename T>
Mat<T> timestep_embed(int t, int dim) {
    if (t < 0) throw std::invalid_argument("timestep must be non-negative");
    return sinusoidal_embedding<T>(static_cast<double>(t), dim);
}

template <typename T>
DitBlockParams<T> DitBlockParams<T>::create(ParamStore<T>& store, const std::string& prefix, const BackboneConfig& cfg,
                                            Rng& rng) {
    const int c = cfg.hidden_dim;
    DitBlockParams p;
    p.heads = cfg.num_heads;
    p.ada = Linear<T>(store, prefix + ".ada", c, 6 * c, Init::zero, rng);
    p.attn_q = Linear<T>(store, prefix + ".attn_q", c, c, Init::xavier, rng);
    p.attn_k = Linear<T>(store, prefix + ".attn_k", c, c, Init::xavier, rng);
    p.attn_v = Linear<T>(store, prefix + ".attn_v", c, c, Init::xavier, rng);
    p.attn_o = Linear<T>(store, prefix + ".attn_o", c, c, Init::xavier, rng);
    p.cross_q = Linear<T>(store, prefix + ".cross_q", c, c, Init::xavier, rng);
    p.cross_k = Linear<T>(store, prefix + ".cross_k", c, c, Init::xavier, rng);
    p.cross_v = Linear<T>(store, prefix + ".cross_v", c, c, Init::xavier, rng);
    p.cross_o = Linear<T>(store, prefix + ".cross_o", c, c, Init::zero, rng);
    p.mlp_fc1 = Linear<T>(store, prefix + ".mlp_fc1", c, cfg.mlp_ratio * c, Init::xavier, rng);
    p.mlp_fc2 = Linear<T>(store, prefix + ".mlp_fc2", cfg.mlp_ratio * c, c, Init::xavier, rng);
    return p;
}

template <typename T>
DitBlockParams<T> DitBlockParams<T>::bind(const ParamStore<T>& store, const std::string& prefix, int heads) {
    DitBlockParams p;
    p.heads = heads;
    p.ada = Linear<T>::bind(store, prefix + ".ada");
    p.attn_q = Linear<T>::bind(store, prefix + ".attn_q");
    p.attn_k = Linear<T>::bind(store, prefix + ".attn_k");
    p.attn_v = Linear<T>::bind(store, prefix + ".attn_v");
    p.attn_o = Linear<T>::bind(store, prefix + ".attn_o");
    p.cross_q = Linear<T>::bind(store, prefix + ".cross_q");
    p.cross_k = Linear<T>::bind(store, prefix + ".cross_k");
    p.cross_v = Linear<T>::bind(store, prefix + ".cross_v");
    p.cross_o = Linear<T>::bind(store, prefix + ".cross_o");
    p.mlp_fc1 = Linear<T>::bind(store, prefix + ".mlp_fc1");
    p.mlp_fc2 = Linear<T>::bind(store, prefix + ".mlp_fc2");
    return p;
}

template <typename T>
ag::Var<T> text_cross_attention(const ag::Var<T>& x, const ag::Var<T>& text_ctx, std::span<const std::uint8_t> mask,
                                const DitBlockParams<T>& p) {
    const auto q = p.cross_q(x);
    const auto k = p.cross_k(text_ctx);
    const auto v = p.cross_v(text_ctx);
    return p.cross_o(ag::attention<T>(q, k, v, p.heads, mask));
}

template <typename T>
ag::Var<T> dit_block_forward(const ag::Var<T>& x, const ag::Var<T>& cond, const ag::Var<T>& text_ctx,
                             std::span<const std::uint8_t> text_mask, const DitBlockParams<T>& p) {
    const Eigen::Index c = x->cols();
    if (cond->rows() != 1 || cond->cols() != c) throw std::invalid_argument("dit block: conditioning width mismatch");
    if (text_ctx->cols() != c) throw std::invalid_argument("dit block: text context width mismatch");
    const auto mod = p.ada(ag::silu<T>(cond));
    const auto shift1 = ag::slice_cols<T>(mod, 0, c);
    const auto scale1 = ag::slice_cols<T>(mod, c, c);
    const auto gate1 = ag::slice_cols<T>(mod, 2 * c, c);
    const auto shift2 = ag::slice_cols<T>(mod, 3 * c, c);
    const auto scale2 = ag::slice_cols<T>(mod, 4 * c, c);
    const auto gate2 = ag::slice_cols<T>(mod, 5 * c, c);

    auto h = ag::modulate<T>(ag::layer_norm<T>(x), scale1, shift1);
    h = p.attn_o(ag::attention<T>(p.attn_q(h), p.attn_k(h), p.attn_v(h), p.heads));
    auto out = ag::add<T>(x, ag::mul<T>(h, gate1));

    out = ag::add<T>(out, text_cross_attention<T>(out, text_ctx, text_mask, p));

    h = ag::modulate<T>(ag::layer_norm<T>(out), scale2, shift2);
    h = p.mlp_fc2(ag::gelu<T>(p.mlp_fc1(h)));
    return ag::add<T>(out, ag::mul<T>(h, gate2));
}

template <typename T>
Backbone<T> Backbone<T>::create(ParamStore<T>& store, const std::string& prefix, const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    const int c = cfg.hidden_dim;
    Linear<T>(store, prefix + ".x_embed", cfg.patch_dim(), c, Init::xavier, rng);
    Linear<T>(store, prefix + ".t_fc1", cfg.freq_dim, c, Init::xavier, rng);
    Linear<T>(store, prefix + ".t_fc2", c, c, Init::xavier, rng);
    Linear<T>(store, prefix + ".text_proj", cfg.text_dim, c, Init::xavier, rng);
    for (int i = 0; i < cfg.num_blocks; ++i) {
        DitBlockParams<T>::create(store, prefix + ".blocks." + std::to_string(i), cfg, rng);
    }
    // Zero head: a fresh model predicts zero noise.
    Linear<T>(store, prefix + ".final_ada", c, 2 * c, Init::zero, rng);
    Linear<T>(store, prefix + ".final_proj", c, cfg.patch_dim(), Init::zero, rng);
    return bind(store, prefix, cfg);
}

template <typename T>
Backbone<T> Backbone<T>::bind(const ParamStore<T>& store, const std::string& prefix, const BackboneConfig& cfg) {
    cfg.validate();
    Backbone b;
    b.cfg_ = cfg;
    b.prefix_ = prefix;
    b.x_embed_ = Linear<T>::bind(store, prefix + ".x_embed");
    b.t_fc1_ = Linear<T>::bind(store, prefix + ".t_fc1");
    b.t_fc2_ = Linear<T>::bind(store, prefix + ".t_fc2");
    b.text_proj_ = Linear<T>::bind(store, prefix + ".text_proj");
    for (int i = 0; i < cfg.num_blocks; ++i) {
        b.blocks_.push_back(DitBlockParams<T>::bind(store, prefix + ".blocks." + std::to_string(i), cfg.num_heads));
    }
    b.final_ada_ = Linear<T>::bind(store, prefix + ".final_ada");
    b.final_proj_ = Linear<T>::bind(store, prefix + ".final_proj");
    b.pos_table_ = sincos_2d_table<T>(cfg.grid(), cfg.grid(), cfg.hidden_dim);
    return b;
}

template <typename T>
TokenGrid<T> Backbone<T>::embed_patches(const ag::Var<T>& z) const {
    if (z->cols() != cfg_.latent_channels) throw std::invalid_argument("backbone: latent channel count mismatch");
    return patchify<T>(z, cfg_.latent_hw, cfg_.latent_hw, cfg_.patch_size, &x_embed_);
}

template <typename T>
typename Backbone<T>::Prepared Backbone<T>::prepare(const ag::Var<T>& z_t, int t, const TextTokens<T>& text) const {
    if (text.length() > cfg_.max_text_tokens) {
        throw std::invalid_argument("text has " + std::to_string(text.length()) + " tokens, limit is " +
                                    std::to_string(cfg_.max_text_tokens));
    }
    if (text.embeddings->cols() != cfg_.text_dim) throw std::invalid_argument("text embedding width mismatch");
    if (static_cast<int>(text.mask.size()) != text.length()) throw std::invalid_argument("text mask length mismatch");
    Prepared p;
    p.tokens = ag::add<T>(embed_patches(z_t).tokens, ag::constant<T>(pos_table_));
    const auto temb = ag::constant<T>(timestep_embed<T>(t, cfg_.freq_dim));
    p.cond = t_fc2_(ag::silu<T>(t_fc1_(temb)));
    p.text_ctx = text_proj_(text.embeddings);
    p.text_mask = text.mask;
    return p;
}

template <typename T>
ag::Var<T> Backbone<T>::run(const Prepared& in, const ControlResiduals<T>* residuals) const {
    if (residuals && residuals->per_block.size() != blocks_.size()) {
        throw std::invalid_argument("control residual count " + std::to_string(residuals->per_block.size()) +
                                    " differs from block count " + std::to_string(blocks_.size()));
    }
    ag::Var<T> x = in.tokens;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        x = dit_block_forward<T>(x, in.cond, in.text_ctx, in.text_mask, blocks_[i]);
        if (residuals && residuals->per_block[i]) x = ag::add<T>(x, residuals->per_block[i]);
    }
    const Eigen::Index c = x->cols();
    const auto mod = final_ada_(ag::silu<T>(in.cond));
    x = ag::modulate<T>(ag::layer_norm<T>(x), ag::slice_cols<T>(mod, c, c), ag::slice_cols<T>(mod, 0, c));
    TokenGrid<T> out{final_proj_(x), cfg_.grid(), cfg_.grid()};
    return unpatchify<T>(out, cfg_.patch_size, cfg_.latent_channels);
}

template <typename T>
ag::Var<T> Backbone<T>::forward(const ag::Var<T>& z_t, int t, const TextTokens<T>& text,
                                const ControlResiduals<T>* residuals) const {
    return run(prepare(z_t, t, text), residuals);
}

template TextTokens<float> concat_text<float>(const std::vector<TextTokens<float>>&, int);
template TextTokens<double> concat_text<double>(const std::vector<TextTokens<double>>&, int);
template TokenGrid<float> patchify<float>(const ag::Var<float>&, int, int, int, const Linear<float>*);
template TokenGrid<double> patchify<double>(const ag::Var<double>&, int, int, int, const Linear<double>*);
template ag::Var<float> unpatchify<float>(const TokenGrid<float>&, int, int);
template ag::Var<double> unpatchify<double>(const TokenGrid<double>&, int, int);
template Mat<float> timestep_embed<float>(int, int);
template Mat<double> timestep_embed<double>(int, int);
template struct DitBlockParams<float>;
template struct DitBlockParams<double>;
template ag::Var<float> text_cross_attention<float>(const ag::Var<float>&, const ag::Var<float>&,
                                                    std::span<const std::uint8_t>, const DitBlockParams<float>&);
template ag::Var<double> text_cross_attention<double>(const ag::Var<double>&, const ag::Var<double>&,
                                                      std::span<const std::uint8_t>, const DitBlockParams<double>&);
template ag::Var<float> dit_block_forward<float>(const ag::Var<float>&, const ag::Var<float>&, const ag::Var<float>&,
                                                 std::span<const std::uint8_t>, const DitBlockParams<float>&);
template ag::Var<double> dit_block_forward<double>(const ag::Var<double>&, const ag::Var<double>&,
                                                   const ag::Var<double>&, std::span<const std::uint8_t>,
                                                   const DitBlockParams<double>&);
template class Backbone<float>;
template class Backbone<double>;

}  // namespace dreamclear

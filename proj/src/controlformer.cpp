#include "dreamclear/controlformer.hpp"

#include <algorithm>
#include <stdexcept>

namespace dreamclear {

template <typename T>
TokenGrid<T> encode_condition(const ag::Var<T>& latent, const Linear<T>& embed, const BackboneConfig& cfg) {
    const Eigen::Index pixels = static_cast<Eigen::Index>(cfg.latent_hw) * cfg.latent_hw;
    if (latent->rows() != pixels || latent->cols() != cfg.latent_channels) {
        throw std::invalid_argument("condition latent is " + std::to_string(latent->rows()) + "x" +
                                    std::to_string(latent->cols()) + ", expected " + std::to_string(pixels) + "x" +
                                    std::to_string(cfg.latent_channels));
    }
    return patchify<T>(latent, cfg.latent_hw, cfg.latent_hw, cfg.patch_size, &embed);
}

template <typename T>
ControlBranch<T> ControlBranch<T>::init_from_backbone(ParamStore<T>& store, const std::string& prefix,
                                                      const Backbone<T>& backbone, int num_experts, Rng& rng) {
    const BackboneConfig& cfg = backbone.config();
    const int c = cfg.hidden_dim;
    for (int i = 0; i < cfg.num_blocks; ++i) {
        const std::string src = backbone.prefix() + ".blocks." + std::to_string(i) + ".";
        const std::string dst = prefix + ".blocks." + std::to_string(i) + ".";
        std::vector<std::pair<std::string, Mat<T>>> copies;
        for (const auto& [name, v] : store.entries()) {
            if (name.compare(0, src.size(), src) == 0) copies.emplace_back(dst + name.substr(src.size()), v->value);
        }
        if (copies.empty()) throw std::invalid_argument("backbone block parameters not found under " + src);
        for (auto& [name, value] : copies) store.add(name, std::move(value));
    }
    Linear<T>(store, prefix + ".lq_embed", cfg.patch_dim(), c, Init::xavier, rng);
    Linear<T>(store, prefix + ".ref_embed", cfg.patch_dim(), c, Init::xavier, rng);
    for (int i = 0; i < cfg.num_blocks; ++i) {
        MoamParams<T>::create(store, prefix + ".moam." + std::to_string(i), c, cfg.num_heads, num_experts, rng);
        Linear<T>(store, prefix + ".out_proj." + std::to_string(i), c, c, Init::zero, rng);
    }
    return bind(store, prefix, cfg, num_experts);
}

template <typename T>
ControlBranch<T> ControlBranch<T>::bind(const ParamStore<T>& store, const std::string& prefix,
                                        const BackboneConfig& cfg, int num_experts) {
    ControlBranch b;
    b.cfg_ = cfg;
    b.prefix_ = prefix;
    b.num_experts_ = num_experts;
    b.lq_embed_ = Linear<T>::bind(store, prefix + ".lq_embed");
    b.ref_embed_ = Linear<T>::bind(store, prefix + ".ref_embed");
    for (int i = 0; i < cfg.num_blocks; ++i) {
        const std::string s = std::to_string(i);
        b.blocks_.push_back(DitBlockParams<T>::bind(store, prefix + ".blocks." + s, cfg.num_heads));
        b.moams_.push_back(MoamParams<T>::bind(store, prefix + ".moam." + s, cfg.num_heads, num_experts));
        b.out_proj_.push_back(Linear<T>::bind(store, prefix + ".out_proj." + s));
    }
    return b;
}

template <typename T>
ControlCondition<T> ControlBranch<T>::prepare_condition(const TokenGrid<T>& x_lq, const TokenGrid<T>& x_ref) const {
    if (x_lq.num_tokens() != cfg_.num_tokens() || x_lq.channels() != cfg_.hidden_dim) {
        throw std::invalid_argument("control: LQ tokens do not match the backbone token grid");
    }
    ControlCondition<T> out{x_lq, x_ref, {}};
    for (const auto& m : moams_) out.mods.push_back(moam_prepare<T>(x_lq, x_ref, m));
    return out;
}

template <typename T>
ControlResiduals<T> ControlBranch<T>::forward(const typename Backbone<T>::Prepared& in,
                                              const ControlCondition<T>& cond) const {
    if (cond.mods.size() != blocks_.size()) throw std::invalid_argument("control: condition/block count mismatch");
    ControlResiduals<T> out;
    const int g = cfg_.grid();
    ag::Var<T> h = in.tokens;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        h = dit_block_forward<T>(h, in.cond, in.text_ctx, in.text_mask, blocks_[i]);
        h = moam_apply<T>(TokenGrid<T>{h, g, g}, cond.mods[i]).tokens;
        out.per_block.push_back(out_proj_[i](h));
    }
    return out;
}

template <typename T>
ag::Var<T> controlled_forward(const Backbone<T>& backbone, const ControlBranch<T>& control, const ag::Var<T>& z_t,
                              int t, const TextTokens<T>& text, const ControlCondition<T>* cond) {
    const auto prepared = backbone.prepare(z_t, t, text);
    if (!cond) return backbone.run(prepared);
    const auto residuals = control.forward(prepared, *cond);
    return backbone.run(prepared, &residuals);
}

Matf LatentCodec::encode(const Image& img) const {
    Matf m = img.to_mat();
    m.array() = m.array() * static_cast<float>(scale) + static_cast<float>(shift);
    return m;
}

Image LatentCodec::decode(const Matf& latent, int width, int height) const {
    if (scale == 0.0) throw std::invalid_argument("codec scale must be nonzero");
    Matf m = (latent.array() - static_cast<float>(shift)) / static_cast<float>(scale);
    return clamp01(Image::from_mat(m, width, height));
}

Image BicubicRemover::operator()(const Image& lq) const {
    require_unit_range(lq, "remover");
    return clamp01(resize_bicubic(lq, lq.width * scale_, lq.height * scale_));
}

namespace {

std::shared_ptr<const std::vector<std::int64_t>> im2col_index(int h, int w, int ch) {
    const int cols = 9 * ch;
    auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(h) * w * cols);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t row = static_cast<std::size_t>(y) * w + x;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const int sy = y + ky - 1;
                    const int sx = x + kx - 1;
                    const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
                    for (int c = 0; c < ch; ++c) {
                        (*idx)[row * cols + static_cast<std::size_t>((ky * 3 + kx) * ch + c)] =
                            inside ? (static_cast<std::int64_t>(sy) * w + sx) * ch + c : -1;
                    }
                }
            }
        }
    }
    return idx;
}

}  // namespace

ag::Var<float> conv3x3(const ag::Var<float>& x, int h, int w, const Linear<float>& kernel) {
    const int ch = static_cast<int>(x->cols());
    if (x->rows() != static_cast<Eigen::Index>(h) * w) throw std::invalid_argument("conv3x3: feature map size");
    if (kernel.in_features() != 9 * ch) throw std::invalid_argument("conv3x3: kernel input width");
    return kernel(ag::gather<float>(x, static_cast<Eigen::Index>(h) * w, 9 * ch, im2col_index(h, w, ch)));
}

ConvRemover ConvRemover::create(ParamStore<float>& store, const std::string& prefix, int channels, int hidden,
                                Rng& rng, int scale) {
    Linear<float>(store, prefix + ".conv1", 9 * channels, hidden, Init::xavier, rng);
    Linear<float>(store, prefix + ".conv2", 9 * hidden, hidden, Init::xavier, rng);
    Linear<float>(store, prefix + ".conv3", 9 * hidden, channels, Init::zero, rng);
    return bind(store, prefix, scale);
}

ConvRemover ConvRemover::bind(const ParamStore<float>& store, const std::string& prefix, int scale) {
    ConvRemover r;
    r.scale_ = scale;
    r.conv1_ = Linear<float>::bind(store, prefix + ".conv1");
    r.conv2_ = Linear<float>::bind(store, prefix + ".conv2");
    r.conv3_ = Linear<float>::bind(store, prefix + ".conv3");
    return r;
}

ag::Var<float> ConvRemover::forward(const Image& lq) const {
    require_unit_range(lq, "remover");
    const Image up = resize_bicubic(lq, lq.width * scale_, lq.height * scale_);
    const int h = up.height;
    const int w = up.width;
    const auto base = ag::constant<float>(up.to_mat());
    auto f = ag::relu<float>(conv3x3(base, h, w, conv1_));
    f = ag::relu<float>(conv3x3(f, h, w, conv2_));
    return ag::add<float>(base, conv3x3(f, h, w, conv3_));
}

Image ConvRemover::operator()(const Image& lq) const {
    ag::NoGradGuard no_grad;
    const auto out = forward(lq);
    return clamp01(Image::from_mat(out->value, lq.width * scale_, lq.height * scale_));
}

RemoverTrainReport train_remover(ConvRemover& remover, ParamStore<float>& store, const std::string& prefix,
                                 const std::vector<std::pair<Image, Image>>& pairs, int steps, double lr,
                                 std::uint64_t seed) {
    if (pairs.empty()) throw std::invalid_argument("train_remover: no pairs");
    std::vector<bool> saved;
    for (const auto& [name, v] : store.entries()) saved.push_back(v->requires_grad);
    store.set_trainable({prefix + "."});

    auto eval_mse = [&] {
        double s = 0.0;
        for (const auto& [lq, hq] : pairs) {
            const Matf pred = remover(lq).to_mat();
            s += (pred - hq.to_mat()).squaredNorm() / static_cast<double>(pred.size());
        }
        return s / static_cast<double>(pairs.size());
    };
    RemoverTrainReport report;
    report.initial_mse = eval_mse();
    AdamWConfig oc;
    oc.lr = lr;
    AdamW<float> opt(oc);
    Rng rng(seed);
    for (int step = 0; step < steps; ++step) {
        const auto& [lq, hq] = pairs[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pairs.size()) - 1))];
        store.zero_grad();
        ag::backward<float>(ag::mse<float>(remover.forward(lq), hq.to_mat()));
        opt.step(store);
    }
    report.final_mse = eval_mse();
    std::size_t i = 0;
    for (auto& [name, v] : store.entries()) v->requires_grad = saved[i++];
    return report;
}

void RestorationConfig::validate() const {
    backbone.validate();
    if (num_experts < 1) throw std::invalid_argument("num_experts must be >= 1");
    if (vocab_size < 1) throw std::invalid_argument("vocab_size must be >= 1");
    if (remover != "conv" && remover != "bicubic") throw std::invalid_argument("remover must be conv or bicubic");
    if (scale != 4) throw std::invalid_argument("restoration scale must be 4");
    if (backbone.latent_hw % scale != 0) throw std::invalid_argument("latent side must be divisible by the scale");
    if (diffusion_steps < 1) throw std::invalid_argument("diffusion_steps must be >= 1");
    if (codec.scale == 0.0) throw std::invalid_argument("codec scale must be nonzero");
    if (clip_x0 < 0.0) throw std::invalid_argument("clip_x0 must be >= 0");
}

void to_json(nlohmann::json& j, const RestorationConfig& c) {
    j = nlohmann::json{{"backbone", c.backbone},
                       {"num_experts", c.num_experts},
                       {"vocab_size", c.vocab_size},
                       {"remover", c.remover},
                       {"remover_hidden", c.remover_hidden},
                       {"train_remover_jointly", c.train_remover_jointly},
                       {"codec", {{"scale", c.codec.scale}, {"shift", c.codec.shift}}},
                       {"schedule", to_string(c.schedule)},
                       {"diffusion_steps", c.diffusion_steps},
                       {"prompt", c.prompt},
                       {"negative_prompt", c.negative_prompt},
                       {"null_prompt", c.null_prompt},
                       {"clip_x0", c.clip_x0},
                       {"scale", c.scale}};
}

void from_json(const nlohmann::json& j, RestorationConfig& c) {
    if (j.contains("backbone")) c.backbone = j.at("backbone").get<BackboneConfig>();
    c.num_experts = j.value("num_experts", c.num_experts);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.remover = j.value("remover", c.remover);
    c.remover_hidden = j.value("remover_hidden", c.remover_hidden);
    c.train_remover_jointly = j.value("train_remover_jointly", c.train_remover_jointly);
    if (j.contains("codec")) {
        c.codec.scale = j.at("codec").value("scale", c.codec.scale);
        c.codec.shift = j.at("codec").value("shift", c.codec.shift);
    }
    if (j.contains("schedule")) c.schedule = parse_schedule_kind(j.at("schedule").get<std::string>());
    c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
    c.prompt = j.value("prompt", c.prompt);
    c.negative_prompt = j.value("negative_prompt", c.negative_prompt);
    c.null_prompt = j.value("null_prompt", c.null_prompt);
    c.clip_x0 = j.value("clip_x0", c.clip_x0);
    c.scale = j.value("scale", c.scale);
}

RestorationModel RestorationModel::create(const RestorationConfig& config, std::uint64_t seed) {
    config.validate();
    auto store = std::make_unique<ParamStore<float>>();
    Rng rng(seed);
    TextEmbedder<float>::create(*store, "text", config.vocab_size, config.backbone.text_dim, rng);
    const auto backbone = Backbone<float>::create(*store, "backbone", config.backbone, rng);
    ControlBranch<float>::init_from_backbone(*store, "control", backbone, config.num_experts, rng);
    if (config.remover == "conv") {
        ConvRemover::create(*store, "remover", config.backbone.latent_channels, config.remover_hidden, rng,
                            config.scale);
    }
    return bind(config, std::move(*store));
}

RestorationModel RestorationModel::bind(const RestorationConfig& config, ParamStore<float> store) {
    config.validate();
    RestorationModel m;
    m.config_ = config;
    m.store_ = std::make_unique<ParamStore<float>>(std::move(store));
    m.text_ = TextEmbedder<float>::bind(*m.store_, "text");
    m.backbone_ = Backbone<float>::bind(*m.store_, "backbone", config.backbone);
    m.control_ = ControlBranch<float>::bind(*m.store_, "control", config.backbone, config.num_experts);
    if (config.remover == "conv") m.conv_remover_ = ConvRemover::bind(*m.store_, "remover", config.scale);
    m.bicubic_ = BicubicRemover(config.scale);
    return m;
}

const DegradationRemover& RestorationModel::remover() const {
    if (conv_remover_) return *conv_remover_;
    return bicubic_;
}

DiffusionSchedule RestorationModel::schedule() const { return make_schedule(config_.diffusion_steps, config_.schedule); }

TextTokens<float> RestorationModel::caption_tokens(const std::string& caption) const {
    return text_.embed(caption, config_.backbone.max_text_tokens);
}

TextTokens<float> RestorationModel::prompt_tokens(bool negative) const {
    if (config_.null_prompt) return caption_tokens("");
    return caption_tokens(negative ? config_.negative_prompt : config_.prompt);
}

RestorationModel::BranchImages RestorationModel::branch_images(const Image& lq) const {
    const int side = config_.lq_side();
    if (lq.width != side || lq.height != side || lq.channels != config_.backbone.latent_channels) {
        throw std::invalid_argument("LQ image must be " + std::to_string(side) + "x" + std::to_string(side) + "x" +
                                    std::to_string(config_.backbone.latent_channels) + ", got " +
                                    std::to_string(lq.width) + "x" + std::to_string(lq.height) + "x" +
                                    std::to_string(lq.channels));
    }
    BranchImages b;
    b.lq_up = clamp01(resize_bicubic(lq, lq.width * config_.scale, lq.height * config_.scale));
    b.ref = remover()(lq);
    return b;
}

ControlCondition<float> RestorationModel::condition(const BranchImages& imgs) const {
    const auto x_lq = control_.encode_lq(ag::constant<float>(config_.codec.encode(imgs.lq_up)));
    const auto x_ref = control_.encode_ref(ag::constant<float>(config_.codec.encode(imgs.ref)));
    return control_.prepare_condition(x_lq, x_ref);
}

ag::Var<float> RestorationModel::predict(const Matf& z_t, int t, const TextTokens<float>& text,
                                         const ControlCondition<float>* cond) const {
    return controlled_forward<float>(backbone_, control_, ag::constant<float>(z_t), t, text, cond);
}

Image RestorationModel::restore(const Image& lq, const GuidanceConfig& guidance) const {
    ag::NoGradGuard no_grad;
    const auto cond = condition(lq);
    const auto pos = prompt_tokens(false);
    const auto neg = prompt_tokens(true);
    const auto sched = schedule();
    SampleOptions opts;
    if (config_.clip_x0 > 0.0) opts.clip_x0 = config_.clip_x0;
    auto model = [&](const Matf& z, int t, const TextTokens<float>& text) -> Matf {
        return predict(z, t, text, &cond)->value;
    };
    const int side = config_.hq_side();
    const Matf z = sample<float>(model, pos, neg, guidance, sched, static_cast<Eigen::Index>(side) * side,
                                 config_.backbone.latent_channels, opts);
    return config_.codec.decode(z, side, side);
}

Image RestorationModel::sample_backbone(const GuidanceConfig& guidance) const {
    ag::NoGradGuard no_grad;
    const auto pos = prompt_tokens(false);
    const auto neg = prompt_tokens(true);
    const auto sched = schedule();
    SampleOptions opts;
    if (config_.clip_x0 > 0.0) opts.clip_x0 = config_.clip_x0;
    auto model = [&](const Matf& z, int t, const TextTokens<float>& text) -> Matf {
        return predict(z, t, text, nullptr)->value;
    };
    const int side = config_.hq_side();
    const Matf z = sample<float>(model, pos, neg, guidance, sched, static_cast<Eigen::Index>(side) * side,
                                 config_.backbone.latent_channels, opts);
    return config_.codec.decode(z, side, side);
}

#define DREAMCLEAR_CONTROL_INSTANTIATE(T)                                                                          \
    template TokenGrid<T> encode_condition<T>(const ag::Var<T>&, const Linear<T>&, const BackboneConfig&);       \
    template class ControlBranch<T>;                                                                             \
    template ag::Var<T> controlled_forward<T>(const Backbone<T>&, const ControlBranch<T>&, const ag::Var<T>&, int, \
                                              const TextTokens<T>&, const ControlCondition<T>*);

DREAMCLEAR_CONTROL_INSTANTIATE(float)
DREAMCLEAR_CONTROL_INSTANTIATE(double)

}  // namespace dreamclear

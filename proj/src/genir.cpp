#include "dreamclear/genir.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <Eigen/Dense>
#include <httplib.h>

namespace dreamclear {

using nlohmann::json;

// ---------------------------------------------------------------- prompt bank

namespace {

Matf cycled_rows(const TextEmbedder<float>& embedder, const std::string& text, int count, const char* what) {
    Matf out(count, embedder.dim());
    if (count == 0) return out;
    const auto tokens = embedder.embed(text, std::numeric_limits<int>::max());
    const Matf& rows = tokens.embeddings->value;
    if (rows.rows() == 0) throw std::invalid_argument(std::string("prompt bank: empty ") + what + " init text");
    for (int i = 0; i < count; ++i) out.row(i) = rows.row(i % rows.rows());
    return out;
}

TextTokens<float> all_visible(const ag::Var<float>& rows) {
    TextTokens<float> t;
    t.embeddings = rows;
    t.mask.assign(static_cast<std::size_t>(rows->rows()), 1);
    return t;
}

}  // namespace

PromptBank PromptBank::init(ParamStore<float>& store, const std::string& prefix, int m, int n_tok,
                            const std::string& pos_init_text, const std::string& neg_init_text,
                            const TextEmbedder<float>& embedder) {
    if (m < 0 || n_tok < 0) throw std::invalid_argument("prompt bank: token counts must be non-negative");
    store.add(prefix + ".pos", cycled_rows(embedder, pos_init_text, m, "positive"));
    store.add(prefix + ".neg", cycled_rows(embedder, neg_init_text, n_tok, "negative"));
    return bind(store, prefix, pos_init_text, neg_init_text);
}

PromptBank PromptBank::bind(const ParamStore<float>& store, const std::string& prefix, std::string pos_init_text,
                            std::string neg_init_text) {
    PromptBank b;
    b.pos = store.get(prefix + ".pos");
    b.neg = store.get(prefix + ".neg");
    if (b.pos->cols() != b.neg->cols()) throw std::invalid_argument("prompt bank: width mismatch");
    b.pos_init_text = std::move(pos_init_text);
    b.neg_init_text = std::move(neg_init_text);
    return b;
}

TextTokens<float> PromptBank::pos_tokens() const { return all_visible(pos); }
TextTokens<float> PromptBank::neg_tokens() const { return all_visible(neg); }

// ---------------------------------------------------------------- config

void GenIRConfig::validate() const {
    backbone.validate();
    if (vocab_size <= 0) throw std::invalid_argument("genir: vocab_size must be positive");
    if (diffusion_steps <= 1) throw std::invalid_argument("genir: diffusion_steps must exceed 1");
    if (bank_pos < 0 || bank_neg < 0) throw std::invalid_argument("genir: bank sizes must be non-negative");
    if (bank_pos >= backbone.max_text_tokens) {
        throw std::invalid_argument("genir: bank_pos must leave room for scene tokens");
    }
    if (bank_neg > backbone.max_text_tokens) throw std::invalid_argument("genir: bank_neg exceeds max_text_tokens");
    if (!(img2img_strength >= 0.0 && img2img_strength <= 1.0)) {
        throw std::invalid_argument("genir: img2img_strength must be in [0, 1]");
    }
    if (sample_steps <= 0 || sample_steps > diffusion_steps) throw std::invalid_argument("genir: bad sample_steps");
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("genir: threshold must be in [0, 1]");
    if (clip_x0 < 0.0) throw std::invalid_argument("genir: clip_x0 must be non-negative");
}

void to_json(json& j, const GenIRConfig& c) {
    j = json{{"backbone", c.backbone},
             {"vocab_size", c.vocab_size},
             {"codec", {{"scale", c.codec.scale}, {"shift", c.codec.shift}}},
             {"schedule", to_string(c.schedule)},
             {"diffusion_steps", c.diffusion_steps},
             {"bank_pos", c.bank_pos},
             {"bank_neg", c.bank_neg},
             {"pos_init_text", c.pos_init_text},
             {"neg_init_text", c.neg_init_text},
             {"neg_style_text", c.neg_style_text},
             {"img2img_strength", c.img2img_strength},
             {"sample_steps", c.sample_steps},
             {"curate_omega", c.curate_omega},
             {"clip_x0", c.clip_x0},
             {"threshold", c.threshold}};
}

void from_json(const json& j, GenIRConfig& c) {
    const GenIRConfig d;
    c.backbone = j.value("backbone", d.backbone);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    if (j.contains("codec")) {
        c.codec.scale = j.at("codec").value("scale", d.codec.scale);
        c.codec.shift = j.at("codec").value("shift", d.codec.shift);
    }
    c.schedule = parse_schedule_kind(j.value("schedule", to_string(d.schedule)));
    c.diffusion_steps = j.value("diffusion_steps", d.diffusion_steps);
    c.bank_pos = j.value("bank_pos", d.bank_pos);
    c.bank_neg = j.value("bank_neg", d.bank_neg);
    c.pos_init_text = j.value("pos_init_text", d.pos_init_text);
    c.neg_init_text = j.value("neg_init_text", d.neg_init_text);
    c.neg_style_text = j.value("neg_style_text", d.neg_style_text);
    c.img2img_strength = j.value("img2img_strength", d.img2img_strength);
    c.sample_steps = j.value("sample_steps", d.sample_steps);
    c.curate_omega = j.value("curate_omega", d.curate_omega);
    c.clip_x0 = j.value("clip_x0", d.clip_x0);
    c.threshold = j.value("threshold", d.threshold);
}

// ---------------------------------------------------------------- model

GenIRModel GenIRModel::create(const GenIRConfig& config, std::uint64_t seed) {
    config.validate();
    ParamStore<float> store;
    Rng rng(seed);
    const auto text = TextEmbedder<float>::create(store, "text", config.vocab_size, config.backbone.text_dim, rng);
    Backbone<float>::create(store, "backbone", config.backbone, rng);
    PromptBank::init(store, "bank", config.bank_pos, config.bank_neg, config.pos_init_text, config.neg_init_text,
                     text);
    return bind(config, std::move(store));
}

GenIRModel GenIRModel::bind(const GenIRConfig& config, ParamStore<float> store) {
    config.validate();
    GenIRModel m;
    m.config_ = config;
    m.store_ = std::make_unique<ParamStore<float>>(std::move(store));
    m.text_ = TextEmbedder<float>::bind(*m.store_, "text");
    m.backbone_ = Backbone<float>::bind(*m.store_, "backbone", config.backbone);
    m.bank_ = PromptBank::bind(*m.store_, "bank", config.pos_init_text, config.neg_init_text);
    if (m.bank_.num_pos() != config.bank_pos || m.bank_.num_neg() != config.bank_neg) {
        throw std::invalid_argument("genir: stored bank size differs from config");
    }
    return m;
}

DiffusionSchedule GenIRModel::schedule() const { return make_schedule(config_.diffusion_steps, config_.schedule); }

SampleOptions GenIRModel::sample_options() const {
    SampleOptions opts;
    if (config_.clip_x0 > 0.0) opts.clip_x0 = config_.clip_x0;
    return opts;
}

TextTokens<float> GenIRModel::caption_tokens(const std::string& caption) const {
    return text_.embed(caption, config_.backbone.max_text_tokens);
}

TextTokens<float> GenIRModel::positive_tokens(const std::string& scene) const {
    const auto words = text_.embed(scene, config_.backbone.max_text_tokens - bank_.num_pos());
    if (bank_.num_pos() == 0) return words;
    return concat_text<float>({words, bank_.pos_tokens()}, text_.dim());
}

ag::Var<float> GenIRModel::predict(const Matf& z_t, int t, const TextTokens<float>& text) const {
    return backbone_.forward(ag::constant<float>(z_t), t, text);
}

std::vector<std::string> GenIRModel::finetune_prefixes() const {
    std::vector<std::string> out{"bank."};
    for (int i = 0; i < config_.backbone.num_blocks; ++i) {
        const std::string block = "backbone.blocks." + std::to_string(i);
        out.push_back(block + ".cross_k.");
        out.push_back(block + ".cross_v.");
    }
    return out;
}

namespace {

void check_model_image(const Image& img, const GenIRConfig& cfg) {
    const int side = cfg.backbone.latent_hw;
    if (img.width != side || img.height != side || img.channels != cfg.backbone.latent_channels) {
        throw std::invalid_argument("image must be " + std::to_string(side) + "x" + std::to_string(side) + "x" +
                                    std::to_string(cfg.backbone.latent_channels));
    }
}

}  // namespace

Image img2img_negative(const Image& img, double strength, const std::string& neg_style_text, const GenIRModel& model,
                       const DiffusionSchedule& sched, Rng& rng, int steps) {
    if (!(strength >= 0.0 && strength <= 1.0)) throw std::invalid_argument("img2img strength must be in [0, 1]");
    if (steps <= 0) throw std::invalid_argument("img2img steps must be positive");
    const GenIRConfig& cfg = model.config();
    check_model_image(img, cfg);
    const int t0 = static_cast<int>(std::floor(strength * sched.num_steps)) - 1;
    if (t0 < 0) return img;

    ag::NoGradGuard no_grad;
    const int side = cfg.backbone.latent_hw;
    const auto rows = static_cast<Eigen::Index>(side) * side;
    const Eigen::Index cols = cfg.backbone.latent_channels;
    const Matf eps = rng.normal_matrix<float>(rows, cols);
    Matf z_start;
    if (strength >= 1.0) {
        z_start = eps;
    } else {
        z_start = add_noise<float>(cfg.codec.encode(img), t0, eps, sched);
    }
    const int n = std::min(t0 + 1, std::max(1, static_cast<int>(std::ceil(strength * steps))));
    const RespacedSchedule plan = respace(sched, n, t0);
    const auto style = model.caption_tokens(neg_style_text);
    auto fn = [&](const Matf& z, int t, const TextTokens<float>& text) -> Matf { return model.predict(z, t, text)->value; };
    const Matf z = sample_from<float>(fn, style, style, 1.0, plan, z_start, rng, model.sample_options());
    return quantize_u8(cfg.codec.decode(z, side, side));
}

// ---------------------------------------------------------------- training

void CaptionRecord::validate() const {
    if (caption.empty()) throw std::invalid_argument("caption record " + image_id + ": empty caption");
}

namespace {

std::string source_name(CaptionSource s) {
    switch (s) {
        case CaptionSource::mllm:
            return "mllm";
        case CaptionSource::template_text:
            return "template";
        case CaptionSource::human:
            return "human";
    }
    return "template";
}

}  // namespace

void to_json(json& j, const CaptionRecord& r) {
    j = json{{"image_id", r.image_id}, {"caption", r.caption}, {"source", source_name(r.source)}};
}

void from_json(const json& j, CaptionRecord& r) {
    r.image_id = j.at("image_id").get<std::string>();
    r.caption = j.at("caption").get<std::string>();
    const auto s = j.value("source", std::string("template"));
    if (s == "mllm") {
        r.source = CaptionSource::mllm;
    } else if (s == "template") {
        r.source = CaptionSource::template_text;
    } else if (s == "human") {
        r.source = CaptionSource::human;
    } else {
        throw std::invalid_argument("unknown caption source: " + s);
    }
    r.validate();
}

namespace {

double run_step(GenIRModel& model, const std::vector<std::pair<const Image*, TextTokens<float>>>& items,
                AdamW<float>& opt, Rng& rng) {
    const auto sched = model.schedule();
    const GenIRConfig& cfg = model.config();
    model.store().zero_grad();
    double total = 0.0;
    const float inv = 1.0f / static_cast<float>(items.size());
    auto fn = [&](const Matf& z, int t, const TextTokens<float>& text) { return model.predict(z, t, text); };
    for (const auto& [img, text] : items) {
        const Matf z0 = cfg.codec.encode(*img);
        const auto loss = diffusion_loss<float>(fn, z0, text, sched, rng);
        total += loss->value(0, 0);
        ag::backward<float>(ag::scale<float>(loss, inv));
    }
    opt.step(model.store());
    return total / static_cast<double>(items.size());
}

}  // namespace

double t2i_train_step(GenIRModel& model, const std::vector<CaptionedImage>& batch, AdamW<float>& opt, Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("t2i_train_step: empty batch");
    model.store().set_trainable({"text.", "backbone."});
    std::vector<std::pair<const Image*, TextTokens<float>>> items;
    for (const auto& item : batch) {
        check_model_image(item.image, model.config());
        items.emplace_back(&item.image, model.caption_tokens(item.caption));
    }
    return run_step(model, items, opt, rng);
}

double dual_prompt_finetune_step(GenIRModel& model, const std::vector<LabeledImage>& batch, AdamW<float>& opt,
                                 Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("dual_prompt_finetune_step: empty batch");
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (!batch[i].label) throw std::invalid_argument("dual_prompt_finetune_step: item " + std::to_string(i) +
                                                         " has no label");
        check_model_image(batch[i].image, model.config());
    }
    model.store().set_trainable(model.finetune_prefixes());
    std::vector<std::pair<const Image*, TextTokens<float>>> items;
    for (const auto& item : batch) {
        items.emplace_back(&item.image, *item.label == SampleLabel::positive ? model.positive_tokens(item.caption)
                                                                             : model.bank().neg_tokens());
    }
    return run_step(model, items, opt, rng);
}

namespace {

std::vector<Image> generate_with(const GenIRModel& model, const std::vector<std::string>& scenes,
                                 const GuidanceConfig& guidance, bool use_bank) {
    if (scenes.empty()) throw std::invalid_argument("generate: empty scene list");
    ag::NoGradGuard no_grad;
    const auto sched = model.schedule();
    guidance.validate(sched);
    const GenIRConfig& cfg = model.config();
    const int side = cfg.backbone.latent_hw;
    auto fn = [&](const Matf& z, int t, const TextTokens<float>& text) -> Matf { return model.predict(z, t, text)->value; };
    const auto neg = use_bank ? model.bank().neg_tokens() : model.caption_tokens("");
    const RespacedSchedule plan = respace(sched, guidance.steps);
    std::vector<Image> out;
    out.reserve(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        Rng rng(derive_seed(guidance.seed, i));
        const auto pos = use_bank ? model.positive_tokens(scenes[i]) : model.caption_tokens(scenes[i]);
        Matf z = rng.normal_matrix<float>(static_cast<Eigen::Index>(side) * side, cfg.backbone.latent_channels);
        z = sample_from<float>(fn, pos, neg, guidance.omega, plan, std::move(z), rng, model.sample_options());
        out.push_back(quantize_u8(cfg.codec.decode(z, side, side)));
    }
    return out;
}

}  // namespace

std::vector<Image> generate_candidates(const GenIRModel& model, const std::vector<std::string>& scenes,
                                       const GuidanceConfig& guidance) {
    return generate_with(model, scenes, guidance, true);
}

std::vector<Image> generate_plain(const GenIRModel& model, const std::vector<std::string>& scenes,
                                  const GuidanceConfig& guidance) {
    return generate_with(model, scenes, guidance, false);
}

// ---------------------------------------------------------------- classifier

std::vector<double> quality_features(const Image& img) {
    if (img.channels != 3) throw std::invalid_argument("quality_features: RGB image required");
    const int w = img.width, h = img.height;
    if (w < 3 || h < 3) throw std::invalid_argument("quality_features: image too small");
    Image y(w, h, 1);
    for (int yy = 0; yy < h; ++yy) {
        for (int x = 0; x < w; ++x) {
            y.at(x, yy, 0) = 0.299f * img.at(x, yy, 0) + 0.587f * img.at(x, yy, 1) + 0.114f * img.at(x, yy, 2);
        }
    }
    auto at = [&](int x, int yy) { return static_cast<double>(y.at(x, yy, 0)); };

    double grad = 0.0, lap = 0.0;
    for (int yy = 1; yy < h - 1; ++yy) {
        for (int x = 1; x < w - 1; ++x) {
            const double gx = 0.5 * (at(x + 1, yy) - at(x - 1, yy));
            const double gy = 0.5 * (at(x, yy + 1) - at(x, yy - 1));
            grad += std::sqrt(gx * gx + gy * gy);
            lap += std::abs(at(x + 1, yy) + at(x - 1, yy) + at(x, yy + 1) + at(x, yy - 1) - 4.0 * at(x, yy));
        }
    }
    const double inner = static_cast<double>(w - 2) * (h - 2);
    grad /= inner;
    lap /= inner;

    double mean = 0.0, sat = 0.0;
    for (int yy = 0; yy < h; ++yy) {
        for (int x = 0; x < w; ++x) {
            mean += at(x, yy);
            const float r = img.at(x, yy, 0), g = img.at(x, yy, 1), b = img.at(x, yy, 2);
            sat += std::max({r, g, b}) - std::min({r, g, b});
        }
    }
    const double n = static_cast<double>(w) * h;
    mean /= n;
    sat /= n;

    const Image smooth = gaussian_blur(y, 1.0);
    double var = 0.0, high = 0.0;
    for (int yy = 0; yy < h; ++yy) {
        for (int x = 0; x < w; ++x) {
            const double d = at(x, yy) - mean;
            var += d * d;
            const double hp = at(x, yy) - smooth.at(x, yy, 0);
            high += hp * hp;
        }
    }
    var /= n;
    high /= n;
    const double hf_ratio = high / (var + 1e-6);
    return {grad, lap, std::sqrt(var), sat, hf_ratio, mean};
}

LogisticRegression LogisticRegression::fit(const std::vector<std::vector<double>>& pos,
                                           const std::vector<std::vector<double>>& neg,
                                           const ClassifierConfig& config) {
    if (pos.empty() || neg.empty()) throw std::invalid_argument("classifier: both classes must be non-empty");
    if (config.l2 < 0.0 || config.iterations <= 0) throw std::invalid_argument("classifier: bad config");
    const std::size_t d = pos.front().size();
    if (d == 0) throw std::invalid_argument("classifier: empty feature vectors");
    const auto n = static_cast<Eigen::Index>(pos.size() + neg.size());
    Eigen::MatrixXd x(n, static_cast<Eigen::Index>(d));
    Eigen::VectorXd y(n);
    Eigen::Index r = 0;
    for (const auto* set : {&pos, &neg}) {
        for (const auto& f : *set) {
            if (f.size() != d) throw std::invalid_argument("classifier: inconsistent feature length");
            for (std::size_t k = 0; k < d; ++k) x(r, static_cast<Eigen::Index>(k)) = f[k];
            y(r) = set == &pos ? 1.0 : 0.0;
            ++r;
        }
    }
    LogisticRegression m;
    m.mean_.resize(d);
    m.stddev_.resize(d);
    for (std::size_t k = 0; k < d; ++k) {
        auto col = x.col(static_cast<Eigen::Index>(k));
        const double mu = col.mean();
        const double sd = std::sqrt((col.array() - mu).square().mean());
        m.mean_[k] = mu;
        m.stddev_[k] = sd > 1e-12 ? sd : 1.0;
        col = (col.array() - mu) / m.stddev_[k];
    }
    // Intercept as the last column; it is not penalized.
    Eigen::MatrixXd a(n, static_cast<Eigen::Index>(d) + 1);
    a << x, Eigen::VectorXd::Ones(n);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(a.cols());
    Eigen::VectorXd penalty = Eigen::VectorXd::Constant(a.cols(), config.l2 * static_cast<double>(n));
    penalty(a.cols() - 1) = 0.0;
    for (int it = 0; it < config.iterations; ++it) {
        const Eigen::VectorXd prob = (1.0 / (1.0 + (-(a * beta)).array().exp())).matrix();
        const Eigen::VectorXd wdiag = (prob.array() * (1.0 - prob.array())).max(1e-10);
        const Eigen::VectorXd grad = a.transpose() * (prob - y) + penalty.cwiseProduct(beta);
        Eigen::MatrixXd hess = a.transpose() * wdiag.asDiagonal() * a;
        hess.diagonal() += penalty;
        hess.diagonal().array() += 1e-9;
        const Eigen::VectorXd delta = hess.ldlt().solve(grad);
        beta -= delta;
        if (delta.norm() < 1e-10) break;
    }
    m.weights_.assign(beta.data(), beta.data() + d);
    m.bias_ = beta(static_cast<Eigen::Index>(d));
    return m;
}

double LogisticRegression::probability(const std::vector<double>& features) const {
    if (features.size() != weights_.size()) throw std::invalid_argument("classifier: feature length mismatch");
    double s = bias_;
    for (std::size_t k = 0; k < features.size(); ++k) s += weights_[k] * (features[k] - mean_[k]) / stddev_[k];
    return 1.0 / (1.0 + std::exp(-s));
}

json LogisticRegression::to_json() const {
    return json{{"kind", "logistic"}, {"mean", mean_}, {"stddev", stddev_}, {"weights", weights_}, {"bias", bias_}};
}

LogisticRegression LogisticRegression::from_json(const json& j) {
    LogisticRegression m;
    m.mean_ = j.at("mean").get<std::vector<double>>();
    m.stddev_ = j.at("stddev").get<std::vector<double>>();
    m.weights_ = j.at("weights").get<std::vector<double>>();
    m.bias_ = j.at("bias").get<double>();
    if (m.mean_.size() != m.weights_.size() || m.stddev_.size() != m.weights_.size()) {
        throw std::invalid_argument("classifier: inconsistent parameter lengths");
    }
    return m;
}

QualityClassifier QualityClassifier::train(const std::vector<Image>& pos, const std::vector<Image>& neg,
                                           const ClassifierConfig& config) {
    if (pos.empty() || neg.empty()) throw std::invalid_argument("classifier: both classes must be non-empty");
    std::vector<std::vector<double>> fp, fn;
    for (const auto& img : pos) fp.push_back(quality_features(img));
    for (const auto& img : neg) fn.push_back(quality_features(img));
    QualityClassifier c;
    c.model_ = LogisticRegression::fit(fp, fn, config);
    return c;
}

double QualityClassifier::score(const Image& img) const { return model_.probability(quality_features(img)); }

QualityClassifier QualityClassifier::from_json(const json& j) {
    QualityClassifier c;
    c.model_ = LogisticRegression::from_json(j);
    return c;
}

// ---------------------------------------------------------------- screening

MllmTemplate parse_mllm_template(const std::string& name) {
    if (name == "text_filter") return MllmTemplate::text_filter;
    if (name == "image_filter") return MllmTemplate::image_filter;
    throw std::invalid_argument("unknown MLLM template: " + name);
}

std::string to_string(MllmTemplate t) { return t == MllmTemplate::text_filter ? "text_filter" : "image_filter"; }

const std::string& template_text(MllmTemplate t) {
    static const std::string text_filter =
        "You are an AI language assistant, and you are analyzing a series of text prompts. Your task is to identify "
        "whether these text prompts contain any inappropriate content such as personal privacy violations or NSFW "
        "material. Delete any inappropriate text prompts and return the remaining ones in their original format.";
    static const std::string image_filter =
        "You are an AI visual assistant, and you are analyzing a single image. Your task is to check the image for any "
        "anomalies, irregularities, or content that does not align with common sense or normal expectations. "
        "Additionally, identify any inappropriate content such as personal privacy violations or NSFW material. If "
        "the image does not contain any of the aforementioned issues, it has passed the inspection. Please determine "
        "whether this image has passed the inspection (answer yes/no) and provide your reasoning.";
    return t == MllmTemplate::text_filter ? text_filter : image_filter;
}

StubMllmClient StubMllmClient::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open MLLM stub file " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("bad MLLM stub file " + path.string() + ": " + e.what());
    }
    std::map<std::string, std::string> responses;
    if (j.contains("responses")) responses = j.at("responses").get<std::map<std::string, std::string>>();
    return StubMllmClient(j.value("default", std::string("yes")), std::move(responses));
}

std::string StubMllmClient::send(const MllmRequest& request) {
    requests_.push_back(request);
    const auto it = responses_.find(request.item_id);
    return it == responses_.end() ? default_ : it->second;
}

HttpMllmClient::HttpMllmClient(std::string host, int port, std::string path, int retries, double timeout_seconds)
    : host_(std::move(host)), port_(port), path_(std::move(path)), retries_(retries), timeout_(timeout_seconds) {
    if (retries_ < 0) throw std::invalid_argument("retries must be non-negative");
    if (!(timeout_ > 0.0)) throw std::invalid_argument("timeout must be positive");
}

std::string HttpMllmClient::send(const MllmRequest& request) {
    json body{{"item_id", request.item_id}, {"prompt", request.prompt}};
    if (request.image_png) {
        const std::string raw(request.image_png->begin(), request.image_png->end());
        body["image_png_base64"] = httplib::detail::base64_encode(raw);
    }
    const std::string payload = body.dump();
    httplib::Client client(host_, port_);
    const auto secs = static_cast<time_t>(timeout_);
    const auto usecs = static_cast<time_t>((timeout_ - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt <= retries_; ++attempt) {
        auto res = client.Post(path_, payload, "application/json");
        if (!res) {
            last_error = httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 500) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200) throw MllmTransportError(request.item_id, "HTTP " + std::to_string(res->status));
        const std::string& text = res->body;
        const auto parsed = json::parse(text, nullptr, false);
        if (parsed.is_object() && parsed.contains("text") && parsed.at("text").is_string()) {
            return parsed.at("text").get<std::string>();
        }
        return text;
    }
    throw MllmTransportError(request.item_id, last_error);
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string first_word_lower(const std::string& s) {
    std::string w;
    for (const char c : s) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!w.empty()) {
            break;
        } else if (!std::isspace(static_cast<unsigned char>(c)) && c != '*' && c != '"' && c != '\'') {
            break;
        }
    }
    return w;
}

}  // namespace

ScreenOutcome parse_screen_response(const std::string& response, MllmTemplate t, const std::string& item_text) {
    ScreenOutcome out;
    const std::string body = trim(response);
    out.reason = body;
    if (t == MllmTemplate::image_filter) {
        const std::string w = first_word_lower(body);
        if (w == "yes") {
            out.pass = true;
        } else if (w == "no") {
            out.pass = false;
        }
        return out;
    }
    if (body.empty()) return out;
    const std::string needle = trim(item_text);
    out.pass = !needle.empty() && body.find(needle) != std::string::npos;
    return out;
}

namespace {

std::string request_prompt(MllmTemplate t, const std::string& text) {
    if (t == MllmTemplate::text_filter) return template_text(t) + "\n\n" + text;
    return template_text(t);
}

}  // namespace

void to_json(json& j, const FilterVerdict& v) {
    j = json{{"image_id", v.image_id},
             {"scene", v.scene},
             {"classifier_prob", v.classifier_prob},
             {"mllm_pass", v.mllm_pass ? json(*v.mllm_pass) : json(nullptr)},
             {"mllm_reason", v.mllm_reason ? json(*v.mllm_reason) : json(nullptr)},
             {"undecided", v.undecided},
             {"kept", v.kept},
             {"image_path", v.image_path}};
}

void from_json(const json& j, FilterVerdict& v) {
    v.image_id = j.at("image_id").get<std::string>();
    v.scene = j.value("scene", std::string());
    v.classifier_prob = j.at("classifier_prob").get<double>();
    v.mllm_pass.reset();
    v.mllm_reason.reset();
    if (j.contains("mllm_pass") && !j.at("mllm_pass").is_null()) v.mllm_pass = j.at("mllm_pass").get<bool>();
    if (j.contains("mllm_reason") && !j.at("mllm_reason").is_null()) {
        v.mllm_reason = j.at("mllm_reason").get<std::string>();
    }
    v.undecided = j.value("undecided", false);
    v.kept = j.at("kept").get<bool>();
    v.image_path = j.value("image_path", std::string());
}

namespace {

FilterVerdict screen_one(const ScreenItem& item, MllmClient& client, MllmTemplate t) {
    MllmRequest req;
    req.item_id = item.id;
    req.prompt = request_prompt(t, item.text);
    if (t == MllmTemplate::image_filter) {
        if (!item.image) throw std::invalid_argument("image_filter item " + item.id + " has no image");
        req.image_png = encode_png(*item.image);
    }
    const ScreenOutcome outcome = parse_screen_response(client.send(req), t, item.text);
    FilterVerdict v;
    v.image_id = item.id;
    v.scene = item.text;
    v.mllm_reason = outcome.reason;
    if (outcome.pass) {
        v.mllm_pass = *outcome.pass;
    } else {
        v.mllm_pass = false;
        v.undecided = true;
    }
    return v;
}

}  // namespace

std::vector<FilterVerdict> mllm_screen(const std::vector<ScreenItem>& items, MllmClient& client, MllmTemplate t,
                                       double threshold) {
    std::vector<FilterVerdict> out;
    out.reserve(items.size());
    for (const auto& item : items) {
        FilterVerdict v = screen_one(item, client, t);
        v.classifier_prob = item.classifier_prob;
        v.kept = v.classifier_prob >= threshold && v.mllm_pass != false;
        out.push_back(std::move(v));
    }
    return out;
}

std::string candidate_id(int index) {
    std::ostringstream os;
    os << "cand" << std::setw(6) << std::setfill('0') << index;
    return os.str();
}

CurateSummary curate(const CurateConfig& config, const std::function<Candidate(int)>& generate,
                     const std::function<double(const Image&)>& score, MllmClient& client) {
    if (config.out_dir.empty()) throw std::invalid_argument("curate: out_dir is required");
    if (config.count < 0) throw std::invalid_argument("curate: count must be non-negative");
    if (!(config.threshold >= 0.0 && config.threshold <= 1.0)) {
        throw std::invalid_argument("curate: threshold must be in [0, 1]");
    }
    const std::filesystem::path dir(config.out_dir);
    std::filesystem::create_directories(dir / "images");
    const auto manifest = dir / "manifest.jsonl";

    std::set<std::string> done;
    CurateSummary summary;
    {
        std::ifstream in(manifest);
        std::string line;
        while (std::getline(in, line)) {
            if (trim(line).empty()) continue;
            const auto j = json::parse(line, nullptr, false);
            // A torn last line from an interrupted run is regenerated.
            if (j.is_discarded()) continue;
            const FilterVerdict v = j.get<FilterVerdict>();
            if (done.insert(v.image_id).second) {
                ++summary.resumed;
                ++summary.total;
                if (v.classifier_prob >= config.threshold) ++summary.above_threshold;
                if (v.kept) ++summary.kept;
            }
        }
    }
    std::ofstream out(manifest, std::ios::app);
    if (!out) throw std::runtime_error("cannot open " + manifest.string());

    for (int i = 0; i < config.count; ++i) {
        const std::string id = candidate_id(i);
        if (done.count(id)) continue;
        Candidate cand = generate(i);
        FilterVerdict v;
        v.image_id = id;
        v.scene = cand.scene;
        v.classifier_prob = score(cand.image);
        if (!(v.classifier_prob >= 0.0 && v.classifier_prob <= 1.0)) {
            throw std::runtime_error("classifier probability out of range for " + id);
        }
        const bool above = v.classifier_prob >= config.threshold;
        if (above) {
            ++summary.above_threshold;
            const FilterVerdict s = screen_one(ScreenItem{id, cand.scene, cand.image, v.classifier_prob}, client,
                                               MllmTemplate::image_filter);
            v.mllm_pass = s.mllm_pass;
            v.mllm_reason = s.mllm_reason;
            v.undecided = s.undecided;
        }
        v.kept = above && v.mllm_pass != false;
        if (v.kept) {
            const auto rel = std::filesystem::path("images") / (id + ".png");
            save_png(cand.image, dir / rel);
            v.image_path = rel.string();
            ++summary.kept;
        }
        out << json(v).dump() << '\n';
        out.flush();
        ++summary.total;
    }
    return summary;
}

double sign_test_p(int wins, int trials) {
    if (trials < 0 || wins < 0 || wins > trials) throw std::invalid_argument("sign test: need 0 <= wins <= trials");
    if (wins == 0) return 1.0;
    // Sum of C(n, k) / 2^n for k >= wins, in log space.
    double total = 0.0;
    const double log_half_n = trials * std::log(0.5);
    for (int k = wins; k <= trials; ++k) {
        const double lc = std::lgamma(trials + 1.0) - std::lgamma(k + 1.0) - std::lgamma(trials - k + 1.0);
        total += std::exp(lc + log_half_n);
    }
    return std::min(1.0, total);
}

}  // namespace dreamclear

#include <cmath>
#include <fstream>

#include "dreamclear/checkpoint.hpp"
#include "dreamclear/genir.hpp"
#include "dreamclear/textures.hpp"

namespace dreamclear {

using nlohmann::json;

Image degrade_toy(const Image& img, double blur_sigma, double dirt) {
    if (blur_sigma < 0.0 || dirt < 0.0 || dirt > 1.0) throw std::invalid_argument("degrade_toy: bad parameters");
    Image out = blur_sigma > 0.0 ? gaussian_blur(img, blur_sigma) : img;
    const auto d = static_cast<float>(dirt);
    for (auto& v : out.pixels) v = (1.0f - d) * v + d * 0.5f;
    return quantize_u8(clamp01(std::move(out)));
}

std::vector<std::string> toy_scenes(int count, std::uint64_t seed) {
    if (count < 0) throw std::invalid_argument("toy_scenes: count must be non-negative");
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        out.push_back(texture_caption(sample_texture(rng)));
    }
    return out;
}

void to_json(json& j, const ToyCorpusConfig& c) {
    j = json{{"count", c.count},
             {"min_frequency", c.min_frequency},
             {"max_frequency", c.max_frequency},
             {"degraded_fraction", c.degraded_fraction},
             {"styled_fraction", c.styled_fraction},
             {"blur_sigma", c.blur_sigma},
             {"dirt", c.dirt}};
}

void from_json(const json& j, ToyCorpusConfig& c) {
    const ToyCorpusConfig d;
    c.count = j.value("count", d.count);
    c.min_frequency = j.value("min_frequency", d.min_frequency);
    c.max_frequency = j.value("max_frequency", d.max_frequency);
    c.degraded_fraction = j.value("degraded_fraction", d.degraded_fraction);
    c.styled_fraction = j.value("styled_fraction", d.styled_fraction);
    c.blur_sigma = j.value("blur_sigma", d.blur_sigma);
    c.dirt = j.value("dirt", d.dirt);
}

namespace {

CaptionedImage clean_texture(Rng& rng, int side, const ToyCorpusConfig& config) {
    const TextureSpec spec = sample_texture(rng, config.min_frequency, config.max_frequency);
    return {quantize_u8(render_texture(spec, side)), texture_caption(spec)};
}

}  // namespace

std::vector<CaptionedImage> toy_t2i_corpus(const ToyCorpusConfig& config, int side, const std::string& style_text,
                                           std::uint64_t seed) {
    std::vector<CaptionedImage> out;
    out.reserve(static_cast<std::size_t>(config.count));
    for (int i = 0; i < config.count; ++i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        CaptionedImage item = clean_texture(rng, side, config);
        if (rng.uniform() < config.degraded_fraction) {
            item.image = degrade_toy(item.image, config.blur_sigma, config.dirt);
            if (rng.uniform() < config.styled_fraction) item.caption += " " + style_text;
        }
        out.push_back(std::move(item));
    }
    return out;
}

std::vector<CaptionedImage> toy_clean_images(int count, int side, const ToyCorpusConfig& config,
                                             std::uint64_t seed) {
    std::vector<CaptionedImage> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        out.push_back(clean_texture(rng, side, config));
    }
    return out;
}

void PromptTrainConfig::validate() const {
    model.validate();
    if (model.backbone.latent_channels != 3) throw std::invalid_argument("train-prompts: toy images are RGB");
    if (corpus.count <= 0 && base_checkpoint.empty()) throw std::invalid_argument("train-prompts: empty corpus");
    if (base_steps < 0 || base_batch <= 0 || finetune_steps < 0 || finetune_batch <= 0) {
        throw std::invalid_argument("train-prompts: steps must be non-negative and batches positive");
    }
    if (num_positive <= 0 || num_negative <= 0) throw std::invalid_argument("train-prompts: need both classes");
    if (out_dir.empty()) throw std::invalid_argument("train-prompts: out_dir is required");
}

namespace {

json optim_json(const AdamWConfig& c) {
    return json{{"lr", c.lr},   {"beta1", c.beta1},
                {"beta2", c.beta2}, {"eps", c.eps},
                {"weight_decay", c.weight_decay}, {"max_grad_norm", c.max_grad_norm}};
}

AdamWConfig optim_from(const json& j, const AdamWConfig& d) {
    AdamWConfig c;
    c.lr = j.value("lr", d.lr);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.eps = j.value("eps", d.eps);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
    return c;
}

}  // namespace

void to_json(json& j, const PromptTrainConfig& c) {
    j = json{{"model", c.model},
             {"corpus", c.corpus},
             {"base_checkpoint", c.base_checkpoint},
             {"base_steps", c.base_steps},
             {"base_batch", c.base_batch},
             {"base_optim", optim_json(c.base_optim)},
             {"num_positive", c.num_positive},
             {"num_negative", c.num_negative},
             {"finetune_steps", c.finetune_steps},
             {"finetune_batch", c.finetune_batch},
             {"finetune_optim", optim_json(c.finetune_optim)},
             {"classifier", {{"l2", c.classifier.l2}, {"iterations", c.classifier.iterations}}},
             {"seed", c.seed},
             {"out_dir", c.out_dir},
             {"log_every", c.log_every}};
}

void from_json(const json& j, PromptTrainConfig& c) {
    const PromptTrainConfig d;
    c.model = j.value("model", d.model);
    c.corpus = j.value("corpus", d.corpus);
    c.base_checkpoint = j.value("base_checkpoint", d.base_checkpoint);
    c.base_steps = j.value("base_steps", d.base_steps);
    c.base_batch = j.value("base_batch", d.base_batch);
    c.base_optim = optim_from(j.value("base_optim", json::object()), d.base_optim);
    c.num_positive = j.value("num_positive", d.num_positive);
    c.num_negative = j.value("num_negative", d.num_negative);
    c.finetune_steps = j.value("finetune_steps", d.finetune_steps);
    c.finetune_batch = j.value("finetune_batch", d.finetune_batch);
    c.finetune_optim = optim_from(j.value("finetune_optim", json::object()), d.finetune_optim);
    if (j.contains("classifier")) {
        c.classifier.l2 = j.at("classifier").value("l2", d.classifier.l2);
        c.classifier.iterations = j.at("classifier").value("iterations", d.classifier.iterations);
    }
    c.seed = j.value("seed", d.seed);
    c.out_dir = j.value("out_dir", d.out_dir);
    c.log_every = j.value("log_every", d.log_every);
}

void save_genir(const GenIRModel& model, const std::filesystem::path& path) {
    Checkpoint ckpt;
    ckpt.config["kind"] = "genir";
    ckpt.config["model"] = model.config();
    ckpt.tensors = export_params(model.store());
    save_checkpoint(path, ckpt);
}

GenIRModel load_genir(const std::filesystem::path& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.config.value("kind", std::string()) != "genir") {
        throw std::runtime_error(path.string() + " is not a prompt-bank checkpoint");
    }
    return GenIRModel::bind(ckpt.config.at("model").get<GenIRConfig>(), store_from_tensors(ckpt.tensors));
}

PromptTrainResult train_prompts(const PromptTrainConfig& config, const std::function<void(const std::string&)>& log) {
    config.validate();
    auto say = [&](const std::string& s) {
        if (log) log(s);
    };
    const std::filesystem::path dir(config.out_dir);
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.jsonl", std::ios::app);
    auto record = [&](json j) {
        manifest << j.dump() << '\n';
        manifest.flush();
    };
    record({{"event", "config"}, {"config", config}});

    PromptTrainResult result;
    const int side = config.model.backbone.latent_hw;
    GenIRModel model = [&] {
        if (!config.base_checkpoint.empty()) {
            // Parameters from the checkpoint, settings from this run.
            return GenIRModel::bind(config.model, store_from_tensors(load_checkpoint(config.base_checkpoint).tensors));
        }
        return GenIRModel::create(config.model, derive_seed(config.seed, 1));
    }();

    if (config.base_checkpoint.empty()) {
        const auto corpus = toy_t2i_corpus(config.corpus, side, config.model.neg_style_text, derive_seed(config.seed, 2));
        AdamW<float> opt(config.base_optim);
        for (int step = 0; step < config.base_steps; ++step) {
            Rng rng(derive_seed(derive_seed(config.seed, 3), static_cast<std::uint64_t>(step)));
            std::vector<CaptionedImage> batch;
            for (int b = 0; b < config.base_batch; ++b) {
                batch.push_back(corpus[static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(corpus.size()) - 1))]);
            }
            const double loss = t2i_train_step(model, batch, opt, rng);
            result.base_losses.push_back(loss);
            if (config.log_every > 0 && step % config.log_every == 0) {
                say("base step " + std::to_string(step) + " loss " + std::to_string(loss));
                record({{"event", "loss"}, {"stage", "base"}, {"step", step}, {"loss", loss}});
            }
        }
        save_genir(model, dir / "base.ckpt");
    }

    // Positives are clean renders; negatives are synthesized from other clean
    // renders by noising and denoising toward the style prompt.
    const auto sched = model.schedule();
    const auto positives = toy_clean_images(config.num_positive, side, config.corpus, derive_seed(config.seed, 4));
    const auto sources = toy_clean_images(config.num_negative, side, config.corpus, derive_seed(config.seed, 5));
    std::vector<Image> negatives;
    for (int i = 0; i < config.num_negative; ++i) {
        Rng rng(derive_seed(derive_seed(config.seed, 6), static_cast<std::uint64_t>(i)));
        negatives.push_back(img2img_negative(sources[static_cast<std::size_t>(i)].image, config.model.img2img_strength,
                                             config.model.neg_style_text, model, sched, rng,
                                             config.model.sample_steps));
    }
    say("synthesized " + std::to_string(negatives.size()) + " negatives");

    std::vector<LabeledImage> labeled;
    for (const auto& p : positives) labeled.push_back({p.image, p.caption, SampleLabel::positive});
    for (std::size_t i = 0; i < negatives.size(); ++i) {
        labeled.push_back({negatives[i], sources[i].caption, SampleLabel::negative});
    }
    AdamW<float> opt(config.finetune_optim);
    for (int step = 0; step < config.finetune_steps; ++step) {
        Rng rng(derive_seed(derive_seed(config.seed, 7), static_cast<std::uint64_t>(step)));
        std::vector<LabeledImage> batch;
        for (int b = 0; b < config.finetune_batch; ++b) {
            batch.push_back(labeled[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(labeled.size()) - 1))]);
        }
        const double loss = dual_prompt_finetune_step(model, batch, opt, rng);
        result.finetune_losses.push_back(loss);
        if (config.log_every > 0 && step % config.log_every == 0) {
            say("finetune step " + std::to_string(step) + " loss " + std::to_string(loss));
            record({{"event", "loss"}, {"stage", "finetune"}, {"step", step}, {"loss", loss}});
        }
    }
    save_genir(model, dir / "genir.ckpt");

    std::vector<Image> pos_imgs;
    for (const auto& p : positives) pos_imgs.push_back(p.image);
    const QualityClassifier clf = QualityClassifier::train(pos_imgs, negatives, config.classifier);
    int correct = 0;
    for (const auto& img : pos_imgs) correct += clf.score(img) >= 0.5;
    for (const auto& img : negatives) correct += clf.score(img) < 0.5;
    result.classifier_train_accuracy = static_cast<double>(correct) / static_cast<double>(pos_imgs.size() + negatives.size());
    {
        std::ofstream out(dir / "classifier.json");
        out << clf.to_json().dump(2) << '\n';
        if (!out) throw std::runtime_error("cannot write classifier.json");
    }
    record({{"event", "done"}, {"classifier_train_accuracy", result.classifier_train_accuracy}});
    say("classifier train accuracy " + std::to_string(result.classifier_train_accuracy));
    return result;
}

}  // namespace dreamclear

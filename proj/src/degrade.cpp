#include "dreamclear/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace dreamclear {

namespace {

std::string mode_name(ResizeMode m) {
    switch (m) {
        case ResizeMode::area: return "area";
        case ResizeMode::bilinear: return "bilinear";
        case ResizeMode::bicubic: return "bicubic";
    }
    return "bicubic";
}

ResizeMode parse_mode(const std::string& s) {
    if (s == "area") return ResizeMode::area;
    if (s == "bilinear") return ResizeMode::bilinear;
    if (s == "bicubic") return ResizeMode::bicubic;
    throw std::invalid_argument("unknown resize mode: " + s);
}

Image resize_mode(const Image& img, int w, int h, ResizeMode mode) {
    switch (mode) {
        case ResizeMode::area: return resize_area(img, w, h);
        case ResizeMode::bilinear: return resize_bilinear(img, w, h);
        case ResizeMode::bicubic: return resize_bicubic(img, w, h);
    }
    return resize_bicubic(img, w, h);
}

void check_range(const Range& r, double lo, double hi, const char* name) {
    if (!(r.lo <= r.hi) || r.lo < lo || r.hi > hi) {
        throw std::invalid_argument(std::string("degradation config: ") + name + " range must lie within [" +
                                    std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
}

void range_to_json(nlohmann::json& j, const char* key, const Range& r) { j[key] = {r.lo, r.hi}; }

void range_from_json(const nlohmann::json& j, const char* key, Range& r) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2) throw std::invalid_argument(std::string("range ") + key + " must be [lo, hi]");
    r.lo = v[0].get<double>();
    r.hi = v[1].get<double>();
}

}  // namespace

void DegradationRecipe::validate() const {
    if (orders != 1 && orders != 2) throw std::invalid_argument("recipe orders must be 1 or 2");
    if (final_scale != 4) throw std::invalid_argument("recipe final scale must be 4");
    for (const auto& st : stages) {
        std::visit(
            [](const auto& s) {
                using S = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<S, BlurStage>) {
                    if (!(s.sigma >= 0.0)) throw std::invalid_argument("blur sigma must be >= 0");
                } else if constexpr (std::is_same_v<S, ResizeStage>) {
                    if (!(s.scale >= 0.15 && s.scale <= 1.5)) throw std::invalid_argument("resize scale outside [0.15, 1.5]");
                } else if constexpr (std::is_same_v<S, GaussianNoiseStage>) {
                    if (!(s.sigma >= 0.0 && s.sigma <= 50.0 / 255.0)) {
                        throw std::invalid_argument("noise sigma outside [0, 50/255]");
                    }
                } else if constexpr (std::is_same_v<S, PoissonNoiseStage>) {
                    if (!(s.scale >= 0.0)) throw std::invalid_argument("poisson scale must be >= 0");
                } else {
                    if (s.quality < 30 || s.quality > 95) throw std::invalid_argument("jpeg quality outside [30, 95]");
                }
            },
            st);
    }
}

void to_json(nlohmann::json& j, const DegradationRecipe& r) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& st : r.stages) {
        std::visit(
            [&](const auto& s) {
                using S = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<S, BlurStage>) {
                    stages.push_back({{"kind", "gaussian_blur"}, {"sigma", s.sigma}});
                } else if constexpr (std::is_same_v<S, ResizeStage>) {
                    stages.push_back({{"kind", "resize"}, {"scale", s.scale}, {"mode", mode_name(s.mode)}});
                } else if constexpr (std::is_same_v<S, GaussianNoiseStage>) {
                    stages.push_back({{"kind", "gaussian_noise"}, {"sigma", s.sigma}});
                } else if constexpr (std::is_same_v<S, PoissonNoiseStage>) {
                    stages.push_back({{"kind", "poisson_noise"}, {"scale", s.scale}});
                } else {
                    stages.push_back({{"kind", "jpeg"}, {"quality", s.quality}});
                }
            },
            st);
    }
    j = nlohmann::json{{"stages", stages}, {"orders", r.orders}, {"final_scale", r.final_scale}};
}

void from_json(const nlohmann::json& j, DegradationRecipe& r) {
    r.stages.clear();
    r.orders = j.value("orders", 1);
    r.final_scale = j.value("final_scale", 4);
    for (const auto& s : j.at("stages")) {
        const auto kind = s.at("kind").get<std::string>();
        if (kind == "gaussian_blur") {
            r.stages.emplace_back(BlurStage{s.at("sigma").get<double>()});
        } else if (kind == "resize") {
            r.stages.emplace_back(ResizeStage{s.at("scale").get<double>(), parse_mode(s.value("mode", "bicubic"))});
        } else if (kind == "gaussian_noise") {
            r.stages.emplace_back(GaussianNoiseStage{s.at("sigma").get<double>()});
        } else if (kind == "poisson_noise") {
            r.stages.emplace_back(PoissonNoiseStage{s.at("scale").get<double>()});
        } else if (kind == "jpeg") {
            r.stages.emplace_back(JpegStage{s.at("quality").get<int>()});
        } else {
            throw std::invalid_argument("unknown degradation stage: " + kind);
        }
    }
}

void DegradationConfig::validate() const {
    check_range(blur_sigma, 0.0, 1e6, "blur_sigma");
    check_range(resize_scale, 0.15, 1.5, "resize_scale");
    check_range(gaussian_sigma, 0.0, 50.0 / 255.0, "gaussian_sigma");
    check_range(poisson_scale, 0.0, 1e6, "poisson_scale");
    check_range(jpeg_quality, 30.0, 95.0, "jpeg_quality");
    if (gaussian_noise_prob < 0.0 || gaussian_noise_prob > 1.0 || second_order_prob < 0.0 || second_order_prob > 1.0) {
        throw std::invalid_argument("degradation config: probabilities must lie in [0, 1]");
    }
    if (resize_modes.empty()) throw std::invalid_argument("degradation config: no resize modes");
    if (final_scale != 4) throw std::invalid_argument("degradation config: final scale must be 4");
}

void to_json(nlohmann::json& j, const DegradationConfig& c) {
    j = nlohmann::json::object();
    range_to_json(j, "blur_sigma", c.blur_sigma);
    range_to_json(j, "resize_scale", c.resize_scale);
    range_to_json(j, "gaussian_sigma", c.gaussian_sigma);
    range_to_json(j, "poisson_scale", c.poisson_scale);
    range_to_json(j, "jpeg_quality", c.jpeg_quality);
    j["gaussian_noise_prob"] = c.gaussian_noise_prob;
    j["second_order_prob"] = c.second_order_prob;
    nlohmann::json modes = nlohmann::json::array();
    for (auto m : c.resize_modes) modes.push_back(mode_name(m));
    j["resize_modes"] = modes;
    j["final_scale"] = c.final_scale;
}

void from_json(const nlohmann::json& j, DegradationConfig& c) {
    range_from_json(j, "blur_sigma", c.blur_sigma);
    range_from_json(j, "resize_scale", c.resize_scale);
    range_from_json(j, "gaussian_sigma", c.gaussian_sigma);
    range_from_json(j, "poisson_scale", c.poisson_scale);
    range_from_json(j, "jpeg_quality", c.jpeg_quality);
    c.gaussian_noise_prob = j.value("gaussian_noise_prob", c.gaussian_noise_prob);
    c.second_order_prob = j.value("second_order_prob", c.second_order_prob);
    if (j.contains("resize_modes")) {
        c.resize_modes.clear();
        for (const auto& m : j.at("resize_modes")) c.resize_modes.push_back(parse_mode(m.get<std::string>()));
    }
    c.final_scale = j.value("final_scale", c.final_scale);
}

DegradationRecipe sample_recipe(Rng& rng, const DegradationConfig& config) {
    config.validate();
    DegradationRecipe r;
    r.final_scale = config.final_scale;
    r.orders = rng.uniform() < config.second_order_prob ? 2 : 1;
    for (int order = 0; order < r.orders; ++order) {
        r.stages.emplace_back(BlurStage{config.blur_sigma.sample(rng)});
        const double scale = config.resize_scale.sample(rng);
        const auto mode_idx = rng.uniform_int(0, static_cast<std::int64_t>(config.resize_modes.size()) - 1);
        r.stages.emplace_back(ResizeStage{scale, config.resize_modes[static_cast<std::size_t>(mode_idx)]});
        if (rng.uniform() < config.gaussian_noise_prob) {
            r.stages.emplace_back(GaussianNoiseStage{config.gaussian_sigma.sample(rng)});
        } else {
            r.stages.emplace_back(PoissonNoiseStage{config.poisson_scale.sample(rng)});
        }
        const auto qlo = static_cast<std::int64_t>(std::ceil(config.jpeg_quality.lo));
        const auto qhi = static_cast<std::int64_t>(std::floor(config.jpeg_quality.hi));
        r.stages.emplace_back(JpegStage{static_cast<int>(rng.uniform_int(qlo, qhi))});
    }
    return r;
}

DegradationRecipe identity_recipe() {
    DegradationRecipe r;
    r.orders = 1;
    r.stages = {BlurStage{0.0}, ResizeStage{1.0, ResizeMode::bicubic}, GaussianNoiseStage{0.0}, JpegStage{95}};
    return r;
}

Image apply_recipe(const Image& hq, const DegradationRecipe& recipe, Rng& rng) {
    recipe.validate();
    if (hq.width != hq.height) throw std::invalid_argument("apply_recipe: HQ image must be square");
    if (hq.width % recipe.final_scale != 0) {
        throw std::invalid_argument("apply_recipe: HQ side " + std::to_string(hq.width) + " is not divisible by " +
                                    std::to_string(recipe.final_scale));
    }
    require_unit_range(hq, "apply_recipe");
    const int target = hq.width / recipe.final_scale;
    Image img = hq;
    for (const auto& st : recipe.stages) {
        std::visit(
            [&](const auto& s) {
                using S = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<S, BlurStage>) {
                    img = gaussian_blur(img, s.sigma);
                } else if constexpr (std::is_same_v<S, ResizeStage>) {
                    // Never shrink below the final LQ resolution.
                    const int side = std::max(target, static_cast<int>(std::lround(img.width * s.scale)));
                    img = resize_mode(img, side, side, s.mode);
                } else if constexpr (std::is_same_v<S, GaussianNoiseStage>) {
                    if (s.sigma > 0.0) {
                        for (float& v : img.pixels) v += static_cast<float>(s.sigma * rng.normal());
                    }
                    img = clamp01(std::move(img));
                } else if constexpr (std::is_same_v<S, PoissonNoiseStage>) {
                    if (s.scale > 0.0) {
                        for (float& v : img.pixels) {
                            const double lam = std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0;
                            const double noisy = static_cast<double>(rng.poisson(lam)) / 255.0;
                            v += static_cast<float>(s.scale * (noisy - lam / 255.0));
                        }
                    }
                    img = clamp01(std::move(img));
                } else {
                    img = jpeg_roundtrip(clamp01(std::move(img)), s.quality);
                }
            },
            st);
    }
    img = resize_bicubic(img, target, target);
    return quantize_u8(std::move(img));
}

void to_json(nlohmann::json& j, const PairRecord& r) {
    j = nlohmann::json{{"hq_path", r.hq_path}, {"lq_path", r.lq_path}, {"recipe", r.recipe}, {"seed", r.seed}};
}

void from_json(const nlohmann::json& j, PairRecord& r) {
    r.hq_path = j.at("hq_path").get<std::string>();
    r.lq_path = j.at("lq_path").get<std::string>();
    r.recipe = j.at("recipe").get<DegradationRecipe>();
    r.seed = j.at("seed").get<std::uint64_t>();
}

DegradedPair make_pair(const Image& hq_source, int crop_size, Rng& rng, const DegradationConfig& config) {
    if (crop_size <= 0 || crop_size % config.final_scale != 0) {
        throw std::invalid_argument("crop size must be a positive multiple of " + std::to_string(config.final_scale));
    }
    if (hq_source.width < crop_size || hq_source.height < crop_size) {
        throw std::invalid_argument("source " + std::to_string(hq_source.width) + "x" +
                                    std::to_string(hq_source.height) + " is smaller than crop " +
                                    std::to_string(crop_size));
    }
    const int x0 = static_cast<int>(rng.uniform_int(0, hq_source.width - crop_size));
    const int y0 = static_cast<int>(rng.uniform_int(0, hq_source.height - crop_size));
    DegradedPair out;
    out.hq = quantize_u8(crop(hq_source, x0, y0, crop_size, crop_size));
    out.record.recipe = sample_recipe(rng, config);
    out.record.seed = rng.next_u64();
    Rng apply_rng(out.record.seed);
    out.lq = apply_recipe(out.hq, out.record.recipe, apply_rng);
    return out;
}

Image replay_pair(const Image& hq, const PairRecord& record) {
    Rng rng(record.seed);
    return apply_recipe(hq, record.recipe, rng);
}

PairRecord write_pair(const std::filesystem::path& out_dir, const std::string& name, DegradedPair pair) {
    pair.record.hq_path = "hq/" + name + ".png";
    pair.record.lq_path = "lq/" + name + ".png";
    save_png(pair.hq, out_dir / pair.record.hq_path);
    save_png(pair.lq, out_dir / pair.record.lq_path);
    std::ofstream manifest(out_dir / "pairs.jsonl", std::ios::app);
    if (!manifest) throw std::runtime_error("cannot append to " + (out_dir / "pairs.jsonl").string());
    manifest << nlohmann::json(pair.record).dump() << '\n';
    return pair.record;
}

std::vector<PairRecord> read_pair_manifest(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw std::runtime_error("cannot read pair manifest " + manifest.string());
    std::vector<PairRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(nlohmann::json::parse(line).get<PairRecord>());
    }
    return out;
}

}  // namespace dreamclear

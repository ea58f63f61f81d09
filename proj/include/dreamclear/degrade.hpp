#pragma once

// Real-ESRGAN-style degradation synthesis: one or two rounds of
// blur -> resize -> noise -> JPEG, then a bicubic resize to a quarter of the
// HQ side. Recipes are sampled from configurable ranges, serialize to JSON and
// replay deterministically from (HQ, recipe, seed).

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "dreamclear/image.hpp"
#include "dreamclear/random.hpp"

namespace dreamclear {

enum class ResizeMode { area, bilinear, bicubic };

struct BlurStage {
    double sigma = 0.0;
};
struct ResizeStage {
    double scale = 1.0;
    ResizeMode mode = ResizeMode::bicubic;
};
struct GaussianNoiseStage {
    double sigma = 0.0;  // in [0, 1] intensity units
};
struct PoissonNoiseStage {
    double scale = 0.0;
};
struct JpegStage {
    int quality = 95;
};

using DegradationStage = std::variant<BlurStage, ResizeStage, GaussianNoiseStage, PoissonNoiseStage, JpegStage>;

struct DegradationRecipe {
    std::vector<DegradationStage> stages;
    int orders = 1;
    int final_scale = 4;

    void validate() const;
};

void to_json(nlohmann::json& j, const DegradationRecipe& r);
void from_json(const nlohmann::json& j, DegradationRecipe& r);

struct Range {
    double lo = 0.0;
    double hi = 0.0;
    double sample(Rng& rng) const { return lo == hi ? lo : rng.uniform(lo, hi); }
    double midpoint() const { return 0.5 * (lo + hi); }
};

struct DegradationConfig {
    Range blur_sigma{0.2, 3.0};
    Range resize_scale{0.15, 1.5};
    Range gaussian_sigma{1.0 / 255.0, 30.0 / 255.0};
    Range poisson_scale{0.05, 2.0};
    Range jpeg_quality{30.0, 95.0};
    double gaussian_noise_prob = 0.5;  // otherwise Poisson
    double second_order_prob = 0.5;
    std::vector<ResizeMode> resize_modes{ResizeMode::area, ResizeMode::bilinear, ResizeMode::bicubic};
    int final_scale = 4;

    void validate() const;
};

void to_json(nlohmann::json& j, const DegradationConfig& c);
void from_json(const nlohmann::json& j, DegradationConfig& c);

DegradationRecipe sample_recipe(Rng& rng, const DegradationConfig& config);

/// Recipe whose only lossy stage is a quality-95 JPEG.
DegradationRecipe identity_recipe();

/// Applies every stage in order, then a bicubic resize to side / final_scale,
/// and quantizes to 8 bits.
Image apply_recipe(const Image& hq, const DegradationRecipe& recipe, Rng& rng);

struct PairRecord {
    std::string hq_path;
    std::string lq_path;
    DegradationRecipe recipe;
    std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const PairRecord& r);
void from_json(const nlohmann::json& j, PairRecord& r);

struct DegradedPair {
    PairRecord record;
    Image hq;
    Image lq;
};

/// Random crop of crop x crop, quantized to 8 bits, then degraded with a
/// freshly sampled recipe. Paths in the record are left empty.
DegradedPair make_pair(const Image& hq_source, int crop, Rng& rng, const DegradationConfig& config);

/// Replays a record against its HQ image.
Image replay_pair(const Image& hq, const PairRecord& record);

/// Writes hq/<name>.png, lq/<name>.png and appends the record to
/// pairs.jsonl under out_dir. Returns the record with relative paths filled.
PairRecord write_pair(const std::filesystem::path& out_dir, const std::string& name, DegradedPair pair);

std::vector<PairRecord> read_pair_manifest(const std::filesystem::path& manifest);

}  // namespace dreamclear

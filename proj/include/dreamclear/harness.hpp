#pragma once

// Training loops, run configuration, experiment manifests and evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dreamclear/checkpoint.hpp"
#include "dreamclear/controlformer.hpp"
#include "dreamclear/degrade.hpp"
#include "dreamclear/metrics.hpp"
#include "dreamclear/nn.hpp"

namespace dreamclear {

inline constexpr const char* kCodeVersion = "dreamclear-0.1.0";

/// Raised for invalid or incomplete run configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void to_json(nlohmann::json& j, const AdamWConfig& c);
void from_json(const nlohmann::json& j, AdamWConfig& c);

/// Append-only JSON-lines log of one run. Every line carries an "event" key.
class ExperimentManifest {
public:
    explicit ExperimentManifest(std::filesystem::path path) : path_(std::move(path)) {}

    void append(nlohmann::json record) const;
    std::vector<nlohmann::json> read() const;
    const std::filesystem::path& path() const { return path_; }

    /// Loss records ({"event": "loss"}) in file order.
    std::vector<std::pair<int, double>> loss_curve() const;

private:
    std::filesystem::path path_;
};

struct TrainingPair {
    std::string name;
    Image hq;
    Image lq;
    std::string caption;
};

/// Loads every pair listed in <dir>/pairs.jsonl; `limit` > 0 keeps the first ones.
std::vector<TrainingPair> load_pairs(const std::filesystem::path& dir, int limit = 0);

/// Builds pairs from procedural textures: sources of side crop + crop / 4,
/// randomly cropped and degraded. Stream `index` of `seed` drives pair index.
/// Frequencies are in cycles across the source.
std::vector<TrainingPair> procedural_pairs(int count, int crop, std::uint64_t seed, const DegradationConfig& config,
                                           std::uint64_t first_index = 0, double min_frequency = 2.0,
                                           double max_frequency = 6.0);

struct LoopConfig {
    int steps = 5000;
    int batch = 8;
    AdamWConfig optim{};
    std::uint64_t seed = 0;
    double caption_dropout = 0.1;  // probability of training on the empty prompt
};

void to_json(nlohmann::json& j, const LoopConfig& c);
void from_json(const nlohmann::json& j, LoopConfig& c);

/// Shared step logic: every step draws its batch and noise from a stream
/// derived from (seed, step), so a resumed run replays the same data order.
class Trainer {
public:
    enum class Target { backbone, control };

    Trainer(RestorationModel& model, std::vector<TrainingPair> pairs, LoopConfig config, Target target);

    /// One optimizer step; returns the mean batch loss.
    double step();
    int next_step() const { return step_; }
    AdamW<float>& optimizer() { return optimizer_; }
    const LoopConfig& config() const { return config_; }
    /// Restores the position and optimizer state saved in a checkpoint.
    void restore_state(const Checkpoint& ckpt);
    /// Params, optimizer moments and the step counter.
    Checkpoint snapshot(const nlohmann::json& config_json) const;

    /// Mean loss over a fixed set of (pair, t, eps) draws; no parameter change.
    double eval_loss(int draws, std::uint64_t seed) const;

private:
    struct Cached {
        RestorationModel::BranchImages branch;
        Matf z0;
    };
    ag::Var<float> item_loss(std::size_t index, Rng& rng, bool drop_caption) const;

    RestorationModel& model_;
    std::vector<TrainingPair> pairs_;
    std::vector<Cached> cache_;
    LoopConfig config_;
    Target target_;
    AdamW<float> optimizer_;
    DiffusionSchedule sched_;
    TextTokens<float> empty_text_;
    int step_ = 0;
};

/// Fresh control branch copied from the model's current backbone.
RestorationModel with_fresh_control(const RestorationModel& model, std::uint64_t seed);

Checkpoint model_checkpoint(const RestorationModel& model);
RestorationModel model_from_checkpoint(const Checkpoint& ckpt);

struct PretrainConfig {
    RestorationConfig model{};
    std::string pairs_dir;
    int max_pairs = 0;
    LoopConfig loop{3000, 8, AdamWConfig{1e-3, 0.9, 0.999, 1e-8, 0.0, 1.0}, 0, 0.1};
    int remover_steps = 2000;
    double remover_lr = 1e-3;
    std::string out_checkpoint;
    std::string manifest;

    void validate() const;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

/// Trains the remover and the text-to-image backbone on HQ images, then
/// writes a bundle whose control branch is a fresh copy of the trained
/// backbone.
void pretrain(const PretrainConfig& config, const std::vector<TrainingPair>& pairs,
              const std::function<void(const std::string&)>& log = {});

struct TrainRestoreConfig {
    std::string init_checkpoint;
    std::string pairs_dir;
    int max_pairs = 0;
    LoopConfig loop{5000, 8, AdamWConfig{}, 0, 0.1};
    std::string out_dir;
    int checkpoint_every = 500;
    int log_every = 10;
    bool resume = false;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainRestoreConfig& c);
void from_json(const nlohmann::json& j, TrainRestoreConfig& c);

struct TrainRestoreResult {
    std::vector<std::pair<int, double>> losses;
    std::vector<std::string> checkpoints;
};

/// Control-branch training with the backbone frozen. Writes
/// <out_dir>/manifest.jsonl before touching any model state and checkpoints
/// to <out_dir>/ckpt_<step>.ckpt plus <out_dir>/latest.ckpt.
TrainRestoreResult train_restoration(const TrainRestoreConfig& config,
                                     const std::function<void(const std::string&)>& log = {});

/// Per-image and mean metrics for filename-matched PNGs in two folders.
MetricsReport evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                       const MetricRegistry* external = nullptr);

/// Reads a JSON file; missing or unparsable files raise ConfigError.
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace dreamclear

#pragma once

// Toy-scale curation pipeline: learnable positive/negative prompt tokens,
// image-to-image negative synthesis, dual-prompt fine-tuning, guided
// generation with the learned prompts, a quality classifier and multimodal
// screening through a narrow client interface.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dreamclear/controlformer.hpp"
#include "dreamclear/dit.hpp"
#include "dreamclear/image.hpp"
#include "dreamclear/nn.hpp"
#include "dreamclear/schedule.hpp"
#include "dreamclear/text.hpp"

namespace dreamclear {

// ---------------------------------------------------------------- prompt bank

struct PromptBank {
    ag::Var<float> pos;  // M x dim
    ag::Var<float> neg;  // N_tok x dim
    std::string pos_init_text;
    std::string neg_init_text;

    /// Registers bank.pos / bank.neg initialized from the embedder rows of the
    /// init texts, cycling through the words when fewer than requested.
    static PromptBank init(ParamStore<float>& store, const std::string& prefix, int m, int n_tok,
                           const std::string& pos_init_text, const std::string& neg_init_text,
                           const TextEmbedder<float>& embedder);
    static PromptBank bind(const ParamStore<float>& store, const std::string& prefix, std::string pos_init_text,
                           std::string neg_init_text);

    int num_pos() const { return static_cast<int>(pos->rows()); }
    int num_neg() const { return static_cast<int>(neg->rows()); }
    TextTokens<float> pos_tokens() const;
    TextTokens<float> neg_tokens() const;
};

// ---------------------------------------------------------------- model

struct GenIRConfig {
    BackboneConfig backbone{16, 3, 2, 64, 4, 4, 32, 24, 4, 64};
    int vocab_size = 512;
    LatentCodec codec{};
    ScheduleKind schedule = ScheduleKind::cosine;
    int diffusion_steps = 1000;
    int bank_pos = 8;
    int bank_neg = 8;
    std::string pos_init_text = "4k highly detailed professional sharp clean photo";
    std::string neg_init_text = "deformation low quality over-smooth blurry dirty";
    /// Style prompt for negative synthesis. Only partially listed in the
    /// source; this completion is our own.
    std::string neg_style_text = "cartoon painting sketch blurry over-smooth dirty";
    double img2img_strength = 0.6;
    int sample_steps = 50;
    double curate_omega = 3.0;
    double clip_x0 = 1.0;
    double threshold = 0.5;

    void validate() const;
};

void to_json(nlohmann::json& j, const GenIRConfig& c);
void from_json(const nlohmann::json& j, GenIRConfig& c);

/// Text-to-image model plus prompt bank in one store (text., backbone., bank.).
class GenIRModel {
public:
    static GenIRModel create(const GenIRConfig& config, std::uint64_t seed);
    static GenIRModel bind(const GenIRConfig& config, ParamStore<float> store);

    const GenIRConfig& config() const { return config_; }
    ParamStore<float>& store() { return *store_; }
    const ParamStore<float>& store() const { return *store_; }
    const Backbone<float>& backbone() const { return backbone_; }
    const TextEmbedder<float>& text() const { return text_; }
    const PromptBank& bank() const { return bank_; }
    DiffusionSchedule schedule() const;
    SampleOptions sample_options() const;

    TextTokens<float> caption_tokens(const std::string& caption) const;
    /// Caption words followed by the positive bank tokens.
    TextTokens<float> positive_tokens(const std::string& scene) const;
    ag::Var<float> predict(const Matf& z_t, int t, const TextTokens<float>& text) const;

    /// Parameter names updated by dual-prompt fine-tuning.
    std::vector<std::string> finetune_prefixes() const;

private:
    GenIRConfig config_;
    std::unique_ptr<ParamStore<float>> store_;
    TextEmbedder<float> text_;
    Backbone<float> backbone_;
    PromptBank bank_;
};

/// Noises `img` to step floor(strength * T) - 1 and denoises it with the
/// style prompt. Strength 0 returns the input; strength 1 starts from pure
/// noise and never reads the input.
Image img2img_negative(const Image& img, double strength, const std::string& neg_style_text, const GenIRModel& model,
                       const DiffusionSchedule& sched, Rng& rng, int steps = 50);

// ---------------------------------------------------------------- training

enum class CaptionSource { mllm, template_text, human };

struct CaptionRecord {
    std::string image_id;
    std::string caption;
    CaptionSource source = CaptionSource::template_text;

    void validate() const;
};

void to_json(nlohmann::json& j, const CaptionRecord& r);
void from_json(const nlohmann::json& j, CaptionRecord& r);

struct CaptionedImage {
    Image image;
    std::string caption;
};

/// Plain text-to-image training of text. and backbone. parameters.
double t2i_train_step(GenIRModel& model, const std::vector<CaptionedImage>& batch, AdamW<float>& opt, Rng& rng);

enum class SampleLabel { positive, negative };

struct LabeledImage {
    Image image;
    std::string caption;
    std::optional<SampleLabel> label;
};

/// Positive images are conditioned on caption + positive tokens, negative
/// images on the negative tokens alone. Only the bank and the text-path
/// cross-attention key/value maps change. Returns the mean batch loss.
double dual_prompt_finetune_step(GenIRModel& model, const std::vector<LabeledImage>& batch, AdamW<float>& opt,
                                 Rng& rng);

/// One image per scene: cond = scene ++ pos tokens, uncond = neg tokens,
/// seeded by derive_seed(guidance.seed, index).
std::vector<Image> generate_candidates(const GenIRModel& model, const std::vector<std::string>& scenes,
                                       const GuidanceConfig& guidance);

/// Reference generator without the bank: cond = scene, uncond = empty text,
/// same seeds as generate_candidates.
std::vector<Image> generate_plain(const GenIRModel& model, const std::vector<std::string>& scenes,
                                  const GuidanceConfig& guidance);

// ---------------------------------------------------------------- classifier

/// Handcrafted sharpness/cleanliness features of an RGB image.
std::vector<double> quality_features(const Image& img);

struct ClassifierConfig {
    double l2 = 1e-2;
    int iterations = 50;
};

/// L2-regularized logistic regression on standardized features, fitted by
/// Newton iterations. Deterministic; no random initialization.
class LogisticRegression {
public:
    static LogisticRegression fit(const std::vector<std::vector<double>>& pos,
                                  const std::vector<std::vector<double>>& neg, const ClassifierConfig& config = {});
    double probability(const std::vector<double>& features) const;
    int num_features() const { return static_cast<int>(weights_.size()); }

    nlohmann::json to_json() const;
    static LogisticRegression from_json(const nlohmann::json& j);

private:
    std::vector<double> mean_, stddev_, weights_;
    double bias_ = 0.0;
};

/// Logistic regression over quality_features.
class QualityClassifier {
public:
    static QualityClassifier train(const std::vector<Image>& pos, const std::vector<Image>& neg,
                                   const ClassifierConfig& config = {});
    /// Probability of the positive class.
    double score(const Image& img) const;

    nlohmann::json to_json() const { return model_.to_json(); }
    static QualityClassifier from_json(const nlohmann::json& j);

private:
    LogisticRegression model_;
};

// ---------------------------------------------------------------- screening

enum class MllmTemplate { text_filter, image_filter };

MllmTemplate parse_mllm_template(const std::string& name);
std::string to_string(MllmTemplate t);
/// Verbatim screening instructions.
const std::string& template_text(MllmTemplate t);

struct MllmRequest {
    std::string item_id;
    std::string prompt;
    std::optional<std::vector<std::uint8_t>> image_png;
};

class MllmTransportError : public std::runtime_error {
public:
    MllmTransportError(std::string item_id, const std::string& what)
        : std::runtime_error("MLLM transport failure for " + item_id + ": " + what), item_id_(std::move(item_id)) {}
    const std::string& item_id() const { return item_id_; }

private:
    std::string item_id_;
};

class MllmClient {
public:
    virtual ~MllmClient() = default;
    /// Returns the assistant text or throws MllmTransportError.
    virtual std::string send(const MllmRequest& request) = 0;
};

/// Offline client. Verdict file: {"default": "yes ...", "responses": {"<id>": "no ..."}}.
class StubMllmClient final : public MllmClient {
public:
    StubMllmClient(std::string default_response, std::map<std::string, std::string> responses = {})
        : default_(std::move(default_response)), responses_(std::move(responses)) {}
    static StubMllmClient from_file(const std::filesystem::path& path);

    std::string send(const MllmRequest& request) override;
    const std::vector<MllmRequest>& requests() const { return requests_; }

private:
    std::string default_;
    std::map<std::string, std::string> responses_;
    std::vector<MllmRequest> requests_;
};

/// POSTs {"item_id", "prompt", "image_png_base64"?} as JSON and reads either
/// {"text": ...} or a plain-text body.
class HttpMllmClient final : public MllmClient {
public:
    HttpMllmClient(std::string host, int port, std::string path = "/v1/screen", int retries = 2,
                   double timeout_seconds = 30.0);
    std::string send(const MllmRequest& request) override;

private:
    std::string host_;
    int port_;
    std::string path_;
    int retries_;
    double timeout_;
};

struct ScreenOutcome {
    std::optional<bool> pass;  // empty when the response could not be interpreted
    std::string reason;
};

ScreenOutcome parse_screen_response(const std::string& response, MllmTemplate t, const std::string& item_text = "");

struct ScreenItem {
    std::string id;
    std::string text;            // prompt under review (text filter)
    std::optional<Image> image;  // image under review (image filter)
    double classifier_prob = 1.0;
};

struct FilterVerdict {
    std::string image_id;
    std::string scene;
    double classifier_prob = 0.0;
    std::optional<bool> mllm_pass;
    std::optional<std::string> mllm_reason;
    bool undecided = false;
    bool kept = false;
    std::string image_path;
};

void to_json(nlohmann::json& j, const FilterVerdict& v);
void from_json(const nlohmann::json& j, FilterVerdict& v);

/// One verdict per item; undecided responses count as a rejection. kept also
/// requires classifier_prob >= threshold.
std::vector<FilterVerdict> mllm_screen(const std::vector<ScreenItem>& items, MllmClient& client, MllmTemplate t,
                                       double threshold = 0.0);

struct Candidate {
    std::string scene;
    Image image;
};

struct CurateConfig {
    std::string out_dir;
    double threshold = 0.5;
    int count = 0;
};

struct CurateSummary {
    int total = 0;
    int above_threshold = 0;
    int kept = 0;
    int resumed = 0;
};

/// Generates candidates 0..count-1, scores them, screens those at or above
/// the threshold and appends a verdict per candidate to
/// <out_dir>/manifest.jsonl; kept images go to <out_dir>/images/. Candidates
/// already in the manifest are skipped.
CurateSummary curate(const CurateConfig& config, const std::function<Candidate(int)>& generate,
                     const std::function<double(const Image&)>& score, MllmClient& client);

std::string candidate_id(int index);

/// One-sided sign test: P(X >= wins) for X ~ Binomial(trials, 1/2).
double sign_test_p(int wins, int trials);

// ---------------------------------------------------------------- toy pipeline

/// Blur followed by a blend toward flat gray.
Image degrade_toy(const Image& img, double blur_sigma, double dirt);

/// Random "<color> and <color> <kind>" scene captions.
std::vector<std::string> toy_scenes(int count, std::uint64_t seed);

struct ToyCorpusConfig {
    int count = 600;
    double min_frequency = 1.5;
    double max_frequency = 3.5;
    double degraded_fraction = 0.5;
    /// Share of degraded images whose caption also carries the style words.
    double styled_fraction = 0.5;
    double blur_sigma = 1.2;
    double dirt = 0.35;
};

void to_json(nlohmann::json& j, const ToyCorpusConfig& c);
void from_json(const nlohmann::json& j, ToyCorpusConfig& c);

/// Texture images for base text-to-image training, a mix of clean and
/// degraded renders that share the same scene captions.
std::vector<CaptionedImage> toy_t2i_corpus(const ToyCorpusConfig& config, int side, const std::string& style_text,
                                           std::uint64_t seed);

/// Clean renders (positives) with their scene captions.
std::vector<CaptionedImage> toy_clean_images(int count, int side, const ToyCorpusConfig& config, std::uint64_t seed);

struct PromptTrainConfig {
    GenIRConfig model{};
    ToyCorpusConfig corpus{};
    std::string base_checkpoint;  // empty: train the base model first
    int base_steps = 3000;
    int base_batch = 8;
    AdamWConfig base_optim{1e-3, 0.9, 0.999, 1e-8, 0.0, 1.0};
    int num_positive = 128;
    int num_negative = 128;
    int finetune_steps = 500;
    int finetune_batch = 8;
    AdamWConfig finetune_optim{5e-3, 0.9, 0.999, 1e-8, 0.0, 1.0};
    ClassifierConfig classifier{};
    std::uint64_t seed = 0;
    std::string out_dir;
    int log_every = 50;

    void validate() const;
};

void to_json(nlohmann::json& j, const PromptTrainConfig& c);
void from_json(const nlohmann::json& j, PromptTrainConfig& c);

struct PromptTrainResult {
    std::vector<double> base_losses;
    std::vector<double> finetune_losses;
    double classifier_train_accuracy = 0.0;
};

/// Base model (trained or loaded), negative synthesis, dual-prompt
/// fine-tuning and classifier training. Writes base.ckpt, genir.ckpt,
/// classifier.json and manifest.jsonl under out_dir.
PromptTrainResult train_prompts(const PromptTrainConfig& config,
                                const std::function<void(const std::string&)>& log = {});

void save_genir(const GenIRModel& model, const std::filesystem::path& path);
GenIRModel load_genir(const std::filesystem::path& path);

}  // namespace dreamclear

#pragma once

// Control branch and dual-branch restoration.
//
// The control branch holds trainable copies of every backbone block, one MoAM
// per block and a zero-initialized output projection per block. Its input is
// the backbone's embedded latent tokens; after copy block i and MoAM i the
// projected features are added to the frozen backbone right after block i.
//
// LQ branch: the LQ image is upsampled x4 and patch-embedded into x_lq.
// Reference branch: a degradation remover produces I_ref, embedded into x_ref.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dreamclear/dit.hpp"
#include "dreamclear/image.hpp"
#include "dreamclear/moam.hpp"
#include "dreamclear/nn.hpp"
#include "dreamclear/schedule.hpp"
#include "dreamclear/text.hpp"

namespace dreamclear {

/// Per-pair conditioning: encoded LQ/reference tokens and the MoAM
/// modulations of every block, computed once and reused across steps.
template <typename T>
struct ControlCondition {
    TokenGrid<T> x_lq;
    TokenGrid<T> x_ref;
    std::vector<MoamModulations<T>> mods;
};

/// Patch-embeds a conditioning latent ((H*W) x ch) with the given projection.
template <typename T>
TokenGrid<T> encode_condition(const ag::Var<T>& latent, const Linear<T>& embed, const BackboneConfig& cfg);

template <typename T>
class ControlBranch {
public:
    /// Copies every block parameter of `backbone` (which must live in `store`)
    /// under `prefix`.blocks.i and adds fresh MoAMs, condition encoders and
    /// zero output projections.
    static ControlBranch init_from_backbone(ParamStore<T>& store, const std::string& prefix,
                                           const Backbone<T>& backbone, int num_experts, Rng& rng);
    static ControlBranch bind(const ParamStore<T>& store, const std::string& prefix, const BackboneConfig& cfg,
                              int num_experts);

    TokenGrid<T> encode_lq(const ag::Var<T>& latent) const { return encode_condition<T>(latent, lq_embed_, cfg_); }
    TokenGrid<T> encode_ref(const ag::Var<T>& latent) const { return encode_condition<T>(latent, ref_embed_, cfg_); }

    ControlCondition<T> prepare_condition(const TokenGrid<T>& x_lq, const TokenGrid<T>& x_ref) const;

    /// Residuals for the backbone blocks given the backbone's prepared inputs.
    ControlResiduals<T> forward(const typename Backbone<T>::Prepared& in, const ControlCondition<T>& cond) const;

    const std::vector<DitBlockParams<T>>& blocks() const { return blocks_; }
    const std::vector<MoamParams<T>>& moams() const { return moams_; }
    const std::vector<Linear<T>>& out_projections() const { return out_proj_; }
    const std::string& prefix() const { return prefix_; }
    int num_experts() const { return num_experts_; }

private:
    BackboneConfig cfg_;
    std::string prefix_;
    int num_experts_ = 0;
    Linear<T> lq_embed_, ref_embed_;
    std::vector<DitBlockParams<T>> blocks_;
    std::vector<MoamParams<T>> moams_;
    std::vector<Linear<T>> out_proj_;
};

/// Backbone prediction with control residuals injected after every block.
template <typename T>
ag::Var<T> controlled_forward(const Backbone<T>& backbone, const ControlBranch<T>& control, const ag::Var<T>& z_t,
                              int t, const TextTokens<T>& text, const ControlCondition<T>* cond);

/// Pixel <-> latent map: latent = scale * pixel + shift, per channel.
struct LatentCodec {
    double scale = 2.0;
    double shift = -1.0;

    Matf encode(const Image& img) const;
    /// Inverse map, clamped to [0, 1].
    Image decode(const Matf& latent, int width, int height) const;
};

class DegradationRemover {
public:
    virtual ~DegradationRemover() = default;
    /// Returns an image `scale` times larger with values in [0, 1].
    virtual Image operator()(const Image& lq) const = 0;
    virtual std::string name() const = 0;
};

class BicubicRemover final : public DegradationRemover {
public:
    explicit BicubicRemover(int scale = 4) : scale_(scale) {}
    Image operator()(const Image& lq) const override;
    std::string name() const override { return "bicubic"; }

private:
    int scale_;
};

/// Three 3x3 convolutions (ReLU between) predicting a residual over the
/// bicubic upsample. The last layer starts at zero.
class ConvRemover final : public DegradationRemover {
public:
    static ConvRemover create(ParamStore<float>& store, const std::string& prefix, int channels, int hidden,
                              Rng& rng, int scale = 4);
    static ConvRemover bind(const ParamStore<float>& store, const std::string& prefix, int scale = 4);

    /// Unclamped (H*W) x C prediction, differentiable w.r.t. the parameters.
    ag::Var<float> forward(const Image& lq) const;
    Image operator()(const Image& lq) const override;
    std::string name() const override { return "conv"; }

private:
    int scale_ = 4;
    Linear<float> conv1_, conv2_, conv3_;  // weights are (9 * in) x out
};

/// 3x3 zero-padded convolution over an (h*w) x in feature map.
ag::Var<float> conv3x3(const ag::Var<float>& x, int h, int w, const Linear<float>& kernel);

struct RemoverTrainReport {
    double initial_mse = 0.0;
    double final_mse = 0.0;
};

/// Fits the remover to (lq, hq) pairs with MSE and Adam.
RemoverTrainReport train_remover(ConvRemover& remover, ParamStore<float>& store, const std::string& prefix,
                                 const std::vector<std::pair<Image, Image>>& pairs, int steps, double lr,
                                 std::uint64_t seed);

struct RestorationConfig {
    BackboneConfig backbone{64, 3, 8, 192, 4, 4, 32, 16, 2, 64};
    int num_experts = 3;
    int vocab_size = 512;
    std::string remover = "conv";  // conv | bicubic
    int remover_hidden = 16;
    bool train_remover_jointly = false;
    LatentCodec codec{};
    ScheduleKind schedule = ScheduleKind::cosine;
    int diffusion_steps = 1000;
    std::string prompt = "a sharp clean high quality photo with fine detailed texture";
    std::string negative_prompt = "blurry noisy low quality jpeg artifacts";
    bool null_prompt = false;
    double clip_x0 = 1.0;  // 0 disables
    int scale = 4;

    int hq_side() const { return backbone.latent_hw; }
    int lq_side() const { return backbone.latent_hw / scale; }
    void validate() const;
};

void to_json(nlohmann::json& j, const RestorationConfig& c);
void from_json(const nlohmann::json& j, RestorationConfig& c);

/// Text embedder, frozen backbone, control branch and remover sharing one
/// parameter store (prefixes text., backbone., control., remover.).
class RestorationModel {
public:
    static RestorationModel create(const RestorationConfig& config, std::uint64_t seed);
    /// Binds to an already populated store (e.g. loaded from a checkpoint).
    static RestorationModel bind(const RestorationConfig& config, ParamStore<float> store);

    const RestorationConfig& config() const { return config_; }
    ParamStore<float>& store() { return *store_; }
    const ParamStore<float>& store() const { return *store_; }
    const Backbone<float>& backbone() const { return backbone_; }
    const ControlBranch<float>& control() const { return control_; }
    const TextEmbedder<float>& text() const { return text_; }
    const DegradationRemover& remover() const;
    const ConvRemover* conv_remover() const { return conv_remover_ ? &*conv_remover_ : nullptr; }
    DiffusionSchedule schedule() const;

    TextTokens<float> prompt_tokens(bool negative) const;
    TextTokens<float> caption_tokens(const std::string& caption) const;

    /// Upsampled LQ and reference images fed to the two branches.
    struct BranchImages {
        Image lq_up;
        Image ref;
    };
    BranchImages branch_images(const Image& lq) const;
    ControlCondition<float> condition(const BranchImages& imgs) const;
    ControlCondition<float> condition(const Image& lq) const { return condition(branch_images(lq)); }

    ag::Var<float> predict(const Matf& z_t, int t, const TextTokens<float>& text,
                           const ControlCondition<float>* cond) const;

    /// Samples an HQ estimate; output is scale x the LQ side, in [0, 1].
    Image restore(const Image& lq, const GuidanceConfig& guidance) const;
    /// Unconditional (backbone only) sample with the same seed plumbing.
    Image sample_backbone(const GuidanceConfig& guidance) const;

private:
    RestorationConfig config_;
    std::unique_ptr<ParamStore<float>> store_;
    TextEmbedder<float> text_;
    Backbone<float> backbone_;
    ControlBranch<float> control_;
    std::optional<ConvRemover> conv_remover_;
    BicubicRemover bicubic_{4};
};

}  // namespace dreamclear

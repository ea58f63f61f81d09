#pragma once

// Diffusion-process mathematics: noise schedules, forward noising, the
// noise-prediction training loss, ancestral (DDPM posterior) sampling over a
// strided step subset, and the positive/negative guidance combiner.
//
// Schedule coefficients are kept in double precision; latents may be float
// or double.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dreamclear/autograd.hpp"
#include "dreamclear/random.hpp"

namespace dreamclear {

enum class ScheduleKind { cosine, linear };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

struct DiffusionSchedule {
    int num_steps = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    /// alpha_bar at t - 1, with the convention alpha_bar(-1) = 1.
    double alpha_bar_prev(int t) const { return t == 0 ? 1.0 : alpha_bars[static_cast<std::size_t>(t - 1)]; }
    /// Fixed "small" posterior variance beta_t (1 - abar_{t-1}) / (1 - abar_t).
    double posterior_variance(int t) const;
    void check_step(int t) const;
};

DiffusionSchedule make_schedule(int num_steps, ScheduleKind kind);

/// Builds a schedule from a strictly decreasing alpha_bar sequence.
DiffusionSchedule schedule_from_alpha_bars(const std::vector<double>& alpha_bars);

/// A strided subset of a base schedule: timesteps[i] is the base index that
/// respaced step i stands for, and schedule.alpha_bars[i] equals the base
/// alpha_bar at that index.
struct RespacedSchedule {
    DiffusionSchedule schedule;
    std::vector<int> timesteps;
};

/// Uniform stride over [0, last], both endpoints included; last defaults to
/// the final base step. steps == 1 keeps only `last`.
RespacedSchedule respace(const DiffusionSchedule& base, int steps, std::optional<int> last = std::nullopt);

struct GuidanceConfig {
    double omega = 4.5;
    int steps = 50;
    std::uint64_t seed = 0;

    void validate(const DiffusionSchedule& sched) const;
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
template <typename T>
Mat<T> add_noise(const Mat<T>& z0, int t, const Mat<T>& eps, const DiffusionSchedule& sched);

/// omega * eps_pos + (1 - omega) * eps_neg. omega == 1 and omega == 0 return
/// the respective input unchanged.
template <typename T>
Mat<T> cfg_combine(const Mat<T>& eps_pos, const Mat<T>& eps_neg, double omega);

/// Posterior mean of q(z_{t-1} | z_t, x0) with x0 recovered from eps_hat;
/// optionally clips the recovered x0 to [-clip, clip].
template <typename T>
Mat<T> posterior_mean(const Mat<T>& z_t, const Mat<T>& eps_hat, int t, const DiffusionSchedule& sched,
                      std::optional<double> clip_x0 = std::nullopt);

/// One ancestral step: posterior mean plus sigma_t * noise; no noise (and no
/// rng draw) at t == 0.
template <typename T>
Mat<T> ddpm_step(const Mat<T>& z_t, const Mat<T>& eps_hat, int t, const DiffusionSchedule& sched, Rng& rng,
                 std::optional<double> clip_x0 = std::nullopt);

struct SampleOptions {
    std::optional<double> clip_x0;
};

/// Ancestral sampling loop over a respaced schedule, starting from z_start at
/// respaced index (timesteps.size() - 1). The model is invoked as
/// model(z_t, base_timestep, cond) and returns an eps prediction shaped like
/// z_t. The negative branch is skipped when omega == 1, since the combiner
/// then returns the positive prediction unchanged.
template <typename T, typename Cond, typename Model>
Mat<T> sample_from(Model&& model, const Cond& cond_pos, const Cond& cond_neg, double omega,
                   const RespacedSchedule& plan, Mat<T> z_start, Rng& rng, const SampleOptions& opts = {}) {
    Mat<T> z = std::move(z_start);
    for (int i = static_cast<int>(plan.timesteps.size()) - 1; i >= 0; --i) {
        const int t = plan.timesteps[static_cast<std::size_t>(i)];
        Mat<T> eps_pos = model(static_cast<const Mat<T>&>(z), t, cond_pos);
        Mat<T> eps = omega == 1.0 ? std::move(eps_pos)
                                  : cfg_combine<T>(eps_pos, model(static_cast<const Mat<T>&>(z), t, cond_neg), omega);
        if (eps.rows() != z.rows() || eps.cols() != z.cols()) {
            throw std::invalid_argument("noise prediction shape differs from latent shape");
        }
        z = ddpm_step<T>(z, eps, i, plan.schedule, rng, opts.clip_x0);
    }
    return z;
}

/// Full sampling from pure noise of the given latent shape, seeded by
/// guidance.seed.
template <typename T, typename Cond, typename Model>
Mat<T> sample(Model&& model, const Cond& cond_pos, const Cond& cond_neg, const GuidanceConfig& guidance,
              const DiffusionSchedule& sched, Eigen::Index rows, Eigen::Index cols, const SampleOptions& opts = {}) {
    guidance.validate(sched);
    Rng rng(guidance.seed);
    const RespacedSchedule plan = respace(sched, guidance.steps);
    Mat<T> z = rng.normal_matrix<T>(rows, cols);
    return sample_from<T>(model, cond_pos, cond_neg, guidance.omega, plan, std::move(z), rng, opts);
}

/// Noise-prediction loss at a given (t, eps).
template <typename T, typename Cond, typename Model>
ag::Var<T> diffusion_loss_at(Model&& model, const Mat<T>& z0, const Cond& cond, int t, const Mat<T>& eps,
                             const DiffusionSchedule& sched) {
    const Mat<T> z_t = add_noise<T>(z0, t, eps, sched);
    ag::Var<T> pred = model(z_t, t, cond);
    return ag::mse<T>(pred, eps);
}

/// Draws t uniformly from [0, T) and then eps ~ N(0, I) (row-major order)
/// from rng, and returns mse(model(z_t, t, cond), eps).
template <typename T, typename Cond, typename Model>
ag::Var<T> diffusion_loss(Model&& model, const Mat<T>& z0, const Cond& cond, const DiffusionSchedule& sched,
                          Rng& rng) {
    const int t = static_cast<int>(rng.uniform_int(0, sched.num_steps - 1));
    const Mat<T> eps = rng.normal_matrix<T>(z0.rows(), z0.cols());
    return diffusion_loss_at<T>(model, z0, cond, t, eps, sched);
}

}  // namespace dreamclear

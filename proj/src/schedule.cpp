#include "dreamclear/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dreamclear {

ScheduleKind parse_schedule_kind(const std::string& name) {
    if (name == "cosine") return ScheduleKind::cosine;
    if (name == "linear") return ScheduleKind::linear;
    throw std::invalid_argument("unknown schedule kind: " + name);
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::cosine ? "cosine" : "linear"; }

double DiffusionSchedule::posterior_variance(int t) const {
    check_step(t);
    if (t == 0) return 0.0;
    const auto i = static_cast<std::size_t>(t);
    return betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]);
}

void DiffusionSchedule::check_step(int t) const {
    if (t < 0 || t >= num_steps) {
        throw std::out_of_range("diffusion step " + std::to_string(t) + " outside [0, " + std::to_string(num_steps) +
                                ")");
    }
}

DiffusionSchedule make_schedule(int num_steps, ScheduleKind kind) {
    if (num_steps <= 0) throw std::invalid_argument("num_steps must be positive");
    DiffusionSchedule s;
    s.num_steps = num_steps;
    s.betas.resize(static_cast<std::size_t>(num_steps));
    if (kind == ScheduleKind::linear) {
        for (int i = 0; i < num_steps; ++i) {
            const double frac = num_steps == 1 ? 0.0 : static_cast<double>(i) / (num_steps - 1);
            s.betas[static_cast<std::size_t>(i)] = 1e-4 + (2e-2 - 1e-4) * frac;
        }
    } else {
        // Cosine alpha_bar curve with offset 0.008 and betas capped at 0.999.
        const double offset = 0.008;
        auto f = [&](double t) {
            const double c = std::cos((t / num_steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
            return c * c;
        };
        for (int i = 0; i < num_steps; ++i) {
            s.betas[static_cast<std::size_t>(i)] = std::min(1.0 - f(i + 1) / f(i), 0.999);
        }
    }
    s.alphas.resize(s.betas.size());
    s.alpha_bars.resize(s.betas.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < s.betas.size(); ++i) {
        s.alphas[i] = 1.0 - s.betas[i];
        prod *= s.alphas[i];
        s.alpha_bars[i] = prod;
    }
    return s;
}

DiffusionSchedule schedule_from_alpha_bars(const std::vector<double>& alpha_bars) {
    if (alpha_bars.empty()) throw std::invalid_argument("empty alpha_bar sequence");
    DiffusionSchedule s;
    s.num_steps = static_cast<int>(alpha_bars.size());
    s.alpha_bars = alpha_bars;
    s.alphas.resize(alpha_bars.size());
    s.betas.resize(alpha_bars.size());
    double prev = 1.0;
    for (std::size_t i = 0; i < alpha_bars.size(); ++i) {
        if (!(alpha_bars[i] < prev) || !(alpha_bars[i] > 0.0)) {
            throw std::invalid_argument("alpha_bar sequence must be strictly decreasing in (0, 1)");
        }
        s.alphas[i] = alpha_bars[i] / prev;
        s.betas[i] = 1.0 - s.alphas[i];
        prev = alpha_bars[i];
    }
    return s;
}

RespacedSchedule respace(const DiffusionSchedule& base, int steps, std::optional<int> last) {
    const int top = last.value_or(base.num_steps - 1);
    base.check_step(top);
    if (steps < 1 || steps > top + 1) {
        throw std::invalid_argument("cannot respace to " + std::to_string(steps) + " steps over " +
                                    std::to_string(top + 1) + " base steps");
    }
    RespacedSchedule out;
    if (steps == 1) {
        out.timesteps = {top};
    } else {
        for (int i = 0; i < steps; ++i) {
            const double pos = static_cast<double>(i) * top / (steps - 1);
            out.timesteps.push_back(static_cast<int>(std::lround(pos)));
        }
    }
    std::vector<double> abars;
    abars.reserve(out.timesteps.size());
    for (int t : out.timesteps) abars.push_back(base.alpha_bars[static_cast<std::size_t>(t)]);
    out.schedule = schedule_from_alpha_bars(abars);
    return out;
}

void GuidanceConfig::validate(const DiffusionSchedule& sched) const {
    if (steps < 1) throw std::invalid_argument("guidance steps must be positive");
    if (steps > sched.num_steps) {
        throw std::invalid_argument("guidance steps (" + std::to_string(steps) + ") exceed schedule length (" +
                                    std::to_string(sched.num_steps) + ")");
    }
}

template <typename T>
Mat<T> add_noise(const Mat<T>& z0, int t, const Mat<T>& eps, const DiffusionSchedule& sched) {
    sched.check_step(t);
    if (z0.rows() != eps.rows() || z0.cols() != eps.cols()) throw std::invalid_argument("add_noise: shape mismatch");
    const double abar = sched.alpha_bars[static_cast<std::size_t>(t)];
    const T a = static_cast<T>(std::sqrt(abar));
    const T b = static_cast<T>(std::sqrt(1.0 - abar));
    return a * z0 + b * eps;
}

template <typename T>
Mat<T> cfg_combine(const Mat<T>& eps_pos, const Mat<T>& eps_neg, double omega) {
    if (eps_pos.rows() != eps_neg.rows() || eps_pos.cols() != eps_neg.cols()) {
        throw std::invalid_argument("cfg_combine: shape mismatch");
    }
    if (omega == 1.0) return eps_pos;
    if (omega == 0.0) return eps_neg;
    const T w = static_cast<T>(omega);
    const T one_minus_w = static_cast<T>(1.0 - omega);
    return w * eps_pos + one_minus_w * eps_neg;
}

template <typename T>
Mat<T> posterior_mean(const Mat<T>& z_t, const Mat<T>& eps_hat, int t, const DiffusionSchedule& sched,
                      std::optional<double> clip_x0) {
    sched.check_step(t);
    if (z_t.rows() != eps_hat.rows() || z_t.cols() != eps_hat.cols()) {
        throw std::invalid_argument("posterior_mean: shape mismatch");
    }
    const auto i = static_cast<std::size_t>(t);
    const double abar = sched.alpha_bars[i];
    const double abar_prev = sched.alpha_bar_prev(t);
    const double beta = sched.betas[i];
    Mat<T> x0 = (z_t - static_cast<T>(std::sqrt(1.0 - abar)) * eps_hat) * static_cast<T>(1.0 / std::sqrt(abar));
    if (clip_x0) x0 = x0.cwiseMax(static_cast<T>(-*clip_x0)).cwiseMin(static_cast<T>(*clip_x0));
    if (t == 0) return x0;
    const T c_x0 = static_cast<T>(std::sqrt(abar_prev) * beta / (1.0 - abar));
    const T c_zt = static_cast<T>(std::sqrt(sched.alphas[i]) * (1.0 - abar_prev) / (1.0 - abar));
    return c_x0 * x0 + c_zt * z_t;
}

template <typename T>
Mat<T> ddpm_step(const Mat<T>& z_t, const Mat<T>& eps_hat, int t, const DiffusionSchedule& sched, Rng& rng,
                 std::optional<double> clip_x0) {
    Mat<T> mu = posterior_mean<T>(z_t, eps_hat, t, sched, clip_x0);
    if (t == 0) return mu;
    const T sigma = static_cast<T>(std::sqrt(sched.posterior_variance(t)));
    return mu + sigma * rng.normal_matrix<T>(mu.rows(), mu.cols());
}

template Mat<float> add_noise<float>(const Mat<float>&, int, const Mat<float>&, const DiffusionSchedule&);
template Mat<double> add_noise<double>(const Mat<double>&, int, const Mat<double>&, const DiffusionSchedule&);
template Mat<float> cfg_combine<float>(const Mat<float>&, const Mat<float>&, double);
template Mat<double> cfg_combine<double>(const Mat<double>&, const Mat<double>&, double);
template Mat<float> posterior_mean<float>(const Mat<float>&, const Mat<float>&, int, const DiffusionSchedule&,
                                          std::optional<double>);
template Mat<double> posterior_mean<double>(const Mat<double>&, const Mat<double>&, int, const DiffusionSchedule&,
                                            std::optional<double>);
template Mat<float> ddpm_step<float>(const Mat<float>&, const Mat<float>&, int, const DiffusionSchedule&, Rng&,
                                     std::optional<double>);
template Mat<double> ddpm_step<double>(const Mat<double>&, const Mat<double>&, int, const DiffusionSchedule&, Rng&,
                                       std::optional<double>);

}  // namespace dreamclear

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "dreamclear/autograd.hpp"
#include "dreamclear/image.hpp"
#include "dreamclear/nn.hpp"
#include "dreamclear/random.hpp"

namespace dreamclear::testing {

struct GradCheckResult {
    double max_rel_error = 0.0;
    int checked = 0;
};

/// Compares analytic gradients of `loss` (a 1 x 1 graph rebuilt on every
/// call) against central differences on randomly sampled coordinates.
inline GradCheckResult gradient_check(const std::vector<ag::Var<double>>& params,
                                      const std::function<ag::Var<double>()>& loss, int coords, Rng& rng,
                                      double h = 1e-5, double floor = 1e-6) {
    for (const auto& p : params) p->grad.resize(0, 0);
    ag::backward(loss());
    std::vector<std::pair<std::size_t, Eigen::Index>> picks;
    std::size_t total = 0;
    for (const auto& p : params) total += static_cast<std::size_t>(p->value.size());
    for (int i = 0; i < coords; ++i) {
        auto flat = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(total) - 1));
        std::size_t which = 0;
        while (flat >= static_cast<std::size_t>(params[which]->value.size())) {
            flat -= static_cast<std::size_t>(params[which]->value.size());
            ++which;
        }
        picks.emplace_back(which, static_cast<Eigen::Index>(flat));
    }
    GradCheckResult out;
    for (const auto& [which, idx] : picks) {
        auto& p = params[which];
        const double analytic = p->grad.size() ? p->grad.data()[idx] : 0.0;
        const double saved = p->value.data()[idx];
        double plus, minus;
        {
            ag::NoGradGuard ng;
            p->value.data()[idx] = saved + h;
            plus = loss()->value(0, 0);
            p->value.data()[idx] = saved - h;
            minus = loss()->value(0, 0);
            p->value.data()[idx] = saved;
        }
        const double numeric = (plus - minus) / (2.0 * h);
        const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
        out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic - numeric) / denom);
        ++out.checked;
    }
    return out;
}

/// Overwrites every parameter with N(0, stddev^2) so zero-initialized paths
/// carry signal.
template <typename T>
void randomize(ParamStore<T>& store, Rng& rng, double stddev) {
    for (const auto& [name, p] : store.entries()) {
        (void)name;
        p->value = (rng.normal_matrix<T>(p->rows(), p->cols()).array() * static_cast<T>(stddev)).matrix();
    }
}

inline Image random_image(int w, int h, int c, Rng& rng) {
    Image img(w, h, c);
    for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
    return img;
}

inline bool bitwise_equal(const Image& a, const Image& b) { return a.same_shape(b) && a.pixels == b.pixels; }

template <typename T>
bool bitwise_equal(const Mat<T>& a, const Mat<T>& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::equal(a.data(), a.data() + a.size(), b.data());
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("dreamclear_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace dreamclear::testing

#pragma once

// Independent reference implementations written straight from the defining
// formulas, shared by the unit tests and the acceptance runner.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "dreamclear/image.hpp"
#include "dreamclear/moam.hpp"

namespace dreamclear::testing {

inline std::vector<double> luma_oracle(const Image& img) {
    std::vector<double> y;
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            if (img.channels == 1) {
                y.push_back(img.at(c, r, 0));
            } else {
                y.push_back(0.299 * img.at(c, r, 0) + 0.587 * img.at(c, r, 1) + 0.114 * img.at(c, r, 2));
            }
        }
    }
    return y;
}

inline double psnr_oracle(const std::vector<double>& a, const std::vector<double>& b, double peak = 1.0) {
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
    if (se == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / (se / static_cast<double>(a.size())));
}

inline double psnr_oracle(const Image& a, const Image& b) {
    std::vector<double> x(a.pixels.begin(), a.pixels.end()), y(b.pixels.begin(), b.pixels.end());
    return psnr_oracle(x, y);
}

/// Gaussian-weighted SSIM evaluated window by window with a full 2-D kernel.
inline double ssim_oracle(const std::vector<double>& a, const std::vector<double>& b, int w, int h) {
    const int n = 11;
    const double sigma = 1.5;
    double kernel[11][11];
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            kernel[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2.0 * sigma * sigma));
            total += kernel[i][j];
        }
    }
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double acc = 0.0;
    int windows = 0;
    for (int y0 = 0; y0 + n <= h; ++y0) {
        for (int x0 = 0; x0 + n <= w; ++x0) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    const double k = kernel[i][j] / total;
                    const double va = a[static_cast<std::size_t>((y0 + i) * w + x0 + j)];
                    const double vb = b[static_cast<std::size_t>((y0 + i) * w + x0 + j)];
                    ma += k * va;
                    mb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            }
            const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
            acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++windows;
        }
    }
    return acc / windows;
}

/// Method i is in the top k of a group when fewer than k methods strictly
/// beat its count.
inline std::vector<double> topk_oracle(const std::vector<std::vector<std::int64_t>>& counts, int k) {
    const std::size_t m = counts.front().size();
    std::vector<double> r(m, 0.0);
    for (const auto& row : counts) {
        for (std::size_t i = 0; i < m; ++i) {
            int better = 0;
            for (std::size_t j = 0; j < m; ++j) better += row[j] > row[i];
            if (better < k) r[i] += 1.0;
        }
    }
    for (double& v : r) v /= static_cast<double>(counts.size());
    return r;
}

/// gamma(i, c) = sum_k w(i, k) * (x(i) W_k + b_k)(c), summed by explicit loops.
inline Matd expert_sum_oracle(const Matd& x, const Matd& w, const std::vector<Linear<double>>& nets) {
    Matd out = Matd::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index c = 0; c < nets.front().weight->cols(); ++c) {
            double s = 0.0;
            for (std::size_t k = 0; k < nets.size(); ++k) {
                double v = nets[k].bias->value(0, c);
                for (Eigen::Index j = 0; j < x.cols(); ++j) v += x(i, j) * nets[k].weight->value(j, c);
                s += w(i, static_cast<Eigen::Index>(k)) * v;
            }
            out(i, c) = s;
        }
    }
    return out;
}

inline Matd modulate_oracle(const Matd& x, const Matd& g, const Matd& b) {
    Matd out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index c = 0; c < x.cols(); ++c) out(i, c) = (1.0 + g(i, c)) * x(i, c) + b(i, c);
    }
    return out;
}

}  // namespace dreamclear::testing

#pragma once

// Reference image metrics (PSNR, SSIM on luma), user-study analytics and a
// named hook for externally supplied learned metrics.

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dreamclear/image.hpp"

namespace dreamclear {

struct LumaPlane {
    int width = 0;
    int height = 0;
    std::vector<double> values;

    double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// Full-range BT.601 luma, Y = 0.299 R + 0.587 G + 0.114 B. A one-channel
/// image is taken as luma already.
LumaPlane rgb_to_y(const Image& img);

constexpr double kPsnrInfinity = std::numeric_limits<double>::infinity();

/// 10 log10(peak^2 / MSE) over all samples; +inf when the inputs are equal.
double psnr(const std::vector<double>& a, const std::vector<double>& b, double peak = 1.0);
double psnr(const Image& a, const Image& b, double peak = 1.0);
double psnr_y(const Image& a, const Image& b, double peak = 1.0);

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Normalized 11-tap Gaussian (sigma 1.5).
std::vector<double> ssim_kernel_1d();

/// Mean SSIM over all fully contained 11x11 windows of two luma planes with
/// dynamic range 1.
double ssim(const LumaPlane& a, const LumaPlane& b);
double ssim_y(const Image& a, const Image& b);

/// Per-group selection counts: counts[g][m] is how many evaluators picked
/// method m in group g.
struct ScoreTable {
    int num_methods = 0;
    std::vector<std::vector<std::int64_t>> counts;

    /// selections[g] lists the chosen method index of each evaluator in group g.
    static ScoreTable from_selections(int num_methods, const std::vector<std::vector<int>>& selections);
    void validate() const;
};

/// Share of all votes cast that went to each method.
std::vector<double> vote_percentage(const ScoreTable& table);

/// R_i^k: fraction of groups in which method i is among the top k by count.
/// Ties at the k-th count include every tied method.
std::vector<double> topk_ratio(const ScoreTable& table, int k);

using ExternalMetric = std::function<double(const Image& pred, const Image& gt)>;

/// Named learned metrics supplied by the caller (LPIPS, MUSIQ, ...).
class MetricRegistry {
public:
    void add(const std::string& name, ExternalMetric fn);
    bool empty() const { return metrics_.empty(); }
    const std::map<std::string, ExternalMetric>& all() const { return metrics_; }

private:
    std::map<std::string, ExternalMetric> metrics_;
};

struct ImageScores {
    std::string name;
    double psnr_y = 0.0;
    double psnr_rgb = 0.0;
    double ssim_y = 0.0;
    std::map<std::string, double> external;
};

struct MetricsReport {
    std::vector<ImageScores> images;
    std::vector<std::string> warnings;

    double mean_psnr_y() const;  // over finite values; +inf if all are infinite
    double mean_psnr_rgb() const;
    double mean_ssim_y() const;
    int infinite_psnr_count() const;
    std::map<std::string, double> mean_external() const;
};

ImageScores score_image(const std::string& name, const Image& pred, const Image& gt,
                        const MetricRegistry* external = nullptr);

/// PSNR values of +inf are written as the string "inf".
nlohmann::json to_json(const MetricsReport& report);

}  // namespace dreamclear

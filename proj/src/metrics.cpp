#include "dreamclear/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dreamclear {

namespace {

nlohmann::json db_value(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

double finite_mean(const std::vector<double>& values) {
    double sum = 0.0;
    int n = 0;
    for (double v : values) {
        if (std::isfinite(v)) {
            sum += v;
            ++n;
        }
    }
    if (n == 0) return values.empty() ? 0.0 : kPsnrInfinity;
    return sum / n;
}

// Valid-mode separable filtering of a plane with a 1-D kernel.
std::vector<double> filter_valid(const std::vector<double>& in, int w, int h, const std::vector<double>& k) {
    const int r = static_cast<int>(k.size());
    const int ow = w - r + 1;
    const int oh = h - r + 1;
    std::vector<double> tmp(static_cast<std::size_t>(ow) * h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < r; ++i) s += k[static_cast<std::size_t>(i)] * in[static_cast<std::size_t>(y) * w + x + i];
            tmp[static_cast<std::size_t>(y) * ow + x] = s;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(ow) * oh);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < r; ++i) s += k[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(y + i) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = s;
        }
    }
    return out;
}

}  // namespace

LumaPlane rgb_to_y(const Image& img) {
    LumaPlane y{img.width, img.height, {}};
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    y.values.resize(n);
    if (img.channels == 1) {
        for (std::size_t i = 0; i < n; ++i) y.values[i] = img.pixels[i];
    } else if (img.channels == 3) {
        for (std::size_t i = 0; i < n; ++i) {
            y.values[i] = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] + 0.114 * img.pixels[3 * i + 2];
        }
    } else {
        throw std::invalid_argument("rgb_to_y: expected 1 or 3 channels, got " + std::to_string(img.channels));
    }
    return y;
}

double psnr(const std::vector<double>& a, const std::vector<double>& b, double peak) {
    if (a.size() != b.size() || a.empty()) throw std::invalid_argument("psnr: inputs differ in size or are empty");
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.size());
    if (mse == 0.0) return kPsnrInfinity;
    return 10.0 * std::log10(peak * peak / mse);
}

double psnr(const Image& a, const Image& b, double peak) {
    if (!a.same_shape(b)) throw std::invalid_argument("psnr: image shapes differ");
    return psnr(std::vector<double>(a.pixels.begin(), a.pixels.end()),
                std::vector<double>(b.pixels.begin(), b.pixels.end()), peak);
}

double psnr_y(const Image& a, const Image& b, double peak) {
    if (!a.same_shape(b)) throw std::invalid_argument("psnr_y: image shapes differ");
    return psnr(rgb_to_y(a).values, rgb_to_y(b).values, peak);
}

std::vector<double> ssim_kernel_1d() {
    std::vector<double> k(kSsimWindow);
    const int r = kSsimWindow / 2;
    double s = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double d = i - r;
        k[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
        s += k[static_cast<std::size_t>(i)];
    }
    for (double& v : k) v /= s;
    return k;
}

double ssim(const LumaPlane& a, const LumaPlane& b) {
    if (a.width != b.width || a.height != b.height) throw std::invalid_argument("ssim: plane shapes differ");
    if (a.width < kSsimWindow || a.height < kSsimWindow) {
        throw std::invalid_argument("ssim: image must be at least 11x11");
    }
    const auto k = ssim_kernel_1d();
    const int w = a.width;
    const int h = a.height;
    std::vector<double> aa(a.values.size()), bb(a.values.size()), ab(a.values.size());
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        aa[i] = a.values[i] * a.values[i];
        bb[i] = b.values[i] * b.values[i];
        ab[i] = a.values[i] * b.values[i];
    }
    const auto mu_a = filter_valid(a.values, w, h, k);
    const auto mu_b = filter_valid(b.values, w, h, k);
    const auto e_aa = filter_valid(aa, w, h, k);
    const auto e_bb = filter_valid(bb, w, h, k);
    const auto e_ab = filter_valid(ab, w, h, k);
    const double c1 = (kSsimK1 * 1.0) * (kSsimK1 * 1.0);
    const double c2 = (kSsimK2 * 1.0) * (kSsimK2 * 1.0);
    double total = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double va = e_aa[i] - ma * ma;
        const double vb = e_bb[i] - mb * mb;
        const double cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    return total / static_cast<double>(mu_a.size());
}

double ssim_y(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("ssim_y: image shapes differ");
    return ssim(rgb_to_y(a), rgb_to_y(b));
}

ScoreTable ScoreTable::from_selections(int num_methods, const std::vector<std::vector<int>>& selections) {
    if (num_methods <= 0) throw std::invalid_argument("score table needs at least one method");
    ScoreTable t;
    t.num_methods = num_methods;
    for (const auto& group : selections) {
        std::vector<std::int64_t> counts(static_cast<std::size_t>(num_methods), 0);
        for (int m : group) {
            if (m < 0 || m >= num_methods) {
                throw std::invalid_argument("selection index " + std::to_string(m) + " outside method range");
            }
            ++counts[static_cast<std::size_t>(m)];
        }
        t.counts.push_back(std::move(counts));
    }
    return t;
}

void ScoreTable::validate() const {
    if (num_methods <= 0) throw std::invalid_argument("score table needs at least one method");
    if (counts.empty()) throw std::invalid_argument("score table is empty");
    for (const auto& row : counts) {
        if (static_cast<int>(row.size()) != num_methods) throw std::invalid_argument("score table row width");
        for (auto c : row) {
            if (c < 0) throw std::invalid_argument("score table counts must be nonnegative");
        }
    }
}

std::vector<double> vote_percentage(const ScoreTable& table) {
    table.validate();
    std::vector<double> totals(static_cast<std::size_t>(table.num_methods), 0.0);
    double all = 0.0;
    for (const auto& row : table.counts) {
        for (int m = 0; m < table.num_methods; ++m) {
            totals[static_cast<std::size_t>(m)] += static_cast<double>(row[static_cast<std::size_t>(m)]);
            all += static_cast<double>(row[static_cast<std::size_t>(m)]);
        }
    }
    if (all == 0.0) throw std::invalid_argument("vote_percentage: no votes cast");
    for (double& v : totals) v /= all;
    return totals;
}

std::vector<double> topk_ratio(const ScoreTable& table, int k) {
    table.validate();
    if (k < 1 || k > table.num_methods) {
        throw std::invalid_argument("topk_ratio: k=" + std::to_string(k) + " outside [1, " +
                                    std::to_string(table.num_methods) + "]");
    }
    std::vector<double> hits(static_cast<std::size_t>(table.num_methods), 0.0);
    for (const auto& row : table.counts) {
        std::vector<std::int64_t> sorted = row;
        std::nth_element(sorted.begin(), sorted.begin() + (k - 1), sorted.end(), std::greater<>());
        const std::int64_t kth = sorted[static_cast<std::size_t>(k - 1)];
        for (int m = 0; m < table.num_methods; ++m) {
            if (row[static_cast<std::size_t>(m)] >= kth) hits[static_cast<std::size_t>(m)] += 1.0;
        }
    }
    for (double& h : hits) h /= static_cast<double>(table.counts.size());
    return hits;
}

void MetricRegistry::add(const std::string& name, ExternalMetric fn) {
    if (name.empty() || !fn) throw std::invalid_argument("external metric needs a name and a callable");
    metrics_[name] = std::move(fn);
}

double MetricsReport::mean_psnr_y() const {
    std::vector<double> v;
    for (const auto& s : images) v.push_back(s.psnr_y);
    return finite_mean(v);
}

double MetricsReport::mean_psnr_rgb() const {
    std::vector<double> v;
    for (const auto& s : images) v.push_back(s.psnr_rgb);
    return finite_mean(v);
}

double MetricsReport::mean_ssim_y() const {
    if (images.empty()) return 0.0;
    double s = 0.0;
    for (const auto& im : images) s += im.ssim_y;
    return s / static_cast<double>(images.size());
}

int MetricsReport::infinite_psnr_count() const {
    return static_cast<int>(std::count_if(images.begin(), images.end(), [](const ImageScores& s) {
        return std::isinf(s.psnr_y);
    }));
}

std::map<std::string, double> MetricsReport::mean_external() const {
    std::map<std::string, double> sums;
    std::map<std::string, int> counts;
    for (const auto& im : images) {
        for (const auto& [k, v] : im.external) {
            sums[k] += v;
            ++counts[k];
        }
    }
    for (auto& [k, v] : sums) v /= counts[k];
    return sums;
}

ImageScores score_image(const std::string& name, const Image& pred, const Image& gt, const MetricRegistry* external) {
    ImageScores s;
    s.name = name;
    s.psnr_y = psnr_y(pred, gt);
    s.psnr_rgb = psnr(pred, gt);
    s.ssim_y = ssim_y(pred, gt);
    if (external) {
        for (const auto& [k, fn] : external->all()) s.external[k] = fn(pred, gt);
    }
    return s;
}

nlohmann::json to_json(const MetricsReport& report) {
    nlohmann::json images = nlohmann::json::array();
    for (const auto& s : report.images) {
        nlohmann::json j{{"name", s.name},
                         {"psnr_y", db_value(s.psnr_y)},
                         {"psnr_rgb", db_value(s.psnr_rgb)},
                         {"ssim_y", s.ssim_y}};
        if (!s.external.empty()) j["external"] = s.external;
        images.push_back(std::move(j));
    }
    nlohmann::json summary{{"count", report.images.size()},
                           {"mean_psnr_y", db_value(report.mean_psnr_y())},
                           {"mean_psnr_rgb", db_value(report.mean_psnr_rgb())},
                           {"mean_ssim_y", report.mean_ssim_y()},
                           {"infinite_psnr_count", report.infinite_psnr_count()}};
    const auto ext = report.mean_external();
    if (!ext.empty()) summary["mean_external"] = ext;
    return nlohmann::json{{"images", images}, {"summary", summary}, {"warnings", report.warnings}};
}

}  // namespace dreamclear

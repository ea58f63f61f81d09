#include "dreamclear/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>

#include <jpeglib.h>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace dreamclear {

namespace {

cv::Mat to_cv(const Image& img) {
    cv::Mat m(img.height, img.width, CV_32FC(img.channels));
    std::copy(img.pixels.begin(), img.pixels.end(), m.ptr<float>());
    return m;
}

Image from_cv(const cv::Mat& m) {
    cv::Mat f;
    if (m.depth() != CV_32F) {
        m.convertTo(f, CV_32F);
    } else {
        f = m.isContinuous() ? m : m.clone();
    }
    Image img(f.cols, f.rows, f.channels());
    const float* src = f.ptr<float>();
    std::copy(src, src + img.pixels.size(), img.pixels.begin());
    return img;
}

cv::Mat to_cv_u8(const Image& img) {
    cv::Mat m(img.height, img.width, CV_8UC(img.channels));
    const auto bytes = to_bytes(img);
    std::copy(bytes.begin(), bytes.end(), m.ptr<std::uint8_t>());
    return m;
}

Image from_cv_u8(const cv::Mat& m) {
    Image img(m.cols, m.rows, m.channels());
    cv::Mat c = m.isContinuous() ? m : m.clone();
    const auto* src = c.ptr<std::uint8_t>();
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(src[i]) / 255.0f;
    return img;
}

Image resize_with(const Image& img, int width, int height, int interp) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("resize: target size must be positive");
    if (img.width == width && img.height == height) return img;
    cv::Mat out;
    cv::resize(to_cv(img), out, cv::Size(width, height), 0, 0, interp);
    return from_cv(out);
}

double keys_cubic(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
    return 0.0;
}

// Per output index: first source index and normalized tap weights. The kernel
// is stretched by the reduction factor so downscaling low-passes first.
struct Taps {
    std::vector<int> first;
    std::vector<std::vector<double>> weights;
};

Taps shrink_taps(int in, int out) {
    const double scale = static_cast<double>(in) / out;
    const double support = 2.0 * scale;
    Taps t;
    for (int o = 0; o < out; ++o) {
        const double center = (o + 0.5) * scale;
        const int lo = std::max(0, static_cast<int>(std::floor(center - support)));
        const int hi = std::min(in, static_cast<int>(std::ceil(center + support)));
        std::vector<double> w;
        double total = 0.0;
        for (int i = lo; i < hi; ++i) {
            w.push_back(keys_cubic((i + 0.5 - center) / scale));
            total += w.back();
        }
        for (double& v : w) v /= total;
        t.first.push_back(lo);
        t.weights.push_back(std::move(w));
    }
    return t;
}

Image shrink_bicubic(const Image& img, int width, int height) {
    const Taps tx = shrink_taps(img.width, width), ty = shrink_taps(img.height, height);
    const int ch = img.channels;
    std::vector<double> rows(static_cast<std::size_t>(img.height) * width * ch, 0.0);
    for (int r = 0; r < img.height; ++r) {
        for (int x = 0; x < width; ++x) {
            for (std::size_t k = 0; k < tx.weights[x].size(); ++k) {
                const int sx = tx.first[x] + static_cast<int>(k);
                for (int c = 0; c < ch; ++c) {
                    rows[(static_cast<std::size_t>(r) * width + x) * ch + c] += tx.weights[x][k] * img.at(sx, r, c);
                }
            }
        }
    }
    Image out(width, height, ch);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < ch; ++c) {
                double v = 0.0;
                for (std::size_t k = 0; k < ty.weights[y].size(); ++k) {
                    const int sy = ty.first[y] + static_cast<int>(k);
                    v += ty.weights[y][k] * rows[(static_cast<std::size_t>(sy) * width + x) * ch + c];
                }
                out.at(x, y, c) = static_cast<float>(v);
            }
        }
    }
    return out;
}

}  // namespace

Image::Image(int w, int h, int c, float fill) : width(w), height(h), channels(c) {
    if (w < 0 || h < 0 || c < 0) throw std::invalid_argument("image dimensions must be non-negative");
    pixels.assign(static_cast<std::size_t>(w) * h * c, fill);
}

Matf Image::to_mat() const {
    Matf m(static_cast<Eigen::Index>(width) * height, channels);
    std::copy(pixels.begin(), pixels.end(), m.data());
    return m;
}

Image Image::from_mat(const Matf& m, int width, int height) {
    if (m.rows() != static_cast<Eigen::Index>(width) * height) throw std::invalid_argument("from_mat: row count");
    Image img(width, height, static_cast<int>(m.cols()));
    std::copy(m.data(), m.data() + m.size(), img.pixels.begin());
    return img;
}

void require_unit_range(const Image& img, const std::string& what) {
    for (const float v : img.pixels) {
        if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
            throw std::invalid_argument(what + ": pixel values must lie in [0, 1]");
        }
    }
}

Image clamp01(Image img) {
    for (float& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

Image quantize_u8(Image img) {
    for (float& v : img.pixels) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
    return img;
}

std::vector<std::uint8_t> to_bytes(const Image& img) {
    std::vector<std::uint8_t> out(img.pixels.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
    }
    return out;
}

Image from_bytes(const std::vector<std::uint8_t>& bytes, int width, int height, int channels) {
    Image img(width, height, channels);
    if (bytes.size() != img.pixels.size()) throw std::invalid_argument("from_bytes: size mismatch");
    for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
    return img;
}

Image crop(const Image& img, int x0, int y0, int w, int h) {
    if (x0 < 0 || y0 < 0 || w <= 0 || h <= 0 || x0 + w > img.width || y0 + h > img.height) {
        throw std::invalid_argument("crop window outside image");
    }
    Image out(w, h, img.channels);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
        }
    }
    return out;
}

Image resize_bicubic(const Image& img, int width, int height) {
    if (width > 0 && height > 0 && width <= img.width && height <= img.height &&
        (width < img.width || height < img.height)) {
        return shrink_bicubic(img, width, height);
    }
    return resize_with(img, width, height, cv::INTER_CUBIC);
}
Image resize_bilinear(const Image& img, int width, int height) {
    return resize_with(img, width, height, cv::INTER_LINEAR);
}
Image resize_area(const Image& img, int width, int height) { return resize_with(img, width, height, cv::INTER_AREA); }

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma < 0.0) throw std::invalid_argument("blur sigma must be non-negative");
    if (sigma < 1e-3) return img;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    cv::Mat out;
    cv::GaussianBlur(to_cv(img), out, cv::Size(2 * radius + 1, 2 * radius + 1), sigma, sigma, cv::BORDER_REFLECT_101);
    return from_cv(out);
}

Image load_png(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) throw std::runtime_error("cannot read image " + path.string());
    if (m.depth() != CV_8U) throw std::runtime_error("only 8-bit images are supported: " + path.string());
    if (m.channels() == 4) cv::cvtColor(m, m, cv::COLOR_BGRA2BGR);
    if (m.channels() == 3) cv::cvtColor(m, m, cv::COLOR_BGR2RGB);
    return from_cv_u8(m);
}

void save_png(const Image& img, const std::filesystem::path& path) {
    if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("save_png: need 1 or 3 channels");
    cv::Mat m = to_cv_u8(img);
    if (img.channels == 3) cv::cvtColor(m, m, cv::COLOR_RGB2BGR);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), m)) throw std::runtime_error("cannot write image " + path.string());
}

std::vector<std::uint8_t> encode_png(const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("encode_png: need 1 or 3 channels");
    cv::Mat m = to_cv_u8(img);
    if (img.channels == 3) cv::cvtColor(m, m, cv::COLOR_RGB2BGR);
    std::vector<std::uint8_t> buf;
    if (!cv::imencode(".png", m, buf)) throw std::runtime_error("png encoding failed");
    return buf;
}

Image decode_png(const std::vector<std::uint8_t>& bytes) {
    cv::Mat m = cv::imdecode(bytes, cv::IMREAD_UNCHANGED);
    if (m.empty()) throw std::runtime_error("cannot decode png");
    if (m.depth() != CV_8U) throw std::runtime_error("only 8-bit images are supported");
    if (m.channels() == 4) cv::cvtColor(m, m, cv::COLOR_BGRA2BGR);
    if (m.channels() == 3) cv::cvtColor(m, m, cv::COLOR_BGR2RGB);
    return from_cv_u8(m);
}

Image jpeg_roundtrip(const Image& img, int quality) {
    if (quality < 1 || quality > 100) throw std::invalid_argument("jpeg quality must be in [1, 100]");
    if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("jpeg needs 1 or 3 channels");
    const auto bytes = to_bytes(img);

    // Full-resolution chroma (4:4:4); the default codec path subsamples 4:2:0.
    jpeg_error_mgr jerr;
    jpeg_std_error(&jerr);
    jerr.error_exit = [](j_common_ptr) { throw std::runtime_error("jpeg codec error"); };

    unsigned char* buf = nullptr;
    unsigned long size = 0;
    jpeg_compress_struct enc;
    enc.err = &jerr;
    jpeg_create_compress(&enc);
    try {
        jpeg_mem_dest(&enc, &buf, &size);
        enc.image_width = static_cast<JDIMENSION>(img.width);
        enc.image_height = static_cast<JDIMENSION>(img.height);
        enc.input_components = img.channels;
        enc.in_color_space = img.channels == 3 ? JCS_RGB : JCS_GRAYSCALE;
        jpeg_set_defaults(&enc);
        jpeg_set_quality(&enc, quality, TRUE);
        for (int c = 0; c < enc.num_components; ++c) {
            enc.comp_info[c].h_samp_factor = 1;
            enc.comp_info[c].v_samp_factor = 1;
        }
        jpeg_start_compress(&enc, TRUE);
        const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
        while (enc.next_scanline < enc.image_height) {
            JSAMPROW row = const_cast<JSAMPROW>(bytes.data() + enc.next_scanline * stride);
            jpeg_write_scanlines(&enc, &row, 1);
        }
        jpeg_finish_compress(&enc);
    } catch (...) {
        jpeg_destroy_compress(&enc);
        std::free(buf);
        throw;
    }
    jpeg_destroy_compress(&enc);

    std::vector<std::uint8_t> out(bytes.size());
    jpeg_decompress_struct dec;
    dec.err = &jerr;
    jpeg_create_decompress(&dec);
    try {
        jpeg_mem_src(&dec, buf, size);
        jpeg_read_header(&dec, TRUE);
        dec.out_color_space = img.channels == 3 ? JCS_RGB : JCS_GRAYSCALE;
        jpeg_start_decompress(&dec);
        const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
        while (dec.output_scanline < dec.output_height) {
            JSAMPROW row = out.data() + dec.output_scanline * stride;
            jpeg_read_scanlines(&dec, &row, 1);
        }
        jpeg_finish_decompress(&dec);
    } catch (...) {
        jpeg_destroy_decompress(&dec);
        std::free(buf);
        throw;
    }
    jpeg_destroy_decompress(&dec);
    std::free(buf);
    return from_bytes(out, img.width, img.height, img.channels);
}

}  // namespace dreamclear

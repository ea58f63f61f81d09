#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dreamclear/autograd.hpp"

namespace dreamclear {

/// Interleaved float image (row-major, channels last), nominally in [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int w, int h, int c, float fill = 0.0f);

    float& at(int x, int y, int c) { return pixels[index(x, y, c)]; }
    float at(int x, int y, int c) const { return pixels[index(x, y, c)]; }
    std::size_t index(int x, int y, int c) const {
        return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) *
                   static_cast<std::size_t>(channels) +
               static_cast<std::size_t>(c);
    }
    bool empty() const { return pixels.empty(); }
    bool same_shape(const Image& o) const { return width == o.width && height == o.height && channels == o.channels; }

    /// (height*width) x channels matrix view used by the models.
    Matf to_mat() const;
    static Image from_mat(const Matf& m, int width, int height);
};

/// Throws unless every pixel is finite and inside [0, 1].
void require_unit_range(const Image& img, const std::string& what);

Image clamp01(Image img);
/// Rounds every value to the nearest multiple of 1/255.
Image quantize_u8(Image img);
std::vector<std::uint8_t> to_bytes(const Image& img);
Image from_bytes(const std::vector<std::uint8_t>& bytes, int width, int height, int channels);

Image crop(const Image& img, int x0, int y0, int w, int h);
Image resize_bicubic(const Image& img, int width, int height);
Image resize_bilinear(const Image& img, int width, int height);
Image resize_area(const Image& img, int width, int height);
Image gaussian_blur(const Image& img, double sigma);

/// 8-bit PNG, RGB or gray.
Image load_png(const std::filesystem::path& path);
void save_png(const Image& img, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_png(const Image& img);
Image decode_png(const std::vector<std::uint8_t>& bytes);

/// In-memory JPEG round trip at the given quality (1..100).
Image jpeg_roundtrip(const Image& img, int quality);

}  // namespace dreamclear

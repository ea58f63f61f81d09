#include "dreamclear/textures.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace dreamclear {

namespace {

constexpr std::array<std::array<float, 3>, 8> kPalette{{
    {0.86f, 0.16f, 0.14f},  // red
    {0.15f, 0.32f, 0.85f},  // blue
    {0.18f, 0.70f, 0.25f},  // green
    {0.95f, 0.82f, 0.15f},  // yellow
    {0.96f, 0.96f, 0.94f},  // white
    {0.07f, 0.07f, 0.09f},  // black
    {0.60f, 0.22f, 0.70f},  // purple
    {0.95f, 0.52f, 0.10f},  // orange
}};

// Soft square wave in [0, 1] from a phase in cycles.
double square(double cycles) {
    const double s = std::sin(2.0 * std::numbers::pi * cycles);
    return 0.5 + 0.5 * std::tanh(6.0 * s);
}

double pattern(const TextureSpec& spec, double u, double v) {
    const double ca = std::cos(spec.angle), sa = std::sin(spec.angle);
    const double ru = ca * u - sa * v;
    const double rv = sa * u + ca * v;
    const double f = spec.frequency;
    switch (spec.kind) {
        case TextureKind::stripes:
            return square(f * ru + spec.phase);
        case TextureKind::checker: {
            const double a = std::sin(2.0 * std::numbers::pi * (f * ru + spec.phase));
            const double b = std::sin(2.0 * std::numbers::pi * (f * rv + spec.phase));
            return 0.5 + 0.5 * std::tanh(6.0 * a * b);
        }
        case TextureKind::dots: {
            const double fu = f * ru + spec.phase - std::floor(f * ru + spec.phase) - 0.5;
            const double fv = f * rv + spec.phase - std::floor(f * rv + spec.phase) - 0.5;
            const double r = std::sqrt(fu * fu + fv * fv);
            return 0.5 + 0.5 * std::tanh(20.0 * (0.3 - r));
        }
        case TextureKind::waves:
            return square(f * ru + 0.15 * std::sin(2.0 * std::numbers::pi * (1.5 * rv + spec.phase)) * f / 2.0);
        case TextureKind::rings: {
            const double du = u - 0.5, dv = v - 0.5;
            return square(f * std::sqrt(du * du + dv * dv) * 2.0 + spec.phase);
        }
    }
    return 0.0;
}

}  // namespace

const std::vector<std::string>& texture_kind_names() {
    static const std::vector<std::string> names{"stripes", "checker", "dots", "waves", "rings"};
    return names;
}

const std::vector<std::string>& palette_names() {
    static const std::vector<std::string> names{"red", "blue", "green", "yellow", "white", "black", "purple", "orange"};
    return names;
}

TextureSpec sample_texture(Rng& rng, double min_frequency, double max_frequency) {
    TextureSpec s;
    s.kind = static_cast<TextureKind>(rng.uniform_int(0, static_cast<std::int64_t>(texture_kind_names().size()) - 1));
    const auto n = static_cast<std::int64_t>(kPalette.size());
    s.color_a = static_cast<int>(rng.uniform_int(0, n - 1));
    s.color_b = static_cast<int>(rng.uniform_int(0, n - 2));
    if (s.color_b >= s.color_a) ++s.color_b;
    s.frequency = rng.uniform(min_frequency, max_frequency);
    s.angle = rng.uniform(0.0, std::numbers::pi);
    s.phase = rng.uniform();
    return s;
}

Image render_texture(const TextureSpec& spec, int side) {
    if (side <= 0) throw std::invalid_argument("texture side must be positive");
    if (spec.color_a < 0 || spec.color_b < 0 || spec.color_a >= static_cast<int>(kPalette.size()) ||
        spec.color_b >= static_cast<int>(kPalette.size())) {
        throw std::invalid_argument("texture palette index out of range");
    }
    const auto& a = kPalette[static_cast<std::size_t>(spec.color_a)];
    const auto& b = kPalette[static_cast<std::size_t>(spec.color_b)];
    Image img(side, side, 3);
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            double m = 0.0;
            for (int sy = 0; sy < 2; ++sy) {
                for (int sx = 0; sx < 2; ++sx) {
                    m += pattern(spec, (x + 0.25 + 0.5 * sx) / side, (y + 0.25 + 0.5 * sy) / side);
                }
            }
            m *= 0.25;
            for (int c = 0; c < 3; ++c) {
                img.at(x, y, c) = static_cast<float>(m * a[static_cast<std::size_t>(c)] +
                                                     (1.0 - m) * b[static_cast<std::size_t>(c)]);
            }
        }
    }
    return img;
}

std::string texture_caption(const TextureSpec& spec) {
    return palette_names()[static_cast<std::size_t>(spec.color_a)] + " and " +
           palette_names()[static_cast<std::size_t>(spec.color_b)] + " " +
           texture_kind_names()[static_cast<std::size_t>(spec.kind)];
}

}  // namespace dreamclear

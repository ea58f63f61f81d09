#pragma once

// Procedural texture images with matching captions; the toy image domain for
// restoration training and the curation pipeline.

#include <string>
#include <vector>

#include "dreamclear/image.hpp"
#include "dreamclear/random.hpp"

namespace dreamclear {

enum class TextureKind { stripes, checker, dots, waves, rings };

struct TextureSpec {
    TextureKind kind = TextureKind::stripes;
    int color_a = 0;  // palette indices
    int color_b = 1;
    double frequency = 4.0;  // cycles across the image side
    double angle = 0.0;      // radians
    double phase = 0.0;
};

const std::vector<std::string>& texture_kind_names();
const std::vector<std::string>& palette_names();

TextureSpec sample_texture(Rng& rng, double min_frequency = 2.0, double max_frequency = 6.0);

/// Renders a side x side RGB image in [0, 1], anti-aliased by 2x2 supersampling.
Image render_texture(const TextureSpec& spec, int side);

/// e.g. "red and blue stripes".
std::string texture_caption(const TextureSpec& spec);

}  // namespace dreamclear

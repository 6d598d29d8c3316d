#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "geclip/clip/image.h"
#include "geclip/explain/explain.h"

namespace geclip::service {

enum class Colormap { kJet, kGray };
Colormap parse_colormap(const std::string& name);
const char* colormap_name(Colormap c);

// Color for t in [0, 1]; values outside are clamped.
std::array<std::uint8_t, 3> colormap_lookup(Colormap c, Real t);

// out = round((1 - alpha) * image + alpha * colormap(heat)) per channel.
// The heat map must be normalized with values in [0, 1] and match the image
// size; alpha must lie in [0, 1].
clip::Image render_overlay(const clip::Image& image, const explain::HeatMap& heat, Real alpha = 0.5,
                           Colormap colormap = Colormap::kJet);
std::vector<std::uint8_t> render_overlay_png(const clip::Image& image, const explain::HeatMap& heat,
                                             Real alpha = 0.5, Colormap colormap = Colormap::kJet);

}  // namespace geclip::service

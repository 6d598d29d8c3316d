#include "geclip/service/overlay.h"

#include <algorithm>
#include <cmath>

#include "geclip/common/error.h"

namespace geclip::service {

Colormap parse_colormap(const std::string& name) {
  if (name == "jet") return Colormap::kJet;
  if (name == "gray") return Colormap::kGray;
  throw ContractError("unknown colormap '" + name + "' (expected jet or gray)");
}

const char* colormap_name(Colormap c) { return c == Colormap::kJet ? "jet" : "gray"; }

namespace {

std::uint8_t to_byte(Real v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, Real{0}, Real{1}) * 255.0));
}

}  // namespace

std::array<std::uint8_t, 3> colormap_lookup(Colormap c, Real t) {
  t = std::clamp(t, Real{0}, Real{1});
  if (c == Colormap::kGray) {
    const std::uint8_t g = to_byte(t);
    return {g, g, g};
  }
  // Piecewise-linear jet: dark blue -> blue -> cyan -> yellow -> red -> dark red.
  auto ramp = [t](Real center) { return std::clamp(1.5 - std::abs(4.0 * t - center), 0.0, 1.0); };
  return {to_byte(ramp(3.0)), to_byte(ramp(2.0)), to_byte(ramp(1.0))};
}

clip::Image render_overlay(const clip::Image& image, const explain::HeatMap& heat, Real alpha, Colormap colormap) {
  if (heat.width != image.width || heat.height != image.height) {
    throw ContractError("render_overlay: heat map " + std::to_string(heat.width) + "x" +
                        std::to_string(heat.height) + " does not match image " + std::to_string(image.width) +
                        "x" + std::to_string(image.height));
  }
  if (!heat.normalized) throw ContractError("render_overlay: heat map is not normalized");
  if (!(alpha >= 0 && alpha <= 1)) throw ContractError("render_overlay: alpha must lie in [0, 1]");
  clip::Image out = image;
  for (std::size_t i = 0; i < heat.values.size(); ++i) {
    const Real h = heat.values[i];
    if (!(h >= 0 && h <= 1)) throw ContractError("render_overlay: heat value outside [0, 1]");
    const auto color = colormap_lookup(colormap, h);
    for (std::size_t c = 0; c < 3; ++c) {
      const Real v = (1 - alpha) * image.rgb[i * 3 + c] + alpha * color[c];
      out.rgb[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v));
    }
  }
  return out;
}

std::vector<std::uint8_t> render_overlay_png(const clip::Image& image, const explain::HeatMap& heat, Real alpha,
                                             Colormap colormap) {
  return clip::encode_png(render_overlay(image, heat, alpha, colormap));
}

}  // namespace geclip::service

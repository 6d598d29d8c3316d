#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "geclip/tensor/tensor.h"

namespace geclip::clip {

// 8-bit interleaved RGB, row-major.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return rgb[(y * width + x) * 3 + c];
  }
  bool operator==(const Image&) const = default;
};

// Single-channel mask; nonzero is foreground.
struct Mask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> values;

  bool at(std::size_t x, std::size_t y) const { return values[y * width + x] != 0; }
  std::size_t count() const;
};

// Sniffs PPM (P6), PNG and JPEG signatures.
Image decode_image(std::span<const std::uint8_t> bytes);
Image read_image(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const Image& image);
std::vector<std::uint8_t> encode_ppm(const Image& image);
void write_png(const std::filesystem::path& path, const Image& image);
void write_ppm(const std::filesystem::path& path, const Image& image);

// Masks: PNG of any colour type (converted to grey) or binary PGM (P5).
Mask decode_mask(std::span<const std::uint8_t> bytes);
Mask read_mask(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const Mask& mask);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes);

struct Preprocess {
  std::array<Real, 3> mean{0.48145466, 0.4578275, 0.40821073};
  std::array<Real, 3> std{0.26862954, 0.26130258, 0.27577711};
};

// Geometry of the resize + center crop applied by preprocess_image, in
// source-pixel coordinates.
struct CropWindow {
  std::size_t resized_width = 0;
  std::size_t resized_height = 0;
  std::size_t left = 0;  // offset of the crop inside the resized image
  std::size_t top = 0;
};
CropWindow crop_window(std::size_t width, std::size_t height, std::size_t size);

// Bilinear resize (half-pixel centers) of an interleaved RGB image.
Image resize_bilinear(const Image& image, std::size_t width, std::size_t height);
// Shorter side resized to `size`, then center-cropped to size x size.
Image resize_and_crop(const Image& image, std::size_t size);

// Resize + crop, scale to [0,1] and normalize: Tensor[3, size, size].
Tensor preprocess_image(const Image& image, std::size_t size,
                        const Preprocess& pre);
// Pixels already at the model resolution: only scaling and normalization.
Tensor normalize_image(const Image& image, const Preprocess& pre);

}  // namespace geclip::clip

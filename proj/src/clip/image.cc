#include "geclip/clip/image.h"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cctype>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iterator>

// jpeglib.h needs FILE and size_t declared first.
#include <jpeglib.h>

#include "geclip/common/error.h"

namespace geclip::clip {

namespace {

bool has_prefix(std::span<const std::uint8_t> bytes, std::string_view magic) {
  return bytes.size() >= magic.size() &&
         std::memcmp(bytes.data(), magic.data(), magic.size()) == 0;
}

void check_dims(std::size_t w, std::size_t h, const char* what) {
  if (w == 0 || h == 0) {
    throw DataError(std::string(what) + ": zero-dimension image (" +
                    std::to_string(w) + "x" + std::to_string(h) + ")");
  }
}

// Parses a binary PNM header ("P6" or "P5"); returns the payload offset.
std::size_t parse_pnm_header(std::span<const std::uint8_t> bytes, std::size_t& w,
                             std::size_t& h, std::size_t& maxval) {
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    std::size_t v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw DataError("PNM: header value too large");
    }
    if (digits == 0) throw DataError("PNM: malformed header");
    return v;
  };
  w = number();
  h = number();
  maxval = number();
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw DataError("PNM: malformed header");
  }
  ++pos;
  if (maxval == 0 || maxval > 255) {
    throw DataError("PNM: only 8-bit maxval is supported");
  }
  return pos;
}

Image decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t w, h, maxval;
  const std::size_t pos = parse_pnm_header(bytes, w, h, maxval);
  check_dims(w, h, "PPM");
  const std::size_t n = w * h * 3;
  if (bytes.size() - pos < n) throw DataError("PPM: truncated pixel data");
  Image img{w, h, std::vector<std::uint8_t>(bytes.begin() + pos, bytes.begin() + pos + n)};
  if (maxval != 255) {
    for (auto& v : img.rgb) v = static_cast<std::uint8_t>(std::lround(v * 255.0 / maxval));
  }
  return img;
}

std::vector<std::uint8_t> decode_png_raw(std::span<const std::uint8_t> bytes,
                                         std::uint32_t format, std::size_t& w,
                                         std::size_t& h) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw DataError(std::string("PNG: ") + image.message);
  }
  image.format = format;
  w = image.width;
  h = image.height;
  std::vector<std::uint8_t> out(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError(std::string("PNG: ") + image.message);
  }
  return out;
}

Image decode_png(std::span<const std::uint8_t> bytes) {
  Image img;
  img.rgb = decode_png_raw(bytes, PNG_FORMAT_RGB, img.width, img.height);
  check_dims(img.width, img.height, "PNG");
  return img;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

Image decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  // Only PODs live across the setjmp boundary; the result is copied out.
  std::uint8_t* volatile buffer = nullptr;
  std::size_t w = 0, h = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::free(buffer);
    throw DataError(std::string("JPEG: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  w = cinfo.output_width;
  h = cinfo.output_height;
  const std::size_t stride = w * 3;
  buffer = static_cast<std::uint8_t*>(std::malloc(stride * h + 1));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buffer + cinfo.output_scanline * stride;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  Image img{w, h, std::vector<std::uint8_t>(buffer, buffer + stride * h)};
  std::free(buffer);
  check_dims(img.width, img.height, "JPEG");
  return img;
}

Real sample(const Image& img, Real sx, Real sy, std::size_t c) {
  // Half-pixel centers with edge clamping.
  const Real fx = std::clamp<Real>(sx, 0, static_cast<Real>(img.width - 1));
  const Real fy = std::clamp<Real>(sy, 0, static_cast<Real>(img.height - 1));
  const std::size_t x0 = static_cast<std::size_t>(fx);
  const std::size_t y0 = static_cast<std::size_t>(fy);
  const std::size_t x1 = std::min(x0 + 1, img.width - 1);
  const std::size_t y1 = std::min(y0 + 1, img.height - 1);
  const Real ax = fx - x0, ay = fy - y0;
  const Real top = img.at(x0, y0, c) * (1 - ax) + img.at(x1, y0, c) * ax;
  const Real bot = img.at(x0, y1, c) * (1 - ax) + img.at(x1, y1, c) * ax;
  return top * (1 - ay) + bot * ay;
}

}  // namespace

std::size_t Mask::count() const {
  return static_cast<std::size_t>(
      std::count_if(values.begin(), values.end(), [](std::uint8_t v) { return v != 0; }));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

Image decode_image(std::span<const std::uint8_t> bytes) {
  if (has_prefix(bytes, "P6")) return decode_ppm(bytes);
  if (has_prefix(bytes, "\x89PNG")) return decode_png(bytes);
  if (has_prefix(bytes, "\xFF\xD8\xFF")) return decode_jpeg(bytes);
  throw DataError("unrecognised image format (expected PPM P6, PNG or JPEG)");
}

Image read_image(const std::filesystem::path& path) {
  try {
    return decode_image(read_file_bytes(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  check_dims(image.width, image.height, "PNG encode");
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.rgb.data(), 0, nullptr)) {
    throw DataError(std::string("PNG encode: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.rgb.data(), 0,
                                 nullptr)) {
    throw DataError(std::string("PNG encode: ") + png.message);
  }
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> encode_ppm(const Image& image) {
  const std::string header = "P6\n" + std::to_string(image.width) + " " +
                             std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.rgb.begin(), image.rgb.end());
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  write_file_bytes(path, encode_png(image));
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  write_file_bytes(path, encode_ppm(image));
}

Mask decode_mask(std::span<const std::uint8_t> bytes) {
  Mask m;
  if (has_prefix(bytes, "P5")) {
    std::size_t maxval;
    const std::size_t pos = parse_pnm_header(bytes, m.width, m.height, maxval);
    check_dims(m.width, m.height, "PGM");
    if (bytes.size() - pos < m.width * m.height) {
      throw DataError("PGM: truncated pixel data");
    }
    m.values.assign(bytes.begin() + pos, bytes.begin() + pos + m.width * m.height);
    return m;
  }
  if (has_prefix(bytes, "\x89PNG")) {
    m.values = decode_png_raw(bytes, PNG_FORMAT_GRAY, m.width, m.height);
    check_dims(m.width, m.height, "PNG mask");
    return m;
  }
  throw DataError("unrecognised mask format (expected PNG or PGM P5)");
}

Mask read_mask(const std::filesystem::path& path) {
  try {
    return decode_mask(read_file_bytes(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
  check_dims(mask.width, mask.height, "mask encode");
  std::vector<std::uint8_t> grey(mask.values.size());
  for (std::size_t i = 0; i < grey.size(); ++i) grey[i] = mask.values[i] ? 255 : 0;
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(mask.width);
  png.height = static_cast<png_uint_32>(mask.height);
  png.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, grey.data(), 0, nullptr)) {
    throw DataError(std::string("PNG encode: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, grey.data(), 0, nullptr)) {
    throw DataError(std::string("PNG encode: ") + png.message);
  }
  out.resize(size);
  write_file_bytes(path, out);
}

CropWindow crop_window(std::size_t width, std::size_t height, std::size_t size) {
  check_dims(width, height, "preprocess");
  CropWindow win;
  if (width <= height) {
    win.resized_width = size;
    win.resized_height = std::max<std::size_t>(size, height * size / width);
  } else {
    win.resized_height = size;
    win.resized_width = std::max<std::size_t>(size, width * size / height);
  }
  win.left = (win.resized_width - size) / 2;
  win.top = (win.resized_height - size) / 2;
  return win;
}

Image resize_bilinear(const Image& image, std::size_t width, std::size_t height) {
  check_dims(image.width, image.height, "resize");
  check_dims(width, height, "resize target");
  if (width == image.width && height == image.height) return image;
  Image out{width, height, std::vector<std::uint8_t>(width * height * 3)};
  const Real rx = static_cast<Real>(image.width) / width;
  const Real ry = static_cast<Real>(image.height) / height;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const Real v = sample(image, (x + 0.5) * rx - 0.5, (y + 0.5) * ry - 0.5, c);
        out.rgb[(y * width + x) * 3 + c] =
            static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
      }
  return out;
}

Image resize_and_crop(const Image& image, std::size_t size) {
  const CropWindow win = crop_window(image.width, image.height, size);
  const Image resized = resize_bilinear(image, win.resized_width, win.resized_height);
  Image out{size, size, std::vector<std::uint8_t>(size * size * 3)};
  for (std::size_t y = 0; y < size; ++y) {
    const auto* src = &resized.rgb[((y + win.top) * resized.width + win.left) * 3];
    std::copy(src, src + size * 3, &out.rgb[y * size * 3]);
  }
  return out;
}

Tensor normalize_image(const Image& image, const Preprocess& pre) {
  check_dims(image.width, image.height, "normalize");
  const std::size_t hw = image.width * image.height;
  std::vector<Real> data(3 * hw);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i) {
      data[c * hw + i] = (image.rgb[i * 3 + c] / 255.0 - pre.mean[c]) / pre.std[c];
    }
  return Tensor({3, image.height, image.width}, std::move(data));
}

Tensor preprocess_image(const Image& image, std::size_t size, const Preprocess& pre) {
  return normalize_image(resize_and_crop(image, size), pre);
}

}  // namespace geclip::clip

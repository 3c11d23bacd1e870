#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "vilseg/errors.hpp"

namespace vilseg {

/// Interleaved HxWxC raster with float samples in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c = 3, float fill = 0.0f)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  bool empty() const { return data.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Single-channel 8-bit label raster (class ids, 255 = ignore).
struct LabelImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  LabelImage() = default;
  LabelImage(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const LabelImage&, const LabelImage&) = default;
};

struct Box {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;

  friend bool operator==(const Box&, const Box&) = default;
};

inline Image crop(const Image& src, const Box& box) {
  if (box.x < 0 || box.y < 0 || box.width <= 0 || box.height <= 0 || box.x + box.width > src.width ||
      box.y + box.height > src.height) {
    throw InputError("crop: box outside image bounds");
  }
  Image out(box.height, box.width, src.channels);
  for (int y = 0; y < box.height; ++y) {
    for (int x = 0; x < box.width; ++x) {
      for (int c = 0; c < src.channels; ++c) out.at(y, x, c) = src.at(box.y + y, box.x + x, c);
    }
  }
  return out;
}

/// Bilinear resampling with half-pixel centers. Interpolation is written as
/// nested lerps so constant regions stay bit-exact.
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0 || src.empty()) throw InputError("resize_bilinear: empty size");
  if (out_h == src.height && out_w == src.width) return src;
  Image out(out_h, out_w, src.channels);
  const float sy = static_cast<float>(src.height) / out_h;
  const float sx = static_cast<float>(src.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const float fy = std::clamp((y + 0.5f) * sy - 0.5f, 0.0f, static_cast<float>(src.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const float ty = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const float fx = std::clamp((x + 0.5f) * sx - 0.5f, 0.0f, static_cast<float>(src.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const float tx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const float top = src.at(y0, x0, c) + (src.at(y0, x1, c) - src.at(y0, x0, c)) * tx;
        const float bottom = src.at(y1, x0, c) + (src.at(y1, x1, c) - src.at(y1, x0, c)) * tx;
        out.at(y, x, c) = top + (bottom - top) * ty;
      }
    }
  }
  return out;
}

inline LabelImage resize_nearest(const LabelImage& src, int out_h, int out_w) {
  LabelImage out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(src.height - 1, static_cast<int>((y + 0.5) * src.height / out_h));
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(src.width - 1, static_cast<int>((x + 0.5) * src.width / out_w));
      out.at(y, x) = src.at(sy, sx);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNG

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_png_raw(const std::filesystem::path& path, int width, int height, int color_type,
                          const std::uint8_t* pixels, int bytes_per_pixel) {
  FilePtr file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw IoError("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encode failed: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels + static_cast<std::size_t>(y) * width * bytes_per_pixel));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct DecodedPng {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

inline DecodedPng read_png_raw(const std::filesystem::path& path, bool want_gray) {
  FilePtr file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw IoError("cannot open: " + path.string());
  png_byte signature[8];
  if (std::fread(signature, 1, 8, file.get()) != 8 || png_sig_cmp(signature, 0, 8) != 0) {
    throw IoError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("PNG decode failed: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (want_gray) {
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE) {
      png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    }
  } else if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_read_update_info(png, info);
  DecodedPng out;
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  out.pixels.resize(stride * out.height);
  std::vector<png_bytep> rows(out.height);
  for (int y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3) throw InputError("write_png: expected 3 channels");
  std::vector<std::uint8_t> bytes(image.data.size());
  std::transform(image.data.begin(), image.data.end(), bytes.begin(), detail::to_byte);
  detail::write_png_raw(path, image.width, image.height, PNG_COLOR_TYPE_RGB, bytes.data(), 3);
}

inline void write_png(const std::filesystem::path& path, const LabelImage& labels) {
  detail::write_png_raw(path, labels.width, labels.height, PNG_COLOR_TYPE_GRAY, labels.data.data(), 1);
}

inline Image read_png(const std::filesystem::path& path) {
  auto raw = detail::read_png_raw(path, false);
  if (raw.channels != 3) throw IoError("expected an RGB PNG: " + path.string());
  Image image(raw.height, raw.width, 3);
  for (std::size_t i = 0; i < raw.pixels.size(); ++i) image.data[i] = raw.pixels[i] / 255.0f;
  return image;
}

inline LabelImage read_label_png(const std::filesystem::path& path) {
  auto raw = detail::read_png_raw(path, true);
  if (raw.channels != 1) throw IoError("expected a single-channel PNG: " + path.string());
  LabelImage labels(raw.height, raw.width);
  labels.data = std::move(raw.pixels);
  return labels;
}

/// Quantizes to 8 bits the way write_png does, so in-memory data matches a PNG round trip.
inline Image quantize_8bit(Image image) {
  for (float& v : image.data) v = detail::to_byte(v) / 255.0f;
  return image;
}

}  // namespace vilseg

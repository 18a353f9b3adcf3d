#pragma once

// PNG/JPEG decoding into 8-bit RGB grids, plus the matching encoders used to
// write synthetic corpora.

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "domainshift/error.hpp"

namespace domainshift {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Interleaved RGB raster, row-major.
class PixelGrid {
 public:
  PixelGrid(std::size_t width, std::size_t height, Rgb fill = {})
      : width_(width), height_(height) {
    require(width >= 1 && height >= 1, ErrorKind::PreconditionFailed,
            "pixel grid needs width >= 1 and height >= 1");
    data_.resize(width * height * 3);
    for (std::size_t i = 0; i < width * height; ++i) set(i, fill);
  }

  PixelGrid(std::size_t width, std::size_t height, std::vector<std::uint8_t> interleaved)
      : width_(width), height_(height), data_(std::move(interleaved)) {
    require(width >= 1 && height >= 1, ErrorKind::PreconditionFailed,
            "pixel grid needs width >= 1 and height >= 1");
    require(data_.size() == width * height * 3, ErrorKind::ShapeMismatch,
            "interleaved buffer size does not match width*height*3");
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t pixel_count() const { return width_ * height_; }
  static constexpr std::size_t channels() { return 3; }

  Rgb at(std::size_t x, std::size_t y) const { return pixel(y * width_ + x); }
  void set(std::size_t x, std::size_t y, Rgb c) { set(y * width_ + x, c); }

  Rgb pixel(std::size_t i) const { return {data_[3 * i], data_[3 * i + 1], data_[3 * i + 2]}; }
  void set(std::size_t i, Rgb c) {
    data_[3 * i] = c.r;
    data_[3 * i + 1] = c.g;
    data_[3 * i + 2] = c.b;
  }

  const std::vector<std::uint8_t>& data() const { return data_; }

  friend bool operator==(const PixelGrid&, const PixelGrid&) = default;

 private:
  std::size_t width_;
  std::size_t height_;
  std::vector<std::uint8_t> data_;
};

enum class ImageFormat { Png, Jpeg, Unknown };

inline ImageFormat sniff_format(const std::uint8_t* bytes, std::size_t size) {
  static constexpr std::uint8_t kPng[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (size >= 8 && std::memcmp(bytes, kPng, 8) == 0) return ImageFormat::Png;
  if (size >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8 && bytes[2] == 0xff) return ImageFormat::Jpeg;
  return ImageFormat::Unknown;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open file", path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// True when the file starts with a PNG or JPEG signature.
inline bool looks_like_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  std::uint8_t head[8] = {};
  in.read(reinterpret_cast<char*>(head), sizeof head);
  return sniff_format(head, static_cast<std::size_t>(in.gcount())) != ImageFormat::Unknown;
}

namespace detail {

struct MemoryReader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t offset;
};

inline void png_read_from_memory(png_structp png, png_bytep out, png_size_t count) {
  auto* reader = static_cast<MemoryReader*>(png_get_io_ptr(png));
  if (reader->offset + count > reader->size) png_error(png, "unexpected end of data");
  std::memcpy(out, reader->data + reader->offset, count);
  reader->offset += count;
}

inline void png_quiet_warning(png_structp, png_const_charp) {}

// All automatic objects with destructors are constructed before setjmp, so the
// longjmp from libpng's error handler never skips a destructor.
inline bool decode_png(const std::vector<std::uint8_t>& bytes, std::size_t& width,
                       std::size_t& height, std::vector<std::uint8_t>& rgb,
                       std::string& message) {
  std::vector<png_bytep> rows;
  MemoryReader reader{bytes.data(), bytes.size(), 0};
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                           png_quiet_warning);
  if (png == nullptr) {
    message = "cannot allocate png reader";
    return false;
  }
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    message = "cannot allocate png info";
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    message = "malformed or truncated png";
    return false;
  }
  png_set_read_fn(png, &reader, png_read_from_memory);
  png_read_info(png, info);

  const png_byte color_type = png_get_color_type(png, info);
  const png_byte bit_depth = png_get_bit_depth(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_interlace_type(png, info) != PNG_INTERLACE_NONE) png_set_interlace_handling(png);
  png_read_update_info(png, info);

  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  if (png_get_rowbytes(png, info) != width * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    message = "unsupported png pixel layout";
    return false;
  }
  rgb.resize(width * height * 3);
  rows.resize(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = rgb.data() + y * width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* manager = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(manager->jump, 1);
}

inline void jpeg_quiet_message(j_common_ptr) {}

inline bool decode_jpeg(const std::vector<std::uint8_t>& bytes, std::size_t& width,
                        std::size_t& height, std::vector<std::uint8_t>& rgb,
                        std::string& message) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  err.base.output_message = jpeg_quiet_message;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    message = "malformed or truncated jpeg";
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  if (cinfo.jpeg_color_space == JCS_CMYK || cinfo.jpeg_color_space == JCS_YCCK) {
    jpeg_destroy_decompress(&cinfo);
    message = "CMYK jpeg is not supported";
    return false;
  }
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  width = cinfo.output_width;
  height = cinfo.output_height;
  rgb.resize(width * height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

inline void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

inline void png_flush_noop(png_structp) {}

}  // namespace detail

/// Decode PNG or JPEG bytes. Grayscale is replicated to all three channels,
/// alpha is discarded, 16-bit samples are reduced to 8 bits. Embedded color
/// profiles are ignored.
inline PixelGrid decode_image_bytes(const std::vector<std::uint8_t>& bytes,
                                    const std::string& label = {}) {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;
  std::string message;
  bool ok = false;
  switch (sniff_format(bytes.data(), bytes.size())) {
    case ImageFormat::Png: ok = detail::decode_png(bytes, width, height, rgb, message); break;
    case ImageFormat::Jpeg: ok = detail::decode_jpeg(bytes, width, height, rgb, message); break;
    case ImageFormat::Unknown: message = "not a PNG or JPEG file"; break;
  }
  if (!ok || width == 0 || height == 0) {
    throw Error(ErrorKind::DecodeError, message.empty() ? "empty image" : message, label);
  }
  return PixelGrid(width, height, std::move(rgb));
}

inline PixelGrid decode_image(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const Error& e) {
    throw Error(ErrorKind::DecodeError, e.detail(), path.string());
  }
  return decode_image_bytes(bytes, path.string());
}

enum class PngColor { Rgb, Gray, RgbAlpha };

/// Encode a grid as an 8-bit PNG. Gray takes the red channel; RgbAlpha writes
/// the given constant alpha.
inline std::vector<std::uint8_t> encode_png(const PixelGrid& grid, PngColor color = PngColor::Rgb,
                                            std::uint8_t alpha = 255) {
  const std::size_t channels = color == PngColor::Gray ? 1 : color == PngColor::Rgb ? 3 : 4;
  std::vector<std::uint8_t> raw(grid.pixel_count() * channels);
  for (std::size_t i = 0; i < grid.pixel_count(); ++i) {
    const Rgb p = grid.pixel(i);
    std::uint8_t* out = raw.data() + i * channels;
    out[0] = p.r;
    if (channels >= 3) {
      out[1] = p.g;
      out[2] = p.b;
    }
    if (channels == 4) out[3] = alpha;
  }
  std::vector<std::uint8_t> encoded;
  std::vector<png_bytep> rows(grid.height());
  for (std::size_t y = 0; y < grid.height(); ++y) rows[y] = raw.data() + y * grid.width() * channels;

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw Error(ErrorKind::IoError, "cannot allocate png writer");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::IoError, "png encoding failed");
  }
  const int type = color == PngColor::Gray  ? PNG_COLOR_TYPE_GRAY
                   : color == PngColor::Rgb ? PNG_COLOR_TYPE_RGB
                                            : PNG_COLOR_TYPE_RGB_ALPHA;
  png_set_write_fn(png, &encoded, detail::png_write_to_vector, detail::png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(grid.width()),
               static_cast<png_uint_32>(grid.height()), 8, type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return encoded;
}

/// Baseline JPEG encoding (lossy).
inline std::vector<std::uint8_t> encode_jpeg(const PixelGrid& grid, int quality = 95) {
  jpeg_compress_struct cinfo{};
  detail::JpegErrorManager err{};
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = detail::jpeg_error_exit;
  err.base.output_message = detail::jpeg_quiet_message;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    throw Error(ErrorKind::IoError, "jpeg encoding failed");
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = static_cast<JDIMENSION>(grid.width());
  cinfo.image_height = static_cast<JDIMENSION>(grid.height());
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPROW>(grid.data().data() +
                                     static_cast<std::size_t>(cinfo.next_scanline) * grid.width() * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::vector<std::uint8_t> encoded(buffer, buffer + size);
  jpeg_destroy_compress(&cinfo);
  std::free(buffer);
  return encoded;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot open file for writing", path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::IoError, "write failed", path.string());
}

}  // namespace domainshift

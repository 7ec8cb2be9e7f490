#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <iterator>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <jpeglib.h>

#include "pdcl/core/error.hpp"
#include "pdcl/core/tensor.hpp"

namespace pdcl::io {

// Interleaved 8-bit RGB raster.
struct Rgb8Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3
};

// Image `index` of an NCHW batch in [lo, hi] -> RGB8 (round to nearest).
template <typename T>
Rgb8Image to_rgb8(const Tensor<T>& batch, std::size_t index, double lo = 0.0, double hi = 1.0) {
  if (batch.rank() != 4 || batch.dim(1) != 3) throw ConfigError("to_rgb8: expected N x 3 x H x W");
  Rgb8Image img{batch.dim(3), batch.dim(2), {}};
  img.pixels.resize(img.width * img.height * 3);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double v = (double(batch.at(index, c, y, x)) - lo) / (hi - lo) * 255.0;
        v = std::min(255.0, std::max(0.0, v));
        img.pixels[(y * img.width + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v));
      }
  return img;
}

template <typename T>
void from_rgb8(const Rgb8Image& img, Tensor<T>& batch, std::size_t index, double lo = 0.0,
               double hi = 1.0) {
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        batch.at(index, c, y, x) =
            static_cast<T>(lo + (hi - lo) * img.pixels[(y * img.width + x) * 3 + c] / 255.0);
}

// Nearest-neighbour resize.
inline Rgb8Image resize_nearest(const Rgb8Image& src, std::size_t width, std::size_t height) {
  if (src.width == width && src.height == height) return src;
  Rgb8Image out{width, height, std::vector<std::uint8_t>(width * height * 3)};
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sy = y * src.height / height, sx = x * src.width / width;
      for (std::size_t c = 0; c < 3; ++c)
        out.pixels[(y * width + x) * 3 + c] = src.pixels[(sy * src.width + sx) * 3 + c];
    }
  return out;
}

// Binary PPM (P6, maxval 255).
inline void write_ppm(const std::filesystem::path& path, const Rgb8Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline Rgb8Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic;
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  skip_comments();
  in >> w;
  skip_comments();
  in >> h;
  skip_comments();
  in >> maxval;
  in.get();
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0) {
    throw IoError(path.string() + ": not an 8-bit binary PPM");
  }
  Rgb8Image img{w, h, std::vector<std::uint8_t>(w * h * 3)};
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw IoError(path.string() + ": truncated pixel data");
  return img;
}

namespace detail {

struct JpegErrorManager {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

inline void jpeg_silent(j_common_ptr) {}

// Only trivially destructible state lives between setjmp and longjmp.
inline bool jpeg_encode_raw(const std::uint8_t* rgb, unsigned width, unsigned height, int quality,
                            unsigned char** out, unsigned long* out_size, char* message) {
  jpeg_compress_struct cinfo;
  JpegErrorManager err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  err.pub.output_message = jpeg_silent;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::snprintf(message, JMSG_LENGTH_MAX, "%s", err.message);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, out, out_size);
  cinfo.image_width = width;
  cinfo.image_height = height;
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  // 4:4:4: chroma subsampling alone wipes out much of a 32x32 image's color detail.
  for (int c = 0; c < 3; ++c) {
    cinfo.comp_info[c].h_samp_factor = 1;
    cinfo.comp_info[c].v_samp_factor = 1;
  }
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(rgb + cinfo.next_scanline * width * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  return true;
}

inline bool jpeg_decode_raw(const unsigned char* data, unsigned long size, std::uint8_t* rgb,
                            unsigned capacity, unsigned* width, unsigned* height, char* message) {
  jpeg_decompress_struct cinfo;
  JpegErrorManager err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  err.pub.output_message = jpeg_silent;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::snprintf(message, JMSG_LENGTH_MAX, "%s", err.message);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data, size);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  *width = cinfo.output_width;
  *height = cinfo.output_height;
  if (rgb == nullptr || capacity < cinfo.output_width * cinfo.output_height * 3) {
    jpeg_abort_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return true;  // caller retries with a buffer of the reported size
  }
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = rgb + cinfo.output_scanline * cinfo.output_width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_jpeg(const Rgb8Image& img, int quality) {
  if (quality < 1 || quality > 100) throw ConfigError("jpeg quality must lie in [1, 100]");
  unsigned char* buf = nullptr;
  unsigned long size = 0;
  char message[JMSG_LENGTH_MAX] = {0};
  const bool ok = detail::jpeg_encode_raw(img.pixels.data(), unsigned(img.width),
                                          unsigned(img.height), quality, &buf, &size, message);
  std::vector<std::uint8_t> out;
  if (ok) out.assign(buf, buf + size);
  std::free(buf);
  if (!ok) throw IoError(std::string("jpeg encode failed: ") + message);
  return out;
}

inline Rgb8Image decode_jpeg(const std::vector<std::uint8_t>& data) {
  char message[JMSG_LENGTH_MAX] = {0};
  unsigned w = 0, h = 0;
  if (!detail::jpeg_decode_raw(data.data(), data.size(), nullptr, 0, &w, &h, message)) {
    throw IoError(std::string("jpeg decode failed: ") + message);
  }
  Rgb8Image img{w, h, std::vector<std::uint8_t>(std::size_t(w) * h * 3)};
  if (!detail::jpeg_decode_raw(data.data(), data.size(), img.pixels.data(),
                               unsigned(img.pixels.size()), &w, &h, message)) {
    throw IoError(std::string("jpeg decode failed: ") + message);
  }
  return img;
}

inline Rgb8Image read_jpeg(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_jpeg(data);
}

// Compress then decompress every image of an NCHW batch at `quality`.
template <typename T>
Tensor<T> jpeg_roundtrip(const Tensor<T>& batch, int quality, double lo = 0.0, double hi = 1.0) {
  Tensor<T> out(batch.shape());
  for (std::size_t i = 0; i < batch.dim(0); ++i) {
    Rgb8Image decoded = decode_jpeg(encode_jpeg(to_rgb8(batch, i, lo, hi), quality));
    from_rgb8(decoded, out, i, lo, hi);
  }
  return out;
}

}  // namespace pdcl::io

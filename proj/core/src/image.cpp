#include "pclsr/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

namespace pclsr {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("read_png: cannot open " + path.string());

  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
    throw IoError("read_png: not a PNG file: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("read_png: png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("read_png: png_create_info_struct failed");
  }
  std::vector<png_bytep> rows;
  std::vector<png_byte> buf;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("read_png: decode error in " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);

  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);  // libpng reads big-endian words
  png_read_update_info(png, info);

  depth = png_get_bit_depth(png, info);
  const int nch = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buf.resize(rowbytes * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image out(static_cast<int>(h), static_cast<int>(w), 3);
  const double scale = depth == 16 ? 1.0 / 65535.0 : 1.0 / 255.0;
  for (png_uint_32 y = 0; y < h; ++y) {
    for (png_uint_32 x = 0; x < w; ++x) {
      double px[3];
      if (depth == 16) {
        auto* p16 = reinterpret_cast<const std::uint16_t*>(rows[y]) + x * nch;
        for (int ch = 0; ch < 3; ++ch) px[ch] = p16[nch == 1 ? 0 : ch] * scale;
      } else {
        const png_byte* p8 = rows[y] + static_cast<std::size_t>(x) * nch;
        for (int ch = 0; ch < 3; ++ch) px[ch] = p8[nch == 1 ? 0 : ch] * scale;
      }
      for (int ch = 0; ch < 3; ++ch) out.at(ch, static_cast<int>(y), static_cast<int>(x)) = px[ch];
    }
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.c != 1 && img.c != 3)
    throw ParamError("write_png: only 1- or 3-channel images supported");
  if (img.h <= 0 || img.w <= 0) throw DimensionError("write_png: empty image");

  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("write_png: cannot open " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("write_png: png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("write_png: png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("write_png: encode error for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.w, img.h, 8,
               img.c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_byte> row(static_cast<std::size_t>(img.w) * img.c);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      for (int ch = 0; ch < img.c; ++ch) {
        double v = img.at(ch, y, x);
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        row[static_cast<std::size_t>(x) * img.c + ch] =
            static_cast<png_byte>(std::floor(v * 255.0 + 0.5));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image quantize8(const Image& img) {
  Image out(img.h, img.w, img.c);
  for (std::size_t k = 0; k < img.data.size(); ++k) {
    double v = img.data[k];
    v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    out.data[k] = std::floor(v * 255.0 + 0.5) / 255.0;
  }
  return out;
}

Image modcrop(const Image& img, int modulo) {
  if (modulo <= 0) throw ParamError("modcrop: modulo must be positive");
  const int nh = img.h - img.h % modulo;
  const int nw = img.w - img.w % modulo;
  if (nh == 0 || nw == 0) throw DimensionError("modcrop: image smaller than modulo");
  return crop(img, 0, 0, nh, nw);
}

Image crop(const Image& img, int top, int left, int ch, int cw) {
  if (top < 0 || left < 0 || ch <= 0 || cw <= 0 || top + ch > img.h || left + cw > img.w)
    throw DimensionError("crop: window out of bounds");
  Image out(ch, cw, img.c);
  for (int ic = 0; ic < img.c; ++ic)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) out.at(ic, y, x) = img.at(ic, top + y, left + x);
  return out;
}

Image flip_horizontal(const Image& img) {
  Image out(img.h, img.w, img.c);
  for (int ic = 0; ic < img.c; ++ic)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) out.at(ic, y, x) = img.at(ic, y, img.w - 1 - x);
  return out;
}

Image rotate90(const Image& img, int r) {
  r = ((r % 4) + 4) % 4;
  if (r == 0) return img;
  // One counter-clockwise quarter turn: out[y][x] = in[x][w_in-1-y] with
  // out dims (w_in, h_in).
  Image cur = img;
  for (int k = 0; k < r; ++k) {
    Image out(cur.w, cur.h, cur.c);
    for (int ic = 0; ic < cur.c; ++ic)
      for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) out.at(ic, y, x) = cur.at(ic, x, cur.w - 1 - y);
    cur = std::move(out);
  }
  return cur;
}

}  // namespace pclsr

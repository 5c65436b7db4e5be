#include "filterbench/image.hpp"

#include <png.h>

#include <array>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "filterbench/error.hpp"

namespace filterbench {

RgbImage::RgbImage(std::size_t w, std::size_t h, std::uint8_t r, std::uint8_t g, std::uint8_t b)
    : width(w), height(h), data(3 * w * h) {
  for (std::size_t i = 0; i < w * h; ++i) {
    data[3 * i] = r;
    data[3 * i + 1] = g;
    data[3 * i + 2] = b;
  }
}

void validate(const GrayImage& img) {
  if (img.pixels.size() != img.width * img.height) {
    throw Error(ErrorKind::Validation, "gray image buffer does not match its dimensions");
  }
}

void validate(const RgbImage& img) {
  if (img.data.size() != 3 * img.width * img.height) {
    throw Error(ErrorKind::Validation, "rgb image buffer does not match its dimensions");
  }
}

RgbImage resize_nearest(const RgbImage& img, std::size_t width, std::size_t height) {
  validate(img);
  if (img.width == width && img.height == height) return img;
  if (img.width == 0 || img.height == 0) {
    throw Error(ErrorKind::EmptyInput, "cannot resize an empty image");
  }
  RgbImage out(width, height);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = std::min(img.height - 1, (2 * y + 1) * img.height / (2 * height));
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = std::min(img.width - 1, (2 * x + 1) * img.width / (2 * width));
      std::memcpy(out.px(x, y), img.px(sx, sy), 3);
    }
  }
  return out;
}

namespace {

std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) |
         (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

std::uint16_t le16(const std::vector<std::uint8_t>& b, std::size_t off) {
  return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}

RgbImage decode_bmp(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  auto fail = [&](const std::string& why) {
    return Error(ErrorKind::Parse, name + ": " + why);
  };
  if (bytes.size() < 54) throw fail("truncated BMP header");
  const std::uint32_t pixel_offset = le32(bytes, 10);
  const std::uint32_t dib_size = le32(bytes, 14);
  const auto width = static_cast<std::int32_t>(le32(bytes, 18));
  const auto raw_height = static_cast<std::int32_t>(le32(bytes, 22));
  const std::uint16_t bpp = le16(bytes, 28);
  const std::uint32_t compression = le32(bytes, 30);
  if (compression != 0) throw fail("compressed BMP not supported");
  if (bpp != 8 && bpp != 24 && bpp != 32) throw fail("unsupported BMP bit depth");
  if (width <= 0 || raw_height == 0) throw fail("bad BMP dimensions");

  const bool top_down = raw_height < 0;
  const auto w = static_cast<std::size_t>(width);
  const auto h = static_cast<std::size_t>(top_down ? -static_cast<std::int64_t>(raw_height)
                                                   : raw_height);
  const std::size_t stride = ((bpp * w + 31) / 32) * 4;
  if (pixel_offset + stride * h > bytes.size()) throw fail("truncated BMP pixel data");

  std::vector<std::array<std::uint8_t, 3>> palette;
  if (bpp == 8) {
    std::uint32_t colors = le32(bytes, 46);
    if (colors == 0) colors = 256;
    const std::size_t pal_off = 14 + dib_size;
    if (pal_off + 4ull * colors > bytes.size()) throw fail("truncated BMP palette");
    for (std::uint32_t i = 0; i < colors; ++i) {
      const auto* p = &bytes[pal_off + 4 * i];
      palette.push_back({p[2], p[1], p[0]});
    }
  }

  RgbImage img(w, h);
  for (std::size_t row = 0; row < h; ++row) {
    const std::size_t y = top_down ? row : h - 1 - row;
    const auto* src = &bytes[pixel_offset + row * stride];
    for (std::size_t x = 0; x < w; ++x) {
      auto* dst = img.px(x, y);
      if (bpp == 8) {
        const std::uint8_t idx = src[x];
        if (idx >= palette.size()) throw fail("palette index out of range");
        std::memcpy(dst, palette[idx].data(), 3);
      } else {
        const auto* p = src + x * (bpp / 8);
        dst[0] = p[2];
        dst[1] = p[1];
        dst[2] = p[0];
      }
    }
  }
  return img;
}

RgbImage decode_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw Error(ErrorKind::Parse, path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage img(image.width, image.height);
  if (!png_image_finish_read(&image, nullptr, img.data.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorKind::Parse, path.string() + ": " + msg);
  }
  return img;
}

void encode_png(const std::uint8_t* data, std::size_t w, std::size_t h, png_uint_32 format,
                const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, data, 0, nullptr)) {
    throw Error(ErrorKind::Io, path.string() + ": " + image.message);
  }
}

}  // namespace

RgbImage load_rgb(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingInput, "cannot open image " + path.string());
  std::vector<std::uint8_t> head(8);
  in.read(reinterpret_cast<char*>(head.data()), 8);
  if (in.gcount() >= 2 && head[0] == 'B' && head[1] == 'M') {
    in.clear();
    in.seekg(0);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return decode_bmp(bytes, path.string());
  }
  if (in.gcount() == 8 && png_sig_cmp(head.data(), 0, 8) == 0) return decode_png(path);
  throw Error(ErrorKind::Parse, path.string() + ": not a PNG or BMP file");
}

void save_png(const GrayImage& img, const std::filesystem::path& path) {
  validate(img);
  encode_png(img.pixels.data(), img.width, img.height, PNG_FORMAT_GRAY, path);
}

void save_png(const RgbImage& img, const std::filesystem::path& path) {
  validate(img);
  encode_png(img.data.data(), img.width, img.height, PNG_FORMAT_RGB, path);
}

}  // namespace filterbench

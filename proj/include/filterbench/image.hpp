#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace filterbench {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(w * h, fill) {}

  std::size_t size() const noexcept { return width * height; }
  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  bool operator==(const GrayImage&) const = default;
};

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;  // row-major RGB triples

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, std::uint8_t r = 0, std::uint8_t g = 0, std::uint8_t b = 0);

  std::size_t size() const noexcept { return width * height; }
  std::uint8_t* px(std::size_t x, std::size_t y) { return &data[3 * (y * width + x)]; }
  const std::uint8_t* px(std::size_t x, std::size_t y) const { return &data[3 * (y * width + x)]; }

  bool operator==(const RgbImage&) const = default;
};

// Throws Validation if the buffer length disagrees with the dimensions.
void validate(const GrayImage& img);
void validate(const RgbImage& img);

RgbImage resize_nearest(const RgbImage& img, std::size_t width, std::size_t height);

// PNG (any bit depth / color type, converted to 8-bit RGB) or uncompressed
// BMP (8-bit paletted, 24-bit, 32-bit), chosen by file signature.
RgbImage load_rgb(const std::filesystem::path& path);

void save_png(const GrayImage& img, const std::filesystem::path& path);
void save_png(const RgbImage& img, const std::filesystem::path& path);

}  // namespace filterbench

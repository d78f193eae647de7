#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ovseg/tensor.hpp"

namespace ovseg {

// 8-bit raster, row-major with interleaved channels (1 = gray, 3 = RGB).
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::uint32_t maxval = 255;
  std::vector<std::uint8_t> samples;

  Raster() = default;
  Raster(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), samples(w * h * c, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return samples[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return samples[(y * width + x) * channels + c];
  }
  bool operator==(const Raster&) const = default;
};

// Per-pixel class indices; 255 marks ignored pixels in ground truth.
struct SegmentationMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> labels;

  SegmentationMask() = default;
  SegmentationMask(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), labels(w * h, fill) {}
  bool operator==(const SegmentationMask&) const = default;
};

inline constexpr std::uint8_t kIgnoreLabel = 255;

// Binary PGM (P5) / PPM (P6) with maxval <= 255.
Raster decode_pnm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_pnm(const Raster& raster);
Raster load_raster(const std::string& path);
void save_raster(const std::string& path, const Raster& raster);

SegmentationMask load_mask(const std::string& path);
void save_mask(const std::string& path, const SegmentationMask& mask);
SegmentationMask raster_to_mask(const Raster& raster);
Raster mask_to_raster(const SegmentationMask& mask);
// Fixed palette rendering of class indices.
Raster colorize_mask(const SegmentationMask& mask);

// Bilinear resize so that max(width, height) == target, aspect preserved.
Raster resize_long_side(const Raster& raster, std::size_t target);

// [3 x H x W] in [-1, 1]; gray rasters are replicated to three channels.
Tensor raster_to_tensor(const Raster& raster);
// [C x H x W] in [-1, 1] -> 8-bit raster (C = 1 or 3).
Raster tensor_to_raster(const Tensor& image);

}  // namespace ovseg

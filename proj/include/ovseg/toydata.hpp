#pragma once

#include <cstdint>

#include "ovseg/encoder.hpp"
#include "ovseg/head.hpp"
#include "ovseg/image.hpp"

namespace ovseg {

// RGB scene of soft blobs and a stripe band over a smooth background. The
// mask marks blob pixels 1 and everything else 0.
struct ToyScene {
  Raster image;
  SegmentationMask mask;
};
ToyScene make_toy_scene(std::size_t width, std::size_t height, std::uint64_t seed);

// SAR-like view of an optical raster: luminance times 4-look gamma speckle,
// translated by up to `max_shift` pixels (edge clamped). Single channel.
Raster make_toy_sar(const Raster& optical, std::uint64_t seed, int max_shift = 2);

// Projected tokens whose patch rows are signal + beta * CLS: class 1 pixels
// (a disc) carry `signal` along the class-1 embedding, the rest along the
// class-0 embedding, and the CLS token points at class 0.
struct PlantedToy {
  TokenSequence tokens;  // [(h*w + 1) x c]
  SegmentationMask gt;
  ClassVocabulary vocab;  // groups "background" and "target"
};
PlantedToy make_planted_toy(std::size_t h, std::size_t w, std::size_t c, double beta, double signal,
                            std::uint64_t seed);

// Mean cosine between each patch row and the CLS row.
double mean_cosine_to_cls(const Tensor& patches, const Tensor& cls);

}  // namespace ovseg

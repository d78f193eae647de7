#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ovseg/encoder.hpp"
#include "ovseg/head.hpp"
#include "ovseg/image.hpp"
#include "ovseg/upsampler.hpp"

namespace ovseg {

struct SlideConfig {
  std::size_t window = 224;
  std::size_t stride = 112;
  void validate() const;
};

// Everything one window needs: encoder, upsampler, vocabulary and lambda.
struct SegmentationModel {
  EncoderConfig cfg;
  EncoderWeights encoder;
  JbuParams jbu;
  ClassVocabulary vocab;
  BiasConfig bias;

  void validate() const;  // ConfigError on size mismatches
};

// Window origins along one axis: 0, stride, 2 stride, ... and a final origin
// aligned to the far edge. A single 0 when length <= window.
std::vector<std::size_t> window_positions(std::size_t length, std::size_t window, std::size_t stride);

// Group scores [G x S x S] for one square window image [3 x S x S], S equal
// to the encoder's image size.
Tensor window_scores(const Tensor& window_image, const SegmentationModel& model);

struct SlideResult {
  Tensor scores;                        // [G x H x W], coverage-averaged
  std::vector<std::uint32_t> coverage;  // H*W windows covering each pixel
  std::size_t windows = 0;
};

// Tiles `image` [3 x H x W]; images smaller than the window are reflect-padded
// and the padding cropped away afterwards.
SlideResult slide_inference(const Tensor& image, const SegmentationModel& model, const SlideConfig& slide);

// Per-pixel argmax over the stitched scores.
SegmentationMask predict_mask(const SlideResult& result);

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n = 0) : n_(n), counts_(n * n, 0) {}

  std::size_t size() const { return n_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * n_ + pred]; }
  std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts_[gt * n_ + pred]; }
  std::uint64_t total() const;
  void merge(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion(const SegmentationMask& pred, const SegmentationMask& gt, std::size_t n,
                          std::uint8_t ignore_index = kIgnoreLabel);

struct IouReport {
  std::vector<double> iou;  // NaN where the class has a zero denominator
  double miou = 0.0;        // mean over classes with a nonzero denominator; NaN if none
};

IouReport miou(const ConfusionMatrix& cm);

// `class,iou` rows followed by a `miou,<value>` line.
std::string iou_csv(const IouReport& report, const std::vector<std::string>& class_names);

}  // namespace ovseg

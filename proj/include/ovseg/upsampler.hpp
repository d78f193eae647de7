#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ovseg/encoder.hpp"
#include "ovseg/params.hpp"
#include "ovseg/tensor.hpp"

namespace ovseg {

// Learnable state of the single shared joint-bilateral upsampling operator.
// Temperatures are stored as logs so they stay positive.
struct JbuParams {
  std::size_t radius = 5;  // window side 2r+1
  Tensor log_tau_spatial;  // [1]
  Tensor log_tau_range;    // [1]
  Tensor mlp_w1, mlp_b1;   // [3 x hidden], [hidden]
  Tensor mlp_w2, mlp_b2;   // [hidden x hidden], [hidden]

  static JbuParams init(std::uint64_t seed, std::size_t radius = 5, std::size_t hidden = 32,
                        double tau_spatial = 2.0, double tau_range = 1.0);
  std::size_t window() const { return 2 * radius + 1; }
  double tau_spatial() const;
  double tau_range() const;
};

// Content retention network: conv(c->32) -> instance norm -> GELU ->
// conv(32->3) -> tanh, both convolutions 3x3 with padding 1.
struct CrnParams {
  Tensor conv1_w;           // [32 x c x 3 x 3], no bias (the norm removes it)
  Tensor norm_g, norm_b;    // [32]
  Tensor conv2_w, conv2_b;  // [3 x 32 x 3 x 3], [3]

  static CrnParams init(std::size_t channels, std::uint64_t seed);
};

// One 5x5 stride-2 blur per halving step, shared across channels. Taps are
// the softmax of the stored logits so every kernel sums to one.
struct DownsamplerParams {
  std::vector<Tensor> logits;  // [5 x 5] each

  static DownsamplerParams init(std::size_t steps);
  Tensor taps(std::size_t step) const;
};

struct UpsamplerParams {
  JbuParams jbu;
  CrnParams crn;
  DownsamplerParams down;

  static UpsamplerParams init(std::size_t channels, std::size_t steps, std::uint64_t seed, std::size_t radius = 5,
                              double tau_spatial = 2.0, double tau_range = 1.0);
  // Names under `jbu.*`, `crn.*`, `down.*`.
  ParamSet params() const;
  static UpsamplerParams from_params(const ParamSet& params);
  std::vector<Tensor> trainable() const;
  UpsamplerParams clone() const;
};

// exp(-|p-q|^2 / (2 tau^2)) for every offset of the (2r+1)^2 window, row-major.
Tensor k_spatial(std::size_t radius, double tau_spatial);

// Softmax over the window of MLP(center) . MLP(window[a]) / tau_range^2.
Tensor k_range(const Tensor& guidance_window, const Tensor& center, const JbuParams& params);

// Pointwise guidance MLP on [d_g x H x W] -> [H*W x hidden].
Tensor guidance_features(const Tensor& guidance, const JbuParams& params);

// Joint bilateral filter of `source` [c x H x W] with per-pixel guidance
// features [H*W x m]. For each pixel the window weights are
// k_spatial * k_range renormalized over the in-bounds part of the window.
Tensor jbu_filter(const Tensor& source, const Tensor& features, const Tensor& log_tau_spatial,
                  const Tensor& log_tau_range, std::size_t radius);

// Combined normalized window weights at pixel (y, x); out-of-bounds taps are 0.
std::vector<double> jbu_weights_at(const Tensor& features, std::size_t height, std::size_t width, std::size_t y,
                                   std::size_t x, const JbuParams& params);

// One 2x step: bilinear (align-corners-false) lift of `lowres` [c x h x w] to
// the guidance grid [d_g x 2h x 2w], then the joint bilateral filter.
Tensor jbu_once(const Tensor& lowres, const Tensor& guidance, const JbuParams& params);

// Applies jbu_once `steps` times with the same parameters; the guidance of
// each step is `image` resized to that step's resolution.
Tensor upsample(const Tensor& lowres, const Tensor& image, const JbuParams& params, std::size_t steps);

Tensor downsample(const Tensor& hires, const DownsamplerParams& down, std::size_t steps);
Tensor crn_forward(const Tensor& hires, const CrnParams& crn);

// Mean squared difference between lowres and downsample(hires).
Tensor loss_rec(const Tensor& lowres, const Tensor& hires, const DownsamplerParams& down);
// Mean squared difference between image (in [-1, 1]) and CRN(hires).
Tensor loss_img(const Tensor& image, const Tensor& hires, const CrnParams& crn);

struct LossParts {
  Tensor rec, img, total;
};

// total = rec + gamma * img, with hires = upsample(lowres) internally.
LossParts total_loss(const Tensor& image, const Tensor& lowres, const UpsamplerParams& params, double gamma,
                     std::size_t steps);

// Invertible image-plane jitter: optional horizontal flip, integer translation
// (wrapping) and a zoom about the center.
struct ViewTransform {
  bool flip = false;
  int shift_y = 0;
  int shift_x = 0;
  double zoom = 1.0;

  static constexpr int kMaxShift = 8;
  void validate() const;  // ConfigError when outside the invertible range
  bool is_identity() const { return !flip && shift_y == 0 && shift_x == 0 && zoom == 1.0; }
  Tensor apply(const Tensor& map) const;  // [C x H x W], differentiable
};

// Average over views v of mse(lowres(v(image)), downsample(v(upsample(image)))).
Tensor multiview_consistency(const Tensor& image, const EncoderWeights& encoder, const EncoderConfig& cfg,
                             const UpsamplerParams& params, const std::vector<ViewTransform>& views);

struct UpsamplerTrainConfig {
  std::size_t steps = 200;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double gamma = 0.1;
  std::size_t batch = 8;
  std::size_t jitter_views = 1;  // random views per sample beyond the identity view
  std::uint64_t seed = 0;
};

struct UpsamplerLossRecord {
  std::size_t step = 0;
  double rec = 0.0, img = 0.0, total = 0.0;
};

struct UpsamplerTrainResult {
  UpsamplerParams params;
  std::vector<UpsamplerLossRecord> curve;
};

// Adam on rec + gamma * img over random crops of the corpus. The encoder is
// only read; training fails with ContractError if its weights change.
// Corpus images are [3 x H x W] tensors in [-1, 1] at least image_size wide.
UpsamplerTrainResult train_upsampler(const std::vector<Tensor>& corpus, const EncoderWeights& encoder,
                                     const EncoderConfig& cfg, UpsamplerParams init,
                                     const UpsamplerTrainConfig& train);

// Loss curve as CSV `step,loss_rec,loss_img,total`.
std::string upsampler_curve_csv(const std::vector<UpsamplerLossRecord>& curve);

// Number of 2x steps taking the patch grid to pixel resolution (log2 of the patch size).
std::size_t upsample_steps_for(const EncoderConfig& cfg);

}  // namespace ovseg

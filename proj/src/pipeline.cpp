#include "ovseg/pipeline.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace ovseg {
namespace {

std::size_t reflect(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * static_cast<long>(n) - 2;
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<long>(n) ? m : period - m);
}

// Pads [C x H x W] on the bottom/right to at least `size` along each axis.
Tensor reflect_pad(const Tensor& image, std::size_t size_h, std::size_t size_w) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> out(c * size_h * size_w);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < size_h; ++y)
      for (std::size_t x = 0; x < size_w; ++x)
        out[(k * size_h + y) * size_w + x] = image.at(k, reflect(static_cast<long>(y), h), reflect(static_cast<long>(x), w));
  return Tensor({c, size_h, size_w}, std::move(out));
}

Tensor crop(const Tensor& image, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  const std::size_t c = image.dim(0);
  std::vector<double> out(c * h * w);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(k * h + y) * w + x] = image.at(k, y0 + y, x0 + x);
  return Tensor({c, h, w}, std::move(out));
}

}  // namespace

void SlideConfig::validate() const {
  if (window == 0 || stride == 0) throw ConfigError("window and stride must be positive");
  if (stride > window) throw ConfigError("stride larger than window leaves pixels uncovered");
}

void SegmentationModel::validate() const {
  cfg.validate();
  encoder.check(cfg);
  bias.validate();
  if (vocab.dim() != cfg.proj_dim) {
    throw ConfigError("vocabulary embedding dim " + std::to_string(vocab.dim()) + " does not match encoder.proj_dim " +
                      std::to_string(cfg.proj_dim));
  }
  if (jbu.mlp_w1.rank() != 2 || jbu.mlp_w1.dim(0) != 3) throw ConfigError("upsampler guidance MLP must take 3 channels");
}

std::vector<std::size_t> window_positions(std::size_t length, std::size_t window, std::size_t stride) {
  if (length <= window) return {0};
  std::vector<std::size_t> pos;
  for (std::size_t p = 0; p + window < length; p += stride) pos.push_back(p);
  if (pos.back() != length - window) pos.push_back(length - window);
  return pos;
}

Tensor window_scores(const Tensor& window_image, const SegmentationModel& model) {
  NoGradGuard guard;
  const std::size_t s = model.cfg.image_size;
  const Encoding enc = encode(window_image, model.encoder, model.cfg);
  const std::size_t steps = upsample_steps_for(model.cfg);
  const Tensor hires = upsample(tokens_to_map(enc.o_prime, enc.out.h, enc.out.w), window_image, model.jbu, steps);
  const std::size_t hh = hires.dim(1), hw = hires.dim(2);
  const Tensor debiased = alleviate_global_bias(map_to_tokens(hires), enc.out.cls(), model.bias.lambda);
  const Tensor groups = group_reduce(similarity_logits(debiased, model.vocab), model.vocab);
  Tensor map = tokens_to_map(groups, hh, hw);
  if (hh != s || hw != s) map = ops::resize_bilinear(map, s, s);
  return map.clone();
}

SlideResult slide_inference(const Tensor& image, const SegmentationModel& model, const SlideConfig& slide) {
  slide.validate();
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("slide_inference: image must be [3 x H x W]");
  if (slide.window != model.cfg.image_size) {
    throw ConfigError("infer.window must equal encoder.image_size (" + std::to_string(model.cfg.image_size) + ")");
  }
  const std::size_t h = image.dim(1), w = image.dim(2), win = slide.window;
  const std::size_t ph = std::max(h, win), pw = std::max(w, win);
  const Tensor padded = (ph == h && pw == w) ? image : reflect_pad(image, ph, pw);
  const std::size_t g = model.vocab.num_groups();

  std::vector<double> acc(g * ph * pw, 0.0);
  std::vector<std::uint32_t> cover(ph * pw, 0);
  std::size_t windows = 0;
  for (std::size_t y0 : window_positions(ph, win, slide.stride)) {
    for (std::size_t x0 : window_positions(pw, win, slide.stride)) {
      const Tensor scores = window_scores(crop(padded, y0, x0, win, win), model);
      const auto sd = scores.data();
      for (std::size_t k = 0; k < g; ++k)
        for (std::size_t y = 0; y < win; ++y)
          for (std::size_t x = 0; x < win; ++x) acc[(k * ph + y0 + y) * pw + x0 + x] += sd[(k * win + y) * win + x];
      for (std::size_t y = 0; y < win; ++y)
        for (std::size_t x = 0; x < win; ++x) ++cover[(y0 + y) * pw + x0 + x];
      ++windows;
    }
  }

  SlideResult result;
  result.windows = windows;
  std::vector<double> out(g * h * w);
  result.coverage.resize(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::uint32_t c = cover[y * pw + x];
      result.coverage[y * w + x] = c;
      for (std::size_t k = 0; k < g; ++k) out[(k * h + y) * w + x] = acc[(k * ph + y) * pw + x] / c;
    }
  result.scores = Tensor({g, h, w}, std::move(out));
  return result;
}

SegmentationMask predict_mask(const SlideResult& result) {
  const std::size_t g = result.scores.dim(0), h = result.scores.dim(1), w = result.scores.dim(2);
  return segment_argmax(ops::transpose(ops::reshape(result.scores, {g, h * w})), h, w);
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw DimensionError("confusion matrices differ in size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

ConfusionMatrix confusion(const SegmentationMask& pred, const SegmentationMask& gt, std::size_t n,
                          std::uint8_t ignore_index) {
  if (pred.width != gt.width || pred.height != gt.height) {
    throw InputError("confusion: prediction " + std::to_string(pred.width) + "x" + std::to_string(pred.height) +
                     " vs ground truth " + std::to_string(gt.width) + "x" + std::to_string(gt.height));
  }
  ConfusionMatrix cm(n);
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const std::uint8_t t = gt.labels[i];
    if (t == ignore_index) continue;
    const std::uint8_t p = pred.labels[i];
    if (t >= n || p >= n) {
      throw InputError("confusion: label " + std::to_string(std::max(t, p)) + " at pixel " + std::to_string(i) +
                       " is outside [0, " + std::to_string(n) + ")");
    }
    ++cm.at(t, p);
  }
  return cm;
}

IouReport miou(const ConfusionMatrix& cm) {
  const std::size_t n = cm.size();
  IouReport r;
  r.iou.assign(n, std::numeric_limits<double>::quiet_NaN());
  double total = 0.0;
  std::size_t valid = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t diag = cm.at(c, c);
    const std::uint64_t denom = row + col - diag;
    if (denom == 0) continue;
    r.iou[c] = static_cast<double>(diag) / static_cast<double>(denom);
    total += r.iou[c];
    ++valid;
  }
  r.miou = valid == 0 ? std::numeric_limits<double>::quiet_NaN() : total / static_cast<double>(valid);
  return r;
}

std::string iou_csv(const IouReport& report, const std::vector<std::string>& class_names) {
  std::ostringstream os;
  os.precision(10);
  os << "class,iou\n";
  for (std::size_t c = 0; c < report.iou.size(); ++c) {
    os << (c < class_names.size() ? class_names[c] : std::to_string(c)) << ',';
    if (std::isnan(report.iou[c])) os << "nan";
    else os << report.iou[c];
    os << '\n';
  }
  os << "miou,";
  if (std::isnan(report.miou)) os << "nan";
  else os << report.miou;
  os << '\n';
  return os.str();
}

}  // namespace ovseg

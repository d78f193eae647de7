#include "ovseg/upsampler.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kernels.hpp"
#include "ovseg/optim.hpp"
#include "ovseg/rng.hpp"

namespace ovseg {
namespace {

Tensor gaussian(Rng& rng, Shape shape, double stddev) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> v(n);
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

constexpr std::size_t kCrnHidden = 32;
constexpr std::size_t kDownTaps = 5;

}  // namespace

JbuParams JbuParams::init(std::uint64_t seed, std::size_t radius, std::size_t hidden, double tau_spatial,
                          double tau_range) {
  if (!(tau_spatial > 0.0) || !(tau_range > 0.0)) throw ConfigError("JBU temperatures must be positive");
  Rng rng(Rng::derive(seed, "jbu"));
  JbuParams p;
  p.radius = radius;
  p.log_tau_spatial = Tensor::scalar(std::log(tau_spatial));
  p.log_tau_range = Tensor::scalar(std::log(tau_range));
  p.mlp_w1 = gaussian(rng, {3, hidden}, 1.0 / std::sqrt(3.0));
  p.mlp_b1 = gaussian(rng, {hidden}, 0.1);
  p.mlp_w2 = gaussian(rng, {hidden, hidden}, 1.0 / std::sqrt(static_cast<double>(hidden)));
  p.mlp_b2 = Tensor::zeros({hidden});
  return p;
}

double JbuParams::tau_spatial() const { return std::exp(log_tau_spatial.item()); }
double JbuParams::tau_range() const { return std::exp(log_tau_range.item()); }

CrnParams CrnParams::init(std::size_t channels, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, "crn"));
  CrnParams c;
  c.conv1_w = gaussian(rng, {kCrnHidden, channels, 3, 3}, 1.0 / std::sqrt(9.0 * static_cast<double>(channels)));
  c.norm_g = Tensor::full({kCrnHidden}, 1.0);
  c.norm_b = Tensor::zeros({kCrnHidden});
  c.conv2_w = gaussian(rng, {3, kCrnHidden, 3, 3}, 1.0 / std::sqrt(9.0 * static_cast<double>(kCrnHidden)));
  c.conv2_b = Tensor::zeros({3});
  return c;
}

DownsamplerParams DownsamplerParams::init(std::size_t steps) {
  DownsamplerParams d;
  // Unit-sigma Gaussian blur to start with.
  std::vector<double> logits(kDownTaps * kDownTaps);
  const int r = static_cast<int>(kDownTaps / 2);
  for (int y = -r; y <= r; ++y)
    for (int x = -r; x <= r; ++x) logits[(y + r) * kDownTaps + (x + r)] = -0.5 * (x * x + y * y);
  for (std::size_t s = 0; s < steps; ++s) d.logits.emplace_back(Shape{kDownTaps, kDownTaps}, logits);
  return d;
}

Tensor DownsamplerParams::taps(std::size_t step) const {
  const Tensor& l = logits.at(step);
  return ops::reshape(ops::softmax(ops::reshape(l, {l.numel()}), 0), l.shape());
}

UpsamplerParams UpsamplerParams::init(std::size_t channels, std::size_t steps, std::uint64_t seed,
                                      std::size_t radius, double tau_spatial, double tau_range) {
  return {JbuParams::init(seed, radius, 32, tau_spatial, tau_range), CrnParams::init(channels, seed),
          DownsamplerParams::init(steps)};
}

ParamSet UpsamplerParams::params() const {
  ParamSet ps;
  ps.add("jbu.radius", Tensor::scalar(static_cast<double>(jbu.radius)));
  ps.add("jbu.log_tau_spatial", jbu.log_tau_spatial);
  ps.add("jbu.log_tau_range", jbu.log_tau_range);
  ps.add("jbu.mlp.w1", jbu.mlp_w1);
  ps.add("jbu.mlp.b1", jbu.mlp_b1);
  ps.add("jbu.mlp.w2", jbu.mlp_w2);
  ps.add("jbu.mlp.b2", jbu.mlp_b2);
  ps.add("crn.conv1.w", crn.conv1_w);
  ps.add("crn.norm.g", crn.norm_g);
  ps.add("crn.norm.b", crn.norm_b);
  ps.add("crn.conv2.w", crn.conv2_w);
  ps.add("crn.conv2.b", crn.conv2_b);
  for (std::size_t s = 0; s < down.logits.size(); ++s) ps.add("down.step" + std::to_string(s) + ".logits", down.logits[s]);
  return ps;
}

UpsamplerParams UpsamplerParams::from_params(const ParamSet& ps) {
  auto get = [&](const char* name) { return ps.get(name).clone(); };
  UpsamplerParams p;
  const double radius = ps.get("jbu.radius").item();
  if (radius < 0 || radius != std::floor(radius)) throw ConfigError("jbu.radius must be a non-negative integer");
  p.jbu.radius = static_cast<std::size_t>(radius);
  p.jbu.log_tau_spatial = get("jbu.log_tau_spatial");
  p.jbu.log_tau_range = get("jbu.log_tau_range");
  p.jbu.mlp_w1 = get("jbu.mlp.w1");
  p.jbu.mlp_b1 = get("jbu.mlp.b1");
  p.jbu.mlp_w2 = get("jbu.mlp.w2");
  p.jbu.mlp_b2 = get("jbu.mlp.b2");
  p.crn.conv1_w = get("crn.conv1.w");
  p.crn.norm_g = get("crn.norm.g");
  p.crn.norm_b = get("crn.norm.b");
  p.crn.conv2_w = get("crn.conv2.w");
  p.crn.conv2_b = get("crn.conv2.b");
  for (std::size_t s = 0;; ++s) {
    const std::string name = "down.step" + std::to_string(s) + ".logits";
    if (!ps.contains(name)) break;
    p.down.logits.push_back(ps.get(name).clone());
  }
  if (p.jbu.mlp_w1.rank() != 2 || p.jbu.mlp_w1.dim(0) != 3) throw ConfigError("jbu.mlp.w1 must be [3 x hidden]");
  return p;
}

std::vector<Tensor> UpsamplerParams::trainable() const {
  std::vector<Tensor> out{jbu.log_tau_spatial, jbu.log_tau_range, jbu.mlp_w1,  jbu.mlp_b1,  jbu.mlp_w2,
                          jbu.mlp_b2,          crn.conv1_w,       crn.norm_g,  crn.norm_b,
                          crn.conv2_w,         crn.conv2_b};
  out.insert(out.end(), down.logits.begin(), down.logits.end());
  return out;
}

UpsamplerParams UpsamplerParams::clone() const { return from_params(params()); }

std::size_t upsample_steps_for(const EncoderConfig& cfg) {
  std::size_t steps = 0, p = cfg.patch_size;
  while (p > 1 && p % 2 == 0) {
    p /= 2;
    ++steps;
  }
  if (p != 1) throw ConfigError("patch_size must be a power of two for repeated 2x upsampling");
  return steps;
}

Tensor k_spatial(std::size_t radius, double tau_spatial) {
  if (!(tau_spatial > 0.0)) throw ContractError("k_spatial: tau must be positive");
  const std::size_t win = 2 * radius + 1;
  const auto r = static_cast<std::ptrdiff_t>(radius);
  std::vector<double> k(win * win);
  for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
      const double d2 = static_cast<double>(dy * dy + dx * dx);
      k[static_cast<std::size_t>((dy + r) * static_cast<std::ptrdiff_t>(win) + dx + r)] =
          std::exp(-d2 / (2.0 * tau_spatial * tau_spatial));
    }
  return Tensor({win * win}, std::move(k));
}

namespace {

Tensor mlp(const Tensor& rows, const JbuParams& p) {
  const Tensor h = ops::gelu(ops::add_row(ops::matmul(rows, p.mlp_w1), p.mlp_b1));
  return ops::add_row(ops::matmul(h, p.mlp_w2), p.mlp_b2);
}

}  // namespace

Tensor k_range(const Tensor& guidance_window, const Tensor& center, const JbuParams& params) {
  const std::size_t win = params.window();
  if (guidance_window.rank() != 2 || guidance_window.dim(0) != win * win) {
    throw DimensionError("k_range: guidance window must be [" + std::to_string(win * win) + " x d_g]");
  }
  const Tensor fw = mlp(guidance_window, params);
  const Tensor fc = mlp(ops::reshape(center, {1, center.numel()}), params);
  const Tensor logits = ops::reshape(ops::matmul(fw, ops::transpose(fc)), {win * win});
  const double inv_t2 = std::exp(-2.0 * params.log_tau_range.item());
  return ops::softmax(ops::scale(logits, inv_t2), 0);
}

Tensor guidance_features(const Tensor& guidance, const JbuParams& params) {
  return mlp(map_to_tokens(guidance), params);
}

Tensor jbu_filter(const Tensor& source, const Tensor& features, const Tensor& log_tau_spatial,
                  const Tensor& log_tau_range, std::size_t radius) {
  if (source.rank() != 3) throw DimensionError("jbu_filter: source must be [c x H x W]");
  const std::size_t ch = source.dim(0), h = source.dim(1), w = source.dim(2), npix = h * w;
  if (features.rank() != 2 || features.dim(0) != npix) {
    throw DimensionError("jbu_filter: features " + shape_str(features.shape()) + " do not cover a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
  }
  const std::size_t m = features.dim(1);
  const std::size_t win = 2 * radius + 1, taps = win * win;
  const auto r = static_cast<std::ptrdiff_t>(radius);
  const double beta = std::exp(-2.0 * log_tau_range.item());
  const double gs = 0.5 * std::exp(-2.0 * log_tau_spatial.item());

  // Pixel-major copy of the source for contiguous channel access.
  std::vector<double> src(npix * ch);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t p = 0; p < npix; ++p) src[p * ch + c] = source.data()[c * npix + p];
  const double* f = features.data().data();

  std::vector<double> weights(npix * taps, 0.0);
  std::vector<double> dots(npix * taps, 0.0);
  std::vector<double> out(ch * npix, 0.0);
  std::vector<double> acc(ch);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      double* wi = weights.data() + i * taps;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
        const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy;
        if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x) + dx;
          if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
          const std::size_t a = static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx);
          const double dot = detail::dot(f + i * m, f + a * m, m);
          const double logit = beta * dot - gs * static_cast<double>(dy * dy + dx * dx);
          const auto t = (dy + r) * static_cast<std::ptrdiff_t>(win) + dx + r;
          wi[t] = logit;
          dots[i * taps + static_cast<std::size_t>(t)] = dot;
          mx = std::max(mx, logit);
        }
      }
      double z = 0.0;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
        const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy;
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x) + dx;
          double& wv = wi[(dy + r) * static_cast<std::ptrdiff_t>(win) + dx + r];
          if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h) || xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) {
            wv = 0.0;
            continue;
          }
          wv = std::exp(wv - mx);
          z += wv;
        }
      }
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
        const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy;
        if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x) + dx;
          if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
          double& wv = wi[(dy + r) * static_cast<std::ptrdiff_t>(win) + dx + r];
          wv /= z;
          const double* s = src.data() + (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * ch;
          for (std::size_t c = 0; c < ch; ++c) acc[c] += wv * s[c];
        }
      }
      for (std::size_t c = 0; c < ch; ++c) out[c * npix + i] = acc[c];
    }
  }
  Tensor result({ch, h, w}, std::move(out));
  check_finite(result, "jbu_filter");
  Tape::record(
      "jbu_filter", {source, features, log_tau_spatial, log_tau_range}, result,
      [=, src = std::move(src), weights = std::move(weights), dots = std::move(dots)](Tape::Node& n) {
        const auto g = n.out_grad();
        const double* f = n.inputs[1].data().data();
        const bool dsrc = n.needs(0), dfeat = n.needs(1), dls = n.needs(2), dlr = n.needs(3);
        std::vector<double> gsrc(dsrc ? npix * ch : 0, 0.0);
        std::span<double> gf;
        if (dfeat) gf = n.in_grad(1);
        std::vector<double> go(ch), dw(taps);
        double dbeta = 0.0, dgs = 0.0;
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const std::size_t i = y * w + x;
            const double* wi = weights.data() + i * taps;
            for (std::size_t c = 0; c < ch; ++c) go[c] = g[c * npix + i];
            double wdw = 0.0;
            for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
              const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy;
              if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
                const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x) + dx;
                if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                const std::size_t t = static_cast<std::size_t>((dy + r) * static_cast<std::ptrdiff_t>(win) + dx + r);
                const std::size_t a = static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx);
                const double* s = src.data() + a * ch;
                const double d = detail::dot(go.data(), s, ch);
                dw[t] = d;
                wdw += wi[t] * d;
                if (dsrc) {
                  double* gs_a = gsrc.data() + a * ch;
                  for (std::size_t c = 0; c < ch; ++c) gs_a[c] += wi[t] * go[c];
                }
              }
            }
            if (!(dfeat || dls || dlr)) continue;
            for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
              const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy;
              if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
                const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x) + dx;
                if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                const std::size_t t = static_cast<std::size_t>((dy + r) * static_cast<std::ptrdiff_t>(win) + dx + r);
                const std::size_t a = static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx);
                const double dlogit = wi[t] * (dw[t] - wdw);
                dgs -= dlogit * static_cast<double>(dy * dy + dx * dx);
                if (dlr) dbeta += dlogit * dots[i * taps + t];
                if (dfeat) {
                  const double c = dlogit * beta;
                  for (std::size_t k = 0; k < m; ++k) {
                    gf[i * m + k] += c * f[a * m + k];
                    gf[a * m + k] += c * f[i * m + k];
                  }
                }
              }
            }
          }
        }
        if (dsrc) {
          auto gin = n.in_grad(0);
          for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t p = 0; p < npix; ++p) gin[c * npix + p] += gsrc[p * ch + c];
        }
        // gs = exp(-2 log_tau_s) / 2, beta = exp(-2 log_tau_r).
        if (dls) n.in_grad(2)[0] += dgs * (-2.0 * gs);
        if (dlr) n.in_grad(3)[0] += dbeta * (-2.0 * beta);
      });
  return result;
}

std::vector<double> jbu_weights_at(const Tensor& features, std::size_t height, std::size_t width, std::size_t y,
                                   std::size_t x, const JbuParams& params) {
  // Filter a one-hot source per window tap: output equals that tap's weight.
  const std::size_t win = params.window(), taps = win * win, npix = height * width;
  const auto r = static_cast<std::ptrdiff_t>(params.radius);
  std::vector<double> onehot(taps * npix, 0.0);
  for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
      const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy, xx = static_cast<std::ptrdiff_t>(x) + dx;
      if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(height) || xx >= static_cast<std::ptrdiff_t>(width)) continue;
      const auto t = static_cast<std::size_t>((dy + r) * static_cast<std::ptrdiff_t>(win) + dx + r);
      onehot[t * npix + static_cast<std::size_t>(yy) * width + static_cast<std::size_t>(xx)] = 1.0;
    }
  NoGradGuard guard;
  const Tensor out = jbu_filter(Tensor({taps, height, width}, std::move(onehot)), features, params.log_tau_spatial,
                                params.log_tau_range, params.radius);
  std::vector<double> result(taps);
  for (std::size_t t = 0; t < taps; ++t) result[t] = out.data()[t * npix + y * width + x];
  return result;
}

Tensor jbu_once(const Tensor& lowres, const Tensor& guidance, const JbuParams& params) {
  if (lowres.rank() != 3 || guidance.rank() != 3) throw DimensionError("jbu_once: expected [C x H x W] tensors");
  const std::size_t h = lowres.dim(1), w = lowres.dim(2);
  if (guidance.dim(1) != 2 * h || guidance.dim(2) != 2 * w) {
    throw DimensionError("jbu_once: guidance " + shape_str(guidance.shape()) + " is not twice lowres " +
                         shape_str(lowres.shape()));
  }
  const Tensor lifted = ops::resize_bilinear(lowres, 2 * h, 2 * w);
  return jbu_filter(lifted, guidance_features(guidance, params), params.log_tau_spatial, params.log_tau_range,
                    params.radius);
}

Tensor upsample(const Tensor& lowres, const Tensor& image, const JbuParams& params, std::size_t steps) {
  if (lowres.rank() != 3 || image.rank() != 3) throw DimensionError("upsample: expected [C x H x W] tensors");
  const std::size_t factor = std::size_t{1} << steps;
  if (lowres.dim(1) * factor > image.dim(1) || lowres.dim(2) * factor > image.dim(2)) {
    throw DimensionError("upsample: " + std::to_string(steps) + " steps from " + shape_str(lowres.shape()) +
                         " overshoot image " + shape_str(image.shape()));
  }
  Tensor x = lowres;
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t th = x.dim(1) * 2, tw = x.dim(2) * 2;
    const Tensor guide = (th == image.dim(1) && tw == image.dim(2)) ? image : ops::resize_bilinear(image, th, tw);
    x = jbu_once(x, guide, params);
  }
  return x;
}

Tensor downsample(const Tensor& hires, const DownsamplerParams& down, std::size_t steps) {
  if (steps > down.logits.size()) {
    throw ConfigError("downsampler has " + std::to_string(down.logits.size()) + " steps, " + std::to_string(steps) +
                      " requested");
  }
  Tensor x = hires;
  for (std::size_t s = 0; s < steps; ++s) x = ops::depthwise_shared_conv2d(x, down.taps(s), 2, kDownTaps / 2);
  return x;
}

Tensor crn_forward(const Tensor& hires, const CrnParams& crn) {
  const Tensor a = ops::conv2d(hires, crn.conv1_w, Tensor(), 1);
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  Tensor flat = ops::layer_norm(ops::reshape(a, {c, h * w}));
  flat = ops::add_col(ops::mul_col(flat, crn.norm_g), crn.norm_b);
  const Tensor hidden = ops::gelu(ops::reshape(flat, {c, h, w}));
  return ops::tanh(ops::conv2d(hidden, crn.conv2_w, crn.conv2_b, 1));
}

Tensor loss_rec(const Tensor& lowres, const Tensor& hires, const DownsamplerParams& down) {
  if (lowres.rank() != 3 || hires.rank() != 3) throw DimensionError("loss_rec: expected [C x H x W] tensors");
  std::size_t steps = 0;
  while ((lowres.dim(1) << steps) < hires.dim(1)) ++steps;
  if ((lowres.dim(1) << steps) != hires.dim(1) || (lowres.dim(2) << steps) != hires.dim(2)) {
    throw DimensionError("loss_rec: hires " + shape_str(hires.shape()) + " is not a power-of-two multiple of " +
                         shape_str(lowres.shape()));
  }
  const Tensor recon = downsample(hires, down, steps);
  if (recon.shape() != lowres.shape()) {
    throw DimensionError("loss_rec: reconstruction " + shape_str(recon.shape()) + " vs lowres " +
                         shape_str(lowres.shape()));
  }
  return ops::mse(lowres, recon);
}

Tensor loss_img(const Tensor& image, const Tensor& hires, const CrnParams& crn) {
  for (double v : image.data()) {
    if (v < -1.0 || v > 1.0) throw ContractError("loss_img: image must be normalized to [-1, 1]");
  }
  const Tensor recon = crn_forward(hires, crn);
  if (recon.shape() != image.shape()) {
    throw DimensionError("loss_img: CRN output " + shape_str(recon.shape()) + " vs image " +
                         shape_str(image.shape()));
  }
  return ops::mse(image, recon);
}

LossParts total_loss(const Tensor& image, const Tensor& lowres, const UpsamplerParams& params, double gamma,
                     std::size_t steps) {
  if (!(gamma >= 0.0)) throw ContractError("total_loss: gamma must be non-negative");
  const Tensor hires = upsample(lowres, image, params.jbu, steps);
  LossParts parts;
  parts.rec = loss_rec(lowres, hires, params.down);
  parts.img = loss_img(image, hires, params.crn);
  parts.total = ops::add(parts.rec, ops::scale(parts.img, gamma));
  return parts;
}

void ViewTransform::validate() const {
  if (std::abs(shift_y) > kMaxShift || std::abs(shift_x) > kMaxShift) {
    throw ConfigError("view transform: translation beyond " + std::to_string(kMaxShift) + " px");
  }
  if (!std::isfinite(zoom) || zoom < 0.9 || zoom > 1.1) throw ConfigError("view transform: zoom outside [0.9, 1.1]");
}

Tensor ViewTransform::apply(const Tensor& map) const {
  validate();
  if (map.rank() != 3) throw DimensionError("view transform: expected [C x H x W]");
  const std::size_t h = map.dim(1), w = map.dim(2);
  const double cy = 0.5 * static_cast<double>(h - 1), cx = 0.5 * static_cast<double>(w - 1);
  std::vector<std::array<double, 2>> coords(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double sy = static_cast<double>(y) - shift_y;
      double sx = static_cast<double>(x) - shift_x;
      if (flip) sx = static_cast<double>(w - 1) - sx;
      if (zoom != 1.0) {
        sy = (sy - cy) / zoom + cy;
        sx = (sx - cx) / zoom + cx;
      }
      coords[y * w + x] = {sy, sx};
    }
  }
  return ops::remap_bilinear(map, coords, h, w, ops::Border::kWrap);
}

namespace {

Tensor lowres_features(const Tensor& image, const EncoderWeights& encoder, const EncoderConfig& cfg) {
  NoGradGuard frozen;
  return tokens_to_map(encode(image, encoder, cfg).o_prime, cfg.grid(), cfg.grid());
}

// Multi-view reconstruction given the identity-view features and their upsampling.
Tensor multiview_rec(const Tensor& image, const Tensor& lowres, const Tensor& hires, const EncoderWeights& encoder,
                     const EncoderConfig& cfg, const DownsamplerParams& down,
                     const std::vector<ViewTransform>& views) {
  if (views.empty()) throw ConfigError("multiview_consistency: no views");
  for (const auto& v : views) v.validate();
  if (hires.dim(1) != image.dim(1) || hires.dim(2) != image.dim(2)) {
    throw DimensionError("multiview_consistency: upsampled grid does not match the image");
  }
  Tensor total = Tensor::scalar(0.0);
  for (const auto& v : views) {
    const Tensor view_lowres = v.is_identity() ? lowres : lowres_features(v.apply(image), encoder, cfg);
    total = ops::add(total, loss_rec(view_lowres, v.apply(hires), down));
  }
  return ops::scale(total, 1.0 / static_cast<double>(views.size()));
}

}  // namespace

Tensor multiview_consistency(const Tensor& image, const EncoderWeights& encoder, const EncoderConfig& cfg,
                             const UpsamplerParams& params, const std::vector<ViewTransform>& views) {
  const Tensor lowres = lowres_features(image, encoder, cfg);
  const Tensor hires = upsample(lowres, image, params.jbu, upsample_steps_for(cfg));
  return multiview_rec(image, lowres, hires, encoder, cfg, params.down, views);
}

namespace {

Tensor random_crop(const Tensor& img, std::size_t size, Rng& rng) {
  Tensor src = img;
  const std::size_t h = img.dim(1), w = img.dim(2);
  if (h < size || w < size) {
    const double s = static_cast<double>(size) / static_cast<double>(std::min(h, w));
    src = ops::resize_bilinear(img, std::max(size, static_cast<std::size_t>(std::lround(h * s))),
                               std::max(size, static_cast<std::size_t>(std::lround(w * s))));
  }
  const std::size_t sh = src.dim(1), sw = src.dim(2);
  const std::size_t oy = rng.below(sh - size + 1), ox = rng.below(sw - size + 1);
  std::vector<double> out(3 * size * size);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) out[(c * size + y) * size + x] = src.data()[(c * sh + oy + y) * sw + ox + x];
  return Tensor({3, size, size}, std::move(out));
}

ViewTransform random_view(Rng& rng) {
  ViewTransform v;
  v.flip = rng.below(2) == 1;
  v.shift_y = static_cast<int>(rng.below(2 * ViewTransform::kMaxShift + 1)) - ViewTransform::kMaxShift;
  v.shift_x = static_cast<int>(rng.below(2 * ViewTransform::kMaxShift + 1)) - ViewTransform::kMaxShift;
  v.zoom = rng.uniform(0.9, 1.1);
  return v;
}

}  // namespace

UpsamplerTrainResult train_upsampler(const std::vector<Tensor>& corpus, const EncoderWeights& encoder,
                                     const EncoderConfig& cfg, UpsamplerParams init,
                                     const UpsamplerTrainConfig& train) {
  if (corpus.empty()) throw InputError("train_upsampler: empty corpus");
  if (train.batch == 0) throw ConfigError("train_upsampler: batch must be at least 1");
  cfg.validate();
  encoder.check(cfg);
  const auto encoder_before = encode_ovw1(encoder.params());
  const std::size_t steps = upsample_steps_for(cfg);
  if (init.down.logits.size() < steps) throw ConfigError("train_upsampler: downsampler has too few steps");

  Rng rng(Rng::derive(train.seed, "train_upsampler"));
  UpsamplerTrainResult result{std::move(init), {}};
  Adam adam(result.params.trainable(), {train.lr, train.beta1, train.beta2, 1e-8, 0.0});

  for (std::size_t step = 1; step <= train.steps; ++step) {
    adam.zero_grad();
    UpsamplerLossRecord rec{step};
    for (std::size_t b = 0; b < train.batch; ++b) {
      const Tensor image = random_crop(corpus[rng.below(corpus.size())], cfg.image_size, rng);
      std::vector<ViewTransform> views{ViewTransform{}};
      for (std::size_t v = 0; v < train.jitter_views; ++v) views.push_back(random_view(rng));

      Tape tape;
      const Tensor lowres = lowres_features(image, encoder, cfg);
      const Tensor hires = upsample(lowres, image, result.params.jbu, steps);
      const Tensor rec_loss = multiview_rec(image, lowres, hires, encoder, cfg, result.params.down, views);
      const Tensor img_loss = loss_img(image, hires, result.params.crn);
      const Tensor total = ops::add(rec_loss, ops::scale(img_loss, train.gamma));
      const double inv = 1.0 / static_cast<double>(train.batch);
      tape.backward(ops::scale(total, inv));
      rec.rec += rec_loss.item() * inv;
      rec.img += img_loss.item() * inv;
      rec.total += total.item() * inv;
    }
    adam.step();
    result.curve.push_back(rec);
  }

  if (encode_ovw1(encoder.params()) != encoder_before) {
    throw ContractError("train_upsampler: encoder weights changed during training");
  }
  return result;
}

std::string upsampler_curve_csv(const std::vector<UpsamplerLossRecord>& curve) {
  std::ostringstream os;
  os.precision(17);
  os << "step,loss_rec,loss_img,total\n";
  for (const auto& r : curve) os << r.step << ',' << r.rec << ',' << r.img << ',' << r.total << '\n';
  return os.str();
}

}  // namespace ovseg

#include "ovseg/toydata.hpp"

#include <algorithm>
#include <cmath>

#include "ovseg/rng.hpp"

namespace ovseg {

ToyScene make_toy_scene(std::size_t width, std::size_t height, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, "toy-scene"));
  const double base[3] = {rng.uniform(40, 120), rng.uniform(60, 140), rng.uniform(40, 120)};
  const double grad[3] = {rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(-40, 40)};

  struct Blob {
    double cy, cx, r;
    double color[3];
  };
  const std::size_t n_blobs = 2 + rng.below(3);
  std::vector<Blob> blobs(n_blobs);
  const double extent = static_cast<double>(std::min(width, height));
  for (auto& b : blobs) {
    b.cy = rng.uniform(0, static_cast<double>(height));
    b.cx = rng.uniform(0, static_cast<double>(width));
    b.r = rng.uniform(0.1, 0.25) * extent;
    for (double& c : b.color) c = rng.uniform(150, 255);
  }
  const double stripe_angle = rng.uniform(0, 3.14159265358979);
  const double stripe_period = rng.uniform(0.15, 0.3) * extent;
  const double stripe_amp = rng.uniform(15, 35);

  ToyScene scene{Raster(width, height, 3), SegmentationMask(width, height)};
  const double ca = std::cos(stripe_angle), sa = std::sin(stripe_angle);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      const double t = fx / std::max<double>(1.0, static_cast<double>(width - 1));
      const double stripe = stripe_amp * (std::sin(2 * 3.14159265358979 * (fx * ca + fy * sa) / stripe_period) > 0 ? 1 : -1);
      double px[3];
      for (int c = 0; c < 3; ++c) px[c] = base[c] + grad[c] * t + stripe;
      bool inside = false;
      for (const auto& b : blobs) {
        const double d = std::hypot(fy - b.cy, fx - b.cx);
        const double a = std::clamp(b.r + 1.0 - d, 0.0, 1.0);  // one-pixel soft edge
        if (d < b.r) inside = true;
        for (int c = 0; c < 3; ++c) px[c] = (1 - a) * px[c] + a * b.color[c];
      }
      for (int c = 0; c < 3; ++c) scene.image.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(px[c]), 0L, 255L));
      scene.mask.labels[y * width + x] = inside ? 1 : 0;
    }
  }
  return scene;
}

Raster make_toy_sar(const Raster& optical, std::uint64_t seed, int max_shift) {
  Rng rng(Rng::derive(seed, "toy-sar"));
  const int span = 2 * max_shift + 1;
  const int dy = static_cast<int>(rng.below(span)) - max_shift;
  const int dx = static_cast<int>(rng.below(span)) - max_shift;
  const long h = static_cast<long>(optical.height), w = static_cast<long>(optical.width);
  Raster sar(optical.width, optical.height, 1);
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      const std::size_t sy = static_cast<std::size_t>(std::clamp(y - dy, 0L, h - 1));
      const std::size_t sx = static_cast<std::size_t>(std::clamp(x - dx, 0L, w - 1));
      double lum = 0.0;
      for (std::size_t c = 0; c < optical.channels; ++c) lum += optical.at(sy, sx, c);
      lum /= static_cast<double>(optical.channels);
      double speckle = 0.0;  // mean of four unit exponentials
      for (int k = 0; k < 4; ++k) speckle -= std::log(1.0 - rng.uniform());
      speckle /= 4.0;
      sar.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), 0) =
          static_cast<std::uint8_t>(std::clamp(std::lround(lum * speckle), 0L, 255L));
    }
  }
  return sar;
}

PlantedToy make_planted_toy(std::size_t h, std::size_t w, std::size_t c, double beta, double signal,
                            std::uint64_t seed) {
  if (c < 2) throw ConfigError("planted toy needs at least 2 channels");
  Rng rng(Rng::derive(seed, "planted"));
  auto gaussian = [&] {
    std::vector<double> v(c);
    for (double& x : v) x = rng.normal();
    return v;
  };
  auto normalize = [](std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    for (double& x : v) x /= std::sqrt(n);
  };
  std::vector<double> t0 = gaussian(), t1 = gaussian();
  normalize(t0);
  double dot = 0.0;
  for (std::size_t j = 0; j < c; ++j) dot += t0[j] * t1[j];
  for (std::size_t j = 0; j < c; ++j) t1[j] -= dot * t0[j];
  normalize(t1);

  std::vector<double> cls = gaussian();
  for (std::size_t j = 0; j < c; ++j) cls[j] = t0[j] + 0.05 * cls[j] / std::sqrt(static_cast<double>(c));
  normalize(cls);

  PlantedToy toy;
  toy.gt = SegmentationMask(w, h);
  const double cy = rng.uniform(0.35, 0.65) * static_cast<double>(h);
  const double cx = rng.uniform(0.35, 0.65) * static_cast<double>(w);
  const double r = 0.3 * static_cast<double>(std::min(h, w));
  std::vector<double> rows(cls);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const bool target = std::hypot(static_cast<double>(y) + 0.5 - cy, static_cast<double>(x) + 0.5 - cx) < r;
      toy.gt.labels[y * w + x] = target ? 1 : 0;
      const auto& t = target ? t1 : t0;
      const std::vector<double> noise = gaussian();
      for (std::size_t j = 0; j < c; ++j)
        rows.push_back(signal * t[j] + beta * cls[j] + 0.02 * noise[j] / std::sqrt(static_cast<double>(c)));
    }
  toy.tokens = {Tensor({h * w + 1, c}, std::move(rows)), h, w};
  std::vector<double> emb(t0);
  emb.insert(emb.end(), t1.begin(), t1.end());
  toy.vocab = ClassVocabulary({{"background", {"background"}}, {"target", {"target"}}}, Tensor({2, c}, std::move(emb)));
  return toy;
}

double mean_cosine_to_cls(const Tensor& patches, const Tensor& cls) {
  NoGradGuard guard;
  const Tensor row = cls.rank() == 1 ? ops::reshape(cls, {1, cls.numel()}) : cls;
  const Tensor sims = ops::matmul(ops::normalize_rows(patches), ops::transpose(ops::normalize_rows(row)));
  return ops::mean(sims).item();
}

}  // namespace ovseg

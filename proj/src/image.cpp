#include "ovseg/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "ovseg/params.hpp"

namespace ovseg {
namespace {

class PnmHeaderReader {
 public:
  PnmHeaderReader(std::span<const std::uint8_t> bytes, std::size_t start) : bytes_(bytes), pos_(start) {}

  std::size_t pos() const { return pos_; }
  std::size_t last_start() const { return last_start_; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    last_start_ = start;
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > (1u << 24)) throw ParseError(std::string("PNM: ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw ParseError(std::string("PNM: expected ") + what, start);
    return v;
  }

  void single_whitespace() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) {
      throw ParseError("PNM: expected whitespace before payload", pos_);
    }
    ++pos_;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::size_t last_start_ = 0;
};

}  // namespace

Raster decode_pnm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw ParseError("PNM: expected P5 or P6 magic", 0);
  }
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  PnmHeaderReader r(bytes, 2);
  const std::size_t width = r.number("width");
  const std::size_t height = r.number("height");
  const std::size_t maxval = r.number("maxval");
  if (maxval == 0 || maxval > 255) {
    throw ParseError("PNM: only 8-bit maxval (1..255) is supported", r.last_start());
  }
  r.single_whitespace();
  const std::size_t offset = r.pos();
  const std::size_t need = width * height * channels;
  if (bytes.size() - offset < need) {
    throw ParseError("PNM: truncated payload, expected " + std::to_string(need) + " bytes", bytes.size());
  }
  Raster out(width, height, channels);
  out.maxval = static_cast<std::uint32_t>(maxval);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(offset), need, out.samples.begin());
  return out;
}

std::vector<std::uint8_t> encode_pnm(const Raster& raster) {
  if (raster.channels != 1 && raster.channels != 3) throw ContractError("PNM: raster must have 1 or 3 channels");
  if (raster.samples.size() != raster.width * raster.height * raster.channels) {
    throw ContractError("PNM: sample count does not match dimensions");
  }
  const std::string header = std::string(raster.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(raster.width) +
                             " " + std::to_string(raster.height) + "\n" + std::to_string(raster.maxval) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), raster.samples.begin(), raster.samples.end());
  return out;
}

Raster load_raster(const std::string& path) { return decode_pnm(read_file_bytes(path)); }
void save_raster(const std::string& path, const Raster& raster) { write_file_bytes(path, encode_pnm(raster)); }

SegmentationMask raster_to_mask(const Raster& raster) {
  if (raster.channels != 1) throw InputError("mask rasters must be single-channel (P5)");
  SegmentationMask m(raster.width, raster.height);
  m.labels = raster.samples;
  return m;
}

Raster mask_to_raster(const SegmentationMask& mask) {
  Raster r(mask.width, mask.height, 1);
  r.samples = mask.labels;
  return r;
}

SegmentationMask load_mask(const std::string& path) { return raster_to_mask(load_raster(path)); }
void save_mask(const std::string& path, const SegmentationMask& mask) { save_raster(path, mask_to_raster(mask)); }

Raster colorize_mask(const SegmentationMask& mask) {
  static constexpr std::uint8_t kPalette[][3] = {
      {255, 255, 255}, {222, 31, 7},  {34, 97, 38},   {75, 181, 73}, {0, 69, 255},  {128, 0, 0},
      {0, 255, 36},    {255, 195, 0}, {159, 129, 183}, {70, 70, 70},  {0, 200, 200}, {255, 0, 255}};
  constexpr std::size_t n = sizeof(kPalette) / sizeof(kPalette[0]);
  Raster r(mask.width, mask.height, 3);
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    const std::uint8_t l = mask.labels[i];
    for (std::size_t c = 0; c < 3; ++c) r.samples[i * 3 + c] = l == kIgnoreLabel ? 0 : kPalette[l % n][c];
  }
  return r;
}

Raster resize_long_side(const Raster& raster, std::size_t target) {
  if (target == 0) throw ContractError("resize_long_side: target must be positive");
  const std::size_t longest = std::max(raster.width, raster.height);
  if (longest == target) return raster;
  const double s = static_cast<double>(target) / static_cast<double>(longest);
  const std::size_t nw = raster.width >= raster.height
                             ? target
                             : std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(raster.width * s)));
  const std::size_t nh = raster.height > raster.width
                             ? target
                             : std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(raster.height * s)));
  Raster out(nw, nh, raster.channels);
  out.maxval = raster.maxval;
  const double sy = static_cast<double>(raster.height) / static_cast<double>(nh);
  const double sx = static_cast<double>(raster.width) / static_cast<double>(nw);
  auto clampi = [](double v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(n - 1)));
  };
  for (std::size_t y = 0; y < nh; ++y) {
    const double fy = std::max(0.0, (static_cast<double>(y) + 0.5) * sy - 0.5);
    const std::size_t y0 = clampi(std::floor(fy), raster.height), y1 = clampi(std::floor(fy) + 1, raster.height);
    const double ty = fy - std::floor(fy);
    for (std::size_t x = 0; x < nw; ++x) {
      const double fx = std::max(0.0, (static_cast<double>(x) + 0.5) * sx - 0.5);
      const std::size_t x0 = clampi(std::floor(fx), raster.width), x1 = clampi(std::floor(fx) + 1, raster.width);
      const double tx = fx - std::floor(fx);
      for (std::size_t c = 0; c < raster.channels; ++c) {
        const double v = (1 - ty) * ((1 - tx) * raster.at(y0, x0, c) + tx * raster.at(y0, x1, c)) +
                         ty * ((1 - tx) * raster.at(y1, x0, c) + tx * raster.at(y1, x1, c));
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

Tensor raster_to_tensor(const Raster& raster) {
  const std::size_t h = raster.height, w = raster.width;
  const double maxval = static_cast<double>(raster.maxval);
  std::vector<double> v(3 * h * w);
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t src_c = raster.channels == 1 ? 0 : c;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) v[(c * h + y) * w + x] = 2.0 * raster.at(y, x, src_c) / maxval - 1.0;
  }
  return Tensor({3, h, w}, std::move(v));
}

Raster tensor_to_raster(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw DimensionError("tensor_to_raster: expected [1|3 x H x W]");
  }
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  Raster r(w, h, ch);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double v = (image.at(c, y, x) + 1.0) * 127.5;
        r.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
  return r;
}

}  // namespace ovseg

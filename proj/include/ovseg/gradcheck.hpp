#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ovseg/encoder.hpp"
#include "ovseg/params.hpp"
#include "ovseg/tensor.hpp"

namespace ovseg {

struct GradCheckConfig {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t samples = 16;  // tensors with more entries get this many seeded picks
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string group;
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double analytic = 0.0;  // at the worst entry
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  double max_rel_error() const;
  bool passed() const;
  std::string text() const;
  void append(const GradCheckReport& other);
};

// |a - f| / (|f| + 1e-8)
double gradcheck_relative_error(double analytic, double numeric);

// Compares the tape gradient of `loss` against central differences for the
// entries of every tensor in `params`. `loss` must build its graph from the
// tensors in `params` each time it is called.
GradCheckReport check_gradients(const std::string& group, const ParamSet& params,
                                const std::function<Tensor()>& loss, const GradCheckConfig& config);

// 32x32 micro encoder: patch 16, depth 2, width 16, 2 heads, c = 8.
EncoderConfig micro_encoder_config();

// Upsampler total loss (jbu, crn, down groups) and the combined distillation
// loss (student encoder and temperature) on the micro configuration.
GradCheckReport run_gradcheck_suite(const GradCheckConfig& config);

}  // namespace ovseg

#pragma once

#include <vector>

#include "ovseg/tensor.hpp"

namespace ovseg {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW) when nonzero
};

// Adam over a fixed list of parameter tensors, updated in place.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  void zero_grad();
  // Applies one update from the gradients currently held by the parameters.
  void step();
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace ovseg

#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ovseg/errors.hpp"

namespace ovseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float64 array. Copies of a Tensor share storage; use
// clone() for an independent copy. Values are only changed by recorded ops
// and by optimizers/loaders writing through mutable_data().
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t i, std::size_t j) const;
  double at(std::size_t i, std::size_t j, std::size_t k) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);

  bool has_grad() const;
  // Gradient buffer; empty span when nothing has been accumulated yet.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();  // allocates zeros on first use
  // Gradient as a detached tensor (zeros when none accumulated).
  Tensor grad_tensor() const;
  void zero_grad();

  Tensor clone() const;   // deep copy of data, no grad, no tape history
  Tensor detach() const { return clone(); }
  bool shares_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  friend class Tape;
};

// Reverse-mode gradient recorder. Constructing a Tape makes it the active
// recorder for the current thread until it is destroyed; ops whose inputs
// require gradients append a node to the active tape. With no active tape
// ops are evaluated without recording.
class Tape {
 public:
  struct Node;
  // Receives the node so it can read the output gradient and accumulate
  // into the input gradients.
  using BackwardFn = std::function<void(Node&)>;

  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;

    std::span<const double> out_grad() const { return output.grad(); }
    bool needs(std::size_t input) const { return inputs[input].requires_grad(); }
    std::span<double> in_grad(std::size_t input) { return inputs[input].mutable_grad(); }
  };

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Records `output = op(inputs)` when any input requires a gradient. Marks
  // the output as requiring a gradient in that case.
  static void record(const char* op, std::vector<Tensor> inputs, Tensor& output, BackwardFn backward);

  // Populates gradients of every requires_grad leaf reachable from `loss`.
  // Leaf gradients accumulate across calls; intermediate gradients are reset.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
  Tape* previous_ = nullptr;
};

// Temporarily disables recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

// Throws NumericError if any value is not finite.
void check_finite(const Tensor& t, const char* op);

namespace ops {

// Elementwise (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// a * s where s is a one-element tensor.
Tensor scale_by(const Tensor& a, const Tensor& s);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation

// Broadcasts over a 2-D [rows x cols] matrix.
Tensor add_row(const Tensor& a, const Tensor& row);  // row: [cols]
Tensor mul_row(const Tensor& a, const Tensor& row);
Tensor add_col(const Tensor& a, const Tensor& col);  // col: [rows]
Tensor mul_col(const Tensor& a, const Tensor& col);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Row-wise means over arbitrary row groups: out[g] = mean(a[groups[g]]).
Tensor pool_rows(const Tensor& a, const std::vector<std::vector<std::size_t>>& groups);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor layer_norm(const Tensor& x, double eps = 1e-5);  // no affine
// L2-normalizes each row of a 2-D matrix; a zero row is a ContractError.
Tensor normalize_rows(const Tensor& a);
// Cosine of matching rows, dot / sqrt(|a|^2 |b|^2): [R x c] x [R x c] -> [R].
// Identical rows give exactly 1. A zero row is a ContractError.
Tensor row_cosine(const Tensor& a, const Tensor& b);

// Cross-correlation of [C_in x H x W] with [C_out x C_in x kh x kw], zero
// padding, stride 1. Pass a default-constructed (rank-0) tensor for no bias.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t padding);
// One [k x k] kernel applied to every channel of [C x H x W] with edge-clamped
// borders and the given stride.
Tensor depthwise_shared_conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding);

enum class Border { kClamp, kWrap };
// Bilinear gather: out[c, p] = bilinear(input[c], coords[p]) where coords are
// (y, x) source positions in pixel-center units.
Tensor remap_bilinear(const Tensor& input, std::span<const std::array<double, 2>> coords, std::size_t out_h,
                      std::size_t out_w, Border border);
// Align-corners-false bilinear resize of [C x H x W].
Tensor resize_bilinear(const Tensor& input, std::size_t out_h, std::size_t out_w);

}  // namespace ops
}  // namespace ovseg

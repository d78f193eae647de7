#include "ovseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "kernels.hpp"

namespace ovseg {

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
};

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                         " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, {value}); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const { return impl_->data[i * impl_->shape[1] + j]; }

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  return impl_->data[(i * impl_->shape[1] + j) * impl_->shape[2] + k];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::grad_tensor() const {
  if (!has_grad()) return zeros(shape());
  return Tensor(shape(), impl_->grad);
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data); }

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = previous_;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, std::vector<Tensor> inputs, Tensor& output, BackwardFn backward) {
  Tape* tape = g_active_tape;
  if (tape == nullptr) return;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return;
  output.set_requires_grad(true);
  tape->nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (nodes_.empty()) throw ContractError("backward() on an empty tape");
  for (auto& node : nodes_) node.output.zero_grad();
  Tensor seed = loss;
  if (seed.requires_grad()) seed.mutable_grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward(*it);
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

void check_finite(const Tensor& t, const char* op) {
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

namespace ops {
namespace {

Tensor make(const char* op, Shape shape, std::vector<double> data) {
  Tensor out(std::move(shape), std::move(data));
  check_finite(out, op);
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

// Elementwise unary op with derivative expressed through input x and output y.
template <class F, class D>
Tensor unary(const char* op, const Tensor& a, F f, D df) {
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  Tensor out = make(op, a.shape(), std::move(y));
  Tape::record(op, {a}, out, [df](Tape::Node& n) {
    if (!n.needs(0)) return;
    const auto g = n.out_grad();
    const auto xs = n.inputs[0].data();
    const auto ys = n.output.data();
    auto dx = n.in_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * df(xs[i], ys[i]);
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
  Tensor out = make("add", a.shape(), std::move(y));
  Tape::record("add", {a, b}, out, [](Tape::Node& n) {
    const auto g = n.out_grad();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!n.needs(k)) continue;
      auto d = n.in_grad(k);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] - b.data()[i];
  Tensor out = make("sub", a.shape(), std::move(y));
  Tape::record("sub", {a, b}, out, [](Tape::Node& n) {
    const auto g = n.out_grad();
    if (n.needs(0)) {
      auto d = n.in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (n.needs(1)) {
      auto d = n.in_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
  Tensor out = make("mul", a.shape(), std::move(y));
  Tape::record("mul", {a, b}, out, [](Tape::Node& n) {
    const auto g = n.out_grad();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!n.needs(k)) continue;
      const auto other = n.inputs[1 - k].data();
      auto d = n.in_grad(k);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * other[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("scale_by: factor must have one element, got " + shape_str(s.shape()));
  const double f = s.data()[0];
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * f;
  Tensor out = make("scale_by", a.shape(), std::move(y));
  Tape::record("scale_by", {a, s}, out, [](Tape::Node& n) {
    const auto g = n.out_grad();
    const auto x = n.inputs[0].data();
    const double f = n.inputs[1].data()[0];
    if (n.needs(0)) {
      auto d = n.in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * f;
    }
    if (n.needs(1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
      n.in_grad(1)[0] += acc;
    }
  });
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw ContractError("log of non-positive value");
  }
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  return unary(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
      [](double x, double) {
        const double u = kGeluC * (x + kGeluA * x * x * x);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

namespace {

enum class Along { kRow, kCol };

Tensor broadcast(const char* op, const Tensor& a, const Tensor& v, Along along, bool multiply) {
  require_rank(a, 2, op);
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const std::size_t expect = along == Along::kRow ? cols : rows;
  if (v.numel() != expect) {
    throw DimensionError(std::string(op) + ": vector of " + std::to_string(v.numel()) + " values for matrix " +
                         shape_str(a.shape()));
  }
  const auto x = a.data();
  const auto b = v.data();
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double bv = along == Along::kRow ? b[c] : b[r];
      y[r * cols + c] = multiply ? x[r * cols + c] * bv : x[r * cols + c] + bv;
    }
  }
  Tensor out = make(op, a.shape(), std::move(y));
  Tape::record(op, {a, v}, out, [rows, cols, along, multiply](Tape::Node& n) {
    const auto g = n.out_grad();
    const auto x = n.inputs[0].data();
    const auto b = n.inputs[1].data();
    if (n.needs(0)) {
      auto d = n.in_grad(0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const double bv = along == Along::kRow ? b[c] : b[r];
          d[r * cols + c] += multiply ? g[r * cols + c] * bv : g[r * cols + c];
        }
      }
    }
    if (n.needs(1)) {
      auto d = n.in_grad(1);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const double gv = multiply ? g[r * cols + c] * x[r * cols + c] : g[r * cols + c];
          d[along == Along::kRow ? c : r] += gv;
        }
      }
    }
  });
  return out;
}

}  // namespace

Tensor add_row(const Tensor& a, const Tensor& row) { return broadcast("add_row", a, row, Along::kRow, false); }
Tensor mul_row(const Tensor& a, const Tensor& row) { return broadcast("mul_row", a, row, Along::kRow, true); }
Tensor add_col(const Tensor& a, const Tensor& col) { return broadcast("add_col", a, col, Along::kCol, false); }
Tensor mul_col(const Tensor& a, const Tensor& col) { return broadcast("mul_col", a, col, Along::kCol, true); }

namespace {

// C[m x n] += A[m x k] * B[k x n]; with optional transposes of the operands.
void gemm(std::span<const double> a, bool ta, std::span<const double> b, bool tb, std::span<double> c, std::size_t m,
          std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      if (!tb) {
        const double* brow = b.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      }
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  gemm(a.data(), false, b.data(), false, c, m, k, n);
  Tensor out = make("matmul", {m, n}, std::move(c));
  Tape::record("matmul", {a, b}, out, [m, k, n](Tape::Node& nd) {
    const auto g = nd.out_grad();
    if (nd.needs(0)) gemm(g, false, nd.inputs[1].data(), true, nd.in_grad(0), m, n, k);  // dA = dC B^T
    if (nd.needs(1)) gemm(nd.inputs[0].data(), true, g, false, nd.in_grad(1), k, m, n);  // dB = A^T dC
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> y(r * c);
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = x[i * c + j];
  Tensor out = make("transpose", {c, r}, std::move(y));
  Tape::record("transpose", {a}, out, [r, c](Tape::Node& n) {
    const auto g = n.out_grad();
    auto d = n.in_grad(0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j * r + i];
  });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> y(a.data().begin(), a.data().end());
  Tensor out(std::move(shape), std::move(y));
  Tape::record("reshape", {a}, out, [](Tape::Node& n) {
    const auto g = n.out_grad();
    auto d = n.in_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_rows");
  if (begin > end || end > a.dim(0)) throw DimensionError("slice_rows out of range for " + shape_str(a.shape()));
  const std::size_t c = a.dim(1);
  std::vector<double> y(a.data().begin() + begin * c, a.data().begin() + end * c);
  Tensor out({end - begin, c}, std::move(y));
  Tape::record("slice_rows", {a}, out, [begin, c](Tape::Node& n) {
    const auto g = n.out_grad();
    auto d = n.in_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) d[begin * c + i] += g[i];
  });
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_cols");
  if (begin > end || end > a.dim(1)) throw DimensionError("slice_cols out of range for " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1), w = end - begin;
  std::vector<double> y(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) y[i * w + j] = a.data()[i * c + begin + j];
  Tensor out({r, w}, std::move(y));
  Tape::record("slice_cols", {a}, out, [r, c, w, begin](Tape::Node& n) {
    const auto g = n.out_grad();
    auto d = n.in_grad(0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) d[i * c + begin + j] += g[i * w + j];
  });
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t c = parts.front().rank() == 1 ? parts.front().dim(0) : parts.front().dim(1);
  std::vector<double> y;
  std::vector<std::size_t> offsets;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.rank() == 1 ? p.dim(0) : p.dim(1);
    if (p.rank() > 2 || pc != c) throw DimensionError("concat_rows: column count mismatch");
    offsets.push_back(y.size());
    y.insert(y.end(), p.data().begin(), p.data().end());
    rows += p.numel() / c;
  }
  Tensor out({rows, c}, std::move(y));
  Tape::record("concat_rows", parts, out, [offsets](Tape::Node& n) {
    const auto g = n.out_grad();
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      if (!n.needs(k)) continue;
      auto d = n.in_grad(k);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[offsets[k] + i];
    }
  });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t r = parts.front().dim(0);
  std::vector<std::size_t> widths, offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != r) throw DimensionError("concat_cols: row count mismatch");
    offsets.push_back(total);
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> y(r * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) y[i * total + offsets[k] + j] = x[i * widths[k] + j];
  }
  Tensor out({r, total}, std::move(y));
  Tape::record("concat_cols", parts, out, [r, total, widths, offsets](Tape::Node& n) {
    const auto g = n.out_grad();
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      if (!n.needs(k)) continue;
      auto d = n.in_grad(k);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < widths[k]; ++j) d[i * widths[k] + j] += g[i * total + offsets[k] + j];
    }
  });
  return out;
}

Tensor pool_rows(const Tensor& a, const std::vector<std::vector<std::size_t>>& groups) {
  require_rank(a, 2, "pool_rows");
  const std::size_t rows = a.dim(0), c = a.dim(1);
  std::vector<double> y(groups.size() * c, 0.0);
  const auto x = a.data();
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& grp = groups[gi];
    if (grp.empty()) throw DimensionError("pool_rows: empty group " + std::to_string(gi));
    for (std::size_t r : grp) {
      if (r >= rows) throw DimensionError("pool_rows: row index out of range");
      for (std::size_t j = 0; j < c; ++j) y[gi * c + j] += x[r * c + j];
    }
    const double inv = 1.0 / static_cast<double>(grp.size());
    for (std::size_t j = 0; j < c; ++j) y[gi * c + j] *= inv;
  }
  Tensor out = make("pool_rows", {groups.size(), c}, std::move(y));
  Tape::record("pool_rows", {a}, out, [groups, c](Tape::Node& n) {
    const auto g = n.out_grad();
    auto d = n.in_grad(0);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const double inv = 1.0 / static_cast<double>(groups[gi].size());
      for (std::size_t r : groups[gi])
        for (std::size_t j = 0; j < c; ++j) d[r * c + j] += g[gi * c + j] * inv;
    }
  });
  return out;
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor out = make("sum", {1}, {acc});
  Tape::record("sum", {a}, out, [](Tape::Node& n) {
    const double g = n.out_grad()[0];
    for (double& d : n.in_grad(0)) d += g;
  });
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  const double n = static_cast<double>(a.numel());
  return unary("mean", sum(a), [n](double x) { return x / n; }, [n](double, double) { return 1.0 / n; });
}

Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

namespace {

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank()) throw DimensionError(std::string(op) + ": axis out of range for " + shape_str(x.shape()));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= x.dim(i);
  s.len = x.dim(axis);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) s.inner *= x.dim(i);
  if (s.len == 0) throw DimensionError(std::string(op) + ": empty axis");
  return s;
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x, axis, "softmax");
  const auto in = x.data();
  std::vector<double> y(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = in[base];
      for (std::size_t k = 1; k < s.len; ++k) mx = std::max(mx, in[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) {
        const double e = std::exp(in[base + k * s.inner] - mx);
        y[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) y[base + k * s.inner] /= z;
    }
  }
  Tensor out = make("softmax", x.shape(), std::move(y));
  Tape::record("softmax", {x}, out, [s](Tape::Node& n) {
    const auto g = n.out_grad();
    const auto y = n.output.data();
    auto d = n.in_grad(0);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t at = base + k * s.inner;
          d[at] += y[at] * (g[at] - dot);
        }
      }
    }
  });
  return out;
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x, axis, "log_softmax");
  const auto in = x.data();
  std::vector<double> y(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = in[base];
      for (std::size_t k = 1; k < s.len; ++k) mx = std::max(mx, in[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) z += std::exp(in[base + k * s.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < s.len; ++k) y[base + k * s.inner] = in[base + k * s.inner] - lse;
    }
  }
  Tensor out = make("log_softmax", x.shape(), std::move(y));
  Tape::record("log_softmax", {x}, out, [s](Tape::Node& n) {
    const auto g = n.out_grad();
    const auto y = n.output.data();
    auto d = n.in_grad(0);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double gs = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) gs += g[base + k * s.inner];
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t at = base + k * s.inner;
          d[at] += g[at] - std::exp(y[at]) * gs;
        }
      }
    }
  });
  return out;
}

namespace {

Tensor layer_norm_impl(const Tensor& x, const Tensor* gain, const Tensor* bias, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm of a rank-0 tensor");
  const std::size_t n = x.shape().back();
  if (n == 0) throw DimensionError("layer_norm: zero-length last axis");
  if (gain && (gain->numel() != n || bias->numel() != n)) {
    throw DimensionError("layer_norm: gain/bias do not match last dimension " + std::to_string(n));
  }
  const std::size_t rows = x.numel() / n;
  const auto in = x.data();
  std::vector<double> xhat(in.size()), inv_std(rows), y(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * inv_std[r];
      xhat[r * n + j] = h;
      y[r * n + j] = gain ? h * gain->data()[j] + bias->data()[j] : h;
    }
  }
  Tensor out = make("layer_norm", x.shape(), std::move(y));
  std::vector<Tensor> inputs{x};
  if (gain) {
    inputs.push_back(*gain);
    inputs.push_back(*bias);
  }
  const bool affine = gain != nullptr;
  Tape::record("layer_norm", std::move(inputs), out,
               [n, rows, affine, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape::Node& nd) {
                 const auto g = nd.out_grad();
                 const double* gn = affine ? nd.inputs[1].data().data() : nullptr;
                 if (affine && nd.needs(1)) {
                   auto dg = nd.in_grad(1);
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t j = 0; j < n; ++j) dg[j] += g[r * n + j] * xhat[r * n + j];
                 }
                 if (affine && nd.needs(2)) {
                   auto db = nd.in_grad(2);
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t j = 0; j < n; ++j) db[j] += g[r * n + j];
                 }
                 if (!nd.needs(0)) return;
                 auto dx = nd.in_grad(0);
                 std::vector<double> dh(n);
                 for (std::size_t r = 0; r < rows; ++r) {
                   double m1 = 0.0, m2 = 0.0;
                   for (std::size_t j = 0; j < n; ++j) {
                     dh[j] = g[r * n + j] * (gn ? gn[j] : 1.0);
                     m1 += dh[j];
                     m2 += dh[j] * xhat[r * n + j];
                   }
                   m1 /= static_cast<double>(n);
                   m2 /= static_cast<double>(n);
                   for (std::size_t j = 0; j < n; ++j) {
                     dx[r * n + j] += inv_std[r] * (dh[j] - m1 - xhat[r * n + j] * m2);
                   }
                 }
               });
  return out;
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  return layer_norm_impl(x, &gain, &bias, eps);
}

Tensor layer_norm(const Tensor& x, double eps) { return layer_norm_impl(x, nullptr, nullptr, eps); }

Tensor normalize_rows(const Tensor& a) {
  require_rank(a, 2, "normalize_rows");
  const std::size_t rows = a.dim(0), c = a.dim(1);
  const auto x = a.data();
  std::vector<double> y(x.size()), inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += x[r * c + j] * x[r * c + j];
    if (!(ss > 0.0)) throw ContractError("zero-norm row at index " + std::to_string(r));
    inv[r] = 1.0 / std::sqrt(ss);
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] = x[r * c + j] * inv[r];
  }
  Tensor out = make("normalize_rows", a.shape(), std::move(y));
  Tape::record("normalize_rows", {a}, out, [rows, c, inv = std::move(inv)](Tape::Node& n) {
    const auto g = n.out_grad();
    const auto y = n.output.data();
    auto d = n.in_grad(0);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[r * c + j] * g[r * c + j];
      for (std::size_t j = 0; j < c; ++j) d[r * c + j] += (g[r * c + j] - y[r * c + j] * dot) * inv[r];
    }
  });
  return out;
}

Tensor row_cosine(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "row_cosine");
  if (a.shape() != b.shape()) throw DimensionError("row_cosine: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t rows = a.dim(0), c = a.dim(1);
  const auto x = a.data(), z = b.data();
  std::vector<double> cos(rows), xx(rows), zz(rows), inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    xx[r] = detail::dot(x.data() + r * c, x.data() + r * c, c);
    zz[r] = detail::dot(z.data() + r * c, z.data() + r * c, c);
    if (!(xx[r] > 0.0) || !(zz[r] > 0.0)) throw ContractError("zero-norm row at index " + std::to_string(r));
    inv[r] = 1.0 / std::sqrt(xx[r] * zz[r]);
    cos[r] = detail::dot(x.data() + r * c, z.data() + r * c, c) * inv[r];
  }
  Tensor out = make("row_cosine", {rows}, cos);
  Tape::record("row_cosine", {a, b}, out,
               [rows, c, cos = std::move(cos), xx = std::move(xx), zz = std::move(zz), inv = std::move(inv)](Tape::Node& n) {
                 const auto g = n.out_grad();
                 const auto x = n.inputs[0].data(), z = n.inputs[1].data();
                 for (int side = 0; side < 2; ++side) {
                   if (!n.needs(side)) continue;
                   auto d = n.in_grad(side);
                   const auto& self = side == 0 ? x : z;
                   const auto& other = side == 0 ? z : x;
                   const auto& sq = side == 0 ? xx : zz;
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double gi = g[r] * inv[r], gs = g[r] * cos[r] / sq[r];
                     for (std::size_t j = 0; j < c; ++j) d[r * c + j] += gi * other[r * c + j] - gs * self[r * c + j];
                   }
                 }
               });
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t padding) {
  require_rank(input, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin) throw DimensionError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                                                 " input channels, got " + std::to_string(cin));
  if (kh > h + 2 * padding || kw > w + 2 * padding) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  const bool has_bias = bias.rank() != 0;
  if (has_bias && bias.numel() != cout) throw DimensionError("conv2d: bias size mismatch");
  const std::size_t oh = h + 2 * padding - kh + 1, ow = w + 2 * padding - kw + 1;
  const auto in = input.data();
  const auto wt = weight.data();
  std::vector<double> y(cout * oh * ow, 0.0);
  const auto p = static_cast<std::ptrdiff_t>(padding);

  // Valid output range along one axis for a kernel offset.
  auto range = [p](std::size_t k, std::size_t in_len, std::size_t out_len) {
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - p;
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -off);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out_len),
                                                       static_cast<std::ptrdiff_t>(in_len) - off);
    return std::array<std::ptrdiff_t, 3>{lo, hi, off};
  };

  for (std::size_t o = 0; o < cout; ++o) {
    double* yo = y.data() + o * oh * ow;
    if (has_bias) std::fill(yo, yo + oh * ow, bias.data()[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const double* xc = in.data() + c * h * w;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const auto [ylo, yhi, yoff] = range(ky, h, oh);
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const auto [xlo, xhi, xoff] = range(kx, w, ow);
          const double wv = wt[((o * cin + c) * kh + ky) * kw + kx];
          for (std::ptrdiff_t yy = ylo; yy < yhi; ++yy) {
            double* yrow = yo + yy * static_cast<std::ptrdiff_t>(ow);
            const double* xrow = xc + (yy + yoff) * static_cast<std::ptrdiff_t>(w) + xoff;
            for (std::ptrdiff_t xx = xlo; xx < xhi; ++xx) yrow[xx] += wv * xrow[xx];
          }
        }
      }
    }
  }
  Tensor out = make("conv2d", {cout, oh, ow}, std::move(y));
  std::vector<Tensor> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  Tape::record("conv2d", std::move(inputs), out, [=](Tape::Node& n) {
    const auto g = n.out_grad();
    const auto in = n.inputs[0].data();
    const auto wt = n.inputs[1].data();
    const bool din = n.needs(0), dw = n.needs(1);
    std::span<double> gin, gw;
    if (din) gin = n.in_grad(0);
    if (dw) gw = n.in_grad(1);
    for (std::size_t o = 0; o < cout; ++o) {
      const double* go = g.data() + o * oh * ow;
      for (std::size_t c = 0; c < cin; ++c) {
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const auto [ylo, yhi, yoff] = range(ky, h, oh);
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const auto [xlo, xhi, xoff] = range(kx, w, ow);
            const std::size_t widx = ((o * cin + c) * kh + ky) * kw + kx;
            const double wv = wt[widx];
            double acc = 0.0;
            for (std::ptrdiff_t yy = ylo; yy < yhi; ++yy) {
              const double* grow = go + yy * static_cast<std::ptrdiff_t>(ow);
              const std::ptrdiff_t xbase = static_cast<std::ptrdiff_t>(c * h * w) +
                                           (yy + yoff) * static_cast<std::ptrdiff_t>(w) + xoff;
              if (dw) {
                const double* xrow = in.data() + xbase;
                acc += detail::dot(grow + xlo, xrow + xlo, static_cast<std::size_t>(xhi - xlo));
              }
              if (din) {
                double* girow = gin.data() + xbase;
                for (std::ptrdiff_t xx = xlo; xx < xhi; ++xx) girow[xx] += wv * grow[xx];
              }
            }
            if (dw) gw[widx] += acc;
          }
        }
      }
    }
    if (has_bias && n.needs(2)) {
      auto gb = n.in_grad(2);
      for (std::size_t o = 0; o < cout; ++o) {
        double acc = 0.0;
        for (std::size_t i = 0; i < oh * ow; ++i) acc += g[o * oh * ow + i];
        gb[o] += acc;
      }
    }
  });
  return out;
}

Tensor depthwise_shared_conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  require_rank(input, 3, "depthwise_shared_conv2d");
  require_rank(kernel, 2, "depthwise_shared_conv2d");
  const std::size_t ch = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  if (stride == 0) throw DimensionError("depthwise_shared_conv2d: zero stride");
  if (kh > h + 2 * padding || kw > w + 2 * padding) {
    throw DimensionError("depthwise_shared_conv2d: kernel larger than padded input");
  }
  const std::size_t oh = (h + 2 * padding - kh) / stride + 1, ow = (w + 2 * padding - kw) / stride + 1;
  auto clampi = [](std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  // Flat source index for every (output pixel, tap).
  std::vector<std::size_t> src(oh * ow * kh * kw);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x)
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::size_t sy = clampi(static_cast<std::ptrdiff_t>(y * stride + ky) - static_cast<std::ptrdiff_t>(padding), h);
          const std::size_t sx = clampi(static_cast<std::ptrdiff_t>(x * stride + kx) - static_cast<std::ptrdiff_t>(padding), w);
          src[((y * ow + x) * kh + ky) * kw + kx] = sy * w + sx;
        }
  const std::size_t taps = kh * kw, opix = oh * ow;
  const auto in = input.data();
  const auto k = kernel.data();
  std::vector<double> out_data(ch * opix, 0.0);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t p = 0; p < opix; ++p) {
      double acc = 0.0;
      for (std::size_t t = 0; t < taps; ++t) acc += k[t] * in[c * h * w + src[p * taps + t]];
      out_data[c * opix + p] = acc;
    }
  Tensor out = make("depthwise_shared_conv2d", {ch, oh, ow}, std::move(out_data));
  Tape::record("depthwise_shared_conv2d", {input, kernel}, out, [=, src = std::move(src)](Tape::Node& n) {
    const auto g = n.out_grad();
    const auto in = n.inputs[0].data();
    const auto k = n.inputs[1].data();
    const bool din = n.needs(0), dk = n.needs(1);
    std::span<double> gin, gk;
    if (din) gin = n.in_grad(0);
    if (dk) gk = n.in_grad(1);
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t p = 0; p < opix; ++p) {
        const double gv = g[c * opix + p];
        for (std::size_t t = 0; t < taps; ++t) {
          const std::size_t s = c * h * w + src[p * taps + t];
          if (din) gin[s] += gv * k[t];
          if (dk) gk[t] += gv * in[s];
        }
      }
  });
  return out;
}

Tensor remap_bilinear(const Tensor& input, std::span<const std::array<double, 2>> coords, std::size_t out_h,
                      std::size_t out_w, Border border) {
  require_rank(input, 3, "remap_bilinear");
  const std::size_t ch = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t opix = out_h * out_w;
  if (coords.size() != opix) throw DimensionError("remap_bilinear: coordinate count mismatch");
  auto fold = [border](std::ptrdiff_t v, std::size_t n) {
    const auto ni = static_cast<std::ptrdiff_t>(n);
    if (border == Border::kClamp) return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, ni - 1));
    return static_cast<std::size_t>(((v % ni) + ni) % ni);
  };
  std::vector<std::array<std::size_t, 4>> idx(opix);
  std::vector<std::array<double, 4>> wts(opix);
  for (std::size_t p = 0; p < opix; ++p) {
    const double sy = coords[p][0], sx = coords[p][1];
    const double fy0 = std::floor(sy), fx0 = std::floor(sx);
    const double ty = sy - fy0, tx = sx - fx0;
    const auto y0 = static_cast<std::ptrdiff_t>(fy0), x0 = static_cast<std::ptrdiff_t>(fx0);
    const std::size_t ya = fold(y0, h), yb = fold(y0 + 1, h), xa = fold(x0, w), xb = fold(x0 + 1, w);
    idx[p] = {ya * w + xa, ya * w + xb, yb * w + xa, yb * w + xb};
    wts[p] = {(1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx};
  }
  const auto in = input.data();
  std::vector<double> y(ch * opix);
  for (std::size_t c = 0; c < ch; ++c) {
    const double* xc = in.data() + c * h * w;
    for (std::size_t p = 0; p < opix; ++p) {
      const auto& i = idx[p];
      const auto& wt = wts[p];
      y[c * opix + p] = wt[0] * xc[i[0]] + wt[1] * xc[i[1]] + wt[2] * xc[i[2]] + wt[3] * xc[i[3]];
    }
  }
  Tensor out = make("remap_bilinear", {ch, out_h, out_w}, std::move(y));
  Tape::record("remap_bilinear", {input}, out,
               [ch, h, w, opix, idx = std::move(idx), wts = std::move(wts)](Tape::Node& n) {
                 const auto g = n.out_grad();
                 auto d = n.in_grad(0);
                 for (std::size_t c = 0; c < ch; ++c) {
                   double* dc = d.data() + c * h * w;
                   for (std::size_t p = 0; p < opix; ++p) {
                     const double gv = g[c * opix + p];
                     for (int k = 0; k < 4; ++k) dc[idx[p][k]] += wts[p][k] * gv;
                   }
                 }
               });
  return out;
}

Tensor resize_bilinear(const Tensor& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input, 3, "resize_bilinear");
  if (out_h == 0 || out_w == 0) throw DimensionError("resize_bilinear: empty target");
  const double sy = static_cast<double>(input.dim(1)) / static_cast<double>(out_h);
  const double sx = static_cast<double>(input.dim(2)) / static_cast<double>(out_w);
  std::vector<std::array<double, 2>> coords(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x)
      coords[y * out_w + x] = {(static_cast<double>(y) + 0.5) * sy - 0.5, (static_cast<double>(x) + 0.5) * sx - 0.5};
  return remap_bilinear(input, coords, out_h, out_w, Border::kClamp);
}

}  // namespace ops
}  // namespace ovseg

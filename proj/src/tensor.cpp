#include "lwf/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "lwf/errors.hpp"

namespace lwf {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

void require_same_graph(Var a, Var b, const char* op) {
  if (&a.graph() != &b.graph()) {
    throw ContractError(std::string(op) + ": operands belong to different graphs");
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    out << (i ? "," : "") << shape[i];
  }
  out << ']';
  return out.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) {
      throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
    }
  }
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  for (std::size_t d : shape_) {
    if (d == 0) {
      throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
    }
  }
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  }
  return data_[0];
}

void Tensor::set_requires_grad(bool flag) {
  requires_grad_ = flag;
  if (!flag) {
    grad_.clear();
  }
}

void Tensor::accumulate_grad(std::span<const double> delta) {
  if (!requires_grad_) {
    return;
  }
  if (delta.size() != data_.size()) {
    throw ShapeError("gradient length mismatch for " + shape_str(shape_));
  }
  if (grad_.empty()) {
    grad_.assign(data_.size(), 0.0);
  }
  for (std::size_t i = 0; i < delta.size(); ++i) {
    grad_[i] += delta[i];
  }
}

void Tensor::zero_grad() {
  if (requires_grad_) {
    grad_.assign(data_.size(), 0.0);
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::same_values(const Tensor& other) const {
  return shape_ == other.shape_ && data_ == other.data_;
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Constant: return "constant";
    case OpKind::Parameter: return "parameter";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::AddRowBias: return "add_row_bias";
    case OpKind::MatMul: return "matmul";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Relu: return "relu";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::MaxPool2x2: return "max_pool2x2";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::Reshape: return "reshape";
    case OpKind::Log: return "log";
    case OpKind::Pow: return "pow";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::TemperatureRows: return "temperature_rows";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::RowSum: return "row_sum";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph

const Tensor& Var::value() const { return graph_->value(id_); }

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{OpKind::Constant, {}, std::move(value), {}, false, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Graph::parameter(Tensor& param) {
  // The node keeps its own copy of the value so later in-place updates of the
  // parameter cannot alter saved forward state.
  Tensor copy(param.shape(), std::vector<double>(param.data().begin(), param.data().end()));
  nodes_.push_back(
      Node{OpKind::Parameter, {}, std::move(copy), {}, param.requires_grad(), &param, {}});
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(OpKind kind, std::vector<std::size_t> inputs, Tensor value,
                  BackwardFn backward) {
  bool needs = false;
  for (std::size_t id : inputs) {
    if (id >= nodes_.size()) {
      throw ContractError("graph input id out of range");
    }
    needs = needs || nodes_[id].needs_grad;
  }
  nodes_.push_back(Node{kind, std::move(inputs), std::move(value), {}, needs, nullptr,
                        needs ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

std::span<double> Graph::grad_buffer(std::size_t id) {
  Node& node = nodes_.at(id);
  if (node.grad.empty()) {
    node.grad.assign(node.value.numel(), 0.0);
  }
  return node.grad;
}

void Graph::backward(Var loss) {
  if (&loss.graph() != this) {
    throw ContractError("backward: loss does not belong to this graph");
  }
  if (loss.value().numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (backward_done_) {
    throw ContractError("backward: graph was already differentiated");
  }
  backward_done_ = true;
  if (!nodes_[loss.id()].needs_grad) {
    return;
  }
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.needs_grad || node.grad.empty()) {
      continue;
    }
    ++backward_visits_;
    if (node.param != nullptr) {
      node.param->accumulate_grad(node.grad);
    } else if (node.backward) {
      node.backward(*this, id);
    }
  }
}

BatchNormParams::BatchNormParams(std::size_t channels) {
  if (channels > 0) {
    gamma = Tensor({channels}, 1.0);
    beta = Tensor({channels}, 0.0);
    running_mean = Tensor({channels}, 0.0);
    running_var = Tensor({channels}, 1.0);
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

Var add(Var a, Var b) {
  require_same_graph(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::Add, {ia, ib}, std::move(out), [ia, ib](Graph& g, std::size_t self) {
    auto gs = g.grad(self);
    for (std::size_t in : {ia, ib}) {
      if (!g.needs_grad(in)) continue;
      auto gi = g.grad_buffer(in);
      for (std::size_t i = 0; i < gs.size(); ++i) gi[i] += gs[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_graph(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::Sub, {ia, ib}, std::move(out), [ia, ib](Graph& g, std::size_t self) {
    auto gs = g.grad(self);
    if (g.needs_grad(ia)) {
      auto gi = g.grad_buffer(ia);
      for (std::size_t i = 0; i < gs.size(); ++i) gi[i] += gs[i];
    }
    if (g.needs_grad(ib)) {
      auto gi = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gs.size(); ++i) gi[i] -= gs[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_graph(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::Mul, {ia, ib}, std::move(out), [ia, ib](Graph& g, std::size_t self) {
    auto gs = g.grad(self);
    auto av = g.value(ia).data();
    auto bv = g.value(ib).data();
    if (g.needs_grad(ia)) {
      auto gi = g.grad_buffer(ia);
      for (std::size_t i = 0; i < gs.size(); ++i) gi[i] += gs[i] * bv[i];
    }
    if (g.needs_grad(ib)) {
      auto gi = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gs.size(); ++i) gi[i] += gs[i] * av[i];
    }
  });
}

Var div(Var a, Var b) {
  require_same_graph(a, b, "div");
  require_same_shape(a.value(), b.value(), "div");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] /= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::Div, {ia, ib}, std::move(out), [ia, ib](Graph& g, std::size_t self) {
    auto gs = g.grad(self);
    auto av = g.value(ia).data();
    auto bv = g.value(ib).data();
    if (g.needs_grad(ia)) {
      auto gi = g.grad_buffer(ia);
      for (std::size_t i = 0; i < gs.size(); ++i) gi[i] += gs[i] / bv[i];
    }
    if (g.needs_grad(ib)) {
      auto gi = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gs.size(); ++i) gi[i] -= gs[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  const std::size_t ia = a.id();
  return a.graph().record(OpKind::Scale, {ia}, std::move(out), [ia, factor](Graph& g, std::size_t self) {
    auto gs = g.grad(self);
    auto gi = g.grad_buffer(ia);
    for (std::size_t i = 0; i < gs.size(); ++i) gi[i] += gs[i] * factor;
  });
}

Var add_scalar(Var a, double offset) {
  Tensor out = a.value();
  for (double& v : out.data()) v += offset;
  const std::size_t ia = a.id();
  return a.graph().record(OpKind::AddScalar, {ia}, std::move(out), [ia](Graph& g, std::size_t self) {
    auto gs = g.grad(self);
    auto gi = g.grad_buffer(ia);
    for (std::size_t i = 0; i < gs.size(); ++i) gi[i] += gs[i];
  });
}

Var add_row_bias(Var a, Var bias) {
  require_same_graph(a, bias, "add_row_bias");
  require_rank(a.value(), 2, "add_row_bias");
  const std::size_t rows = a.value().dim(0), cols = a.value().dim(1);
  if (bias.value().numel() != cols) {
    throw ShapeError("add_row_bias: bias length " + std::to_string(bias.value().numel()) +
                     " vs " + std::to_string(cols) + " columns");
  }
  Tensor out = a.value();
  auto o = out.data();
  auto bv = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] += bv[c];
  const std::size_t ia = a.id(), ib = bias.id();
  return a.graph().record(OpKind::AddRowBias, {ia, ib}, std::move(out),
                          [ia, ib, rows, cols](Graph& g, std::size_t self) {
                            auto gs = g.grad(self);
                            if (g.needs_grad(ia)) {
                              auto gi = g.grad_buffer(ia);
                              for (std::size_t i = 0; i < gs.size(); ++i) gi[i] += gs[i];
                            }
                            if (g.needs_grad(ib)) {
                              auto gb = g.grad_buffer(ib);
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t c = 0; c < cols; ++c) gb[c] += gs[r * cols + c];
                            }
                          });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  return a.graph().record(OpKind::Relu, {ia}, std::move(out), [ia](Graph& g, std::size_t self) {
    auto gs = g.grad(self);
    auto x = g.value(ia).data();
    auto gi = g.grad_buffer(ia);
    for (std::size_t i = 0; i < gs.size(); ++i) {
      if (x[i] > 0.0) gi[i] += gs[i];
    }
  });
}

Var log(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) {
    if (std::isnan(v) || v < 0.0) {
      throw NumericError("log: argument outside domain");
    }
    v = std::log(v);
  }
  const std::size_t ia = a.id();
  return a.graph().record(OpKind::Log, {ia}, std::move(out), [ia](Graph& g, std::size_t self) {
    auto gs = g.grad(self);
    auto x = g.value(ia).data();
    auto gi = g.grad_buffer(ia);
    for (std::size_t i = 0; i < gs.size(); ++i) gi[i] += gs[i] / x[i];
  });
}

Var pow(Var a, double exponent) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::pow(v, exponent);
  const std::size_t ia = a.id();
  return a.graph().record(OpKind::Pow, {ia}, std::move(out), [ia, exponent](Graph& g, std::size_t self) {
    auto gs = g.grad(self);
    auto x = g.value(ia).data();
    auto gi = g.grad_buffer(ia);
    for (std::size_t i = 0; i < gs.size(); ++i) {
      gi[i] += gs[i] * exponent * std::pow(x[i], exponent - 1.0);
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  require_same_graph(a, b, "matmul");
  require_rank(a.value(), 2, "matmul");
  require_rank(b.value(), 2, "matmul");
  const std::size_t r = a.value().dim(0), k = a.value().dim(1), c = b.value().dim(1);
  if (b.value().dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor out({r, c});
  MapMat(out.data().data(), r, c).noalias() =
      ConstMapMat(a.value().data().data(), r, k) * ConstMapMat(b.value().data().data(), k, c);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::MatMul, {ia, ib}, std::move(out),
                          [ia, ib, r, k, c](Graph& g, std::size_t self) {
                            ConstMapMat gs(g.grad(self).data(), r, c);
                            if (g.needs_grad(ia)) {
                              MapMat ga(g.grad_buffer(ia).data(), r, k);
                              ga.noalias() += gs * ConstMapMat(g.value(ib).data().data(), k, c).transpose();
                            }
                            if (g.needs_grad(ib)) {
                              MapMat gb(g.grad_buffer(ib).data(), k, c);
                              gb.noalias() += ConstMapMat(g.value(ia).data().data(), r, k).transpose() * gs;
                            }
                          });
}

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t pad) {
  if (stride == 0) {
    throw ShapeError("conv2d: stride must be positive");
  }
  const std::size_t padded = in + 2 * pad;
  if (padded < kernel || (padded - kernel) % stride != 0) {
    throw ShapeError("conv2d: (" + std::to_string(in) + " + 2*" + std::to_string(pad) + " - " +
                     std::to_string(kernel) + ")/" + std::to_string(stride) +
                     " + 1 is not a positive integer");
  }
  return (padded - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t batch, in_ch, in_h, in_w;
  std::size_t out_ch, kernel, stride, pad;
  std::size_t out_h, out_w;
  std::size_t patch() const { return in_ch * kernel * kernel; }
  std::size_t pixels() const { return out_h * out_w; }
};

void im2col(const double* image, const ConvGeometry& g, double* cols) {
  const std::size_t p = g.pixels();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * p;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = image + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w))
                          ? 0.0
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& g, double* image) {
  const std::size_t p = g.pixels();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * p;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          double* dst = image + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w;
          const double* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in_w)) {
              dst[static_cast<std::size_t>(ix)] += src[ox];
            }
          }
        }
      }
    }
  }
}

Var conv2d_impl(Var input, Var kernels, const Var* bias, std::size_t stride, std::size_t pad) {
  require_same_graph(input, kernels, "conv2d");
  const Tensor& x = input.value();
  const Tensor& w = kernels.value();
  const bool unbatched = x.rank() == 3;
  if (!unbatched && x.rank() != 4) {
    throw ShapeError("conv2d: input must be C×H×W or N×C×H×W, got " + shape_str(x.shape()));
  }
  require_rank(w, 4, "conv2d kernels");
  ConvGeometry geo{};
  geo.batch = unbatched ? 1 : x.dim(0);
  geo.in_ch = x.shape()[x.rank() - 3];
  geo.in_h = x.shape()[x.rank() - 2];
  geo.in_w = x.shape()[x.rank() - 1];
  geo.out_ch = w.dim(0);
  geo.kernel = w.dim(2);
  geo.stride = stride;
  geo.pad = pad;
  if (w.dim(1) != geo.in_ch || w.dim(3) != geo.kernel) {
    throw ShapeError("conv2d: kernels " + shape_str(w.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  geo.out_h = conv_output_size(geo.in_h, geo.kernel, stride, pad);
  geo.out_w = conv_output_size(geo.in_w, geo.kernel, stride, pad);
  if (bias != nullptr) {
    require_same_graph(input, *bias, "conv2d");
    if (bias->value().numel() != geo.out_ch) {
      throw ShapeError("conv2d: bias length must equal output channels");
    }
  }

  Shape out_shape = unbatched ? Shape{geo.out_ch, geo.out_h, geo.out_w}
                              : Shape{geo.batch, geo.out_ch, geo.out_h, geo.out_w};
  Tensor out(out_shape);
  const std::size_t kp = geo.patch(), px = geo.pixels();
  std::vector<double> cols(kp * px);
  ConstMapMat wmat(w.data().data(), geo.out_ch, kp);
  const std::size_t in_stride = geo.in_ch * geo.in_h * geo.in_w;
  const std::size_t out_stride = geo.out_ch * px;
  for (std::size_t n = 0; n < geo.batch; ++n) {
    im2col(x.data().data() + n * in_stride, geo, cols.data());
    MapMat o(out.data().data() + n * out_stride, geo.out_ch, px);
    o.noalias() = wmat * ConstMapMat(cols.data(), kp, px);
    if (bias != nullptr) {
      auto bv = bias->value().data();
      for (std::size_t oc = 0; oc < geo.out_ch; ++oc) o.row(oc).array() += bv[oc];
    }
  }

  std::vector<std::size_t> inputs{input.id(), kernels.id()};
  if (bias != nullptr) inputs.push_back(bias->id());
  const std::size_t ix = input.id(), iw = kernels.id();
  const std::size_t ib = bias != nullptr ? bias->id() : static_cast<std::size_t>(-1);
  return input.graph().record(
      OpKind::Conv2d, std::move(inputs), std::move(out),
      [geo, ix, iw, ib, in_stride, out_stride](Graph& g, std::size_t self) {
        const std::size_t kp = geo.patch(), px = geo.pixels();
        auto gs = g.grad(self);
        const bool want_x = g.needs_grad(ix);
        const bool want_w = g.needs_grad(iw);
        const bool want_b = ib != static_cast<std::size_t>(-1) && g.needs_grad(ib);
        std::vector<double> cols(kp * px);
        std::vector<double> dcols(want_x ? kp * px : 0);
        ConstMapMat wmat(g.value(iw).data().data(), geo.out_ch, kp);
        const double* xdata = g.value(ix).data().data();
        double* gx = want_x ? g.grad_buffer(ix).data() : nullptr;
        double* gw = want_w ? g.grad_buffer(iw).data() : nullptr;
        double* gb = want_b ? g.grad_buffer(ib).data() : nullptr;
        for (std::size_t n = 0; n < geo.batch; ++n) {
          ConstMapMat dy(gs.data() + n * out_stride, geo.out_ch, px);
          if (want_w) {
            im2col(xdata + n * in_stride, geo, cols.data());
            MapMat(gw, geo.out_ch, kp).noalias() +=
                dy * ConstMapMat(cols.data(), kp, px).transpose();
          }
          if (want_x) {
            MapMat(dcols.data(), kp, px).noalias() = wmat.transpose() * dy;
            col2im(dcols.data(), geo, gx + n * in_stride);
          }
          if (want_b) {
            for (std::size_t oc = 0; oc < geo.out_ch; ++oc) gb[oc] += dy.row(oc).sum();
          }
        }
      });
}

}  // namespace

Var conv2d(Var input, Var kernels, Var bias, std::size_t stride, std::size_t pad) {
  return conv2d_impl(input, kernels, &bias, stride, pad);
}

Var conv2d(Var input, Var kernels, std::size_t stride, std::size_t pad) {
  return conv2d_impl(input, kernels, nullptr, stride, pad);
}

// ---------------------------------------------------------------------------
// Spatial ops

Var global_avg_pool(Var input) {
  const Tensor& x = input.value();
  require_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  auto xv = x.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < s; ++p) acc += xv[i * s + p];
    out[i] = acc / static_cast<double>(s);
  }
  const std::size_t ia = input.id();
  return input.graph().record(OpKind::GlobalAvgPool, {ia}, std::move(out),
                              [ia, n, c, s](Graph& g, std::size_t self) {
                                auto gs = g.grad(self);
                                auto gi = g.grad_buffer(ia);
                                const double inv = 1.0 / static_cast<double>(s);
                                for (std::size_t i = 0; i < n * c; ++i)
                                  for (std::size_t p = 0; p < s; ++p) gi[i * s + p] += gs[i] * inv;
                              });
}

Var max_pool2x2(Var input) {
  const Tensor& x = input.value();
  require_rank(x, 4, "max_pool2x2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("max_pool2x2: spatial dims must be even, got " + shape_str(x.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out({n, c, oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  auto xv = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = plane * h * w + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = plane * h * w + (2 * oy + dy) * w + 2 * ox + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = xv[best];
        argmax[o] = best;
      }
    }
  }
  const std::size_t ia = input.id();
  return input.graph().record(OpKind::MaxPool2x2, {ia}, std::move(out),
                              [ia, argmax = std::move(argmax)](Graph& g, std::size_t self) {
                                auto gs = g.grad(self);
                                auto gi = g.grad_buffer(ia);
                                for (std::size_t o = 0; o < gs.size(); ++o) gi[argmax[o]] += gs[o];
                              });
}

Var batch_norm(Var input, Var gamma, Var beta, BatchNormParams& stats, BnMode mode) {
  require_same_graph(input, gamma, "batch_norm");
  require_same_graph(input, beta, "batch_norm");
  const Tensor& x = input.value();
  if (x.rank() < 2) {
    throw ShapeError("batch_norm: input must be N×C×...");
  }
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.numel() / (n * c);
  if (gamma.value().numel() != c || beta.value().numel() != c ||
      stats.running_mean.numel() != c || stats.running_var.numel() != c) {
    throw ShapeError("batch_norm: parameter length must equal channel count " + std::to_string(c));
  }
  const std::size_t count = n * s;
  std::vector<double> mean(c), invstd(c);
  auto xv = x.data();
  if (mode == BnMode::Train) {
    if (count < 2) {
      throw ShapeError("batch_norm: training mode needs more than one value per channel");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < s; ++p) acc += xv[(b * c + ch) * s + p];
      const double mu = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < s; ++p) {
          const double d = xv[(b * c + ch) * s + p] - mu;
          sq += d * d;
        }
      const double var = sq / static_cast<double>(count);
      mean[ch] = mu;
      invstd[ch] = 1.0 / std::sqrt(var + BatchNormParams::kEpsilon);
      const double unbiased = sq / static_cast<double>(count - 1);
      const double m = BatchNormParams::kMomentum;
      stats.running_mean[ch] = (1.0 - m) * stats.running_mean[ch] + m * mu;
      stats.running_var[ch] = (1.0 - m) * stats.running_var[ch] + m * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.running_mean[ch];
      invstd[ch] = 1.0 / std::sqrt(stats.running_var[ch] + BatchNormParams::kEpsilon);
    }
  }

  Tensor out(x.shape());
  auto gv = gamma.value().data();
  auto bv = beta.value().data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < s; ++p) {
        const std::size_t i = (b * c + ch) * s + p;
        out[i] = gv[ch] * (xv[i] - mean[ch]) * invstd[ch] + bv[ch];
      }

  const std::size_t ix = input.id(), ig = gamma.id(), ibeta = beta.id();
  const bool training = mode == BnMode::Train;
  return input.graph().record(
      OpKind::BatchNorm, {ix, ig, ibeta}, std::move(out),
      [ix, ig, ibeta, n, c, s, count, training, mean = std::move(mean),
       invstd = std::move(invstd)](Graph& g, std::size_t self) {
        auto gs = g.grad(self);
        auto xv = g.value(ix).data();
        auto gv = g.value(ig).data();
        const bool want_x = g.needs_grad(ix);
        double* gx = want_x ? g.grad_buffer(ix).data() : nullptr;
        double* gg = g.needs_grad(ig) ? g.grad_buffer(ig).data() : nullptr;
        double* gb = g.needs_grad(ibeta) ? g.grad_buffer(ibeta).data() : nullptr;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t p = 0; p < s; ++p) {
              const std::size_t i = (b * c + ch) * s + p;
              const double xhat = (xv[i] - mean[ch]) * invstd[ch];
              sum_dy += gs[i];
              sum_dy_xhat += gs[i] * xhat;
            }
          if (gg) gg[ch] += sum_dy_xhat;
          if (gb) gb[ch] += sum_dy;
          if (!want_x) continue;
          const double k = gv[ch] * invstd[ch];
          if (training) {
            const double inv_m = 1.0 / static_cast<double>(count);
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t p = 0; p < s; ++p) {
                const std::size_t i = (b * c + ch) * s + p;
                const double xhat = (xv[i] - mean[ch]) * invstd[ch];
                gx[i] += k * (gs[i] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
              }
          } else {
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t p = 0; p < s; ++p) {
                const std::size_t i = (b * c + ch) * s + p;
                gx[i] += k * gs[i];
              }
          }
        }
      });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.graph().record(OpKind::Reshape, {ia}, std::move(out), [ia](Graph& g, std::size_t self) {
    auto gs = g.grad(self);
    auto gi = g.grad_buffer(ia);
    for (std::size_t i = 0; i < gs.size(); ++i) gi[i] += gs[i];
  });
}

Var flatten(Var a) {
  const Tensor& x = a.value();
  if (x.rank() < 1) throw ShapeError("flatten: empty tensor");
  const std::size_t n = x.dim(0);
  return reshape(a, {n, x.numel() / n});
}

// ---------------------------------------------------------------------------
// Probability / reductions

Tensor softmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "softmax_rows");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  Tensor out(logits.shape());
  auto x = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = x[r * cols + c];
      if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
      mx = std::max(mx, v);
    }
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: non-finite input");
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double e = std::exp(x[r * cols + c] - mx);
      out[r * cols + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  return out;
}

Var softmax_rows(Var logits) {
  Tensor out = softmax_rows(logits.value());
  const std::size_t ia = logits.id();
  const std::size_t rows = out.dim(0), cols = out.dim(1);
  return logits.graph().record(OpKind::SoftmaxRows, {ia}, std::move(out),
                               [ia, rows, cols](Graph& g, std::size_t self) {
                                 auto gs = g.grad(self);
                                 auto y = g.value(self).data();
                                 auto gi = g.grad_buffer(ia);
                                 for (std::size_t r = 0; r < rows; ++r) {
                                   double dot = 0.0;
                                   for (std::size_t c = 0; c < cols; ++c)
                                     dot += gs[r * cols + c] * y[r * cols + c];
                                   for (std::size_t c = 0; c < cols; ++c) {
                                     const std::size_t i = r * cols + c;
                                     gi[i] += y[i] * (gs[i] - dot);
                                   }
                                 }
                               });
}

Tensor temperature_rows(const Tensor& probs, double temperature) {
  if (!(temperature > 0.0)) {
    throw ContractError("temperature must be positive");
  }
  require_rank(probs, 2, "temperature_rows");
  const std::size_t rows = probs.dim(0), cols = probs.dim(1);
  const double a = 1.0 / temperature;
  Tensor out(probs.shape());
  auto p = probs.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = p[r * cols + c];
      if (std::isnan(v) || v < 0.0) throw NumericError("temperature_rows: entries must be probabilities");
      const double u = std::pow(v, a);
      out[r * cols + c] = u;
      z += u;
    }
    if (!(z > 0.0) || !std::isfinite(z)) {
      throw NumericError("temperature_rows: row " + std::to_string(r) + " has zero mass");
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  return out;
}

Var temperature_rows(Var probs, double temperature) {
  Tensor out = temperature_rows(probs.value(), temperature);
  const std::size_t ia = probs.id();
  const std::size_t rows = out.dim(0), cols = out.dim(1);
  const double a = 1.0 / temperature;
  return probs.graph().record(
      OpKind::TemperatureRows, {ia}, std::move(out), [ia, rows, cols, a](Graph& g, std::size_t self) {
        auto gs = g.grad(self);
        auto q = g.value(self).data();
        auto p = g.value(ia).data();
        auto gi = g.grad_buffer(ia);
        for (std::size_t r = 0; r < rows; ++r) {
          double z = 0.0, dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            z += std::pow(p[i], a);
            dot += gs[i] * q[i];
          }
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            if (p[i] <= 0.0) continue;
            // dq_i/dp_i path through u_i = p_i^a, with u normalised by z.
            gi[i] += (gs[i] - dot) / z * a * std::pow(p[i], a - 1.0);
          }
        }
      });
}

Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  const std::size_t ia = a.id();
  return a.graph().record(OpKind::Sum, {ia}, Tensor::scalar(acc), [ia](Graph& g, std::size_t self) {
    const double gs = g.grad(self)[0];
    for (double& v : g.grad_buffer(ia)) v += gs;
  });
}

Var mean(Var a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  const double n = static_cast<double>(a.value().numel());
  const std::size_t ia = a.id();
  return a.graph().record(OpKind::Mean, {ia}, Tensor::scalar(acc / n), [ia, n](Graph& g, std::size_t self) {
    const double gs = g.grad(self)[0] / n;
    for (double& v : g.grad_buffer(ia)) v += gs;
  });
}

Var row_sum(Var a) {
  require_rank(a.value(), 2, "row_sum");
  const std::size_t rows = a.value().dim(0), cols = a.value().dim(1);
  Tensor out({rows});
  auto x = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += x[r * cols + c];
    out[r] = acc;
  }
  const std::size_t ia = a.id();
  return a.graph().record(OpKind::RowSum, {ia}, std::move(out), [ia, rows, cols](Graph& g, std::size_t self) {
    auto gs = g.grad(self);
    auto gi = g.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) gi[r * cols + c] += gs[r];
  });
}

}  // namespace lwf

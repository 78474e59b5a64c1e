#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace lwf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles. A tensor that requires grad owns a
// same-shape gradient buffer once something has been accumulated into it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  // Value of a one-element tensor.
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool flag);

  bool has_grad() const { return !grad_.empty(); }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }
  // Adds `delta` into the gradient buffer, allocating it on first use.
  // No-op unless requires_grad() is set.
  void accumulate_grad(std::span<const double> delta);
  void zero_grad();
  void clear_grad() { grad_.clear(); }

  Tensor reshaped(Shape shape) const;
  bool same_values(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::vector<double> grad_;
};

enum class OpKind {
  Constant,
  Parameter,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  AddScalar,
  AddRowBias,
  MatMul,
  Conv2d,
  Relu,
  GlobalAvgPool,
  MaxPool2x2,
  BatchNorm,
  Reshape,
  Log,
  Pow,
  SoftmaxRows,
  TemperatureRows,
  Sum,
  Mean,
  RowSum,
};

const char* op_name(OpKind kind);

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Define-by-run tape. Nodes are appended in evaluation order, so insertion
// order is a topological order and backward() is a single reverse sweep.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Binds a leaf to `param`; backward() accumulates into param.grad() when
  // param.requires_grad() is set. `param` must outlive the graph.
  Var parameter(Tensor& param);

  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  // Gradient of the last backward() loss w.r.t. node `id`; empty if none flowed.
  std::span<const double> grad(std::size_t id) const { return nodes_.at(id).grad; }
  std::size_t backward_visits() const { return backward_visits_; }

  // Op-author interface: append a node whose inputs are existing ids.
  Var record(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward);
  // Gradient buffer of node `id`, allocated (zeroed) on first access.
  std::span<double> grad_buffer(std::size_t id);

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Tensor value;
    std::vector<double> grad;
    bool needs_grad = false;
    Tensor* param = nullptr;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  std::size_t backward_visits_ = 0;
};

enum class BnMode { Train, Eval };

// Learnable scale/shift plus running statistics of one batch-norm layer.
struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  static constexpr double kEpsilon = 1e-5;
  static constexpr double kMomentum = 0.1;

  explicit BatchNormParams(std::size_t channels = 0);
};

// --- elementwise ---
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
// a: B×K, bias: K.
Var add_row_bias(Var a, Var bias);
Var relu(Var a);
Var log(Var a);
Var pow(Var a, double exponent);

// --- linear algebra / convolution ---
Var matmul(Var a, Var b);
// input N×C×H×W (or C×H×W), kernels O×C×k×k, optional bias of length O.
// Cross-correlation, zero padding.
Var conv2d(Var input, Var kernels, Var bias, std::size_t stride, std::size_t pad);
Var conv2d(Var input, Var kernels, std::size_t stride, std::size_t pad);
std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);

// --- spatial ---
Var global_avg_pool(Var input);  // N×C×H×W -> N×C
Var max_pool2x2(Var input);      // N×C×H×W -> N×C×H/2×W/2
Var batch_norm(Var input, Var gamma, Var beta, BatchNormParams& stats, BnMode mode);
Var reshape(Var a, Shape shape);
Var flatten(Var a);  // N×... -> N×rest

// --- reductions / probability ---
Var softmax_rows(Var logits);
// Row-wise p^(1/T) / sum_j p_j^(1/T) on probability rows.
Var temperature_rows(Var probs, double temperature);
Var sum(Var a);
Var mean(Var a);
Var row_sum(Var a);  // B×K -> B

// Direct (graph-free) kernels shared with value-level helpers.
Tensor softmax_rows(const Tensor& logits);
Tensor temperature_rows(const Tensor& probs, double temperature);

}  // namespace lwf

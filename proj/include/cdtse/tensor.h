#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cdtse {

using Shape = std::vector<std::size_t>;

// Guard used by every normalization and division in the library.
inline constexpr double kEps = 1e-8;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string ShapeToString(const Shape& shape);

// Dense row-major array of doubles with an optional gradient buffer.
// Copies share storage; use Clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor Zeros(Shape shape, bool requires_grad = false);
  static Tensor Filled(Shape shape, double value);
  static Tensor Scalar(double value);
  // 1 x n
  static Tensor Row(std::vector<double> values);
  // n x 1
  static Tensor Column(std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  // For rank-2 tensors.
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::span<const double> data() const;
  // Only for leaves (parameters, inputs); ops never mutate their outputs.
  std::span<double> mutable_data();
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates a zero gradient on first access. The gradient is accumulator
  // state, not part of the value, so this is available on const tensors.
  std::span<double> mutable_grad() const;
  void zero_grad();

  Tensor Clone() const;
  // Same values, no gradient tracking.
  Tensor Detach() const;
  bool SameStorage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  const Impl& impl() const;
  Impl& impl();
  std::shared_ptr<Impl> impl_;
};

// Receives the gradient of the recorded op's output.
using BackwardFn = std::function<void(std::span<const double> grad_output)>;

// Tape of recorded operations. Ops are appended in execution order, so the
// tape is topologically sorted; Backward walks it once in reverse.
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }
  // True when an op on these inputs must be taped.
  bool NeedsGrad(std::initializer_list<const Tensor*> inputs) const;
  // Marks `output` as requiring grad and appends the op.
  void Record(std::string_view name, const Tensor& output, BackwardFn backward);
  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(std::size_t i) const { return nodes_[i].name; }

  // Fills d(loss)/d(t) into every tensor on the tape that requires grad.
  // Gradients accumulate into leaves, so call zero_grad between steps.
  void Backward(const Tensor& loss);

 private:
  struct Node {
    std::string name;
    Tensor output;
    BackwardFn backward;
  };
  bool recording_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

inline void backward(Graph& graph, const Tensor& loss) { graph.Backward(loss); }

// ---- differentiable ops ----------------------------------------------------

// x: C_in x T, w: C_out x C_in x K. Cross-correlation with zero padding of
// `padding` samples on both ends.
Tensor Conv1d(Graph& g, const Tensor& x, const Tensor& w, int stride = 1,
              int dilation = 1, int padding = 0);
// x: C_in x T, w: C_in x C_out x K. Output length (T-1)*stride + K.
Tensor ConvTranspose1d(Graph& g, const Tensor& x, const Tensor& w,
                       int stride = 1);
// x: C x T, w: C x K; per-channel dilated convolution.
Tensor DepthwiseConv1d(Graph& g, const Tensor& x, const Tensor& w,
                       int dilation = 1, int padding = 0);

// Binary ops take equal shapes, or an N x 1 `b` repeated across columns.
Tensor Add(Graph& g, const Tensor& a, const Tensor& b);
Tensor Sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor Mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor Sigmoid(Graph& g, const Tensor& x);
Tensor Relu(Graph& g, const Tensor& x);
Tensor Tanh(Graph& g, const Tensor& x);
// alpha: one slope per row (C x 1), or a 1 x 1 shared slope.
Tensor PRelu(Graph& g, const Tensor& x, const Tensor& alpha);

enum class ElementwiseKind { kAdd, kSub, kMul, kSigmoid, kRelu, kTanh, kPRelu };
// Dispatcher over the functions above; `b` carries the second operand or the
// PReLU slope.
Tensor Elementwise(Graph& g, ElementwiseKind kind, const Tensor& a,
                   const Tensor* b = nullptr);

// gain * (x - mean) / sqrt(var + eps) + bias, statistics over all entries.
Tensor GlobalLayerNorm(Graph& g, const Tensor& x, const Tensor& gain,
                       const Tensor& bias, double eps = kEps);

Tensor Sum(Graph& g, const Tensor& x);
// N x T -> N x 1
Tensor MeanOverTime(Graph& g, const Tensor& x);
// Stacks rows of a (R_a x T) above rows of b (R_b x T).
Tensor ConcatRows(Graph& g, const Tensor& a, const Tensor& b);
Tensor SelectRow(Graph& g, const Tensor& x, std::size_t row);
// Trims or zero-pads the column axis to `length`.
Tensor FitLength(Graph& g, const Tensor& x, std::size_t length);
// Columns [begin, begin + length).
Tensor SliceColumns(Graph& g, const Tensor& x, std::size_t begin,
                    std::size_t length);

// ---- gradient checking -----------------------------------------------------

using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;
using MultiScalarFn =
    std::function<Tensor(Graph&, std::span<const Tensor>)>;

// max_i |analytic_i - central_difference_i| / max(|analytic_i|, 1e-8).
// Throws std::runtime_error on a non-finite evaluation.
double GradCheck(const ScalarFn& f, const Tensor& x, double h);
double GradCheck(const MultiScalarFn& f, std::span<const Tensor> xs, double h);

// ---- small helpers ---------------------------------------------------------

double Dot(std::span<const double> a, std::span<const double> b);
bool AllFinite(std::span<const double> values);

}  // namespace cdtse

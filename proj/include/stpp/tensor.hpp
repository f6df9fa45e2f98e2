#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage (like a torch tensor), so a
// parameter captured by several ops is one node in the graph and gradients
// from every use accumulate into the same buffer. Every op whose inputs
// require gradients appends one record to the calling thread's Tape; the
// records are therefore already in topological order and backward() walks
// them in reverse exactly once before clearing the tape.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stpp {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};
using ImplPtr = std::shared_ptr<TensorImpl>;
}  // namespace detail

class Tensor {
 public:
  // Rank-0 tensor holding 0.
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  // 1-D tensor from a literal list.
  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);
  // 2-D tensor from nested literal rows.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // In-place access for owners of parameters (optimisers, projection).
  // Never call while a tape that references this tensor is pending.
  std::span<double> mutable_data() { return impl_->data; }

  double item() const;
  double operator[](std::size_t flat) const { return impl_->data[flat]; }
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->grad.empty(); }
  // Gradient buffer; all zeros if nothing has been accumulated yet.
  std::vector<double> grad() const;
  void zero_grad() { impl_->grad.clear(); }

  // Deep copy that does not require grad and is not connected to the tape.
  Tensor detach() const;
  // Deep copy preserving requires_grad.
  Tensor clone() const;

  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }

  const detail::ImplPtr& impl() const { return impl_; }

 private:
  explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}
  friend Tensor make_result(Shape shape, std::vector<double> data);

  detail::ImplPtr impl_;
};

// Internal factory used by op implementations.
Tensor make_result(Shape shape, std::vector<double> data);

// Per-thread record of differentiable ops.
class Tape {
 public:
  using BackwardFn = std::function<void(const std::vector<double>& out_grad)>;

  struct Node {
    std::string op;
    std::vector<detail::ImplPtr> inputs;
    detail::ImplPtr output;
    BackwardFn backward;
  };

  static Tape& active();

  // Appends a node when any input requires grad; marks output accordingly.
  // Returns true when the node was recorded.
  bool record(std::string op, std::vector<detail::ImplPtr> inputs, const Tensor& output,
              BackwardFn backward);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  bool enabled() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }

 private:
  std::vector<Node> nodes_;
  bool enabled_ = true;
};

// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape::active().enabled()) { Tape::active().set_enabled(false); }
  ~NoGradGuard() { Tape::active().set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Seeds d(loss)/d(loss) = 1, runs every recorded node in reverse order and
// clears the tape. Parameter gradients accumulate (call zero_grad between
// steps). Throws ContractError for a non-scalar loss or an empty tape.
void backward(const Tensor& loss);

// ---------------------------------------------------------------- ops

enum class ElementwiseKind {
  add, sub, mul, div,                                 // binary
  neg, tanh, sigmoid, relu, exp, log, abs, square, sqrt  // unary
};

enum class ReduceKind { max, min, sum, mean };

// Binary kinds need `b`; unary kinds ignore it. Shapes must match exactly or
// one side must hold a single element (scalar broadcast).
Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor* b = nullptr);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor neg(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);

// 2-D product [m,k]x[k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Reduces over `axes` (dropped from the result shape). An empty axes list
// reduces everything to a scalar. max/min route the gradient to the first
// extremal element in row-major order.
Tensor reduce(ReduceKind kind, const Tensor& t, std::vector<std::size_t> axes = {});
Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);

Tensor reshape(const Tensor& t, Shape shape);
// 1-D tensor of t's elements at the given flat indices.
Tensor gather(const Tensor& t, std::span<const std::size_t> flat_indices);
// Rows [begin, end) of a 2-D tensor.
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end);
// Row-wise L2 normalisation of [n,d]; zero rows map to zero rows.
Tensor l2_normalize_rows(const Tensor& t);

// x[n,k] * w[k,m] + b[m].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// NHWC convolution. x: [B,H,W,C]; w: [kernel*kernel*C, out]; b: [out].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t kernel,
              std::size_t stride, std::size_t pad);

// Bilinear resize of an NHWC tensor (half-pixel centres, edge clamped).
Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);

// For each row of t[n,m], the max over columns whose mask entry is nonzero.
// mask has n*m entries. A row without any selected column is a DomainError.
Tensor masked_max_rows(const Tensor& t, std::span<const std::uint8_t> mask);

// Mean over rows of -log softmax(logits[n,c])[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// Row-wise softmax, forward only.
std::vector<double> softmax_rows(const Tensor& logits);

}  // namespace stpp

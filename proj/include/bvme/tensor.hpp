#pragma once

// Dense double-precision tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations on tensors that
// require gradients record their inputs and a backward closure; calling
// backward() on a scalar result walks the recorded graph once in reverse
// topological order and accumulates gradients into every reachable leaf.
//
// Values are stored row-major. Broadcasting is limited to adding a bias
// vector over the leading dimensions of a tensor.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bvme {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first touched by a backward pass
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Direct write access; intended for leaves (initialization, optimizer steps).
  std::span<double> mutable_values();

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();

  double item() const;
  const char* op_name() const;

  // Identity of the underlying storage; stable for the lifetime of the tensor.
  const void* id() const { return node_.get(); }

  // Copy of the values with no graph history.
  Tensor detach() const;
  // Deep copy into a fresh leaf, preserving requires_grad (gradient is zeroed).
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// ---- primitives -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k] x [k,n]
Tensor bmm(const Tensor& a, const Tensor& b);             // [g,m,k] x [g,k,n]
Tensor transpose(const Tensor& a);                        // swaps the last two dims
Tensor add(const Tensor& a, const Tensor& b);             // same shape, or bias over last dim
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);             // elementwise
Tensor mul_scalar(const Tensor& a, const Tensor& s);      // s has one element
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor elu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_last(const Tensor& a);
Tensor max_last(const Tensor& a);

Tensor concat_last(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_last(const Tensor& a, std::size_t start, std::size_t length);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor reshape(const Tensor& a, Shape shape);
Tensor gather_last(const Tensor& a, std::span<const std::size_t> index);

// Softmax over the last dim restricted to entries with mask == 1; masked entries are 0.
Tensor masked_softmax(const Tensor& scores, std::span<const double> mask);
// Divides each last-dim row by its sum.
Tensor row_normalize(const Tensor& a);

// Generic dispatch over the primitive set, for callers that build graphs from data.
enum class OpKind {
  kMatMul,
  kAdd,
  kMul,
  kRelu,
  kTanh,
  kSigmoid,
  kExp,
  kLog,
  kClamp,
  kSum,
  kMean,
  kConcat,
  kSlice,
  kSquare,
};

struct OpAttrs {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t start = 0;
  std::size_t length = 0;
};

Tensor apply(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

// ---- differentiation --------------------------------------------------------

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from loss.
void backward(const Tensor& loss);
void zero_grads(std::span<const Tensor> params);

}  // namespace bvme

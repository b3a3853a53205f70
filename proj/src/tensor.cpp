#include "bvme/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <cblas.h>
#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "bvme/errors.hpp"

namespace bvme {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

thread_local bool g_grad_enabled = true;

[[noreturn]] void dim_error(const char* op, const std::string& detail) {
  throw DimensionError(std::string(op) + ": " + detail);
}

[[noreturn]] void dim_error(const char* op, const Shape& a, const Shape& b) {
  dim_error(op, "shapes " + shape_str(a) + " and " + shape_str(b) + " do not conform");
}

// Gradient buffer of an input, allocated on first use; empty span if the
// input does not take gradients.
std::span<double> grad_of(Node& n) {
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::vector<NodePtr> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  node->leaf = false;
  bool any = false;
  for (const auto& in : inputs) any = any || in->requires_grad;
  if (any && g_grad_enabled) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(fn);
  }
  return Tensor(std::move(node));
}

const NodePtr& checked(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  return t.node();
}

// Products below this many multiply-adds use the plain loops; larger ones go
// through single-threaded BLAS.
constexpr std::size_t kBlasMin = 4096;

void ensure_single_thread_blas() {
  static const bool once = [] {
    openblas_set_num_threads(1);
#ifdef __GLIBC__
    // Keep large tensor buffers on the heap instead of fresh mappings per allocation.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    return true;
  }();
  (void)once;
}

int blas_int(std::size_t v) { return static_cast<int>(v); }

// C[m,n] += A[m,k] B[k,n]
void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
  if (m * k * n >= kBlasMin) {
    ensure_single_thread_blas();
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(m), blas_int(n), blas_int(k), 1.0, a,
                blas_int(k), b, blas_int(n), 1.0, c, blas_int(n));
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,k] += A[m,n] B[k,n]^T
void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
           std::size_t k) {
  if (m * k * n >= kBlasMin) {
    ensure_single_thread_blas();
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(m), blas_int(k), blas_int(n), 1.0, a,
                blas_int(n), b, blas_int(n), 1.0, c, blas_int(k));
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += ai[j] * bp[j];
      ci[p] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T B[m,n]
void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
  if (m * k * n >= kBlasMin) {
    ensure_single_thread_blas();
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(k), blas_int(n), blas_int(m), 1.0, a,
                blas_int(k), b, blas_int(n), 1.0, c, blas_int(n));
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto& an = checked(a, op);
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(an->value[i]);
  return make_result(op, an->shape, std::move(out), {an}, [deriv](Node& self) {
    Node& in = *self.inputs[0];
    auto g = grad_of(in);
    if (g.empty()) return;
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * deriv(in.value[i], self.value[i]);
  });
}

Shape without_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

}  // namespace

// ---- Tensor -------------------------------------------------------------------

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel_of(shape) != values.size())
    throw DimensionError("tensor: shape " + shape_str(shape) + " needs " +
                         std::to_string(numel_of(shape)) + " values, got " +
                         std::to_string(values.size()));
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
  if (requires_grad) node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value) {
  const auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

const Shape& Tensor::shape() const { return checked(*this, "shape")->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) dim_error("dim", "axis " + std::to_string(axis) + " of " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(*this, "numel")->value.size(); }

std::span<const double> Tensor::values() const { return checked(*this, "values")->value; }

std::span<double> Tensor::mutable_values() { return checked(*this, "values")->value; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return checked(*this, "is_leaf")->leaf; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(*this, "grad")->grad; }

std::span<double> Tensor::mutable_grad() { return checked(*this, "grad")->grad; }

double Tensor::item() const {
  const auto& n = checked(*this, "item");
  if (n->value.size() != 1)
    throw ContractError("item: tensor of shape " + shape_str(n->shape) + " is not a scalar");
  return n->value[0];
}

const char* Tensor::op_name() const { return checked(*this, "op_name")->op; }

Tensor Tensor::detach() const {
  const auto& n = checked(*this, "detach");
  return Tensor(n->shape, n->value);
}

Tensor Tensor::clone() const {
  const auto& n = checked(*this, "clone");
  return Tensor(n->shape, n->value, n->requires_grad);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

// ---- linear algebra -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& an = checked(a, "matmul");
  const auto& bn = checked(b, "matmul");
  if (an->shape.size() != 2 || bn->shape.size() != 2 || an->shape[1] != bn->shape[0])
    dim_error("matmul", an->shape, bn->shape);
  const std::size_t m = an->shape[0], k = an->shape[1], n = bn->shape[1];
  std::vector<double> out(m * n, 0.0);
  mm_nn(an->value.data(), bn->value.data(), out.data(), m, k, n);
  return make_result("matmul", {m, n}, std::move(out), {an, bn}, [m, k, n](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    if (auto ga = grad_of(A); !ga.empty())
      mm_nt(self.grad.data(), B.value.data(), ga.data(), m, n, k);
    if (auto gb = grad_of(B); !gb.empty())
      mm_tn(A.value.data(), self.grad.data(), gb.data(), m, k, n);
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  const auto& an = checked(a, "bmm");
  const auto& bn = checked(b, "bmm");
  if (an->shape.size() != 3 || bn->shape.size() != 3 || an->shape[0] != bn->shape[0] ||
      an->shape[2] != bn->shape[1])
    dim_error("bmm", an->shape, bn->shape);
  const std::size_t g = an->shape[0], m = an->shape[1], k = an->shape[2], n = bn->shape[2];
  std::vector<double> out(g * m * n, 0.0);
  for (std::size_t i = 0; i < g; ++i)
    mm_nn(an->value.data() + i * m * k, bn->value.data() + i * k * n, out.data() + i * m * n, m,
          k, n);
  return make_result("bmm", {g, m, n}, std::move(out), {an, bn}, [g, m, k, n](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    auto ga = grad_of(A);
    auto gb = grad_of(B);
    for (std::size_t i = 0; i < g; ++i) {
      const double* gc = self.grad.data() + i * m * n;
      if (!ga.empty()) mm_nt(gc, B.value.data() + i * k * n, ga.data() + i * m * k, m, n, k);
      if (!gb.empty()) mm_tn(A.value.data() + i * m * k, gc, gb.data() + i * k * n, m, k, n);
    }
  });
}

Tensor transpose(const Tensor& a) {
  const auto& an = checked(a, "transpose");
  if (an->shape.size() < 2) dim_error("transpose", "needs rank >= 2, got " + shape_str(an->shape));
  Shape s = an->shape;
  const std::size_t r = s[s.size() - 2], c = s[s.size() - 1];
  const std::size_t groups = an->value.size() / (r * c);
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  std::vector<double> out(an->value.size());
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[g * r * c + j * r + i] = an->value[g * r * c + i * c + j];
  return make_result("transpose", std::move(s), std::move(out), {an}, [groups, r, c](Node& self) {
    auto ga = grad_of(*self.inputs[0]);
    if (ga.empty()) return;
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[g * r * c + i * c + j] += self.grad[g * r * c + j * r + i];
  });
}

// ---- elementwise ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const auto& an = checked(a, "add");
  const auto& bn = checked(b, "add");
  if (an->shape == bn->shape) {
    std::vector<double> out(an->value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] + bn->value[i];
    return make_result("add", an->shape, std::move(out), {an, bn}, [](Node& self) {
      for (int k = 0; k < 2; ++k) {
        auto g = grad_of(*self.inputs[k]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    });
  }
  // bias broadcast over leading dims
  if (bn->shape.size() != 1 || an->shape.empty() || an->shape.back() != bn->shape[0])
    dim_error("add", an->shape, bn->shape);
  const std::size_t width = bn->shape[0];
  std::vector<double> out(an->value.size());
  for (std::size_t r = 0; r < out.size(); r += width)
    for (std::size_t j = 0; j < width; ++j) out[r + j] = an->value[r + j] + bn->value[j];
  return make_result("add", an->shape, std::move(out), {an, bn}, [width](Node& self) {
    auto ga = grad_of(*self.inputs[0]);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    auto gb = grad_of(*self.inputs[1]);
    if (gb.empty()) return;
    for (std::size_t r = 0; r < self.grad.size(); r += width)
      for (std::size_t j = 0; j < width; ++j) gb[j] += self.grad[r + j];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto& an = checked(a, "sub");
  const auto& bn = checked(b, "sub");
  if (an->shape != bn->shape) dim_error("sub", an->shape, bn->shape);
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] - bn->value[i];
  return make_result("sub", an->shape, std::move(out), {an, bn}, [](Node& self) {
    auto ga = grad_of(*self.inputs[0]);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    auto gb = grad_of(*self.inputs[1]);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto& an = checked(a, "mul");
  const auto& bn = checked(b, "mul");
  if (an->shape != bn->shape) dim_error("mul", an->shape, bn->shape);
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] * bn->value[i];
  return make_result("mul", an->shape, std::move(out), {an, bn}, [](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    auto ga = grad_of(A);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * B.value[i];
    auto gb = grad_of(B);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * A.value[i];
  });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  const auto& an = checked(a, "mul_scalar");
  const auto& sn = checked(s, "mul_scalar");
  if (sn->value.size() != 1) dim_error("mul_scalar", an->shape, sn->shape);
  const double sv = sn->value[0];
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] * sv;
  return make_result("mul_scalar", an->shape, std::move(out), {an, sn}, [sv](Node& self) {
    Node& A = *self.inputs[0];
    auto ga = grad_of(A);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * sv;
    auto gs = grad_of(*self.inputs[1]);
    if (gs.empty()) return;
    double acc = 0.0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * A.value[i];
    gs[0] += acc;
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary("add_scalar", a, [offset](double x) { return x + offset; },
               [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a,
               [](double x) {
                 if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
                 const double e = std::exp(x);
                 return e / (1.0 + e);
               },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : checked(a, "log")->value)
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  return unary("log", a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
  return unary("abs", a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor elu(const Tensor& a) {
  return unary("elu", a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
               [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

// ---- reductions -----------------------------------------------------------------

Tensor sum(const Tensor& a) {
  const auto& an = checked(a, "sum");
  double acc = 0.0;
  for (double v : an->value) acc += v;
  return make_result("sum", {}, {acc}, {an}, [](Node& self) {
    auto g = grad_of(*self.inputs[0]);
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const auto& an = checked(a, "mean");
  if (an->value.empty()) throw ContractError("mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(an->value.size());
  double acc = 0.0;
  for (double v : an->value) acc += v;
  return make_result("mean", {}, {acc * inv}, {an}, [inv](Node& self) {
    auto g = grad_of(*self.inputs[0]);
    for (double& v : g) v += self.grad[0] * inv;
  });
}

Tensor sum_last(const Tensor& a) {
  const auto& an = checked(a, "sum_last");
  if (an->shape.empty()) dim_error("sum_last", "needs rank >= 1");
  const std::size_t w = an->shape.back();
  const std::size_t rows = w == 0 ? 0 : an->value.size() / w;
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r] += an->value[r * w + j];
  return make_result("sum_last", without_last(an->shape), std::move(out), {an}, [w](Node& self) {
    auto g = grad_of(*self.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i / w];
  });
}

Tensor max_last(const Tensor& a) {
  const auto& an = checked(a, "max_last");
  if (an->shape.empty() || an->shape.back() == 0) dim_error("max_last", "needs non-empty last dim");
  const std::size_t w = an->shape.back();
  const std::size_t rows = an->value.size() / w;
  std::vector<double> out(rows);
  std::vector<std::size_t> arg(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = an->value.data() + r * w;
    arg[r] = static_cast<std::size_t>(std::max_element(row, row + w) - row);
    out[r] = row[arg[r]];
  }
  return make_result("max_last", without_last(an->shape), std::move(out), {an},
                     [w, arg = std::move(arg)](Node& self) {
                       auto g = grad_of(*self.inputs[0]);
                       if (g.empty()) return;
                       for (std::size_t r = 0; r < arg.size(); ++r) g[r * w + arg[r]] += self.grad[r];
                     });
}

// ---- structure --------------------------------------------------------------------

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> widths;
  const Shape lead = without_last(checked(parts[0], "concat")->shape);
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& n = checked(p, "concat");
    if (n->shape.empty() || without_last(n->shape) != lead)
      dim_error("concat", parts[0].shape(), n->shape);
    nodes.push_back(n);
    widths.push_back(n->shape.back());
    total += n->shape.back();
  }
  const std::size_t rows = numel_of(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(nodes[k]->value.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  Shape s = lead;
  s.push_back(total);
  return make_result("concat", std::move(s), std::move(out), std::move(nodes),
                     [widths, rows, total](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         auto g = grad_of(*self.inputs[k]);
                         if (!g.empty())
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t j = 0; j < widths[k]; ++j)
                               g[r * widths[k] + j] += self.grad[r * total + off + j];
                         off += widths[k];
                       }
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  std::vector<NodePtr> nodes;
  const Shape& first = checked(parts[0], "concat_rows")->shape;
  if (first.empty()) dim_error("concat_rows", "needs rank >= 1");
  const Shape tail(first.begin() + 1, first.end());
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    const auto& n = checked(p, "concat_rows");
    if (n->shape.empty() || Shape(n->shape.begin() + 1, n->shape.end()) != tail)
      dim_error("concat_rows", first, n->shape);
    nodes.push_back(n);
    rows += n->shape[0];
    out.insert(out.end(), n->value.begin(), n->value.end());
  }
  Shape s = tail;
  s.insert(s.begin(), rows);
  return make_result("concat_rows", std::move(s), std::move(out), std::move(nodes), [](Node& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      auto g = grad_of(*in);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      off += in->value.size();
    }
  });
}

Tensor slice_last(const Tensor& a, std::size_t start, std::size_t length) {
  const auto& an = checked(a, "slice");
  if (an->shape.empty() || start + length > an->shape.back())
    dim_error("slice", "range [" + std::to_string(start) + "," + std::to_string(start + length) +
                           ") outside last dim of " + shape_str(an->shape));
  const std::size_t w = an->shape.back();
  const std::size_t rows = w == 0 ? 0 : an->value.size() / w;
  std::vector<double> out(rows * length);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(an->value.data() + r * w + start, length, out.data() + r * length);
  Shape s = an->shape;
  s.back() = length;
  return make_result("slice", std::move(s), std::move(out), {an}, [w, start, length, rows](Node& self) {
    auto g = grad_of(*self.inputs[0]);
    if (g.empty()) return;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < length; ++j) g[r * w + start + j] += self.grad[r * length + j];
  });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  const auto& an = checked(a, "slice_rows");
  if (an->shape.empty() || start + count > an->shape[0])
    dim_error("slice_rows", "rows [" + std::to_string(start) + "," + std::to_string(start + count) +
                                ") outside " + shape_str(an->shape));
  const std::size_t stride = an->shape[0] == 0 ? 0 : an->value.size() / an->shape[0];
  std::vector<double> out(an->value.begin() + static_cast<std::ptrdiff_t>(start * stride),
                          an->value.begin() + static_cast<std::ptrdiff_t>((start + count) * stride));
  Shape s = an->shape;
  s[0] = count;
  const std::size_t off = start * stride;
  return make_result("slice_rows", std::move(s), std::move(out), {an}, [off](Node& self) {
    auto g = grad_of(*self.inputs[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  const auto& an = checked(a, "reshape");
  if (numel_of(shape) != an->value.size()) dim_error("reshape", an->shape, shape);
  return make_result("reshape", std::move(shape), an->value, {an}, [](Node& self) {
    auto g = grad_of(*self.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor gather_last(const Tensor& a, std::span<const std::size_t> index) {
  const auto& an = checked(a, "gather");
  if (an->shape.size() != 2 || an->shape[0] != index.size())
    dim_error("gather", "tensor " + shape_str(an->shape) + " with " + std::to_string(index.size()) +
                            " indices");
  const std::size_t w = an->shape[1];
  std::vector<double> out(index.size());
  std::vector<std::size_t> idx(index.begin(), index.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= w) dim_error("gather", "index " + std::to_string(idx[r]) + " >= " + std::to_string(w));
    out[r] = an->value[r * w + idx[r]];
  }
  const std::size_t rows = idx.size();
  return make_result("gather", {rows}, std::move(out), {an}, [w, idx = std::move(idx)](Node& self) {
    auto g = grad_of(*self.inputs[0]);
    if (g.empty()) return;
    for (std::size_t r = 0; r < idx.size(); ++r) g[r * w + idx[r]] += self.grad[r];
  });
}

Tensor masked_softmax(const Tensor& scores, std::span<const double> mask) {
  const auto& sn = checked(scores, "masked_softmax");
  if (sn->shape.empty() || mask.size() != sn->value.size())
    dim_error("masked_softmax", "mask of " + std::to_string(mask.size()) + " entries for " +
                                    shape_str(sn->shape));
  const std::size_t w = sn->shape.back();
  const std::size_t rows = w == 0 ? 0 : sn->value.size() / w;
  std::vector<double> out(sn->value.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = sn->value.data() + r * w;
    const double* m = mask.data() + r * w;
    double hi = -INFINITY;
    for (std::size_t j = 0; j < w; ++j)
      if (m[j] != 0.0) hi = std::max(hi, x[j]);
    if (hi == -INFINITY) throw ContractError("masked_softmax: row " + std::to_string(r) + " fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < w; ++j)
      if (m[j] != 0.0) z += (out[r * w + j] = std::exp(x[j] - hi));
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] /= z;
  }
  return make_result("masked_softmax", sn->shape, std::move(out), {sn}, [w, rows](Node& self) {
    auto g = grad_of(*self.inputs[0]);
    if (g.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * w;
      const double* gy = self.grad.data() + r * w;
      double dot = 0.0;
      for (std::size_t j = 0; j < w; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < w; ++j) g[r * w + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor row_normalize(const Tensor& a) {
  const auto& an = checked(a, "row_normalize");
  if (an->shape.empty()) dim_error("row_normalize", "needs rank >= 1");
  const std::size_t w = an->shape.back();
  const std::size_t rows = w == 0 ? 0 : an->value.size() / w;
  std::vector<double> sums(rows, 0.0);
  std::vector<double> out(an->value.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < w; ++j) sums[r] += an->value[r * w + j];
    if (!(sums[r] > 0.0)) throw DomainError("row_normalize: row " + std::to_string(r) + " sums to " +
                                            std::to_string(sums[r]));
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = an->value[r * w + j] / sums[r];
  }
  return make_result("row_normalize", an->shape, std::move(out), {an},
                     [w, rows, sums = std::move(sums)](Node& self) {
                       auto g = grad_of(*self.inputs[0]);
                       if (g.empty()) return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = self.value.data() + r * w;
                         const double* gy = self.grad.data() + r * w;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < w; ++j) dot += y[j] * gy[j];
                         for (std::size_t j = 0; j < w; ++j) g[r * w + j] += (gy[j] - dot) / sums[r];
                       }
                     });
}

Tensor apply(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs) {
  auto need = [&](std::size_t n, const char* op) {
    if (inputs.size() != n)
      throw ContractError(std::string(op) + ": expected " + std::to_string(n) + " inputs, got " +
                          std::to_string(inputs.size()));
  };
  switch (kind) {
    case OpKind::kMatMul: need(2, "matmul"); return matmul(inputs[0], inputs[1]);
    case OpKind::kAdd: need(2, "add"); return add(inputs[0], inputs[1]);
    case OpKind::kMul: need(2, "mul"); return mul(inputs[0], inputs[1]);
    case OpKind::kRelu: need(1, "relu"); return relu(inputs[0]);
    case OpKind::kTanh: need(1, "tanh"); return tanh(inputs[0]);
    case OpKind::kSigmoid: need(1, "sigmoid"); return sigmoid(inputs[0]);
    case OpKind::kExp: need(1, "exp"); return exp(inputs[0]);
    case OpKind::kLog: need(1, "log"); return log(inputs[0]);
    case OpKind::kClamp: need(1, "clamp"); return clamp(inputs[0], attrs.lo, attrs.hi);
    case OpKind::kSum: need(1, "sum"); return sum(inputs[0]);
    case OpKind::kMean: need(1, "mean"); return mean(inputs[0]);
    case OpKind::kConcat: return concat_last(std::vector<Tensor>(inputs.begin(), inputs.end()));
    case OpKind::kSlice: need(1, "slice"); return slice_last(inputs[0], attrs.start, attrs.length);
    case OpKind::kSquare: need(1, "square"); return square(inputs[0]);
  }
  throw ContractError("apply: unknown operation kind");
}

// ---- backward ---------------------------------------------------------------------

void backward(const Tensor& loss) {
  const auto& root = checked(loss, "backward");
  if (root->value.size() != 1)
    throw ContractError("backward: loss of shape " + shape_str(root->shape) + " is not a scalar");
  if (!root->requires_grad) throw ContractError("backward: loss is not attached to a graph");

  // Iterative post-order DFS; each node enters the order exactly once.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are allocated on first contribution and released as
  // soon as the node has pushed them to its inputs.
  for (Node* n : order)
    if (!n->leaf) std::vector<double>().swap(n->grad);
  grad_of(*root)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->leaf) continue;
    if (!n->grad.empty() && n->backward_fn) n->backward_fn(*n);
    std::vector<double>().swap(n->grad);
  }
}

void zero_grads(std::span<const Tensor> params) {
  for (const auto& p : params) {
    auto& n = checked(p, "zero_grads");
    std::fill(n->grad.begin(), n->grad.end(), 0.0);
  }
}

}  // namespace bvme

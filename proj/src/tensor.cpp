#include "stpp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "stpp/errors.hpp"

namespace stpp {

using detail::ImplPtr;
using detail::TensorImpl;

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor() : Tensor(Shape{}, 0.0) {}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
  return Tensor(Shape{values.size()}, std::vector<double>(values), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows,
                      bool requires_grad) {
  const std::size_t n = rows.size();
  const std::size_t m = n ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(n * m);
  for (const auto& row : rows) {
    if (row.size() != m) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{n, m}, std::move(data), requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch for " + shape_to_string(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= impl_->shape[axis]) throw DimensionError("index out of range");
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

std::vector<double> Tensor::grad() const {
  if (has_grad()) return impl_->grad;
  return std::vector<double>(size(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data, impl_->requires_grad); }

Tensor make_result(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

// ---------------------------------------------------------------- Tape

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

bool Tape::record(std::string op, std::vector<ImplPtr> inputs, const Tensor& output,
                  BackwardFn backward) {
  if (!enabled_) return false;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const ImplPtr& p) { return p && p->requires_grad; });
  if (!any) return false;
  output.impl()->requires_grad = true;
  nodes_.push_back(Node{std::move(op), std::move(inputs), output.impl(), std::move(backward)});
  return true;
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  Tape& tape = Tape::active();
  if (tape.size() == 0) throw ContractError("backward() called with an empty tape");
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on a path to the loss
    it->backward(it->output->grad);
  }
  tape.clear();
}

// ---------------------------------------------------------------- helpers

namespace {

std::vector<double>* grad_of(const ImplPtr& p) {
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return &p->grad;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_to_string(t.shape()));
  }
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += a[m,n] * b[k,n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      crow[p] += s;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

bool is_binary(ElementwiseKind kind) {
  return kind == ElementwiseKind::add || kind == ElementwiseKind::sub ||
         kind == ElementwiseKind::mul || kind == ElementwiseKind::div;
}

const char* kind_name(ElementwiseKind kind) {
  switch (kind) {
    case ElementwiseKind::add: return "add";
    case ElementwiseKind::sub: return "sub";
    case ElementwiseKind::mul: return "mul";
    case ElementwiseKind::div: return "div";
    case ElementwiseKind::neg: return "neg";
    case ElementwiseKind::tanh: return "tanh";
    case ElementwiseKind::sigmoid: return "sigmoid";
    case ElementwiseKind::relu: return "relu";
    case ElementwiseKind::exp: return "exp";
    case ElementwiseKind::log: return "log";
    case ElementwiseKind::abs: return "abs";
    case ElementwiseKind::square: return "square";
    case ElementwiseKind::sqrt: return "sqrt";
  }
  return "?";
}

Tensor unary(ElementwiseKind kind, const Tensor& a) {
  const auto& x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    switch (kind) {
      case ElementwiseKind::neg: y[i] = -v; break;
      case ElementwiseKind::tanh: y[i] = std::tanh(v); break;
      case ElementwiseKind::sigmoid: y[i] = 1.0 / (1.0 + std::exp(-v)); break;
      case ElementwiseKind::relu: y[i] = v > 0.0 || std::isnan(v) ? v : 0.0; break;
      case ElementwiseKind::exp: y[i] = std::exp(v); break;
      case ElementwiseKind::log: y[i] = std::log(v); break;
      case ElementwiseKind::abs: y[i] = std::fabs(v); break;
      case ElementwiseKind::square: y[i] = v * v; break;
      case ElementwiseKind::sqrt: y[i] = std::sqrt(v); break;
      default: throw ContractError("not a unary kind");
    }
  }
  Tensor out = make_result(a.shape(), std::move(y));
  ImplPtr ai = a.impl();
  ImplPtr oi = out.impl();
  Tape::active().record(kind_name(kind), {ai}, out, [kind, ai, oi](const std::vector<double>& g) {
    auto* ga = grad_of(ai);
    if (!ga) return;
    const auto& x = ai->data;
    const auto& y = oi->data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      switch (kind) {
        case ElementwiseKind::neg: d = -1.0; break;
        case ElementwiseKind::tanh: d = 1.0 - y[i] * y[i]; break;
        case ElementwiseKind::sigmoid: d = y[i] * (1.0 - y[i]); break;
        case ElementwiseKind::relu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
        case ElementwiseKind::exp: d = y[i]; break;
        case ElementwiseKind::log: d = 1.0 / x[i]; break;
        case ElementwiseKind::abs: d = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0); break;
        case ElementwiseKind::square: d = 2.0 * x[i]; break;
        case ElementwiseKind::sqrt: d = 0.5 / y[i]; break;
        default: break;
      }
      (*ga)[i] += g[i] * d;
    }
  });
  return out;
}

Tensor binary(ElementwiseKind kind, const Tensor& a, const Tensor& b) {
  const std::size_t na = a.size();
  const std::size_t nb = b.size();
  Shape shape;
  if (a.shape() == b.shape()) {
    shape = a.shape();
  } else if (nb == 1) {
    shape = a.shape();
  } else if (na == 1) {
    shape = b.shape();
  } else {
    throw DimensionError(std::string(kind_name(kind)) + ": shape mismatch " +
                         shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  const std::size_t n = shape_numel(shape);
  const auto& x = a.data();
  const auto& z = b.data();
  const bool sa = na == 1 && n != 1;
  const bool sb = nb == 1 && n != 1;
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = x[sa ? 0 : i];
    const double v = z[sb ? 0 : i];
    switch (kind) {
      case ElementwiseKind::add: y[i] = u + v; break;
      case ElementwiseKind::sub: y[i] = u - v; break;
      case ElementwiseKind::mul: y[i] = u * v; break;
      case ElementwiseKind::div: y[i] = u / v; break;
      default: throw ContractError("not a binary kind");
    }
  }
  Tensor out = make_result(std::move(shape), std::move(y));
  ImplPtr ai = a.impl();
  ImplPtr bi = b.impl();
  Tape::active().record(kind_name(kind), {ai, bi}, out,
                        [kind, ai, bi, sa, sb](const std::vector<double>& g) {
    auto* ga = grad_of(ai);
    auto* gb = grad_of(bi);
    const auto& x = ai->data;
    const auto& z = bi->data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t ia = sa ? 0 : i;
      const std::size_t ib = sb ? 0 : i;
      double da = 0.0;
      double db = 0.0;
      switch (kind) {
        case ElementwiseKind::add: da = 1.0; db = 1.0; break;
        case ElementwiseKind::sub: da = 1.0; db = -1.0; break;
        case ElementwiseKind::mul: da = z[ib]; db = x[ia]; break;
        case ElementwiseKind::div:
          da = 1.0 / z[ib];
          db = -x[ia] / (z[ib] * z[ib]);
          break;
        default: break;
      }
      if (ga) (*ga)[ia] += g[i] * da;
      if (gb) (*gb)[ib] += g[i] * db;
    }
  });
  return out;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor* b) {
  if (is_binary(kind)) {
    if (!b) throw ContractError(std::string(kind_name(kind)) + " needs two operands");
    return binary(kind, a, *b);
  }
  return unary(kind, a);
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(ElementwiseKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(ElementwiseKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(ElementwiseKind::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(ElementwiseKind::div, a, b); }
Tensor add(const Tensor& a, double b) { return binary(ElementwiseKind::add, a, Tensor::scalar(b)); }
Tensor mul(const Tensor& a, double b) { return binary(ElementwiseKind::mul, a, Tensor::scalar(b)); }
Tensor neg(const Tensor& a) { return unary(ElementwiseKind::neg, a); }
Tensor tanh(const Tensor& a) { return unary(ElementwiseKind::tanh, a); }
Tensor sigmoid(const Tensor& a) { return unary(ElementwiseKind::sigmoid, a); }
Tensor relu(const Tensor& a) { return unary(ElementwiseKind::relu, a); }
Tensor exp(const Tensor& a) { return unary(ElementwiseKind::exp, a); }
Tensor log(const Tensor& a) { return unary(ElementwiseKind::log, a); }
Tensor abs(const Tensor& a) { return unary(ElementwiseKind::abs, a); }
Tensor square(const Tensor& a) { return unary(ElementwiseKind::square, a); }
Tensor sqrt(const Tensor& a) { return unary(ElementwiseKind::sqrt, a); }

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), c.data(), m, k, n);
  Tensor out = make_result(Shape{m, n}, std::move(c));
  ImplPtr ai = a.impl();
  ImplPtr bi = b.impl();
  Tape::active().record("matmul", {ai, bi}, out, [ai, bi, m, k, n](const std::vector<double>& g) {
    if (auto* ga = grad_of(ai)) gemm_nt(g.data(), bi->data.data(), ga->data(), m, n, k);
    if (auto* gb = grad_of(bi)) gemm_tn(ai->data.data(), g.data(), gb->data(), m, k, n);
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto& x = a.data();
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x[i * n + j];
  Tensor out = make_result(Shape{n, m}, std::move(y));
  ImplPtr ai = a.impl();
  Tape::active().record("transpose", {ai}, out, [ai, m, n](const std::vector<double>& g) {
    auto* ga = grad_of(ai);
    if (!ga) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += g[j * m + i];
  });
  return out;
}

// ---------------------------------------------------------------- reductions

Tensor reduce(ReduceKind kind, const Tensor& t, std::vector<std::size_t> axes) {
  const Shape& shape = t.shape();
  const std::size_t rank = shape.size();
  if (axes.empty()) {
    axes.resize(rank);
    std::iota(axes.begin(), axes.end(), std::size_t{0});
  }
  std::vector<bool> reduced(rank, false);
  for (std::size_t ax : axes) {
    if (ax >= rank || reduced[ax]) {
      throw DimensionError("reduce: invalid axis " + std::to_string(ax) + " for shape " +
                           shape_to_string(shape));
    }
    reduced[ax] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t ax = 0; ax < rank; ++ax) {
    if (reduced[ax]) {
      if (shape[ax] == 0) throw DomainError("reduce: empty reduction axis in " + shape_to_string(shape));
      count *= shape[ax];
    } else {
      out_shape.push_back(shape[ax]);
    }
  }
  if (t.size() == 0) throw DomainError("reduce: empty tensor");

  // Map every input element to its output slot by walking a multi-index.
  const std::size_t n_in = t.size();
  const std::size_t n_out = shape_numel(out_shape);
  std::vector<std::size_t> out_stride(rank, 0);
  {
    std::size_t s = 1;
    for (std::size_t ax = rank; ax-- > 0;) {
      if (!reduced[ax]) {
        out_stride[ax] = s;
        s *= shape[ax];
      }
    }
  }
  std::vector<std::size_t> slot(n_in);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t o = 0;
    for (std::size_t i = 0; i < n_in; ++i) {
      slot[i] = o;
      for (std::size_t ax = rank; ax-- > 0;) {
        ++idx[ax];
        o += out_stride[ax];
        if (idx[ax] < shape[ax]) break;
        o -= out_stride[ax] * shape[ax];
        idx[ax] = 0;
      }
    }
  }

  const auto& x = t.data();
  std::vector<double> y(n_out, 0.0);
  std::vector<std::size_t> arg;
  if (kind == ReduceKind::max || kind == ReduceKind::min) {
    const std::size_t unset = n_in;
    arg.assign(n_out, unset);
    for (std::size_t i = 0; i < n_in; ++i) {
      const std::size_t o = slot[i];
      // NaN wins so that it propagates
      const bool better = arg[o] == unset || (std::isnan(x[i]) && !std::isnan(y[o])) ||
                          (kind == ReduceKind::max ? x[i] > y[o] : x[i] < y[o]);
      if (better) {
        y[o] = x[i];
        arg[o] = i;
      }
    }
  } else {
    for (std::size_t i = 0; i < n_in; ++i) y[slot[i]] += x[i];
    if (kind == ReduceKind::mean)
      for (double& v : y) v /= static_cast<double>(count);
  }

  Tensor out = make_result(std::move(out_shape), std::move(y));
  ImplPtr ti = t.impl();
  const double scale = kind == ReduceKind::mean ? 1.0 / static_cast<double>(count) : 1.0;
  Tape::active().record("reduce", {ti}, out,
                        [ti, kind, slot = std::move(slot), arg = std::move(arg),
                         scale](const std::vector<double>& g) {
    auto* gt = grad_of(ti);
    if (!gt) return;
    if (kind == ReduceKind::max || kind == ReduceKind::min) {
      for (std::size_t o = 0; o < g.size(); ++o) (*gt)[arg[o]] += g[o];
    } else {
      for (std::size_t i = 0; i < slot.size(); ++i) (*gt)[i] += g[slot[i]] * scale;
    }
  });
  return out;
}

Tensor sum(const Tensor& t) { return reduce(ReduceKind::sum, t); }
Tensor mean(const Tensor& t) { return reduce(ReduceKind::mean, t); }

// ---------------------------------------------------------------- shape ops

Tensor reshape(const Tensor& t, Shape shape) {
  if (shape_numel(shape) != t.size()) {
    throw DimensionError("reshape: " + shape_to_string(t.shape()) + " -> " + shape_to_string(shape));
  }
  Tensor out = make_result(std::move(shape), std::vector<double>(t.data().begin(), t.data().end()));
  ImplPtr ti = t.impl();
  Tape::active().record("reshape", {ti}, out, [ti](const std::vector<double>& g) {
    auto* gt = grad_of(ti);
    if (!gt) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gt)[i] += g[i];
  });
  return out;
}

Tensor gather(const Tensor& t, std::span<const std::size_t> flat_indices) {
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  std::vector<double> y(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= t.size()) throw DimensionError("gather: index out of range");
    y[i] = t.data()[idx[i]];
  }
  Tensor out = make_result(Shape{idx.size()}, std::move(y));
  ImplPtr ti = t.impl();
  Tape::active().record("gather", {ti}, out, [ti, idx = std::move(idx)](const std::vector<double>& g) {
    auto* gt = grad_of(ti);
    if (!gt) return;
    for (std::size_t i = 0; i < idx.size(); ++i) (*gt)[idx[i]] += g[i];
  });
  return out;
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  require_rank(t, 2, "slice_rows");
  if (begin > end || end > t.dim(0)) throw DimensionError("slice_rows: bad range");
  const std::size_t n = t.dim(1);
  std::vector<double> y(t.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                        t.data().begin() + static_cast<std::ptrdiff_t>(end * n));
  Tensor out = make_result(Shape{end - begin, n}, std::move(y));
  ImplPtr ti = t.impl();
  Tape::active().record("slice_rows", {ti}, out, [ti, begin, n](const std::vector<double>& g) {
    auto* gt = grad_of(ti);
    if (!gt) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gt)[begin * n + i] += g[i];
  });
  return out;
}

Tensor l2_normalize_rows(const Tensor& t) {
  require_rank(t, 2, "l2_normalize_rows");
  const std::size_t rows = t.dim(0), d = t.dim(1);
  const auto& x = t.data();
  std::vector<double> y(x.size(), 0.0);
  std::vector<double> norms(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x[r * d + j] * x[r * d + j];
    const double nrm = std::sqrt(s);
    norms[r] = nrm;
    if (nrm != 0.0)
      for (std::size_t j = 0; j < d; ++j) y[r * d + j] = x[r * d + j] / nrm;
  }
  Tensor out = make_result(t.shape(), std::move(y));
  ImplPtr ti = t.impl();
  ImplPtr oi = out.impl();
  Tape::active().record("l2_normalize_rows", {ti}, out,
                        [ti, oi, rows, d, norms = std::move(norms)](const std::vector<double>& g) {
    auto* gt = grad_of(ti);
    if (!gt) return;
    const auto& y = oi->data;
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] == 0.0) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * g[r * d + j];
      for (std::size_t j = 0; j < d; ++j)
        (*gt)[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / norms[r];
    }
  });
  return out;
}

// ---------------------------------------------------------------- layers

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t n = x.dim(0), k = x.dim(1), m = w.dim(1);
  if (w.dim(0) != k || b.size() != m) {
    throw DimensionError("linear: " + shape_to_string(x.shape()) + " x " + shape_to_string(w.shape()) +
                         " + " + shape_to_string(b.shape()));
  }
  std::vector<double> y(n * m);
  for (std::size_t i = 0; i < n; ++i) std::copy(b.data().begin(), b.data().end(), y.begin() + i * m);
  gemm_nn(x.data().data(), w.data().data(), y.data(), n, k, m);
  Tensor out = make_result(Shape{n, m}, std::move(y));
  ImplPtr xi = x.impl(), wi = w.impl(), bi = b.impl();
  Tape::active().record("linear", {xi, wi, bi}, out, [xi, wi, bi, n, k, m](const std::vector<double>& g) {
    if (auto* gx = grad_of(xi)) gemm_nt(g.data(), wi->data.data(), gx->data(), n, m, k);
    if (auto* gw = grad_of(wi)) gemm_tn(xi->data.data(), g.data(), gw->data(), n, k, m);
    if (auto* gb = grad_of(bi))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gb)[j] += g[i * m + j];
  });
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t kernel,
              std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 2, "conv2d");
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t patch = kernel * kernel * C;
  const std::size_t O = w.dim(1);
  if (w.dim(0) != patch || b.size() != O) {
    throw DimensionError("conv2d: weights " + shape_to_string(w.shape()) + " do not fit input " +
                         shape_to_string(x.shape()) + " with kernel " + std::to_string(kernel));
  }
  if (stride == 0 || H + 2 * pad < kernel || W + 2 * pad < kernel) {
    throw DimensionError("conv2d: kernel larger than padded input " + shape_to_string(x.shape()));
  }
  const std::size_t OH = (H + 2 * pad - kernel) / stride + 1;
  const std::size_t OW = (W + 2 * pad - kernel) / stride + 1;
  const std::size_t rows = B * OH * OW;

  // im2col: one row per output position, columns ordered (ky, kx, c).
  std::vector<double> col(rows * patch, 0.0);
  const auto& xd = x.data();
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        double* dst = col.data() + ((bi * OH + oy) * OW + ox) * patch;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            const double* src = xd.data() + ((bi * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)) * C;
            std::copy(src, src + C, dst + (ky * kernel + kx) * C);
          }
        }
      }

  std::vector<double> y(rows * O);
  for (std::size_t r = 0; r < rows; ++r) std::copy(b.data().begin(), b.data().end(), y.begin() + r * O);
  gemm_nn(col.data(), w.data().data(), y.data(), rows, patch, O);
  Tensor out = make_result(Shape{B, OH, OW, O}, std::move(y));

  ImplPtr xi = x.impl(), wi = w.impl(), bi_ = b.impl();
  Tape::active().record(
      "conv2d", {xi, wi, bi_}, out,
      [xi, wi, bi_, col = std::move(col), B, H, W, C, OH, OW, O, patch, kernel, stride,
       pad](const std::vector<double>& g) {
        const std::size_t rows = B * OH * OW;
        if (auto* gw = grad_of(wi)) gemm_tn(col.data(), g.data(), gw->data(), rows, patch, O);
        if (auto* gb = grad_of(bi_))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < O; ++o) (*gb)[o] += g[r * O + o];
        if (auto* gx = grad_of(xi)) {
          std::vector<double> dcol(rows * patch, 0.0);
          gemm_nt(g.data(), wi->data.data(), dcol.data(), rows, O, patch);
          for (std::size_t bb = 0; bb < B; ++bb)
            for (std::size_t oy = 0; oy < OH; ++oy)
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const double* src = dcol.data() + ((bb * OH + oy) * OW + ox) * patch;
                for (std::size_t ky = 0; ky < kernel; ++ky) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t kx = 0; kx < kernel; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                    double* dst = gx->data() + ((bb * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)) * C;
                    const double* s = src + (ky * kernel + kx) * C;
                    for (std::size_t c = 0; c < C; ++c) dst[c] += s[c];
                  }
                }
              }
        }
      });
  return out;
}

namespace {
struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, i1 == i0 ? 0.0 : src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 4, "upsample_bilinear");
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (H == 0 || W == 0 || out_h == 0 || out_w == 0) throw DimensionError("upsample_bilinear: empty extent");
  auto ty = bilinear_taps(H, out_h);
  auto tx = bilinear_taps(W, out_w);
  const auto& xd = x.data();
  std::vector<double> y(B * out_h * out_w * C, 0.0);
  auto in_at = [&](std::size_t b, std::size_t i, std::size_t j) { return ((b * H + i) * W + j) * C; };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const Tap& a = ty[oy];
        const Tap& e = tx[ox];
        double* dst = y.data() + ((b * out_h + oy) * out_w + ox) * C;
        for (std::size_t c = 0; c < C; ++c) {
          dst[c] = (1 - a.w1) * (1 - e.w1) * xd[in_at(b, a.i0, e.i0) + c] +
                   (1 - a.w1) * e.w1 * xd[in_at(b, a.i0, e.i1) + c] +
                   a.w1 * (1 - e.w1) * xd[in_at(b, a.i1, e.i0) + c] +
                   a.w1 * e.w1 * xd[in_at(b, a.i1, e.i1) + c];
        }
      }
  Tensor out = make_result(Shape{B, out_h, out_w, C}, std::move(y));
  ImplPtr xi = x.impl();
  Tape::active().record("upsample_bilinear", {xi}, out,
                        [xi, ty = std::move(ty), tx = std::move(tx), B, H, W, C, out_h,
                         out_w](const std::vector<double>& g) {
    auto* gx = grad_of(xi);
    if (!gx) return;
    auto in_at = [&](std::size_t b, std::size_t i, std::size_t j) { return ((b * H + i) * W + j) * C; };
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t oy = 0; oy < out_h; ++oy)
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const Tap& a = ty[oy];
          const Tap& e = tx[ox];
          const double* src = g.data() + ((b * out_h + oy) * out_w + ox) * C;
          for (std::size_t c = 0; c < C; ++c) {
            (*gx)[in_at(b, a.i0, e.i0) + c] += (1 - a.w1) * (1 - e.w1) * src[c];
            (*gx)[in_at(b, a.i0, e.i1) + c] += (1 - a.w1) * e.w1 * src[c];
            (*gx)[in_at(b, a.i1, e.i0) + c] += a.w1 * (1 - e.w1) * src[c];
            (*gx)[in_at(b, a.i1, e.i1) + c] += a.w1 * e.w1 * src[c];
          }
        }
  });
  return out;
}

// ---------------------------------------------------------------- heads

Tensor masked_max_rows(const Tensor& t, std::span<const std::uint8_t> mask) {
  require_rank(t, 2, "masked_max_rows");
  const std::size_t n = t.dim(0), m = t.dim(1);
  if (mask.size() != n * m) throw DimensionError("masked_max_rows: mask size mismatch");
  const auto& x = t.data();
  std::vector<double> y(n);
  std::vector<std::size_t> arg(n);
  for (std::size_t i = 0; i < n; ++i) {
    bool found = false;
    for (std::size_t j = 0; j < m; ++j) {
      if (!mask[i * m + j]) continue;
      if (!found || x[i * m + j] > y[i] || (std::isnan(x[i * m + j]) && !std::isnan(y[i]))) {
        y[i] = x[i * m + j];
        arg[i] = i * m + j;
        found = true;
      }
    }
    if (!found) throw DomainError("masked_max_rows: row " + std::to_string(i) + " selects no column");
  }
  Tensor out = make_result(Shape{n}, std::move(y));
  ImplPtr ti = t.impl();
  Tape::active().record("masked_max_rows", {ti}, out, [ti, arg = std::move(arg)](const std::vector<double>& g) {
    auto* gt = grad_of(ti);
    if (!gt) return;
    for (std::size_t i = 0; i < arg.size(); ++i) (*gt)[arg[i]] += g[i];
  });
  return out;
}

std::vector<double> softmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "softmax_rows");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  const auto& z = logits.data();
  std::vector<double> p(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = z[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      p[i * c + j] = std::exp(z[i * c + j] - mx);
      s += p[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) p[i * c + j] /= s;
  }
  return p;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw DimensionError("softmax_cross_entropy: label count mismatch");
  if (n == 0) throw DomainError("softmax_cross_entropy: empty batch");
  const auto& z = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw DomainError("softmax_cross_entropy: label out of range");
    double mx = z[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[i * c + j] - mx);
    total += mx + std::log(s) - z[i * c + static_cast<std::size_t>(labels[i])];
  }
  Tensor out = make_result(Shape{}, {total / static_cast<double>(n)});
  ImplPtr li = logits.impl();
  std::vector<int> lab(labels.begin(), labels.end());
  Tape::active().record("softmax_cross_entropy", {li}, out,
                        [li, lab = std::move(lab), n, c](const std::vector<double>& g) {
    auto* gl = grad_of(li);
    if (!gl) return;
    Tensor view = make_result(Shape{n, c}, li->data);
    const auto p = softmax_rows(view);
    const double scale = g[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double target = static_cast<std::size_t>(lab[i]) == j ? 1.0 : 0.0;
        (*gl)[i * c + j] += scale * (p[i * c + j] - target);
      }
  });
  return out;
}

}  // namespace stpp

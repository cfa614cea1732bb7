#include "albertlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "albertlab/kernels.hpp"

namespace albert {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

struct Tensor::Storage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty unless requires_grad
  bool requires_grad = false;
};

namespace {

void check_shape_valid(const Shape& shape) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_to_string(shape));
  }
}

}  // namespace

Tensor::Storage& Tensor::st() {
  if (!storage_) throw UsageError("tensor is not initialized");
  return *storage_;
}

const Tensor::Storage& Tensor::st() const {
  if (!storage_) throw UsageError("tensor is not initialized");
  return *storage_;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape_valid(shape);
  auto s = std::make_shared<Storage>();
  s->data.assign(shape_numel(shape), 0.0);
  s->shape = std::move(shape);
  Tensor t(std::move(s));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape_valid(shape);
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not fill " +
                     shape_to_string(shape));
  }
  auto s = std::make_shared<Storage>();
  s->shape = std::move(shape);
  s->data = std::move(values);
  Tensor t(std::move(s));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return st().shape; }

int Tensor::dim(int axis) const {
  const Shape& s = shape();
  int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for " + shape_to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return st().data.size(); }

std::span<double> Tensor::data() { return st().data; }
std::span<const double> Tensor::data() const { return st().data; }

std::span<double> Tensor::grad() {
  Storage& s = st();
  if (!s.requires_grad) throw UsageError("tensor does not track gradients");
  return s.grad;
}

std::span<const double> Tensor::grad() const {
  const Storage& s = st();
  if (!s.requires_grad) throw UsageError("tensor does not track gradients");
  return s.grad;
}

bool Tensor::requires_grad() const { return st().requires_grad; }

void Tensor::set_requires_grad(bool value) {
  Storage& s = st();
  s.requires_grad = value;
  if (value) {
    if (s.grad.size() != s.data.size()) s.grad.assign(s.data.size(), 0.0);
  } else {
    s.grad.clear();
    s.grad.shrink_to_fit();
  }
}

void Tensor::zero_grad() {
  Storage& s = st();
  if (s.requires_grad) std::fill(s.grad.begin(), s.grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() needs a one-element tensor, got " + shape_to_string(shape()));
  return st().data[0];
}

bool Tensor::all_finite() const {
  for (double v : st().data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::clone() const {
  const Storage& s = st();
  return Tensor::from(s.shape, s.data, false);
}

// --- graph -------------------------------------------------------------------

namespace {
thread_local Graph* g_current_graph = nullptr;
}

Graph::Graph() {
  previous_ = g_current_graph;
  g_current_graph = this;
}

Graph::~Graph() { g_current_graph = previous_; }

Graph* Graph::current() { return g_current_graph; }

void Graph::record(const Tensor& output, std::function<void()> backward_fn) {
  tape_.push_back(std::move(backward_fn));
  outputs_.insert(output.storage().get());
}

void Graph::backward(const Tensor& loss) {
  if (backward_done_) throw UsageError("backward already ran once on this graph");
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward expects a scalar loss");
  }
  if (outputs_.find(loss.storage().get()) == outputs_.end()) {
    throw UsageError("loss was not produced under this graph");
  }
  backward_done_ = true;
  Tensor seed = loss;  // shares storage
  seed.grad()[0] += 1.0;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
}

void backward(const Tensor& loss) {
  Graph* g = Graph::current();
  if (g == nullptr) throw UsageError("no graph is recording on this thread");
  g->backward(loss);
}

// --- op helpers ----------------------------------------------------------------

namespace {

bool tracing_any(std::initializer_list<const Tensor*> inputs) {
  if (Graph::current() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void record_op(Tensor& out, std::function<void()> backward_fn) {
  out.set_requires_grad(true);
  Graph::current()->record(out, std::move(backward_fn));
}

// (outer, axis_len, inner) decomposition for reductions along one axis.
struct AxisView {
  std::size_t outer, len, inner;
};

AxisView axis_view(const Shape& shape, int axis) {
  int r = static_cast<int>(shape.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for " + shape_to_string(shape));
  AxisView v{1, static_cast<std::size_t>(shape[axis]), 1};
  for (int i = 0; i < axis; ++i) v.outer *= static_cast<std::size_t>(shape[i]);
  for (int i = axis + 1; i < r; ++i) v.inner *= static_cast<std::size_t>(shape[i]);
  return v;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

std::size_t leading_rows(const Tensor& t) {
  // numel / last-dim; the "rows" when a tensor is viewed as a stack of vectors
  return t.numel() / static_cast<std::size_t>(t.shape().back());
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gauss_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
double gauss_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

}  // namespace

// --- ops -----------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(b.rank() == 2, "matmul: rhs must be rank 2, got " + shape_to_string(b.shape()));
  require(a.rank() >= 1, "matmul: lhs must have rank >= 1");
  const std::size_t k = static_cast<std::size_t>(b.dim(0));
  const std::size_t n = static_cast<std::size_t>(b.dim(1));
  require(static_cast<std::size_t>(a.shape().back()) == k,
          "matmul: inner dims disagree, " + shape_to_string(a.shape()) + " vs " +
              shape_to_string(b.shape()));
  const std::size_t m = a.numel() / k;

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(static_cast<int>(n));
  Tensor out = Tensor::zeros(out_shape);
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);

  if (tracing_any({&a, &b})) {
    record_op(out, [a, b, out, m, k, n]() {
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        Tensor ta = a;
        kernels::gemm_nt(g, b.data().data(), ta.grad().data(), m, n, k);
      }
      if (b.requires_grad()) {
        Tensor tb = b;
        kernels::gemm_tn(a.data().data(), g, tb.grad().data(), k, m, n);
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(b.rank() == 2, "matmul_nt: rhs must be rank 2, got " + shape_to_string(b.shape()));
  require(a.rank() >= 1, "matmul_nt: lhs must have rank >= 1");
  const std::size_t n = static_cast<std::size_t>(b.dim(0));
  const std::size_t k = static_cast<std::size_t>(b.dim(1));
  require(static_cast<std::size_t>(a.shape().back()) == k,
          "matmul_nt: inner dims disagree, " + shape_to_string(a.shape()) + " vs " +
              shape_to_string(b.shape()));
  const std::size_t m = a.numel() / k;

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(static_cast<int>(n));
  Tensor out = Tensor::zeros(out_shape);
  kernels::gemm_nt(a.data().data(), b.data().data(), out.data().data(), m, k, n);

  if (tracing_any({&a, &b})) {
    record_op(out, [a, b, out, m, k, n]() {
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        Tensor ta = a;
        kernels::gemm_nn(g, b.data().data(), ta.grad().data(), m, n, k);
      }
      if (b.requires_grad()) {
        Tensor tb = b;
        kernels::gemm_tn(g, a.data().data(), tb.grad().data(), n, m, k);
      }
    });
  }
  return out;
}

namespace {

struct BatchDims {
  std::size_t batch, m, k, n;
};

BatchDims batch_dims(const Tensor& a, const Tensor& b, bool b_transposed, const char* op) {
  require(a.rank() == b.rank() && a.rank() >= 2,
          std::string(op) + ": ranks must match and be >= 2, got " + shape_to_string(a.shape()) +
              " vs " + shape_to_string(b.shape()));
  int r = a.rank();
  std::size_t batch = 1;
  for (int i = 0; i < r - 2; ++i) {
    require(a.dim(i) == b.dim(i), std::string(op) + ": batch dims disagree, " +
                                      shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
    batch *= static_cast<std::size_t>(a.dim(i));
  }
  BatchDims d{};
  d.batch = batch;
  d.m = static_cast<std::size_t>(a.dim(r - 2));
  d.k = static_cast<std::size_t>(a.dim(r - 1));
  std::size_t bk = static_cast<std::size_t>(b.dim(b_transposed ? r - 1 : r - 2));
  d.n = static_cast<std::size_t>(b.dim(b_transposed ? r - 2 : r - 1));
  require(bk == d.k, std::string(op) + ": inner dims disagree, " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  return d;
}

Shape batch_out_shape(const Tensor& a, std::size_t m, std::size_t n) {
  Shape s(a.shape().begin(), a.shape().end() - 2);
  s.push_back(static_cast<int>(m));
  s.push_back(static_cast<int>(n));
  return s;
}

}  // namespace

Tensor bmm_nn(const Tensor& a, const Tensor& b) {
  BatchDims d = batch_dims(a, b, /*b_transposed=*/false, "bmm_nn");
  Tensor out = Tensor::zeros(batch_out_shape(a, d.m, d.n));
  const std::size_t sa = d.m * d.k, sb = d.k * d.n, so = d.m * d.n;
  for (std::size_t i = 0; i < d.batch; ++i) {
    kernels::gemm_nn(a.data().data() + i * sa, b.data().data() + i * sb,
                     out.data().data() + i * so, d.m, d.k, d.n);
  }
  if (tracing_any({&a, &b})) {
    record_op(out, [a, b, out, d, sa, sb, so]() {
      const double* g = out.grad().data();
      for (std::size_t i = 0; i < d.batch; ++i) {
        if (a.requires_grad()) {
          Tensor ta = a;
          kernels::gemm_nt(g + i * so, b.data().data() + i * sb, ta.grad().data() + i * sa, d.m,
                           d.n, d.k);
        }
        if (b.requires_grad()) {
          Tensor tb = b;
          kernels::gemm_tn(a.data().data() + i * sa, g + i * so, tb.grad().data() + i * sb, d.k,
                           d.m, d.n);
        }
      }
    });
  }
  return out;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  BatchDims d = batch_dims(a, b, /*b_transposed=*/true, "bmm_nt");
  Tensor out = Tensor::zeros(batch_out_shape(a, d.m, d.n));
  const std::size_t sa = d.m * d.k, sb = d.n * d.k, so = d.m * d.n;
  for (std::size_t i = 0; i < d.batch; ++i) {
    kernels::gemm_nt(a.data().data() + i * sa, b.data().data() + i * sb,
                     out.data().data() + i * so, d.m, d.k, d.n);
  }
  if (tracing_any({&a, &b})) {
    record_op(out, [a, b, out, d, sa, sb, so]() {
      const double* g = out.grad().data();
      for (std::size_t i = 0; i < d.batch; ++i) {
        if (a.requires_grad()) {
          Tensor ta = a;
          kernels::gemm_nn(g + i * so, b.data().data() + i * sb, ta.grad().data() + i * sa, d.m,
                           d.n, d.k);
        }
        if (b.requires_grad()) {
          Tensor tb = b;
          kernels::gemm_tn(g + i * so, a.data().data() + i * sa, tb.grad().data() + i * sb, d.n,
                           d.m, d.k);
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shapes disagree, " + shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  kernels::active().add(a.data().data(), b.data().data(), out.data().data(), a.numel());
  if (tracing_any({&a, &b})) {
    record_op(out, [a, b, out]() {
      const double* g = out.grad().data();
      std::size_t n = out.numel();
      if (a.requires_grad()) {
        Tensor ta = a;
        kernels::active().axpy(1.0, g, ta.grad().data(), n);
      }
      if (b.requires_grad()) {
        Tensor tb = b;
        kernels::active().axpy(1.0, g, tb.grad().data(), n);
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shapes disagree, " + shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  kernels::active().mul(a.data().data(), b.data().data(), out.data().data(), a.numel());
  if (tracing_any({&a, &b})) {
    record_op(out, [a, b, out]() {
      const double* g = out.grad().data();
      const std::size_t n = out.numel();
      if (a.requires_grad()) {
        Tensor ta = a;
        double* ga = ta.grad().data();
        const double* bv = b.data().data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        Tensor tb = b;
        double* gb = tb.grad().data();
        const double* av = a.data().data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require(bias.rank() == 1, "add_bias: bias must be rank 1, got " + shape_to_string(bias.shape()));
  const std::size_t n = static_cast<std::size_t>(bias.dim(0));
  require(x.rank() >= 1 && static_cast<std::size_t>(x.shape().back()) == n,
          "add_bias: trailing dim of " + shape_to_string(x.shape()) + " must match bias " +
              shape_to_string(bias.shape()));
  const std::size_t rows = leading_rows(x);
  Tensor out = Tensor::zeros(x.shape());
  const auto& kt = kernels::active();
  for (std::size_t r = 0; r < rows; ++r) {
    kt.add(x.data().data() + r * n, bias.data().data(), out.data().data() + r * n, n);
  }
  if (tracing_any({&x, &bias})) {
    record_op(out, [x, bias, out, rows, n]() {
      const double* g = out.grad().data();
      const auto& k = kernels::active();
      if (x.requires_grad()) {
        Tensor tx = x;
        k.axpy(1.0, g, tx.grad().data(), rows * n);
      }
      if (bias.requires_grad()) {
        Tensor tb = bias;
        for (std::size_t r = 0; r < rows; ++r) k.axpy(1.0, g + r * n, tb.grad().data(), n);
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = x.clone();
  kernels::active().scale(factor, out.data().data(), out.numel());
  if (tracing_any({&x})) {
    record_op(out, [x, out, factor]() {
      Tensor tx = x;
      kernels::active().axpy(factor, out.grad().data(), tx.grad().data(), out.numel());
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  AxisView v = axis_view(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  const double* in = x.data().data();
  double* y = out.data().data();
  const auto& kt = kernels::active();
  if (v.inner == 1) {
    for (std::size_t o = 0; o < v.outer; ++o) {
      const double* row = in + o * v.len;
      double* yrow = y + o * v.len;
      double m = kt.max(row, v.len);
      for (std::size_t i = 0; i < v.len; ++i) yrow[i] = std::exp(row[i] - m);
      double s = kt.sum(yrow, v.len);
      kt.scale(1.0 / s, yrow, v.len);
    }
  } else {
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t j = 0; j < v.inner; ++j) {
        const std::size_t base = o * v.len * v.inner + j;
        double m = in[base];
        for (std::size_t i = 1; i < v.len; ++i) m = std::max(m, in[base + i * v.inner]);
        double s = 0.0;
        for (std::size_t i = 0; i < v.len; ++i) {
          double e = std::exp(in[base + i * v.inner] - m);
          y[base + i * v.inner] = e;
          s += e;
        }
        for (std::size_t i = 0; i < v.len; ++i) y[base + i * v.inner] /= s;
      }
    }
  }
  if (tracing_any({&x})) {
    record_op(out, [x, out, v]() {
      Tensor tx = x;
      double* gx = tx.grad().data();
      const double* gy = out.grad().data();
      const double* yv = out.data().data();
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t j = 0; j < v.inner; ++j) {
          const std::size_t base = o * v.len * v.inner + j;
          double dotsum = 0.0;
          for (std::size_t i = 0; i < v.len; ++i) {
            dotsum += gy[base + i * v.inner] * yv[base + i * v.inner];
          }
          for (std::size_t i = 0; i < v.len; ++i) {
            const std::size_t p = base + i * v.inner;
            gx[p] += yv[p] * (gy[p] - dotsum);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require(gamma.rank() == 1 && beta.rank() == 1 && gamma.dim(0) == beta.dim(0),
          "layer_norm: gamma/beta must be rank 1 with equal size");
  const std::size_t n = static_cast<std::size_t>(gamma.dim(0));
  require(x.rank() >= 1 && static_cast<std::size_t>(x.shape().back()) == n,
          "layer_norm: trailing dim of " + shape_to_string(x.shape()) + " must match gamma " +
              shape_to_string(gamma.shape()));
  const std::size_t rows = leading_rows(x);

  Tensor out = Tensor::zeros(x.shape());
  // normalized values and per-row inverse stddev, kept for the backward pass
  auto xhat = std::make_shared<std::vector<double>>(rows * n);
  auto inv_std = std::make_shared<std::vector<double>>(rows);

  const double* in = x.data().data();
  double* y = out.data().data();
  const double* gm = gamma.data().data();
  const double* bt = beta.data().data();
  const auto& kt = kernels::active();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in + r * n;
    double mean = kt.sum(row, n) / static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = row[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    double* xh = xhat->data() + r * n;
    double* yrow = y + r * n;
    for (std::size_t i = 0; i < n; ++i) {
      xh[i] = (row[i] - mean) * inv;
      yrow[i] = gm[i] * xh[i] + bt[i];
    }
  }

  if (tracing_any({&x, &gamma, &beta})) {
    record_op(out, [x, gamma, beta, out, xhat, inv_std, rows, n]() {
      const double* gy = out.grad().data();
      const double* gm = gamma.data().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gyr = gy + r * n;
        const double* xh = xhat->data() + r * n;
        if (gamma.requires_grad()) {
          Tensor tg = gamma;
          double* gg = tg.grad().data();
          for (std::size_t i = 0; i < n; ++i) gg[i] += gyr[i] * xh[i];
        }
        if (beta.requires_grad()) {
          Tensor tb = beta;
          double* gb = tb.grad().data();
          for (std::size_t i = 0; i < n; ++i) gb[i] += gyr[i];
        }
        if (x.requires_grad()) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            double dxh = gyr[i] * gm[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[i];
          }
          mean_dxhat /= static_cast<double>(n);
          mean_dxhat_xhat /= static_cast<double>(n);
          Tensor tx = x;
          double* gx = tx.grad().data() + r * n;
          const double inv = (*inv_std)[r];
          for (std::size_t i = 0; i < n; ++i) {
            double dxh = gyr[i] * gm[i];
            gx[i] += inv * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
          }
        }
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const double* in = x.data().data();
  double* y = out.data().data();
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) y[i] = in[i] * gauss_cdf(in[i]);
  if (tracing_any({&x})) {
    record_op(out, [x, out, n]() {
      Tensor tx = x;
      double* gx = tx.grad().data();
      const double* gy = out.grad().data();
      const double* in = x.data().data();
      for (std::size_t i = 0; i < n; ++i) {
        gx[i] += gy[i] * (gauss_cdf(in[i]) + in[i] * gauss_pdf(in[i]));
      }
    });
  }
  return out;
}

Tensor tanh_act(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const double* in = x.data().data();
  double* y = out.data().data();
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(in[i]);
  if (tracing_any({&x})) {
    record_op(out, [x, out, n]() {
      Tensor tx = x;
      double* gx = tx.grad().data();
      const double* gy = out.grad().data();
      const double* y = out.data().data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * (1.0 - y[i] * y[i]);
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const std::size_t n = x.numel();
  auto mask = std::make_shared<std::vector<double>>(n);
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < n; ++i) {
    (*mask)[i] = (rng.uniform() < p) ? 0.0 : keep_scale;
  }
  Tensor out = Tensor::zeros(x.shape());
  kernels::active().mul(x.data().data(), mask->data(), out.data().data(), n);
  if (tracing_any({&x})) {
    record_op(out, [x, out, mask, n]() {
      Tensor tx = x;
      double* gx = tx.grad().data();
      const double* gy = out.grad().data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * (*mask)[i];
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids, Shape lead_shape) {
  require(table.rank() == 2, "embedding_lookup: table must be rank 2, got " +
                                 shape_to_string(table.shape()));
  if (lead_shape.empty()) lead_shape = {static_cast<int>(ids.size())};
  if (shape_numel(lead_shape) != ids.size()) {
    throw ShapeError("embedding_lookup: lead shape " + shape_to_string(lead_shape) +
                     " does not hold " + std::to_string(ids.size()) + " ids");
  }
  const int vocab = table.dim(0);
  const std::size_t width = static_cast<std::size_t>(table.dim(1));
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw DataError("embedding id " + std::to_string(id) + " outside table of " +
                      std::to_string(vocab) + " rows");
    }
  }
  Shape out_shape = lead_shape;
  out_shape.push_back(static_cast<int>(width));
  Tensor out = Tensor::zeros(out_shape);
  const double* src = table.data().data();
  double* dst = out.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(dst + i * width, src + static_cast<std::size_t>(ids[i]) * width,
                width * sizeof(double));
  }
  if (tracing_any({&table})) {
    std::vector<int> ids_copy(ids.begin(), ids.end());
    record_op(out, [table, out, ids_copy = std::move(ids_copy), width]() {
      Tensor tt = table;
      double* gt = tt.grad().data();
      const double* gy = out.grad().data();
      const auto& kt = kernels::active();
      for (std::size_t i = 0; i < ids_copy.size(); ++i) {
        kt.axpy(1.0, gy + i * width, gt + static_cast<std::size_t>(ids_copy[i]) * width, width);
      }
    });
  }
  return out;
}

Tensor split_heads(const Tensor& x, int num_heads) {
  require(x.rank() == 3, "split_heads: expects [B, S, H], got " + shape_to_string(x.shape()));
  const int B = x.dim(0), S = x.dim(1), H = x.dim(2);
  require(num_heads > 0 && H % num_heads == 0,
          "split_heads: hidden dim " + std::to_string(H) + " not divisible by " +
              std::to_string(num_heads) + " heads");
  const int Dh = H / num_heads;
  Tensor out = Tensor::zeros({B, num_heads, S, Dh});
  const double* in = x.data().data();
  double* y = out.data().data();
  for (int b = 0; b < B; ++b) {
    for (int a = 0; a < num_heads; ++a) {
      for (int s = 0; s < S; ++s) {
        std::memcpy(y + (((static_cast<std::size_t>(b) * num_heads + a) * S + s) * Dh),
                    in + ((static_cast<std::size_t>(b) * S + s) * H + a * Dh),
                    static_cast<std::size_t>(Dh) * sizeof(double));
      }
    }
  }
  if (tracing_any({&x})) {
    record_op(out, [x, out, B, S, H, num_heads, Dh]() {
      Tensor tx = x;
      double* gx = tx.grad().data();
      const double* gy = out.grad().data();
      for (int b = 0; b < B; ++b) {
        for (int a = 0; a < num_heads; ++a) {
          for (int s = 0; s < S; ++s) {
            const double* src = gy + (((static_cast<std::size_t>(b) * num_heads + a) * S + s) * Dh);
            double* dst = gx + ((static_cast<std::size_t>(b) * S + s) * H + a * Dh);
            kernels::active().axpy(1.0, src, dst, static_cast<std::size_t>(Dh));
          }
        }
      }
    });
  }
  return out;
}

Tensor merge_heads(const Tensor& x) {
  require(x.rank() == 4, "merge_heads: expects [B, A, S, Dh], got " + shape_to_string(x.shape()));
  const int B = x.dim(0), A = x.dim(1), S = x.dim(2), Dh = x.dim(3);
  const int H = A * Dh;
  Tensor out = Tensor::zeros({B, S, H});
  const double* in = x.data().data();
  double* y = out.data().data();
  for (int b = 0; b < B; ++b) {
    for (int a = 0; a < A; ++a) {
      for (int s = 0; s < S; ++s) {
        std::memcpy(y + ((static_cast<std::size_t>(b) * S + s) * H + a * Dh),
                    in + (((static_cast<std::size_t>(b) * A + a) * S + s) * Dh),
                    static_cast<std::size_t>(Dh) * sizeof(double));
      }
    }
  }
  if (tracing_any({&x})) {
    record_op(out, [x, out, B, A, S, Dh, H]() {
      Tensor tx = x;
      double* gx = tx.grad().data();
      const double* gy = out.grad().data();
      for (int b = 0; b < B; ++b) {
        for (int a = 0; a < A; ++a) {
          for (int s = 0; s < S; ++s) {
            const double* src = gy + ((static_cast<std::size_t>(b) * S + s) * H + a * Dh);
            double* dst = gx + (((static_cast<std::size_t>(b) * A + a) * S + s) * Dh);
            kernels::active().axpy(1.0, src, dst, static_cast<std::size_t>(Dh));
          }
        }
      }
    });
  }
  return out;
}

Tensor add_key_padding_mask(const Tensor& scores, std::span<const std::uint8_t> mask) {
  require(scores.rank() == 4, "add_key_padding_mask: expects [B, A, Sq, Sk], got " +
                                  shape_to_string(scores.shape()));
  const int B = scores.dim(0), A = scores.dim(1), Sq = scores.dim(2), Sk = scores.dim(3);
  if (mask.size() != static_cast<std::size_t>(B) * static_cast<std::size_t>(Sk)) {
    throw ShapeError("add_key_padding_mask: mask holds " + std::to_string(mask.size()) +
                     " entries, want " + std::to_string(B * Sk));
  }
  constexpr double kNegInf = -1e9;
  Tensor out = scores.clone();
  double* y = out.data().data();
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < Sk; ++t) {
      if (mask[static_cast<std::size_t>(b) * Sk + t]) continue;
      for (int a = 0; a < A; ++a) {
        for (int q = 0; q < Sq; ++q) {
          y[(((static_cast<std::size_t>(b) * A + a) * Sq + q) * Sk) + t] += kNegInf;
        }
      }
    }
  }
  if (tracing_any({&scores})) {
    record_op(out, [scores, out]() {
      Tensor ts = scores;
      kernels::active().axpy(1.0, out.grad().data(), ts.grad().data(), out.numel());
    });
  }
  return out;
}

Tensor first_token(const Tensor& x) {
  require(x.rank() == 3, "first_token: expects [B, S, H], got " + shape_to_string(x.shape()));
  const int B = x.dim(0), S = x.dim(1), H = x.dim(2);
  Tensor out = Tensor::zeros({B, H});
  for (int b = 0; b < B; ++b) {
    std::memcpy(out.data().data() + static_cast<std::size_t>(b) * H,
                x.data().data() + static_cast<std::size_t>(b) * S * H,
                static_cast<std::size_t>(H) * sizeof(double));
  }
  if (tracing_any({&x})) {
    record_op(out, [x, out, B, S, H]() {
      Tensor tx = x;
      double* gx = tx.grad().data();
      const double* gy = out.grad().data();
      for (int b = 0; b < B; ++b) {
        kernels::active().axpy(1.0, gy + static_cast<std::size_t>(b) * H,
                               gx + static_cast<std::size_t>(b) * S * H,
                               static_cast<std::size_t>(H));
      }
    });
  }
  return out;
}

Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets, int ignore_marker,
                            bool* all_ignored) {
  require(logits.rank() >= 2, "cross_entropy_logits: logits must have rank >= 2, got " +
                                  shape_to_string(logits.shape()));
  const std::size_t classes = static_cast<std::size_t>(logits.shape().back());
  const std::size_t rows = leading_rows(logits);
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy_logits: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " rows");
  }
  const double* in = logits.data().data();
  const auto& kt = kernels::active();
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t == ignore_marker) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw DataError("target " + std::to_string(t) + " outside " + std::to_string(classes) +
                      " classes");
    }
    const double* row = in + r * classes;
    double m = kt.max(row, classes);
    double s = 0.0;
    for (std::size_t i = 0; i < classes; ++i) s += std::exp(row[i] - m);
    total += m + std::log(s) - row[static_cast<std::size_t>(t)];
    ++counted;
  }
  if (all_ignored != nullptr) *all_ignored = (counted == 0);
  Tensor out = Tensor::scalar(counted == 0 ? 0.0 : total / static_cast<double>(counted));
  if (counted > 0 && tracing_any({&logits})) {
    std::vector<int> targets_copy(targets.begin(), targets.end());
    record_op(out, [logits, out, targets_copy = std::move(targets_copy), ignore_marker, classes,
                    rows, counted]() {
      Tensor tl = logits;
      double* gx = tl.grad().data();
      const double* in = logits.data().data();
      const double g = out.grad()[0] / static_cast<double>(counted);
      const auto& kt = kernels::active();
      for (std::size_t r = 0; r < rows; ++r) {
        const int t = targets_copy[r];
        if (t == ignore_marker) continue;
        const double* row = in + r * classes;
        double* grow = gx + r * classes;
        double m = kt.max(row, classes);
        double s = 0.0;
        for (std::size_t i = 0; i < classes; ++i) s += std::exp(row[i] - m);
        for (std::size_t i = 0; i < classes; ++i) {
          grow[i] += g * std::exp(row[i] - m) / s;
        }
        grow[static_cast<std::size_t>(t)] -= g;
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::scalar(kernels::active().sum(x.data().data(), x.numel()));
  if (tracing_any({&x})) {
    record_op(out, [x, out]() {
      Tensor tx = x;
      double* gx = tx.grad().data();
      const double g = out.grad()[0];
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
  }
  return out;
}

}  // namespace albert

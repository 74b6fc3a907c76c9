#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace jigsaw::ad {

namespace {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

[[noreturn]] void fail(const char* op, const std::string& what) {
  throw TensorError(std::string(op) + ": " + what);
}

void check_finite(const char* op, const Tensor& t) {
  for (int64_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t.data()[i])) fail(op, "non-finite input value");
  }
}

void ensure_grad(const std::shared_ptr<TensorImpl>& t) {
  if (t->grad.empty()) t->grad.assign(t->value.size(), 0.0);
}

thread_local Tape* g_active_tape = nullptr;

// Dense GEMM kernels over raw buffers (used by forward and backward).
void mm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k,
           int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += a[m,n] * b[k,n]^T
void mm_nt(const double* a, const double* b, double* c, int64_t m, int64_t n,
           int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (int64_t j = 0; j < k; ++j) {
      const double* brow = b + j * n;
      double s = 0.0;
      for (int64_t p = 0; p < n; ++p) s += arow[p] * brow[p];
      c[i * k + j] += s;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void mm_tn(const double* a, const double* b, double* c, int64_t m, int64_t k,
           int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

enum class Bcast { kSame, kScalar, kRow, kCol };

Bcast broadcast_mode(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bcast::kSame;
  if (b.numel() == 1) return Bcast::kScalar;
  if (a.rank() == 2 && b.numel() == a.cols() &&
      (b.rank() == 1 || (b.rank() == 2 && b.dim(0) == 1))) {
    return Bcast::kRow;
  }
  if (a.rank() == 2 && b.rank() == 2 && b.dim(0) == a.rows() && b.dim(1) == 1) {
    return Bcast::kCol;
  }
  fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " +
               shape_str(b.shape()));
}

}  // namespace

Tensor make_result(Shape shape, std::vector<double> value) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(value);
  return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  Tensor t = make_result(std::move(shape), std::vector<double>(n, 0.0));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  Tensor t = make_result(std::move(shape), std::vector<double>(n, v));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw TensorError("from_data: shape " + shape_str(shape) + " wants " +
                      std::to_string(shape_numel(shape)) + " values, got " +
                      std::to_string(data.size()));
  }
  Tensor t = make_result(std::move(shape), std::move(data));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi,
                       bool requires_grad) {
  const int64_t n = shape_numel(shape);
  std::vector<double> data(static_cast<size_t>(n));
  for (auto& x : data) x = rng.uniform(lo, hi);
  Tensor t = make_result(std::move(shape), std::move(data));
  t.set_requires_grad(requires_grad);
  return t;
}

int64_t Tensor::cols() const { return impl_->shape.back(); }
int64_t Tensor::rows() const { return numel() / cols(); }

double Tensor::scalar_value() const {
  if (numel() != 1) {
    throw TensorError("scalar_value: tensor has shape " + shape_str(shape()));
  }
  return impl_->value[0];
}

double* Tensor::grad() {
  if (!has_grad()) throw TensorError("grad: no gradient present");
  return impl_->grad.data();
}

const double* Tensor::grad() const {
  if (!has_grad()) throw TensorError("grad: no gradient present");
  return impl_->grad.data();
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.assign(impl_->value.size(), 0.0);
}

Tensor Tensor::detach() const {
  Tensor t = make_result(impl_->shape, impl_->value);
  return t;
}

Tensor Tensor::clone_for_grad() const {
  Tensor t = make_result(impl_->shape, impl_->value);
  t.set_requires_grad(true);
  return t;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope() : prev_(g_active_tape) { g_active_tape = &tape_; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw TensorError("backward: loss must be scalar, got shape " +
                      shape_str(loss.shape()));
  }
  auto li = loss.impl();
  li->grad.assign(1, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->out->grad.empty()) continue;  // not reachable from the loss
    it->backprop();
    for (auto& in : it->inputs) {
      for (double g : in->grad) {
        if (!std::isfinite(g)) {
          throw TensorError(std::string("backward: non-finite gradient in op '") +
                            it->op + "'");
        }
      }
    }
  }
}

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw TensorError("backward: no active tape");
  t->backward(loss);
}

namespace {

bool taping(std::initializer_list<const Tensor*> ins) {
  if (!Tape::active()) return false;
  for (const Tensor* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void record(const char* op, const Tensor& out,
            std::initializer_list<const Tensor*> ins,
            std::function<void()> backprop) {
  const_cast<Tensor&>(out).set_requires_grad(true);
  Tape::Node node;
  node.op = op;
  node.out = out.impl();
  for (const Tensor* t : ins) node.inputs.push_back(t->impl());
  node.backprop = std::move(backprop);
  Tape::active()->record(std::move(node));
}

}  // namespace

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    fail("matmul", "incompatible shapes " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
  }
  check_finite("matmul", a);
  check_finite("matmul", b);
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  mm_nn(a.data(), b.data(), out.data(), m, k, n);
  Tensor c = make_result({m, n}, std::move(out));
  if (taping({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), ci = c.impl();
    record("matmul", c, {&a, &b}, [ai, bi, ci, m, k, n] {
      if (ai->requires_grad) {
        ensure_grad(ai);
        mm_nt(ci->grad.data(), bi->value.data(), ai->grad.data(), m, n, k);
      }
      if (bi->requires_grad) {
        ensure_grad(bi);
        mm_tn(ai->value.data(), ci->grad.data(), bi->grad.data(), m, k, n);
      }
    });
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) fail("transpose", "expects 2-D, got " + shape_str(a.shape()));
  check_finite("transpose", a);
  const int64_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j * m + i)] = a.data()[i * n + j];
  Tensor c = make_result({n, m}, std::move(out));
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    record("transpose", c, {&a}, [ai, ci, m, n] {
      ensure_grad(ai);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
          ai->grad[static_cast<size_t>(i * n + j)] += ci->grad[static_cast<size_t>(j * m + i)];
    });
  }
  return c;
}

namespace {

// Shared elementwise-with-broadcast machinery for add/sub/mul/div.
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b,
                 double (*fwd)(double, double),
                 void (*bwd)(double av, double bv, double cv, double g,
                             double* da, double* db)) {
  check_finite(op, a);
  check_finite(op, b);
  const Bcast mode = broadcast_mode(op, a, b);
  const int64_t n = a.numel(), cols = a.cols();
  std::vector<double> out(static_cast<size_t>(n));
  const double* ad = a.data();
  const double* bd = b.data();
  for (int64_t i = 0; i < n; ++i) {
    double bv;
    switch (mode) {
      case Bcast::kSame: bv = bd[i]; break;
      case Bcast::kScalar: bv = bd[0]; break;
      case Bcast::kRow: bv = bd[i % cols]; break;
      default: bv = bd[i / cols]; break;
    }
    out[static_cast<size_t>(i)] = fwd(ad[i], bv);
  }
  Tensor c = make_result(a.shape(), std::move(out));
  if (taping({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), ci = c.impl();
    record(op, c, {&a, &b}, [ai, bi, ci, mode, n, cols, bwd] {
      const bool need_a = ai->requires_grad, need_b = bi->requires_grad;
      if (need_a) ensure_grad(ai);
      if (need_b) ensure_grad(bi);
      for (int64_t i = 0; i < n; ++i) {
        int64_t bidx;
        switch (mode) {
          case Bcast::kSame: bidx = i; break;
          case Bcast::kScalar: bidx = 0; break;
          case Bcast::kRow: bidx = i % cols; break;
          default: bidx = i / cols; break;
        }
        double da = 0.0, db = 0.0;
        bwd(ai->value[static_cast<size_t>(i)], bi->value[static_cast<size_t>(bidx)],
            ci->value[static_cast<size_t>(i)], ci->grad[static_cast<size_t>(i)], &da, &db);
        if (need_a) ai->grad[static_cast<size_t>(i)] += da;
        if (need_b) bi->grad[static_cast<size_t>(bidx)] += db;
      }
    });
  }
  return c;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double, double g, double* da, double* db) {
        *da = g;
        *db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double, double g, double* da, double* db) {
        *da = g;
        *db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double av, double bv, double, double g, double* da, double* db) {
        *da = g * bv;
        *db = g * av;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (int64_t i = 0; i < b.numel(); ++i) {
    if (b.data()[i] == 0.0) fail("div", "division by zero");
  }
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double bv, double cv, double g, double* da, double* db) {
        *da = g / bv;
        *db = -g * cv / bv;
      });
}

namespace {

Tensor unary_op(const char* op, const Tensor& a, double (*fwd)(double),
                double (*dydx)(double x, double y)) {
  check_finite(op, a);
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(a.data()[i]);
  Tensor c = make_result(a.shape(), std::move(out));
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    record(op, c, {&a}, [ai, ci, n, dydx] {
      ensure_grad(ai);
      for (int64_t i = 0; i < n; ++i) {
        ai->grad[static_cast<size_t>(i)] +=
            ci->grad[static_cast<size_t>(i)] *
            dydx(ai->value[static_cast<size_t>(i)], ci->value[static_cast<size_t>(i)]);
      }
    });
  }
  return c;
}

}  // namespace

Tensor scale(const Tensor& a, double s) {
  check_finite("scale", a);
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = a.data()[i] * s;
  Tensor c = make_result(a.shape(), std::move(out));
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    record("scale", c, {&a}, [ai, ci, n, s] {
      ensure_grad(ai);
      for (int64_t i = 0; i < n; ++i)
        ai->grad[static_cast<size_t>(i)] += ci->grad[static_cast<size_t>(i)] * s;
    });
  }
  return c;
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] <= 0.0) fail("log", "non-positive input");
  }
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] < 0.0) fail("sqrt", "negative input");
  }
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  check_finite("clamp", a);
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = std::clamp(a.data()[i], lo, hi);
  Tensor c = make_result(a.shape(), std::move(out));
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    record("clamp", c, {&a}, [ai, ci, n, lo, hi] {
      ensure_grad(ai);
      for (int64_t i = 0; i < n; ++i) {
        const double x = ai->value[static_cast<size_t>(i)];
        if (x > lo && x < hi) ai->grad[static_cast<size_t>(i)] += ci->grad[static_cast<size_t>(i)];
      }
    });
  }
  return c;
}

Tensor softmax_lastdim(const Tensor& a) {
  check_finite("softmax_lastdim", a);
  const int64_t rows = a.rows(), cols = a.cols();
  std::vector<double> out(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = a.data() + r * cols;
    double* y = out.data() + r * cols;
    double mx = x[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (int64_t j = 0; j < cols; ++j) y[j] /= s;
  }
  Tensor c = make_result(a.shape(), std::move(out));
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    record("softmax_lastdim", c, {&a}, [ai, ci, rows, cols] {
      ensure_grad(ai);
      for (int64_t r = 0; r < rows; ++r) {
        const double* y = ci->value.data() + r * cols;
        const double* g = ci->grad.data() + r * cols;
        double dot = 0.0;
        for (int64_t j = 0; j < cols; ++j) dot += g[j] * y[j];
        double* da = ai->grad.data() + r * cols;
        for (int64_t j = 0; j < cols; ++j) da[j] += y[j] * (g[j] - dot);
      }
    });
  }
  return c;
}

Tensor logsumexp_rows(const Tensor& a) {
  if (a.rank() != 2) fail("logsumexp_rows", "expects 2-D, got " + shape_str(a.shape()));
  check_finite("logsumexp_rows", a);
  const int64_t rows = a.dim(0), cols = a.dim(1);
  std::vector<double> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = a.data() + r * cols;
    double mx = x[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int64_t j = 0; j < cols; ++j) s += std::exp(x[j] - mx);
    out[static_cast<size_t>(r)] = mx + std::log(s);
  }
  Tensor c = make_result({rows, 1}, std::move(out));
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    record("logsumexp_rows", c, {&a}, [ai, ci, rows, cols] {
      ensure_grad(ai);
      for (int64_t r = 0; r < rows; ++r) {
        const double g = ci->grad[static_cast<size_t>(r)];
        const double lse = ci->value[static_cast<size_t>(r)];
        const double* x = ai->value.data() + r * cols;
        double* da = ai->grad.data() + r * cols;
        for (int64_t j = 0; j < cols; ++j) da[j] += g * std::exp(x[j] - lse);
      }
    });
  }
  return c;
}

Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                 double eps) {
  if (a.rank() != 2 || gain.numel() != a.cols() || bias.numel() != a.cols()) {
    fail("layernorm", "shapes " + shape_str(a.shape()) + ", gain " +
                          shape_str(gain.shape()) + ", bias " +
                          shape_str(bias.shape()));
  }
  check_finite("layernorm", a);
  check_finite("layernorm", gain);
  check_finite("layernorm", bias);
  const int64_t rows = a.dim(0), cols = a.dim(1);
  std::vector<double> out(static_cast<size_t>(rows * cols));
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(rows * cols));
  auto istd = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = a.data() + r * cols;
    double mu = 0.0;
    for (int64_t j = 0; j < cols; ++j) mu += x[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t j = 0; j < cols; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*istd)[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < cols; ++j) {
      const double xh = (x[j] - mu) * is;
      (*xhat)[static_cast<size_t>(r * cols + j)] = xh;
      out[static_cast<size_t>(r * cols + j)] = gain.data()[j] * xh + bias.data()[j];
    }
  }
  Tensor c = make_result(a.shape(), std::move(out));
  if (taping({&a, &gain, &bias})) {
    auto ai = a.impl(), gi = gain.impl(), bi = bias.impl(), ci = c.impl();
    record("layernorm", c, {&a, &gain, &bias}, [ai, gi, bi, ci, rows, cols, xhat, istd] {
      const bool need_a = ai->requires_grad;
      if (need_a) ensure_grad(ai);
      if (gi->requires_grad) ensure_grad(gi);
      if (bi->requires_grad) ensure_grad(bi);
      for (int64_t r = 0; r < rows; ++r) {
        const double* g = ci->grad.data() + r * cols;
        const double* xh = xhat->data() + r * cols;
        if (gi->requires_grad) {
          for (int64_t j = 0; j < cols; ++j) gi->grad[static_cast<size_t>(j)] += g[j] * xh[j];
        }
        if (bi->requires_grad) {
          for (int64_t j = 0; j < cols; ++j) bi->grad[static_cast<size_t>(j)] += g[j];
        }
        if (need_a) {
          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
          for (int64_t j = 0; j < cols; ++j) {
            const double dxh = g[j] * gi->value[static_cast<size_t>(j)];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
          }
          mean_dxh /= static_cast<double>(cols);
          mean_dxh_xh /= static_cast<double>(cols);
          const double is = (*istd)[static_cast<size_t>(r)];
          double* da = ai->grad.data() + r * cols;
          for (int64_t j = 0; j < cols; ++j) {
            const double dxh = g[j] * gi->value[static_cast<size_t>(j)];
            da[j] += is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
          }
        }
      }
    });
  }
  return c;
}

namespace {

Tensor reduce_all(const char* op, const Tensor& a, double denom) {
  check_finite(op, a);
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += a.data()[i];
  Tensor c = make_result({1}, {s / denom});
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    const int64_t n = a.numel();
    record(op, c, {&a}, [ai, ci, n, denom] {
      ensure_grad(ai);
      const double g = ci->grad[0] / denom;
      for (int64_t i = 0; i < n; ++i) ai->grad[static_cast<size_t>(i)] += g;
    });
  }
  return c;
}

}  // namespace

Tensor sum(const Tensor& a) { return reduce_all("sum", a, 1.0); }

Tensor mean(const Tensor& a) {
  return reduce_all("mean", a, static_cast<double>(a.numel()));
}

Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& idx) {
  if (a.rank() != 2) fail("gather_rows", "expects 2-D, got " + shape_str(a.shape()));
  check_finite("gather_rows", a);
  const int64_t n = a.dim(0), cols = a.dim(1);
  for (int64_t i : idx) {
    if (i < 0 || i >= n) fail("gather_rows", "index " + std::to_string(i) + " out of range");
  }
  const int64_t m = static_cast<int64_t>(idx.size());
  std::vector<double> out(static_cast<size_t>(m * cols));
  for (int64_t r = 0; r < m; ++r) {
    std::memcpy(out.data() + r * cols, a.data() + idx[static_cast<size_t>(r)] * cols,
                static_cast<size_t>(cols) * sizeof(double));
  }
  Tensor c = make_result({m, cols}, std::move(out));
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    auto ix = std::make_shared<std::vector<int64_t>>(idx);
    record("gather_rows", c, {&a}, [ai, ci, ix, m, cols] {
      ensure_grad(ai);
      for (int64_t r = 0; r < m; ++r) {
        const double* g = ci->grad.data() + r * cols;
        double* da = ai->grad.data() + (*ix)[static_cast<size_t>(r)] * cols;
        for (int64_t j = 0; j < cols; ++j) da[j] += g[j];
      }
    });
  }
  return c;
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  if (a.rank() != 2 || b.rank() != 2 || (axis != 0 && axis != 1)) {
    fail("concat", "expects two 2-D tensors and axis 0/1");
  }
  check_finite("concat", a);
  check_finite("concat", b);
  const int64_t keep = axis == 0 ? 1 : 0;
  if (a.dim(static_cast<int>(keep)) != b.dim(static_cast<int>(keep))) {
    fail("concat", "shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  }
  int64_t rows, cols;
  std::vector<double> out;
  if (axis == 0) {
    rows = a.dim(0) + b.dim(0);
    cols = a.dim(1);
    out.resize(static_cast<size_t>(rows * cols));
    std::memcpy(out.data(), a.data(), static_cast<size_t>(a.numel()) * sizeof(double));
    std::memcpy(out.data() + a.numel(), b.data(), static_cast<size_t>(b.numel()) * sizeof(double));
  } else {
    rows = a.dim(0);
    cols = a.dim(1) + b.dim(1);
    out.resize(static_cast<size_t>(rows * cols));
    for (int64_t r = 0; r < rows; ++r) {
      std::memcpy(out.data() + r * cols, a.data() + r * a.dim(1),
                  static_cast<size_t>(a.dim(1)) * sizeof(double));
      std::memcpy(out.data() + r * cols + a.dim(1), b.data() + r * b.dim(1),
                  static_cast<size_t>(b.dim(1)) * sizeof(double));
    }
  }
  Tensor c = make_result({rows, cols}, std::move(out));
  if (taping({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), ci = c.impl();
    const int64_t acols = a.dim(1), arows = a.dim(0);
    record("concat", c, {&a, &b}, [ai, bi, ci, axis, rows, cols, acols, arows] {
      const bool need_a = ai->requires_grad, need_b = bi->requires_grad;
      if (need_a) ensure_grad(ai);
      if (need_b) ensure_grad(bi);
      if (axis == 0) {
        const int64_t an = arows * acols;
        if (need_a)
          for (int64_t i = 0; i < an; ++i) ai->grad[static_cast<size_t>(i)] += ci->grad[static_cast<size_t>(i)];
        if (need_b)
          for (size_t i = 0; i < bi->value.size(); ++i) bi->grad[i] += ci->grad[static_cast<size_t>(an) + i];
      } else {
        const int64_t bcols = cols - acols;
        for (int64_t r = 0; r < rows; ++r) {
          const double* g = ci->grad.data() + r * cols;
          if (need_a) {
            double* da = ai->grad.data() + r * acols;
            for (int64_t j = 0; j < acols; ++j) da[j] += g[j];
          }
          if (need_b) {
            double* db = bi->grad.data() + r * bcols;
            for (int64_t j = 0; j < bcols; ++j) db[j] += g[acols + j];
          }
        }
      }
    });
  }
  return c;
}

Tensor slice_cols(const Tensor& a, int64_t begin, int64_t end) {
  if (a.rank() != 2 || begin < 0 || end > a.dim(1) || begin >= end) {
    fail("slice_cols", "bad slice [" + std::to_string(begin) + "," +
                           std::to_string(end) + ") of " + shape_str(a.shape()));
  }
  check_finite("slice_cols", a);
  const int64_t rows = a.dim(0), cols = a.dim(1), w = end - begin;
  std::vector<double> out(static_cast<size_t>(rows * w));
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(out.data() + r * w, a.data() + r * cols + begin,
                static_cast<size_t>(w) * sizeof(double));
  }
  Tensor c = make_result({rows, w}, std::move(out));
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    record("slice_cols", c, {&a}, [ai, ci, rows, cols, w, begin] {
      ensure_grad(ai);
      for (int64_t r = 0; r < rows; ++r) {
        const double* g = ci->grad.data() + r * w;
        double* da = ai->grad.data() + r * cols + begin;
        for (int64_t j = 0; j < w; ++j) da[j] += g[j];
      }
    });
  }
  return c;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    fail("reshape", shape_str(a.shape()) + " -> " + shape_str(shape) +
                        " changes element count");
  }
  check_finite("reshape", a);
  std::vector<double> out(a.data(), a.data() + a.numel());
  Tensor c = make_result(std::move(shape), std::move(out));
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    record("reshape", c, {&a}, [ai, ci] {
      ensure_grad(ai);
      for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += ci->grad[i];
    });
  }
  return c;
}

namespace {

void check_grouping(const char* op, const Tensor& a, int64_t g) {
  if (a.rank() != 2 || g <= 0 || a.dim(0) % g != 0) {
    fail(op, "rows of " + shape_str(a.shape()) + " not divisible into groups of " +
                 std::to_string(g));
  }
}

}  // namespace

Tensor softmax_rows_grouped(const Tensor& a, int64_t g) {
  check_grouping("softmax_rows_grouped", a, g);
  check_finite("softmax_rows_grouped", a);
  const int64_t rows = a.dim(0), cols = a.dim(1), blocks = rows / g;
  std::vector<double> out(static_cast<size_t>(rows * cols));
  for (int64_t b = 0; b < blocks; ++b) {
    for (int64_t j = 0; j < cols; ++j) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t q = 0; q < g; ++q) mx = std::max(mx, a.data()[(b * g + q) * cols + j]);
      double s = 0.0;
      for (int64_t q = 0; q < g; ++q) {
        const double e = std::exp(a.data()[(b * g + q) * cols + j] - mx);
        out[static_cast<size_t>((b * g + q) * cols + j)] = e;
        s += e;
      }
      for (int64_t q = 0; q < g; ++q) out[static_cast<size_t>((b * g + q) * cols + j)] /= s;
    }
  }
  Tensor c = make_result(a.shape(), std::move(out));
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    record("softmax_rows_grouped", c, {&a}, [ai, ci, blocks, g, cols] {
      ensure_grad(ai);
      for (int64_t b = 0; b < blocks; ++b) {
        for (int64_t j = 0; j < cols; ++j) {
          double dot = 0.0;
          for (int64_t q = 0; q < g; ++q) {
            const size_t k = static_cast<size_t>((b * g + q) * cols + j);
            dot += ci->grad[k] * ci->value[k];
          }
          for (int64_t q = 0; q < g; ++q) {
            const size_t k = static_cast<size_t>((b * g + q) * cols + j);
            ai->grad[k] += ci->value[k] * (ci->grad[k] - dot);
          }
        }
      }
    });
  }
  return c;
}

Tensor sum_rows_grouped(const Tensor& a, int64_t g) {
  check_grouping("sum_rows_grouped", a, g);
  check_finite("sum_rows_grouped", a);
  const int64_t rows = a.dim(0), cols = a.dim(1), blocks = rows / g;
  std::vector<double> out(static_cast<size_t>(blocks * cols), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = a.data() + r * cols;
    double* y = out.data() + (r / g) * cols;
    for (int64_t j = 0; j < cols; ++j) y[j] += x[j];
  }
  Tensor c = make_result({blocks, cols}, std::move(out));
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    record("sum_rows_grouped", c, {&a}, [ai, ci, rows, g, cols] {
      ensure_grad(ai);
      for (int64_t r = 0; r < rows; ++r) {
        const double* gy = ci->grad.data() + (r / g) * cols;
        double* da = ai->grad.data() + r * cols;
        for (int64_t j = 0; j < cols; ++j) da[j] += gy[j];
      }
    });
  }
  return c;
}

Tensor maxpool_rows_grouped(const Tensor& a, int64_t g) {
  check_grouping("maxpool_rows_grouped", a, g);
  check_finite("maxpool_rows_grouped", a);
  const int64_t rows = a.dim(0), cols = a.dim(1), blocks = rows / g;
  std::vector<double> out(static_cast<size_t>(blocks * cols));
  auto arg = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(blocks * cols), 0);
  for (int64_t b = 0; b < blocks; ++b) {
    for (int64_t j = 0; j < cols; ++j) {
      double best = a.data()[b * g * cols + j];
      int32_t bq = 0;
      for (int64_t q = 1; q < g; ++q) {
        const double v = a.data()[(b * g + q) * cols + j];
        if (v > best) {
          best = v;
          bq = static_cast<int32_t>(q);
        }
      }
      out[static_cast<size_t>(b * cols + j)] = best;
      (*arg)[static_cast<size_t>(b * cols + j)] = bq;
    }
  }
  Tensor c = make_result({blocks, cols}, std::move(out));
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    record("maxpool_rows_grouped", c, {&a}, [ai, ci, blocks, g, cols, arg] {
      ensure_grad(ai);
      for (int64_t b = 0; b < blocks; ++b) {
        for (int64_t j = 0; j < cols; ++j) {
          const int64_t q = (*arg)[static_cast<size_t>(b * cols + j)];
          ai->grad[static_cast<size_t>((b * g + q) * cols + j)] +=
              ci->grad[static_cast<size_t>(b * cols + j)];
        }
      }
    });
  }
  return c;
}

Tensor l2norm_rows(const Tensor& a) {
  if (a.rank() != 2) fail("l2norm_rows", "expects 2-D, got " + shape_str(a.shape()));
  check_finite("l2norm_rows", a);
  constexpr double kEps = 1e-12;
  const int64_t rows = a.dim(0), cols = a.dim(1);
  std::vector<double> out(static_cast<size_t>(rows * cols));
  auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = a.data() + r * cols;
    double q = 0.0;
    for (int64_t j = 0; j < cols; ++j) q += x[j] * x[j];
    const double n = std::sqrt(q) + kEps;
    (*norms)[static_cast<size_t>(r)] = n;
    for (int64_t j = 0; j < cols; ++j) out[static_cast<size_t>(r * cols + j)] = x[j] / n;
  }
  Tensor c = make_result(a.shape(), std::move(out));
  if (taping({&a})) {
    auto ai = a.impl();
    auto ci = c.impl();
    record("l2norm_rows", c, {&a}, [ai, ci, rows, cols, norms] {
      ensure_grad(ai);
      for (int64_t r = 0; r < rows; ++r) {
        const double n = (*norms)[static_cast<size_t>(r)];
        const double s = n - kEps;
        const double* x = ai->value.data() + r * cols;
        const double* g = ci->grad.data() + r * cols;
        double dot = 0.0;
        for (int64_t j = 0; j < cols; ++j) dot += g[j] * x[j];
        double* da = ai->grad.data() + r * cols;
        for (int64_t j = 0; j < cols; ++j) {
          double d = g[j] / n;
          if (s > 0.0) d -= x[j] * dot / (s * n * n);
          da[j] += d;
        }
      }
    });
  }
  return c;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

double CosineSchedule::lr_at(int epoch) const {
  const double e = std::clamp(static_cast<double>(epoch), 0.0,
                              static_cast<double>(total_epochs));
  return min_lr + 0.5 * (base_lr - min_lr) *
                      (1.0 + std::cos(M_PI * e / static_cast<double>(total_epochs)));
}

void adam_step(std::vector<Tensor>& params, AdamState& state, int epoch) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(static_cast<size_t>(params[i].numel()), 0.0);
      state.v[i].assign(static_cast<size_t>(params[i].numel()), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw TensorError("adam_step: state does not match parameter list");
  }
  const double lr = state.schedule.lr_at(epoch);
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) {
      throw TensorError("adam_step: missing grads for parameter " + std::to_string(i));
    }
    if (state.m[i].size() != static_cast<size_t>(p.numel())) {
      throw TensorError("adam_step: moment buffer shape mismatch");
    }
    double* w = p.data();
    double* g = p.grad();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    for (int64_t j = 0; j < p.numel(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    p.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_f64(std::ostream& os, double d) {
  uint64_t v;
  std::memcpy(&v, &d, 8);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw TensorError("checkpoint: unexpected EOF");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw TensorError("checkpoint: unexpected EOF");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw TensorError("checkpoint: cannot open " + path + " for writing");
  os.write("JGCK", 4);
  put_u32(os, 1);
  put_u32(os, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u32(os, static_cast<uint32_t>(t.dim(i)));
    for (int64_t i = 0; i < t.numel(); ++i) put_f64(os, t.data()[i]);
  }
  if (!os) throw TensorError("checkpoint: write failed for " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TensorError("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "JGCK", 4) != 0) {
    throw TensorError("checkpoint: bad magic in " + path);
  }
  const uint32_t version = get_u32(is);
  if (version != 1) {
    throw TensorError("checkpoint: unsupported version " + std::to_string(version));
  }
  const uint32_t count = get_u32(is);
  NamedTensors out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw TensorError("checkpoint: unexpected EOF");
    const uint32_t rank = get_u32(is);
    Shape shape(rank);
    int64_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<int64_t>(get_u32(is));
      n *= shape[d];
    }
    std::vector<double> data(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) data[static_cast<size_t>(j)] = get_f64(is);
    out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace jigsaw::ad

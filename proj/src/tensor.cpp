#include "permfree/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace permfree {

namespace {

thread_local bool g_recording = true;

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.value()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw NumericError(msg);
}

bool want_grad(std::initializer_list<const Tensor*> inputs) {
  if (!g_recording) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Upstream grad of an output node; empty when the output never influenced the
// loss, in which case the closure has nothing to do.
const std::vector<double>* out_grad(const std::shared_ptr<TensorImpl>& o) {
  if (o->grad.size() != o->value.size()) return nullptr;
  return &o->grad;
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> value, bool requires_grad) {
  for (int d : shape) require(d > 0, "tensor extents must be positive, got " + shape_str(shape));
  require(shape_numel(shape) == static_cast<int64_t>(value.size()),
          "tensor data length does not match shape " + shape_str(shape));
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->value = std::move(value);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(shape, std::vector<double>(static_cast<size_t>(shape_numel(shape)), 0.0));
}

Tensor Tensor::full(const Shape& shape, double v) {
  return Tensor(shape, std::vector<double>(static_cast<size_t>(shape_numel(shape)), v));
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::uniform(const Shape& shape, double lo, double hi, SplitRng& rng) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

double Tensor::item() const {
  require(numel() == 1, "item() requires a single-element tensor, got " + shape_str(shape()));
  return impl_->value[0];
}

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void Tape::run_backward(const Tensor& loss) {
  if (consumed_) throw NumericError("backward called on an already consumed tape");
  require(loss.defined() && loss.numel() == 1 && loss.ndim() == 0,
          "backward requires a scalar loss");
  require(loss.requires_grad(), "backward requires a loss recorded on the tape");
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
  consumed_ = true;
}

void Tape::clear() {
  entries_.clear();
  consumed_ = false;
}

void backward(const Tensor& loss) { Tape::active().run_backward(loss); }

void clear_tape() { Tape::active().clear(); }

bool grad_recording_enabled() { return g_recording; }

NoGradGuard::NoGradGuard() : prev_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = prev_; }

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const size_t n = a.value().size();
  Tensor out;
  enum class Mode { same, rowvec, scalar } mode;
  if (a.shape() == b.shape()) {
    mode = Mode::same;
  } else if (b.ndim() == 0) {
    mode = Mode::scalar;
  } else if (a.ndim() == 2 && b.ndim() == 1 && b.dim(0) == a.dim(1)) {
    mode = Mode::rowvec;
  } else {
    throw NumericError("add: shapes not conformant " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  }
  std::vector<double> v(n);
  const auto& av = a.value();
  const auto& bv = b.value();
  switch (mode) {
    case Mode::same:
      for (size_t i = 0; i < n; ++i) v[i] = av[i] + bv[i];
      break;
    case Mode::scalar:
      for (size_t i = 0; i < n; ++i) v[i] = av[i] + bv[0];
      break;
    case Mode::rowvec: {
      const size_t cols = static_cast<size_t>(a.dim(1));
      for (size_t i = 0; i < n; ++i) v[i] = av[i] + bv[i % cols];
      break;
    }
  }
  out = Tensor(a.shape(), std::move(v));
  check_finite(out, "add");
  if (want_grad({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::active().record([ai, bi, oi, mode, n] {
      const auto* og = out_grad(oi);
      if (!og) return;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (size_t i = 0; i < n; ++i) ai->grad[i] += (*og)[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        switch (mode) {
          case Mode::same:
            for (size_t i = 0; i < n; ++i) bi->grad[i] += (*og)[i];
            break;
          case Mode::scalar:
            for (size_t i = 0; i < n; ++i) bi->grad[0] += (*og)[i];
            break;
          case Mode::rowvec: {
            const size_t cols = bi->value.size();
            for (size_t i = 0; i < n; ++i) bi->grad[i % cols] += (*og)[i];
            break;
          }
        }
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  const size_t n = a.value().size();
  bool scalar_b = b.ndim() == 0;
  if (!scalar_b && a.shape() != b.shape()) {
    throw NumericError("mul: shapes not conformant " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  }
  std::vector<double> v(n);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (scalar_b) {
    for (size_t i = 0; i < n; ++i) v[i] = av[i] * bv[0];
  } else {
    for (size_t i = 0; i < n; ++i) v[i] = av[i] * bv[i];
  }
  Tensor out(a.shape(), std::move(v));
  check_finite(out, "mul");
  if (want_grad({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::active().record([ai, bi, oi, scalar_b, n] {
      const auto* og = out_grad(oi);
      if (!og) return;
      if (ai->requires_grad) {
        ai->ensure_grad();
        if (scalar_b) {
          for (size_t i = 0; i < n; ++i) ai->grad[i] += (*og)[i] * bi->value[0];
        } else {
          for (size_t i = 0; i < n; ++i) ai->grad[i] += (*og)[i] * bi->value[i];
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        if (scalar_b) {
          for (size_t i = 0; i < n; ++i) bi->grad[0] += (*og)[i] * ai->value[i];
        } else {
          for (size_t i = 0; i < n; ++i) bi->grad[i] += (*og)[i] * ai->value[i];
        }
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Bwd bwd) {
  const size_t n = x.value().size();
  std::vector<double> v(n);
  for (size_t i = 0; i < n; ++i) v[i] = fwd(x.value()[i]);
  Tensor out(x.shape(), std::move(v));
  check_finite(out, name);
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::active().record([xi, oi, bwd, n] {
      const auto* og = out_grad(oi);
      if (!og) return;
      xi->ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        xi->grad[i] += (*og)[i] * bwd(xi->value[i], oi->value[i]);
      }
    });
  }
  return out;
}

}  // namespace

Tensor tanh(const Tensor& x) {
  return unary_op(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double o) { return 1.0 - o * o; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double o) { return o * (1.0 - o); });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, "exp", [](double v) { return std::exp(v); },
      [](double, double o) { return o; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      x, "log", [](double v) { return std::log(v); },
      [](double in, double) { return 1.0 / in; });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

namespace {

// C(m×n) += A(m×k)·B(k×n)
void mm_nn(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      if (a == 0.0) continue;
      const double* brow = B + p * n;
      double* crow = C + i * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// C(m×k) += A(m×n)·B(k×n)^T
void mm_nt(const double* A, const double* B, double* C, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < k; ++j) {
      const double* arow = A + i * n;
      const double* brow = B + j * n;
      double acc = 0.0;
      for (int p = 0; p < n; ++p) acc += arow[p] * brow[p];
      C[i * k + j] += acc;
    }
  }
}

// C(k×n) += A(m×k)^T·B(m×n)
void mm_tn(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    const double* brow = B + i * n;
    for (int p = 0; p < k; ++p) {
      const double a = arow[p];
      if (a == 0.0) continue;
      double* crow = C + p * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
          "matmul: shapes not conformant " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(static_cast<size_t>(m) * n, 0.0);
  mm_nn(a.value().data(), b.value().data(), v.data(), m, k, n);
  Tensor out({m, n}, std::move(v));
  check_finite(out, "matmul");
  if (want_grad({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::active().record([ai, bi, oi, m, k, n] {
      const auto* og = out_grad(oi);
      if (!og) return;
      if (ai->requires_grad) {
        ai->ensure_grad();
        mm_nt(og->data(), bi->value.data(), ai->grad.data(), m, n, k);
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        mm_tn(ai->value.data(), og->data(), bi->grad.data(), m, k, n);
      }
    });
  }
  return out;
}

Tensor matvec(const Tensor& mt, const Tensor& v) {
  require(mt.ndim() == 2 && v.ndim() == 1 && mt.dim(1) == v.dim(0),
          "matvec: shapes not conformant " + shape_str(mt.shape()) + " vs " +
              shape_str(v.shape()));
  const int m = mt.dim(0), k = mt.dim(1);
  std::vector<double> ov(static_cast<size_t>(m), 0.0);
  const double* M = mt.value().data();
  const double* x = v.value().data();
  for (int i = 0; i < m; ++i) {
    double acc = 0.0;
    const double* mrow = M + i * k;
    for (int j = 0; j < k; ++j) acc += mrow[j] * x[j];
    ov[static_cast<size_t>(i)] = acc;
  }
  Tensor out({m}, std::move(ov));
  check_finite(out, "matvec");
  if (want_grad({&mt, &v})) {
    out.set_requires_grad(true);
    auto mi = mt.impl(), vi = v.impl(), oi = out.impl();
    Tape::active().record([mi, vi, oi, m, k] {
      const auto* og = out_grad(oi);
      if (!og) return;
      if (mi->requires_grad) {
        mi->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const double g = (*og)[static_cast<size_t>(i)];
          if (g == 0.0) continue;
          double* grow = mi->grad.data() + i * k;
          const double* x = vi->value.data();
          for (int j = 0; j < k; ++j) grow[j] += g * x[j];
        }
      }
      if (vi->requires_grad) {
        vi->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const double g = (*og)[static_cast<size_t>(i)];
          if (g == 0.0) continue;
          const double* mrow = mi->value.data() + i * k;
          for (int j = 0; j < k; ++j) vi->grad[static_cast<size_t>(j)] += g * mrow[j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  require(a.ndim() == b.ndim() && (axis == 0 || axis == 1) && axis < a.ndim(),
          "concat: incompatible ranks or axis");
  Shape os = a.shape();
  if (a.ndim() == 1) {
    os[0] = a.dim(0) + b.dim(0);
  } else {
    require(a.dim(1 - axis) == b.dim(1 - axis),
            "concat: shapes not conformant " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    os[static_cast<size_t>(axis)] = a.dim(axis) + b.dim(axis);
  }
  std::vector<double> v(static_cast<size_t>(shape_numel(os)));
  const auto& av = a.value();
  const auto& bv = b.value();
  if (a.ndim() == 1 || axis == 0) {
    std::copy(av.begin(), av.end(), v.begin());
    std::copy(bv.begin(), bv.end(), v.begin() + static_cast<int64_t>(av.size()));
  } else {
    const int rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    for (int r = 0; r < rows; ++r) {
      std::copy(av.begin() + static_cast<int64_t>(r) * ca,
                av.begin() + static_cast<int64_t>(r + 1) * ca,
                v.begin() + static_cast<int64_t>(r) * (ca + cb));
      std::copy(bv.begin() + static_cast<int64_t>(r) * cb,
                bv.begin() + static_cast<int64_t>(r + 1) * cb,
                v.begin() + static_cast<int64_t>(r) * (ca + cb) + ca);
    }
  }
  Tensor out(os, std::move(v));
  if (want_grad({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    const bool flat = a.ndim() == 1 || axis == 0;
    Tape::active().record([ai, bi, oi, flat] {
      const auto* og = out_grad(oi);
      if (!og) return;
      const size_t na = ai->value.size(), nb = bi->value.size();
      if (flat) {
        if (ai->requires_grad) {
          ai->ensure_grad();
          for (size_t i = 0; i < na; ++i) ai->grad[i] += (*og)[i];
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          for (size_t i = 0; i < nb; ++i) bi->grad[i] += (*og)[na + i];
        }
      } else {
        const int rows = ai->shape[0], ca = ai->shape[1], cb = bi->shape[1];
        for (int r = 0; r < rows; ++r) {
          const double* orow = og->data() + static_cast<int64_t>(r) * (ca + cb);
          if (ai->requires_grad) {
            ai->ensure_grad();
            for (int c = 0; c < ca; ++c) ai->grad[static_cast<size_t>(r) * ca + c] += orow[c];
          }
          if (bi->requires_grad) {
            bi->ensure_grad();
            for (int c = 0; c < cb; ++c)
              bi->grad[static_cast<size_t>(r) * cb + c] += orow[ca + c];
          }
        }
      }
    });
  }
  return out;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  require(!rows.empty(), "stack_rows: empty input");
  const int k = rows[0].dim(0);
  const int t = static_cast<int>(rows.size());
  std::vector<double> v(static_cast<size_t>(t) * k);
  bool grad = false;
  for (int r = 0; r < t; ++r) {
    require(rows[static_cast<size_t>(r)].ndim() == 1 && rows[static_cast<size_t>(r)].dim(0) == k,
            "stack_rows: rows must be 1-d of equal length");
    const auto& rv = rows[static_cast<size_t>(r)].value();
    std::copy(rv.begin(), rv.end(), v.begin() + static_cast<int64_t>(r) * k);
    grad = grad || rows[static_cast<size_t>(r)].requires_grad();
  }
  Tensor out({t, k}, std::move(v));
  if (g_recording && grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(rows.size());
    for (const auto& r : rows) impls.push_back(r.impl());
    auto oi = out.impl();
    Tape::active().record([impls, oi, k] {
      const auto* og = out_grad(oi);
      if (!og) return;
      for (size_t r = 0; r < impls.size(); ++r) {
        if (!impls[r]->requires_grad) continue;
        impls[r]->ensure_grad();
        const double* orow = og->data() + r * static_cast<size_t>(k);
        for (int c = 0; c < k; ++c) impls[r]->grad[static_cast<size_t>(c)] += orow[c];
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  require(axis >= 0 && axis < x.ndim() && start >= 0 && len > 0 &&
              start + len <= x.dim(axis),
          "slice: range out of bounds for " + shape_str(x.shape()));
  Shape os = x.shape();
  os[static_cast<size_t>(axis)] = len;
  std::vector<double> v(static_cast<size_t>(shape_numel(os)));
  if (x.ndim() == 1 || axis == 0) {
    const int rowlen = x.ndim() == 1 ? 1 : x.dim(1);
    std::copy(x.value().begin() + static_cast<int64_t>(start) * rowlen,
              x.value().begin() + static_cast<int64_t>(start + len) * rowlen, v.begin());
  } else {
    const int rows = x.dim(0), cols = x.dim(1);
    for (int r = 0; r < rows; ++r) {
      std::copy(x.value().begin() + static_cast<int64_t>(r) * cols + start,
                x.value().begin() + static_cast<int64_t>(r) * cols + start + len,
                v.begin() + static_cast<int64_t>(r) * len);
    }
  }
  Tensor out(os, std::move(v));
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::active().record([xi, oi, axis, start, len] {
      const auto* og = out_grad(oi);
      if (!og) return;
      xi->ensure_grad();
      if (xi->shape.size() == 1 || axis == 0) {
        const int rowlen = xi->shape.size() == 1 ? 1 : xi->shape[1];
        for (size_t i = 0; i < og->size(); ++i) {
          xi->grad[static_cast<size_t>(start) * rowlen + i] += (*og)[i];
        }
      } else {
        const int rows = xi->shape[0], cols = xi->shape[1];
        for (int r = 0; r < rows; ++r) {
          for (int c = 0; c < len; ++c) {
            xi->grad[static_cast<size_t>(r) * cols + start + c] +=
                (*og)[static_cast<size_t>(r) * len + c];
          }
        }
      }
    });
  }
  return out;
}

Tensor row(const Tensor& x, int i) {
  require(x.ndim() == 2 && i >= 0 && i < x.dim(0), "row: index out of range");
  return reshape(slice(x, 0, i, 1), {x.dim(1)});
}

Tensor elem(const Tensor& x, int i) {
  require(x.ndim() == 1 && i >= 0 && i < x.dim(0), "elem: index out of range");
  return reshape(slice(x, 0, i, 1), {});
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
              shape_str(shape));
  Tensor out(shape, x.value());
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::active().record([xi, oi] {
      const auto* og = out_grad(oi);
      if (!og) return;
      xi->ensure_grad();
      for (size_t i = 0; i < og->size(); ++i) xi->grad[i] += (*og)[i];
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  require(x.ndim() == 2, "transpose: expects a 2-d tensor");
  const int m = x.dim(0), n = x.dim(1);
  std::vector<double> v(static_cast<size_t>(m) * n);
  const double* X = x.value().data();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) v[static_cast<size_t>(j) * m + i] = X[static_cast<int64_t>(i) * n + j];
  }
  Tensor out({n, m}, std::move(v));
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::active().record([xi, oi, m, n] {
      const auto* og = out_grad(oi);
      if (!og) return;
      xi->ensure_grad();
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          xi->grad[static_cast<size_t>(i) * n + j] += (*og)[static_cast<size_t>(j) * m + i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions / normalizations
// ---------------------------------------------------------------------------

namespace {

void rows_of(const Tensor& x, int* rows, int* cols, const char* op) {
  if (x.ndim() == 1) {
    *rows = 1;
    *cols = x.dim(0);
  } else if (x.ndim() == 2) {
    *rows = x.dim(0);
    *cols = x.dim(1);
  } else {
    throw NumericError(std::string(op) + ": expects a 1-d or 2-d tensor");
  }
}

}  // namespace

Tensor softmax(const Tensor& x) {
  int rows, cols;
  rows_of(x, &rows, &cols, "softmax");
  std::vector<double> v(x.value().size());
  for (int r = 0; r < rows; ++r) {
    const double* in = x.value().data() + static_cast<int64_t>(r) * cols;
    double* out = v.data() + static_cast<int64_t>(r) * cols;
    double mx = in[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) {
      out[c] = std::exp(in[c] - mx);
      z += out[c];
    }
    for (int c = 0; c < cols; ++c) out[c] /= z;
  }
  Tensor out(x.shape(), std::move(v));
  check_finite(out, "softmax");
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::active().record([xi, oi, rows, cols] {
      const auto* og = out_grad(oi);
      if (!og) return;
      xi->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const double* s = oi->value.data() + static_cast<int64_t>(r) * cols;
        const double* g = og->data() + static_cast<int64_t>(r) * cols;
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += s[c] * g[c];
        double* xg = xi->grad.data() + static_cast<int64_t>(r) * cols;
        for (int c = 0; c < cols; ++c) xg[c] += s[c] * (g[c] - dot);
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x) {
  int rows, cols;
  rows_of(x, &rows, &cols, "log_softmax");
  std::vector<double> v(x.value().size());
  for (int r = 0; r < rows; ++r) {
    const double* in = x.value().data() + static_cast<int64_t>(r) * cols;
    double* out = v.data() + static_cast<int64_t>(r) * cols;
    double mx = in[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
    const double lz = mx + std::log(z);
    for (int c = 0; c < cols; ++c) out[c] = in[c] - lz;
  }
  Tensor out(x.shape(), std::move(v));
  check_finite(out, "log_softmax");
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::active().record([xi, oi, rows, cols] {
      const auto* og = out_grad(oi);
      if (!og) return;
      xi->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const double* lsm = oi->value.data() + static_cast<int64_t>(r) * cols;
        const double* g = og->data() + static_cast<int64_t>(r) * cols;
        double gsum = 0.0;
        for (int c = 0; c < cols; ++c) gsum += g[c];
        double* xg = xi->grad.data() + static_cast<int64_t>(r) * cols;
        for (int c = 0; c < cols; ++c) xg[c] += g[c] - std::exp(lsm[c]) * gsum;
      }
    });
  }
  return out;
}

Tensor logsumexp(const Tensor& x) {
  int rows, cols;
  rows_of(x, &rows, &cols, "logsumexp");
  std::vector<double> v(static_cast<size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const double* in = x.value().data() + static_cast<int64_t>(r) * cols;
    double mx = in[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
    v[static_cast<size_t>(r)] = mx + std::log(z);
  }
  Tensor out(x.ndim() == 1 ? Shape{} : Shape{rows}, std::move(v));
  check_finite(out, "logsumexp");
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::active().record([xi, oi, rows, cols] {
      const auto* og = out_grad(oi);
      if (!og) return;
      xi->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const double g = (*og)[static_cast<size_t>(r)];
        if (g == 0.0) continue;
        const double lse = oi->value[static_cast<size_t>(r)];
        const double* in = xi->value.data() + static_cast<int64_t>(r) * cols;
        double* xg = xi->grad.data() + static_cast<int64_t>(r) * cols;
        for (int c = 0; c < cols; ++c) xg[c] += g * std::exp(in[c] - lse);
      }
    });
  }
  return out;
}

namespace {

Tensor reduce_all(const Tensor& x, bool take_mean) {
  const size_t n = x.value().size();
  double acc = 0.0;
  for (double v : x.value()) acc += v;
  const double denom = take_mean ? static_cast<double>(n) : 1.0;
  Tensor out = Tensor::scalar(acc / denom);
  check_finite(out, take_mean ? "mean" : "sum");
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::active().record([xi, oi, denom, n] {
      const auto* og = out_grad(oi);
      if (!og) return;
      xi->ensure_grad();
      const double g = (*og)[0] / denom;
      for (size_t i = 0; i < n; ++i) xi->grad[i] += g;
    });
  }
  return out;
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, false); }
Tensor mean(const Tensor& x) { return reduce_all(x, true); }

// ---------------------------------------------------------------------------
// convolution / pooling
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.ndim() == 3 && w.ndim() == 4 && b.ndim() == 1, "conv2d: expects x C×H×W, w O×C×kh×kw, b O");
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(w.dim(1) == ci, "conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                              shape_str(w.shape()));
  require(b.dim(0) == co, "conv2d: bias length mismatch");
  const int ph = kh / 2, pw = kw / 2;
  require(h + 2 * ph >= kh && wd + 2 * pw >= kw,
          "conv2d: input smaller than receptive field after padding");
  std::vector<double> v(static_cast<size_t>(co) * h * wd, 0.0);
  const double* X = x.value().data();
  const double* W = w.value().data();
  auto xat = [&](int c, int i, int j) { return X[(static_cast<int64_t>(c) * h + i) * wd + j]; };
  for (int o = 0; o < co; ++o) {
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < wd; ++j) {
        double acc = b.value()[static_cast<size_t>(o)];
        for (int c = 0; c < ci; ++c) {
          for (int di = 0; di < kh; ++di) {
            const int si = i + di - ph;
            if (si < 0 || si >= h) continue;
            const double* wrow = W + ((static_cast<int64_t>(o) * ci + c) * kh + di) * kw;
            for (int dj = 0; dj < kw; ++dj) {
              const int sj = j + dj - pw;
              if (sj < 0 || sj >= wd) continue;
              acc += xat(c, si, sj) * wrow[dj];
            }
          }
        }
        v[(static_cast<int64_t>(o) * h + i) * wd + j] = acc;
      }
    }
  }
  Tensor out({co, h, wd}, std::move(v));
  check_finite(out, "conv2d");
  if (want_grad({&x, &w, &b})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
    Tape::active().record([xi, wi, bi, oi, ci, h, wd, co, kh, kw, ph, pw] {
      const auto* og = out_grad(oi);
      if (!og) return;
      if (bi->requires_grad) bi->ensure_grad();
      if (wi->requires_grad) wi->ensure_grad();
      if (xi->requires_grad) xi->ensure_grad();
      for (int o = 0; o < co; ++o) {
        for (int i = 0; i < h; ++i) {
          for (int j = 0; j < wd; ++j) {
            const double g = (*og)[(static_cast<int64_t>(o) * h + i) * wd + j];
            if (g == 0.0) continue;
            if (bi->requires_grad) bi->grad[static_cast<size_t>(o)] += g;
            for (int c = 0; c < ci; ++c) {
              for (int di = 0; di < kh; ++di) {
                const int si = i + di - ph;
                if (si < 0 || si >= h) continue;
                for (int dj = 0; dj < kw; ++dj) {
                  const int sj = j + dj - pw;
                  if (sj < 0 || sj >= wd) continue;
                  const int64_t xoff = (static_cast<int64_t>(c) * h + si) * wd + sj;
                  const int64_t woff = ((static_cast<int64_t>(o) * ci + c) * kh + di) * kw + dj;
                  if (wi->requires_grad) wi->grad[static_cast<size_t>(woff)] += g * xi->value[static_cast<size_t>(xoff)];
                  if (xi->requires_grad) xi->grad[static_cast<size_t>(xoff)] += g * wi->value[static_cast<size_t>(woff)];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor maxpool2d(const Tensor& x, int kh, int kw, int sh, int sw) {
  require(x.ndim() == 3 && kh > 0 && kw > 0 && sh > 0 && sw > 0, "maxpool2d: bad arguments");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = (h + sh - 1) / sh, ow = (w + sw - 1) / sw;
  std::vector<double> v(static_cast<size_t>(c) * oh * ow);
  std::vector<int64_t> argmax(v.size());
  const double* X = x.value().data();
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        int64_t besti = -1;
        for (int di = 0; di < kh; ++di) {
          const int si = i * sh + di;
          if (si >= h) break;
          for (int dj = 0; dj < kw; ++dj) {
            const int sj = j * sw + dj;
            if (sj >= w) break;
            const int64_t off = (static_cast<int64_t>(ch) * h + si) * w + sj;
            if (X[off] > best) {
              best = X[off];
              besti = off;
            }
          }
        }
        const int64_t ooff = (static_cast<int64_t>(ch) * oh + i) * ow + j;
        v[static_cast<size_t>(ooff)] = best;
        argmax[static_cast<size_t>(ooff)] = besti;
      }
    }
  }
  Tensor out({c, oh, ow}, std::move(v));
  check_finite(out, "maxpool2d");
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::active().record([xi, oi, argmax = std::move(argmax)] {
      const auto* og = out_grad(oi);
      if (!og) return;
      xi->ensure_grad();
      for (size_t i = 0; i < og->size(); ++i) {
        xi->grad[static_cast<size_t>(argmax[i])] += (*og)[i];
      }
    });
  }
  return out;
}

Tensor conv1d_same(const Tensor& x, const Tensor& filters) {
  require(x.ndim() == 1 && filters.ndim() == 2, "conv1d_same: expects (L), (nf×width)");
  const int l = x.dim(0), nf = filters.dim(0), width = filters.dim(1);
  const int pad = width / 2;
  std::vector<double> v(static_cast<size_t>(l) * nf, 0.0);
  const double* X = x.value().data();
  const double* F = filters.value().data();
  for (int i = 0; i < l; ++i) {
    for (int f = 0; f < nf; ++f) {
      double acc = 0.0;
      const double* frow = F + static_cast<int64_t>(f) * width;
      for (int j = 0; j < width; ++j) {
        const int s = i + j - pad;
        if (s < 0 || s >= l) continue;
        acc += X[s] * frow[j];
      }
      v[static_cast<size_t>(i) * nf + f] = acc;
    }
  }
  Tensor out({l, nf}, std::move(v));
  check_finite(out, "conv1d");
  if (want_grad({&x, &filters})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), fi = filters.impl(), oi = out.impl();
    Tape::active().record([xi, fi, oi, l, nf, width, pad] {
      const auto* og = out_grad(oi);
      if (!og) return;
      if (xi->requires_grad) xi->ensure_grad();
      if (fi->requires_grad) fi->ensure_grad();
      for (int i = 0; i < l; ++i) {
        for (int f = 0; f < nf; ++f) {
          const double g = (*og)[static_cast<size_t>(i) * nf + f];
          if (g == 0.0) continue;
          for (int j = 0; j < width; ++j) {
            const int s = i + j - pad;
            if (s < 0 || s >= l) continue;
            if (xi->requires_grad)
              xi->grad[static_cast<size_t>(s)] += g * fi->value[static_cast<size_t>(f) * width + j];
            if (fi->requires_grad)
              fi->grad[static_cast<size_t>(f) * width + j] += g * xi->value[static_cast<size_t>(s)];
          }
        }
      }
    });
  }
  return out;
}

Tensor image_to_frames(const Tensor& x) {
  require(x.ndim() == 3, "image_to_frames: expects C×T×F");
  const int c = x.dim(0), t = x.dim(1), f = x.dim(2);
  std::vector<double> v(static_cast<size_t>(c) * t * f);
  const double* X = x.value().data();
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < t; ++i) {
      for (int j = 0; j < f; ++j) {
        v[(static_cast<int64_t>(i) * c + ch) * f + j] = X[(static_cast<int64_t>(ch) * t + i) * f + j];
      }
    }
  }
  Tensor out({t, c * f}, std::move(v));
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::active().record([xi, oi, c, t, f] {
      const auto* og = out_grad(oi);
      if (!og) return;
      xi->ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        for (int i = 0; i < t; ++i) {
          for (int j = 0; j < f; ++j) {
            xi->grad[(static_cast<size_t>(ch) * t + i) * f + j] +=
                (*og)[(static_cast<size_t>(i) * c + ch) * f + j];
          }
        }
      }
    });
  }
  return out;
}

Tensor embed_lookup(const Tensor& table, const std::vector<int>& ids) {
  require(table.ndim() == 2, "embed_lookup: table must be 2-d");
  const int v = table.dim(0), e = table.dim(1);
  for (int id : ids) {
    require(id >= 0 && id < v, "embed_lookup: id out of range [0," + std::to_string(v) + ")");
  }
  const int n = static_cast<int>(ids.size());
  std::vector<double> out_v(static_cast<size_t>(n) * e);
  for (int i = 0; i < n; ++i) {
    std::copy(table.value().begin() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * e,
              table.value().begin() + static_cast<int64_t>(ids[static_cast<size_t>(i)] + 1) * e,
              out_v.begin() + static_cast<int64_t>(i) * e);
  }
  Tensor out({n, e}, std::move(out_v));
  if (want_grad({&table})) {
    out.set_requires_grad(true);
    auto ti = table.impl(), oi = out.impl();
    Tape::active().record([ti, oi, ids, e] {
      const auto* og = out_grad(oi);
      if (!og) return;
      ti->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        const double* orow = og->data() + i * static_cast<size_t>(e);
        double* trow = ti->grad.data() + static_cast<size_t>(ids[i]) * e;
        for (int j = 0; j < e; ++j) trow[j] += orow[j];
      }
    });
  }
  return out;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  require(h > 0.0, "grad_check: step must be positive");
  Tensor var(x.shape(), x.value(), true);
  clear_tape();
  Tensor loss = f(var);
  require(loss.numel() == 1, "grad_check: f must be scalar-valued");
  backward(loss);
  std::vector<double> analytic = var.grad();
  if (analytic.empty()) analytic.assign(var.value().size(), 0.0);
  clear_tape();

  double max_rel = 0.0;
  NoGradGuard ng;
  Tensor probe(x.shape(), x.value(), false);
  for (size_t i = 0; i < probe.raw_value().size(); ++i) {
    const double orig = probe.raw_value()[i];
    probe.raw_value()[i] = orig + h;
    const double up = f(probe).item();
    probe.raw_value()[i] = orig - h;
    const double down = f(probe).item();
    probe.raw_value()[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
  }
  return max_rel;
}

}  // namespace permfree

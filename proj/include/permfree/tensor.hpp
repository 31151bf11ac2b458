#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "permfree/errors.hpp"
#include "permfree/rng.hpp"

namespace permfree {

// Dense double-precision tensors with reverse-mode autodiff on a dynamic
// (define-by-run) tape. Every differentiable operation in the toolkit sits on
// this: matmul, matvec, add, sub, mul, concat, slice, reshape, tanh, sigmoid,
// relu, exp, log, softmax, log_softmax, logsumexp, sum, mean, conv2d,
// maxpool2d, conv1d, embedding lookup, plus the CTC loss as a fused op with an
// analytic backward rule. Graph topology may change per example (permutation-
// dependent teacher forcing), hence the dynamic tape.
//
// Scalars have rank 0 (empty shape). All forward outputs are checked finite;
// a NaN/Inf raises NumericError. Gradients accumulate additively, so one
// tensor used on several paths receives the sum of all path gradients.

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until touched by backward
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> value, bool requires_grad = false);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double v);
  static Tensor scalar(double v);
  static Tensor uniform(const Shape& shape, double lo, double hi, SplitRng& rng);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->value.size()); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  const std::vector<double>& value() const { return impl_->value; }
  std::vector<double>& raw_value() { return impl_->value; }  // setup only, not taped
  const std::vector<double>& grad() const { return impl_->grad; }
  std::vector<double>& grad_ref() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.assign(impl_->value.size(), 0.0); }

  double item() const;
  double at(int i) const { return impl_->value[static_cast<size_t>(i)]; }
  double at(int r, int c) const {
    return impl_->value[static_cast<size_t>(r) * dim(1) + c];
  }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// One tape per thread. Ops append backward closures in execution order;
// backward() replays them in exact reverse and then marks the tape consumed.
class Tape {
 public:
  static Tape& active();

  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }
  void run_backward(const Tensor& loss);
  void clear();
  size_t size() const { return entries_.size(); }

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

void backward(const Tensor& loss);
void clear_tape();

bool grad_recording_enabled();

// Disables tape recording for its lifetime (loss-matrix scans, decoding,
// finite-difference probes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---- elementwise / arithmetic ----
// add: identical shapes, or b a vector broadcast across rows of matrix a,
// or b a scalar. mul: identical shapes or scalar b.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // (m×k)·(k×n)
Tensor matvec(const Tensor& m, const Tensor& v);  // (m×k)·(k) -> (m)

// ---- shape manipulation ----
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor stack_rows(const std::vector<Tensor>& rows);  // T 1-d tensors -> T×K
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor row(const Tensor& x, int i);   // matrix row as 1-d
Tensor elem(const Tensor& x, int i);  // 1-d element as scalar
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor transpose(const Tensor& x);  // 2-d

// ---- reductions / normalizations (last axis for 2-d inputs) ----
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor logsumexp(const Tensor& x);  // 1-d -> scalar, 2-d -> per-row 1-d
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- convolution / pooling on C×H×W images ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);  // same padding, stride 1
Tensor maxpool2d(const Tensor& x, int kh, int kw, int sh, int sw);  // ceil semantics
Tensor conv1d_same(const Tensor& x, const Tensor& filters);  // (L), (nf×width) -> L×nf
Tensor image_to_frames(const Tensor& x);  // C×T×F -> T×(C·F)

// ---- lookup ----
Tensor embed_lookup(const Tensor& table, const std::vector<int>& ids);

// Max over elements of |analytic - central difference| / max(|a|, |n|, 1e-8)
// for a scalar-valued f at x. f must be deterministic.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double h = 1e-4);

}  // namespace permfree

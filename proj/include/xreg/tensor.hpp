#pragma once

// Reverse-mode automatic differentiation over dense float64 tensors.
//
// Operations record themselves on the thread's active Tape (see TapeScope)
// when at least one input requires a gradient. Without an active tape every
// op is a plain forward evaluation, which is what evaluation code relies on.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace xreg::ad {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return impl_->shape.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);

  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }

  // Fresh tensor with copied data, detached from any tape.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

class Tape {
 public:
  using Adjoint = std::function<void()>;
  using VisitHook = std::function<void(std::size_t node, std::string_view op)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string_view op, std::vector<std::shared_ptr<TensorImpl>> inputs,
              std::shared_ptr<TensorImpl> output, Adjoint adjoint);

  // Seeds d(loss)/d(loss) = 1 and runs every adjoint in reverse recording
  // order. A tape can be consumed once.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  std::string_view op_name(std::size_t node) const { return nodes_.at(node).op; }

  // Checks that each node's inputs were produced earlier on this tape or are
  // leaves. Returns false on the first violation.
  bool topologically_ordered() const;

  void set_visit_hook(VisitHook hook) { hook_ = std::move(hook); }

 private:
  struct Node {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    Adjoint adjoint;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
  VisitHook hook_;
};

// Makes `tape` the active tape of the calling thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording (forward-only evaluation) for the scope's lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// --- elementwise ---------------------------------------------------------
// Binary ops accept equal shapes, or a scalar (rank-0 or size-1) on either side.

enum class Binary { add, sub, mul, div };
enum class Unary { exp, log, square, gelu, neg, sqrt };

Tensor elementwise(Binary kind, const Tensor& a, const Tensor& b);
Tensor elementwise(Unary kind, const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor neg(const Tensor& a);
Tensor sqrt(const Tensor& a);

Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);

// Values outside [lo, hi] are clipped and pass no gradient.
Tensor clamp(const Tensor& a, double lo, double hi);

// a * v[i] where i indexes `axis` of a; v is rank-1 with length a.shape[axis].
Tensor mul_along_axis(const Tensor& a, const Tensor& v, std::size_t axis);

// h * (1 + sigma * eps) with scalar sigma and eps a constant of h's shape.
Tensor multiplicative_noise(const Tensor& h, const Tensor& eps, const Tensor& sigma);

// --- shape -------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);

// Tiles `a` `times` times along a new leading block: result[r*|a| + i] = a[i].
// Shape becomes {times * a.shape[0], a.shape[1:]...}.
Tensor repeat_batch(const Tensor& a, std::size_t times);

// --- reductions ----------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// sum(a * w) / sum(w) with constant nonnegative weights w (same shape as a).
Tensor weighted_mean(const Tensor& a, std::span<const double> weights);

// For a rank-2 [rows, cols] tensor: reduce over rows, result [cols].
Tensor mean_rows(const Tensor& a);
Tensor logsumexp_rows(const Tensor& a);
// log((1/rows) sum_r exp(a[r, c])); exact for identical rows.
Tensor logmeanexp_rows(const Tensor& a);

// --- linear --------------------------------------------------------------

// x[..., c_in] * W[c_in, c_out] + b[c_out] applied over all leading positions.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

// Pins the glibc mmap and trim thresholds so activation buffers are reused
// from the heap instead of being mapped and unmapped on every step. Call once
// at program start; a no-op on other C libraries.
void configure_allocator();

}  // namespace xreg::ad

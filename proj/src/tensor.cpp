#include "xreg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include <Eigen/Core>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace xreg::ad {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

thread_local Tape* g_active_tape = nullptr;

using ImplPtr = std::shared_ptr<TensorImpl>;

// Returns the tape an op should record on, or nullptr for a forward-only op.
Tape* recording(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return g_active_tape;
  }
  return nullptr;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x * (1.0 / std::numbers::sqrt2)); }

double normal_pdf(double x) { return std::exp(-0.5 * x * x) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2; }

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
  impl_->data.assign(numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorImpl>()) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) throw ShapeError("axis out of range for shape " + shape_str(shape()));
  return impl_->shape[axis];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

double Tensor::item() const {
  if (impl_->data.size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

// --- tape ------------------------------------------------------------------

void Tape::record(std::string_view op, std::vector<ImplPtr> inputs, ImplPtr output, Adjoint adjoint) {
  if (consumed_) throw UsageError("recording on a consumed tape");
  nodes_.push_back(Node{std::string(op), std::move(inputs), std::move(output), std::move(adjoint)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw UsageError("tape already consumed by a previous backward()");
  if (!loss.defined() || loss.size() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
  }
  consumed_ = true;
  const auto& root = loss.impl();
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& node = nodes_[i];
    if (hook_) hook_(i, node.op);
    if (!node.output->grad.empty()) node.adjoint();
    // Release saved inputs as soon as the node is done.
    node.adjoint = nullptr;
    node.inputs.clear();
  }
}

bool Tape::topologically_ordered() const {
  std::vector<const TensorImpl*> produced;
  produced.reserve(nodes_.size());
  for (const Node& node : nodes_) produced.push_back(node.output.get());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (const auto& in : nodes_[i].inputs) {
      auto it = std::find(produced.begin(), produced.end(), in.get());
      if (it != produced.end() && static_cast<std::size_t>(it - produced.begin()) >= i) return false;
    }
  }
  return true;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

// --- elementwise -------------------------------------------------------------

Tensor elementwise(Binary kind, const Tensor& a, const Tensor& b) {
  const bool equal = a.shape() == b.shape();
  const bool b_scalar = b.size() == 1;
  const bool a_scalar = a.size() == 1;
  if (!equal && !a_scalar && !b_scalar) {
    throw ShapeError("unsupported broadcast between " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const bool broadcast_a = !equal && a_scalar && !b_scalar;
  const Shape& out_shape = broadcast_a ? b.shape() : a.shape();
  Tensor out(out_shape);
  const std::size_t n = out.size();
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  const std::size_t sa = (a.size() == 1 && n != 1) ? 0 : 1;
  const std::size_t sb = (b.size() == 1 && n != 1) ? 0 : 1;
  switch (kind) {
    case Binary::add:
      for (std::size_t i = 0; i < n; ++i) ov[i] = av[i * sa] + bv[i * sb];
      break;
    case Binary::sub:
      for (std::size_t i = 0; i < n; ++i) ov[i] = av[i * sa] - bv[i * sb];
      break;
    case Binary::mul:
      for (std::size_t i = 0; i < n; ++i) ov[i] = av[i * sa] * bv[i * sb];
      break;
    case Binary::div:
      for (std::size_t i = 0; i < n; ++i) ov[i] = av[i * sa] / bv[i * sb];
      break;
  }
  if (Tape* tape = recording({&a, &b})) {
    out.set_requires_grad();
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    static constexpr const char* names[] = {"add", "sub", "mul", "div"};
    tape->record(names[static_cast<int>(kind)], {ai, bi}, oi, [kind, ai, bi, oi, n, sa, sb] {
      const double* g = oi->grad.data();
      const double* x = ai->data.data();
      const double* y = bi->data.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        double* ga = ai->grad.data();
        switch (kind) {
          case Binary::add:
          case Binary::sub:
            for (std::size_t i = 0; i < n; ++i) ga[i * sa] += g[i];
            break;
          case Binary::mul:
            for (std::size_t i = 0; i < n; ++i) ga[i * sa] += g[i] * y[i * sb];
            break;
          case Binary::div:
            for (std::size_t i = 0; i < n; ++i) ga[i * sa] += g[i] / y[i * sb];
            break;
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        double* gb = bi->grad.data();
        switch (kind) {
          case Binary::add:
            for (std::size_t i = 0; i < n; ++i) gb[i * sb] += g[i];
            break;
          case Binary::sub:
            for (std::size_t i = 0; i < n; ++i) gb[i * sb] -= g[i];
            break;
          case Binary::mul:
            for (std::size_t i = 0; i < n; ++i) gb[i * sb] += g[i] * x[i * sa];
            break;
          case Binary::div:
            for (std::size_t i = 0; i < n; ++i) gb[i * sb] -= g[i] * x[i * sa] / (y[i * sb] * y[i * sb]);
            break;
        }
      }
    });
  }
  return out;
}

Tensor elementwise(Unary kind, const Tensor& a) {
  Tensor out(a.shape());
  const std::size_t n = a.size();
  const double* x = a.values().data();
  double* o = out.values().data();
  const bool recording_grad = recording({&a}) != nullptr;
  std::vector<double> cdf;  // gelu only: Phi(x), reused by the adjoint
  switch (kind) {
    case Unary::exp: for (std::size_t i = 0; i < n; ++i) o[i] = std::exp(x[i]); break;
    case Unary::log: for (std::size_t i = 0; i < n; ++i) o[i] = std::log(x[i]); break;
    case Unary::square: for (std::size_t i = 0; i < n; ++i) o[i] = x[i] * x[i]; break;
    case Unary::neg: for (std::size_t i = 0; i < n; ++i) o[i] = -x[i]; break;
    case Unary::sqrt: for (std::size_t i = 0; i < n; ++i) o[i] = std::sqrt(x[i]); break;
    case Unary::gelu:
      if (recording_grad) cdf.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double phi = normal_cdf(x[i]);
        o[i] = x[i] * phi;
        if (recording_grad) cdf[i] = phi;
      }
      break;
  }
  if (Tape* tape = recording({&a})) {
    out.set_requires_grad();
    ImplPtr ai = a.impl(), oi = out.impl();
    static constexpr const char* names[] = {"exp", "log", "square", "gelu", "neg", "sqrt"};
    tape->record(names[static_cast<int>(kind)], {ai}, oi, [kind, ai, oi, n, cdf = std::move(cdf)] {
      ai->ensure_grad();
      const double* g = oi->grad.data();
      const double* x = ai->data.data();
      const double* y = oi->data.data();
      double* ga = ai->grad.data();
      switch (kind) {
        case Unary::exp: for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i]; break;
        case Unary::log: for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / x[i]; break;
        case Unary::square: for (std::size_t i = 0; i < n; ++i) ga[i] += 2.0 * g[i] * x[i]; break;
        case Unary::neg: for (std::size_t i = 0; i < n; ++i) ga[i] -= g[i]; break;
        case Unary::sqrt: for (std::size_t i = 0; i < n; ++i) ga[i] += 0.5 * g[i] / y[i]; break;
        case Unary::gelu:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * (cdf[i] + x[i] * normal_pdf(x[i]));
          break;
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Binary::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(Binary::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(Binary::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(Binary::div, a, b); }
Tensor exp(const Tensor& a) { return elementwise(Unary::exp, a); }
Tensor log(const Tensor& a) { return elementwise(Unary::log, a); }
Tensor square(const Tensor& a) { return elementwise(Unary::square, a); }
Tensor gelu(const Tensor& a) { return elementwise(Unary::gelu, a); }
Tensor neg(const Tensor& a) { return elementwise(Unary::neg, a); }
Tensor sqrt(const Tensor& a) { return elementwise(Unary::sqrt, a); }

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] + c;
  if (Tape* tape = recording({&a})) {
    out.set_requires_grad();
    ImplPtr ai = a.impl(), oi = out.impl();
    tape->record("add_scalar", {ai}, oi, [ai, oi] {
      ai->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] * c;
  if (Tape* tape = recording({&a})) {
    out.set_requires_grad();
    ImplPtr ai = a.impl(), oi = out.impl();
    tape->record("scale", {ai}, oi, [ai, oi, c] {
      ai->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * c;
    });
  }
  return out;
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = std::clamp(a.values()[i], lo, hi);
  if (Tape* tape = recording({&a})) {
    out.set_requires_grad();
    ImplPtr ai = a.impl(), oi = out.impl();
    tape->record("clamp", {ai}, oi, [ai, oi, lo, hi] {
      ai->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        const double x = ai->data[i];
        if (x >= lo && x <= hi) ai->grad[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor multiplicative_noise(const Tensor& h, const Tensor& eps, const Tensor& sigma) {
  if (eps.shape() != h.shape() || sigma.size() != 1) {
    throw ShapeError("multiplicative_noise: h" + shape_str(h.shape()) + " eps" + shape_str(eps.shape()) + " sigma" +
                     shape_str(sigma.shape()));
  }
  if (eps.requires_grad()) throw UsageError("multiplicative_noise: eps must be a constant");
  const std::size_t n = h.size();
  const double s = sigma.values()[0];
  Tensor out(h.shape());
  const double* hv = h.values().data();
  const double* ev = eps.values().data();
  double* ov = out.values().data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = hv[i] * (1.0 + s * ev[i]);
  if (Tape* tape = recording({&h, &sigma})) {
    out.set_requires_grad();
    ImplPtr hi = h.impl(), ei = eps.impl(), si = sigma.impl(), oi = out.impl();
    tape->record("multiplicative_noise", {hi, si}, oi, [hi, ei, si, oi, n] {
      const double* g = oi->grad.data();
      const double* e = ei->data.data();
      const double sv = si->data[0];
      if (hi->requires_grad) {
        hi->ensure_grad();
        double* gh = hi->grad.data();
        for (std::size_t i = 0; i < n; ++i) gh[i] += g[i] * (1.0 + sv * e[i]);
      }
      if (si->requires_grad) {
        si->ensure_grad();
        const double* x = hi->data.data();
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += g[i] * x[i] * e[i];
        si->grad[0] += acc;
      }
    });
  }
  return out;
}

Tensor mul_along_axis(const Tensor& a, const Tensor& v, std::size_t axis) {
  if (axis >= a.rank() || v.size() != a.dim(axis)) {
    throw ShapeError("mul_along_axis: vector " + shape_str(v.shape()) + " does not match axis " +
                     std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  const std::size_t len = a.dim(axis);
  Tensor out(a.shape());
  const auto& av = a.values();
  const auto& vv = v.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * vv[(i / inner) % len];
  if (Tape* tape = recording({&a, &v})) {
    out.set_requires_grad();
    ImplPtr ai = a.impl(), vi = v.impl(), oi = out.impl();
    tape->record("mul_along_axis", {ai, vi}, oi, [ai, vi, oi, inner, len] {
      if (ai->requires_grad) ai->ensure_grad();
      if (vi->requires_grad) vi->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        const std::size_t k = (i / inner) % len;
        if (ai->requires_grad) ai->grad[i] += oi->grad[i] * vi->data[k];
        if (vi->requires_grad) vi->grad[k] += oi->grad[i] * ai->data[i];
      }
    });
  }
  return out;
}

// --- shape -------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor out(std::move(shape), a.values());
  if (Tape* tape = recording({&a})) {
    out.set_requires_grad();
    ImplPtr ai = a.impl(), oi = out.impl();
    tape->record("reshape", {ai}, oi, [ai, oi] {
      ai->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor repeat_batch(const Tensor& a, std::size_t times) {
  if (a.rank() == 0) throw ShapeError("repeat_batch needs rank >= 1");
  Shape shape = a.shape();
  shape[0] *= times;
  Tensor out(shape);
  const std::size_t block = a.size();
  for (std::size_t r = 0; r < times; ++r) {
    std::copy(a.values().begin(), a.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(r * block));
  }
  if (Tape* tape = recording({&a})) {
    out.set_requires_grad();
    ImplPtr ai = a.impl(), oi = out.impl();
    tape->record("repeat_batch", {ai}, oi, [ai, oi, block, times] {
      ai->ensure_grad();
      for (std::size_t r = 0; r < times; ++r)
        for (std::size_t i = 0; i < block; ++i) ai->grad[i] += oi->grad[r * block + i];
    });
  }
  return out;
}

// --- reductions --------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  Tensor out = Tensor::scalar(s);
  if (Tape* tape = recording({&a})) {
    out.set_requires_grad();
    ImplPtr ai = a.impl(), oi = out.impl();
    tape->record("sum", {ai}, oi, [ai, oi] {
      ai->ensure_grad();
      for (auto& g : ai->grad) g += oi->grad[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw UsageError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor weighted_mean(const Tensor& a, std::span<const double> weights) {
  if (weights.size() != a.size()) {
    throw ShapeError("weighted_mean: " + std::to_string(weights.size()) + " weights for tensor " + shape_str(a.shape()));
  }
  double wsum = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    wsum += weights[i];
    if (weights[i] != 0.0) acc += weights[i] * a.values()[i];
  }
  if (!(wsum > 0.0)) throw UsageError("weighted_mean: weights sum to zero");
  Tensor out = Tensor::scalar(acc / wsum);
  if (Tape* tape = recording({&a})) {
    out.set_requires_grad();
    ImplPtr ai = a.impl(), oi = out.impl();
    std::vector<double> w(weights.begin(), weights.end());
    tape->record("weighted_mean", {ai}, oi, [ai, oi, w = std::move(w), wsum] {
      ai->ensure_grad();
      const double g = oi->grad[0] / wsum;
      for (std::size_t i = 0; i < w.size(); ++i) ai->grad[i] += g * w[i];
    });
  }
  return out;
}

namespace {

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + " needs a rank-2 tensor, got " + shape_str(a.shape()));
  if (a.dim(0) == 0) throw UsageError(std::string(op) + " over zero rows");
}

}  // namespace

Tensor mean_rows(const Tensor& a) {
  require_rank2(a, "mean_rows");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor out(Shape{cols});
  const double inv = 1.0 / static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.values()[c] += a.values()[r * cols + c];
  for (auto& v : out.values()) v *= inv;
  if (Tape* tape = recording({&a})) {
    out.set_requires_grad();
    ImplPtr ai = a.impl(), oi = out.impl();
    tape->record("mean_rows", {ai}, oi, [ai, oi, rows, cols, inv] {
      ai->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) ai->grad[r * cols + c] += oi->grad[c] * inv;
    });
  }
  return out;
}

namespace {

Tensor log_exp_reduce_rows(const Tensor& a, bool average, const char* op) {
  require_rank2(a, op);
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const double norm = average ? static_cast<double>(rows) : 1.0;
  Tensor out(Shape{cols});
  const auto& av = a.values();
  for (std::size_t c = 0; c < cols; ++c) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < rows; ++r) m = std::max(m, av[r * cols + c]);
    if (!std::isfinite(m)) {
      out.values()[c] = m;
      continue;
    }
    double s = 0.0;
    for (std::size_t r = 0; r < rows; ++r) s += std::exp(av[r * cols + c] - m);
    out.values()[c] = m + std::log(s / norm);
  }
  if (Tape* tape = recording({&a})) {
    out.set_requires_grad();
    ImplPtr ai = a.impl(), oi = out.impl();
    tape->record(op, {ai}, oi, [ai, oi, rows, cols, norm] {
      ai->ensure_grad();
      for (std::size_t c = 0; c < cols; ++c) {
        const double lse = oi->data[c];
        if (!std::isfinite(lse)) continue;
        for (std::size_t r = 0; r < rows; ++r) {
          ai->grad[r * cols + c] += oi->grad[c] * std::exp(ai->data[r * cols + c] - lse) / norm;
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor logsumexp_rows(const Tensor& a) { return log_exp_reduce_rows(a, false, "logsumexp_rows"); }
Tensor logmeanexp_rows(const Tensor& a) { return log_exp_reduce_rows(a, true, "logmeanexp_rows"); }

// --- linear ------------------------------------------------------------------

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() == 0 || w.rank() != 2 || b.rank() != 1) {
    throw ShapeError("affine: bad ranks x" + shape_str(x.shape()) + " W" + shape_str(w.shape()) + " b" +
                     shape_str(b.shape()));
  }
  const std::size_t c_in = x.shape().back();
  if (w.dim(0) != c_in || b.dim(0) != w.dim(1)) {
    throw ShapeError("affine: dimension mismatch x" + shape_str(x.shape()) + " W" + shape_str(w.shape()) + " b" +
                     shape_str(b.shape()));
  }
  const std::size_t c_out = w.dim(1);
  const std::size_t rows = x.size() / c_in;
  Shape shape = x.shape();
  shape.back() = c_out;
  Tensor out(shape);
  const auto R = static_cast<Eigen::Index>(rows), I = static_cast<Eigen::Index>(c_in), O = static_cast<Eigen::Index>(c_out);
  {
    Eigen::Map<RowMajor> o(out.values().data(), R, O);
    o.noalias() = Eigen::Map<const RowMajor>(x.values().data(), R, I) * Eigen::Map<const RowMajor>(w.values().data(), I, O);
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.values().data(), O);
  }
  if (Tape* tape = recording({&x, &w, &b})) {
    out.set_requires_grad();
    ImplPtr xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
    tape->record("affine", {xi, wi, bi}, oi, [xi, wi, bi, oi, R, I, O] {
      Eigen::Map<const RowMajor> g(oi->grad.data(), R, O);
      if (xi->requires_grad) {
        xi->ensure_grad();
        Eigen::Map<RowMajor>(xi->grad.data(), R, I).noalias() += g * Eigen::Map<const RowMajor>(wi->data.data(), I, O).transpose();
      }
      if (wi->requires_grad) {
        wi->ensure_grad();
        Eigen::Map<RowMajor>(wi->grad.data(), I, O).noalias() += Eigen::Map<const RowMajor>(xi->data.data(), R, I).transpose() * g;
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        Eigen::Map<Eigen::RowVectorXd>(bi->grad.data(), O) += g.colwise().sum();
      }
    });
  }
  return out;
}

void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace xreg::ad

#include "xreg/spectral.hpp"

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>

#include <Eigen/Core>

#include "xreg/fft.hpp"

namespace xreg::ad {

namespace {

using fft::cplx;
using ImplPtr = std::shared_ptr<TensorImpl>;

Tape* recording_for(const Tensor& a) { return (active_tape() && a.requires_grad()) ? active_tape() : nullptr; }

void require_field(const Tensor& x, const char* op) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + " expects [batch, n, c], got " + shape_str(x.shape()));
}

void require_spectrum(const ComplexTensor& s, const char* op) {
  if (s.parts.rank() != 4 || s.parts.dim(3) != 2) {
    throw ShapeError(std::string(op) + " expects complex [batch, modes, c], got parts " + shape_str(s.parts.shape()));
  }
}

// Truncated transforms with few kept modes run as a dense DFT (one small
// matrix product per batch row) against cached tables.
constexpr std::size_t kDirectModes = 24;

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct DftTable {
  RowMajor analysis;   // [2 modes, n]: cos rows, then -sin rows
  RowMajor synthesis;  // [n, 2 modes]: cos columns, then -sin columns
};

const DftTable& dft_table(std::size_t n, std::size_t modes) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::size_t>, std::unique_ptr<DftTable>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[{n, modes}];
  if (!slot) {
    slot = std::make_unique<DftTable>();
    const auto N = static_cast<Eigen::Index>(n), M = static_cast<Eigen::Index>(modes);
    slot->analysis.resize(2 * M, N);
    for (Eigen::Index j = 0; j < N; ++j) {
      for (Eigen::Index k = 0; k < M; ++k) {
        const auto r = static_cast<std::size_t>(j * k) % n;
        const double a = 2.0 * std::numbers::pi * static_cast<double>(r) / static_cast<double>(n);
        slot->analysis(k, j) = std::cos(a);
        slot->analysis(M + k, j) = (2 * r) % n == 0 ? 0.0 : -std::sin(a);
      }
    }
    slot->synthesis = slot->analysis.transpose();
  }
  return *slot;
}

// dst[b, k, c] += w[k] * sum_j src[b, j, c] * exp(-2 pi i jk/n)
void analysis(const double* src, std::size_t batch, std::size_t n, std::size_t ch, std::size_t modes, double* dst,
              const std::vector<double>* w) {
  if (modes > kDirectModes) {
    const fft::Plan& plan = fft::plan_for(n);
    std::vector<cplx> buf(n);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < ch; ++c) {
        for (std::size_t j = 0; j < n; ++j) buf[j] = cplx(src[(b * n + j) * ch + c], 0.0);
        plan.forward(buf);
        for (std::size_t k = 0; k < modes; ++k) {
          const double s = w ? (*w)[k] : 1.0;
          double* o = dst + ((b * modes + k) * ch + c) * 2;
          o[0] += buf[k].real() * s;
          o[1] += buf[k].imag() * s;
        }
      }
    }
    return;
  }
  const DftTable& t = dft_table(n, modes);
  const auto N = static_cast<Eigen::Index>(n), M = static_cast<Eigen::Index>(modes), C = static_cast<Eigen::Index>(ch);
  RowMajor spec(2 * M, C);
  for (std::size_t b = 0; b < batch; ++b) {
    spec.noalias() = t.analysis * Eigen::Map<const RowMajor>(src + b * n * ch, N, C);
    for (Eigen::Index k = 0; k < M; ++k) {
      const double s = w ? (*w)[static_cast<std::size_t>(k)] : 1.0;
      double* o = dst + (b * modes + static_cast<std::size_t>(k)) * ch * 2;
      for (Eigen::Index c = 0; c < C; ++c) {
        o[2 * c] += spec(k, c) * s;
        o[2 * c + 1] += spec(M + k, c) * s;
      }
    }
  }
}

// dst[b, j, c] += sum_k w[k] * Re(src[b, k, c] * exp(+2 pi i jk/n))
void synthesis(const double* src, std::size_t batch, std::size_t n, std::size_t ch, std::size_t modes, double* dst,
               const std::vector<double>* w) {
  if (modes > kDirectModes) {
    const fft::Plan& plan = fft::plan_for(n);
    std::vector<cplx> buf(n);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < ch; ++c) {
        std::fill(buf.begin(), buf.end(), cplx{});
        for (std::size_t k = 0; k < modes; ++k) {
          const double* p = src + ((b * modes + k) * ch + c) * 2;
          const double s = w ? (*w)[k] : 1.0;
          buf[k] = cplx(p[0] * s, p[1] * s);
        }
        plan.inverse(buf);
        for (std::size_t j = 0; j < n; ++j) dst[(b * n + j) * ch + c] += buf[j].real();
      }
    }
    return;
  }
  const DftTable& t = dft_table(n, modes);
  const auto N = static_cast<Eigen::Index>(n), M = static_cast<Eigen::Index>(modes), C = static_cast<Eigen::Index>(ch);
  RowMajor spec(2 * M, C);
  for (std::size_t b = 0; b < batch; ++b) {
    for (Eigen::Index k = 0; k < M; ++k) {
      const double s = w ? (*w)[static_cast<std::size_t>(k)] : 1.0;
      const double* p = src + (b * modes + static_cast<std::size_t>(k)) * ch * 2;
      for (Eigen::Index c = 0; c < C; ++c) {
        spec(k, c) = p[2 * c] * s;
        spec(M + k, c) = p[2 * c + 1] * s;
      }
    }
    Eigen::Map<RowMajor>(dst + b * n * ch, N, C).noalias() += t.synthesis * spec;
  }
}

// Synthesis weights of irfft: 1/n for self-conjugate bins, else 2/n. The
// imaginary part of a self-conjugate bin has no effect on the output.
std::vector<double> irfft_weights(std::size_t n, std::size_t modes) {
  std::vector<double> w(modes);
  for (std::size_t k = 0; k < modes; ++k) {
    const bool self_conjugate = k == 0 || (n % 2 == 0 && k == n / 2);
    w[k] = (self_conjugate ? 1.0 : 2.0) / static_cast<double>(n);
  }
  return w;
}

}  // namespace

Shape ComplexTensor::shape() const {
  Shape s = parts.shape();
  s.pop_back();
  return s;
}

ComplexTensor make_complex(Shape shape, std::vector<double> re, std::vector<double> im) {
  const std::size_t n = numel(shape);
  if (re.size() != n || im.size() != n) throw ShapeError("make_complex: part length mismatch for " + shape_str(shape));
  std::vector<double> parts(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    parts[2 * i] = re[i];
    parts[2 * i + 1] = im[i];
  }
  shape.push_back(2);
  return ComplexTensor{Tensor(std::move(shape), std::move(parts))};
}

ComplexTensor rfft(const Tensor& x, std::size_t n_modes) {
  require_field(x, "rfft");
  const std::size_t batch = x.dim(0), n = x.dim(1), ch = x.dim(2);
  const std::size_t full = n / 2 + 1;
  const std::size_t modes = n_modes == 0 ? full : n_modes;
  if (modes > full) throw ShapeError("rfft: " + std::to_string(modes) + " modes exceed n/2+1 for n=" + std::to_string(n));
  Tensor out(Shape{batch, modes, ch, 2});
  analysis(x.values().data(), batch, n, ch, modes, out.values().data(), nullptr);
  if (Tape* tape = recording_for(x)) {
    out.set_requires_grad();
    ImplPtr xi = x.impl(), oi = out.impl();
    tape->record("rfft", {xi}, oi, [xi, oi, batch, n, ch, modes] {
      // dL/dx_j = Re sum_k (gRe_k + i gIm_k) exp(+2 pi i jk/n)
      xi->ensure_grad();
      synthesis(oi->grad.data(), batch, n, ch, modes, xi->grad.data(), nullptr);
    });
  }
  return ComplexTensor{out};
}

Tensor irfft(const ComplexTensor& spectrum, std::size_t n) {
  require_spectrum(spectrum, "irfft");
  const Tensor& in = spectrum.parts;
  const std::size_t batch = in.dim(0), modes = in.dim(1), ch = in.dim(2);
  if (modes > n / 2 + 1) throw ShapeError("irfft: " + std::to_string(modes) + " modes exceed n/2+1 for n=" + std::to_string(n));
  Tensor out(Shape{batch, n, ch});
  const std::vector<double> w = irfft_weights(n, modes);
  synthesis(in.values().data(), batch, n, ch, modes, out.values().data(), &w);
  if (Tape* tape = recording_for(in)) {
    out.set_requires_grad();
    ImplPtr ii = in.impl(), oi = out.impl();
    tape->record("irfft", {ii}, oi, [ii, oi, batch, n, ch, modes, w] {
      // Adjoint: w_k * rfft(g)_k, with self-conjugate imaginary parts dropped.
      ii->ensure_grad();
      std::vector<double> tmp(ii->grad.size(), 0.0);
      analysis(oi->grad.data(), batch, n, ch, modes, tmp.data(), &w);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < modes; ++k) {
          const bool self_conjugate = k == 0 || (n % 2 == 0 && k == n / 2);
          for (std::size_t c = 0; c < ch; ++c) {
            const std::size_t at = ((b * modes + k) * ch + c) * 2;
            ii->grad[at] += tmp[at];
            if (!self_conjugate) ii->grad[at + 1] += tmp[at + 1];
          }
        }
      }
    });
  }
  return out;
}

ComplexTensor complex_mix(const ComplexTensor& spectrum, const ComplexTensor& kernel) {
  require_spectrum(spectrum, "complex_mix");
  const Tensor& x = spectrum.parts;
  const Tensor& w = kernel.parts;
  if (w.rank() != 4 || w.dim(3) != 2) throw ShapeError("complex_mix: kernel must be complex [modes, c_in, c_out]");
  const std::size_t batch = x.dim(0), modes = x.dim(1), c_in = x.dim(2);
  if (w.dim(0) != modes || w.dim(1) != c_in) {
    throw ShapeError("complex_mix: kernel " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  const std::size_t c_out = w.dim(2);
  Tensor out(Shape{batch, modes, c_out, 2});
  const double* xv = x.values().data();
  const double* wv = w.values().data();
  double* ov = out.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < modes; ++k) {
      double* o = ov + (b * modes + k) * c_out * 2;
      const double* xin = xv + (b * modes + k) * c_in * 2;
      for (std::size_t i = 0; i < c_in; ++i) {
        const double xr = xin[2 * i], xim = xin[2 * i + 1];
        const double* wr = wv + (k * c_in + i) * c_out * 2;
        for (std::size_t o_ = 0; o_ < c_out; ++o_) {
          const double kr = wr[2 * o_], ki = wr[2 * o_ + 1];
          o[2 * o_] += xr * kr - xim * ki;
          o[2 * o_ + 1] += xr * ki + xim * kr;
        }
      }
    }
  }
  if (Tape* tape = (active_tape() && (x.requires_grad() || w.requires_grad())) ? active_tape() : nullptr) {
    out.set_requires_grad();
    ImplPtr xi = x.impl(), wi = w.impl(), oi = out.impl();
    tape->record("complex_mix", {xi, wi}, oi, [xi, wi, oi, batch, modes, c_in, c_out] {
      // gX = g * conj(K), gK = conj(X) * g
      if (xi->requires_grad) xi->ensure_grad();
      if (wi->requires_grad) wi->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < modes; ++k) {
          const double* g = oi->grad.data() + (b * modes + k) * c_out * 2;
          const double* xin = xi->data.data() + (b * modes + k) * c_in * 2;
          for (std::size_t i = 0; i < c_in; ++i) {
            const double xr = xin[2 * i], xim = xin[2 * i + 1];
            const std::size_t wbase = (k * c_in + i) * c_out * 2;
            const double* wr = wi->data.data() + wbase;
            double gxr = 0.0, gxi = 0.0;
            for (std::size_t o_ = 0; o_ < c_out; ++o_) {
              const double gr = g[2 * o_], gi = g[2 * o_ + 1];
              const double kr = wr[2 * o_], ki = wr[2 * o_ + 1];
              gxr += gr * kr + gi * ki;
              gxi += gi * kr - gr * ki;
              if (wi->requires_grad) {
                wi->grad[wbase + 2 * o_] += xr * gr + xim * gi;
                wi->grad[wbase + 2 * o_ + 1] += xr * gi - xim * gr;
              }
            }
            if (xi->requires_grad) {
              const std::size_t at = ((b * modes + k) * c_in + i) * 2;
              xi->grad[at] += gxr;
              xi->grad[at + 1] += gxi;
            }
          }
        }
      }
    });
  }
  return ComplexTensor{out};
}

}  // namespace xreg::ad

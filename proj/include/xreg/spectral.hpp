#pragma once

// Differentiable Fourier-domain ops on [batch, n, channels] fields.
//
// A ComplexTensor stores real and imaginary parts interleaved in a trailing
// axis of length 2, so the complex coefficients ride on the ordinary tape.

#include <cstddef>

#include "xreg/tensor.hpp"

namespace xreg::ad {

struct ComplexTensor {
  Tensor parts;  // [..., 2]: (re, im)

  Shape shape() const;
  double re(std::size_t flat) const { return parts[2 * flat]; }
  double im(std::size_t flat) const { return parts[2 * flat + 1]; }
};

ComplexTensor make_complex(Shape shape, std::vector<double> re, std::vector<double> im);

// Unnormalized forward real transform along axis 1 of x[batch, n, c].
// Keeps the first `n_modes` bins (0 = all n/2+1); result [batch, modes, c].
ComplexTensor rfft(const Tensor& x, std::size_t n_modes = 0);

// Inverse of rfft along axis 1 for a target length n; missing high bins are
// zero. Result [batch, n, c].
Tensor irfft(const ComplexTensor& spectrum, std::size_t n);

// Per-mode complex channel mixing:
// out[b, k, o] = sum_i in[b, k, i] * kernel[k, i, o].
ComplexTensor complex_mix(const ComplexTensor& in, const ComplexTensor& kernel);

}  // namespace xreg::ad

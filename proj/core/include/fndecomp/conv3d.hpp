#ifndef FNDECOMP_CONV3D_HPP_
#define FNDECOMP_CONV3D_HPP_

#include <cstdint>

#include "fndecomp/tensor.hpp"

namespace fndecomp {

// 3-D convolution over channel-major volumes, shape {C, D, H, W}, x fastest.
// Zero "same" padding: stride 1 preserves extents, stride 2 exactly halves
// them (even extents required; the extra pad cell goes at the far end).
// Kernels are {Cout, Cin, kd, kh, kw}.
//
// Summation order per output element is fixed by loop nesting and does not
// depend on thread count, so results are bit-reproducible.

struct Conv3dSpec {
  int64_t cin = 0, d = 0, h = 0, w = 0;       // input extents
  int64_t cout = 0, od = 0, oh = 0, ow = 0;   // output extents
  int64_t kd = 0, kh = 0, kw = 0;             // kernel extents
  int64_t stride = 1;
  int64_t pd = 0, ph = 0, pw = 0;             // leading pad per spatial axis
};

// Derives output extents and padding; throws ShapeError on indivisible
// extents for stride 2 or unsupported strides.
Conv3dSpec make_conv3d_spec(const Tensor& input, const Tensor& kernel, int64_t stride);

// out[oc,·] = bias[oc] + sum_ic in[ic,·] * ker[oc,ic,·]
Tensor conv3d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                      const Conv3dSpec& s);

// Adjoint of conv3d_forward with respect to the input.
Tensor conv3d_backward_input(const Tensor& grad_out, const Tensor& kernel,
                             const Conv3dSpec& s);

// Adjoint of conv3d_forward with respect to the kernel.
Tensor conv3d_backward_kernel(const Tensor& grad_out, const Tensor& input,
                              const Conv3dSpec& s);

// Adjoint with respect to the bias: per-channel sum of grad_out.
Tensor conv3d_backward_bias(const Tensor& grad_out);

}  // namespace fndecomp

#endif  // FNDECOMP_CONV3D_HPP_

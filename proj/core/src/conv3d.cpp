#include "fndecomp/conv3d.hpp"

#include <algorithm>
#include <string>

namespace fndecomp {

namespace {

// ceil(in / stride), with divisibility enforced for stride 2.
int64_t out_extent(int64_t in, int64_t stride, const char* axis) {
  if (stride == 1) return in;
  if (in % stride != 0) {
    throw ShapeError(std::string("extent ") + std::to_string(in) + " along " + axis +
                     " not divisible by stride " + std::to_string(stride) +
                     "; pad or crop the volume");
  }
  return in / stride;
}

int64_t lead_pad(int64_t in, int64_t out, int64_t k, int64_t stride) {
  const int64_t total = std::max<int64_t>((out - 1) * stride + k - in, 0);
  return total / 2;
}

// Valid output range [lo, hi) along one axis for a fixed kernel offset ko:
// requires 0 <= o*stride + ko - pad < in.
void valid_range(int64_t in, int64_t out, int64_t stride, int64_t ko, int64_t pad,
                 int64_t* lo, int64_t* hi) {
  const int64_t shift = ko - pad;
  int64_t l = 0;
  if (shift < 0) l = (-shift + stride - 1) / stride;
  int64_t h = out;
  // o*stride + shift <= in-1  =>  o <= (in-1-shift)/stride
  const int64_t top = in - 1 - shift;
  if (top < 0)
    h = 0;
  else
    h = std::min<int64_t>(out, top / stride + 1);
  *lo = l;
  *hi = std::max<int64_t>(l, h);
}

}  // namespace

Conv3dSpec make_conv3d_spec(const Tensor& input, const Tensor& kernel, int64_t stride) {
  if (input.ndim() != 4) {
    throw ShapeError("conv3d input must be {C,D,H,W}, got " + input.shape_str());
  }
  if (kernel.ndim() != 5) {
    throw ShapeError("conv3d kernel must be {Cout,Cin,kd,kh,kw}, got " + kernel.shape_str());
  }
  if (stride != 1 && stride != 2) {
    throw ShapeError("conv3d stride must be 1 or 2, got " + std::to_string(stride));
  }
  if (kernel.dim(1) != input.dim(0)) {
    throw ShapeError("conv3d channel mismatch: kernel expects " +
                     std::to_string(kernel.dim(1)) + " input channels, volume has " +
                     std::to_string(input.dim(0)));
  }
  Conv3dSpec s;
  s.cin = input.dim(0);
  s.d = input.dim(1);
  s.h = input.dim(2);
  s.w = input.dim(3);
  s.cout = kernel.dim(0);
  s.kd = kernel.dim(2);
  s.kh = kernel.dim(3);
  s.kw = kernel.dim(4);
  s.stride = stride;
  s.od = out_extent(s.d, stride, "D");
  s.oh = out_extent(s.h, stride, "H");
  s.ow = out_extent(s.w, stride, "W");
  s.pd = lead_pad(s.d, s.od, s.kd, stride);
  s.ph = lead_pad(s.h, s.oh, s.kh, stride);
  s.pw = lead_pad(s.w, s.ow, s.kw, stride);
  return s;
}

Tensor conv3d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                      const Conv3dSpec& s) {
  if (bias.numel() != s.cout) {
    throw ShapeError("conv3d bias length " + std::to_string(bias.numel()) +
                     " != output channels " + std::to_string(s.cout));
  }
  Tensor out({s.cout, s.od, s.oh, s.ow});
  const double* in = input.data();
  const double* ker = kernel.data();
  const double* b = bias.data();
  double* o = out.data();

  const int64_t in_plane = s.h * s.w;
  const int64_t out_plane = s.oh * s.ow;
  const int64_t out_chan = s.od * out_plane;
  const int64_t in_chan = s.d * in_plane;
  const int64_t ker_chan = s.kd * s.kh * s.kw;

#pragma omp parallel for schedule(static)
  for (int64_t oc = 0; oc < s.cout; ++oc) {
    double* ochan = o + oc * out_chan;
    std::fill(ochan, ochan + out_chan, b[oc]);
    for (int64_t ic = 0; ic < s.cin; ++ic) {
      const double* ichan = in + ic * in_chan;
      const double* kbase = ker + (oc * s.cin + ic) * ker_chan;
      for (int64_t kd = 0; kd < s.kd; ++kd) {
        int64_t odlo, odhi;
        valid_range(s.d, s.od, s.stride, kd, s.pd, &odlo, &odhi);
        for (int64_t kh = 0; kh < s.kh; ++kh) {
          int64_t ohlo, ohhi;
          valid_range(s.h, s.oh, s.stride, kh, s.ph, &ohlo, &ohhi);
          for (int64_t kw = 0; kw < s.kw; ++kw) {
            int64_t owlo, owhi;
            valid_range(s.w, s.ow, s.stride, kw, s.pw, &owlo, &owhi);
            const double kv = kbase[(kd * s.kh + kh) * s.kw + kw];
            for (int64_t od = odlo; od < odhi; ++od) {
              const int64_t id = od * s.stride + kd - s.pd;
              for (int64_t oh = ohlo; oh < ohhi; ++oh) {
                const int64_t ih = oh * s.stride + kh - s.ph;
                const double* irow = ichan + id * in_plane + ih * s.w + (kw - s.pw);
                double* orow = ochan + od * out_plane + oh * s.ow;
                if (s.stride == 1) {
                  for (int64_t ow = owlo; ow < owhi; ++ow) orow[ow] += kv * irow[ow];
                } else {
                  for (int64_t ow = owlo; ow < owhi; ++ow)
                    orow[ow] += kv * irow[ow * s.stride];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor conv3d_backward_input(const Tensor& grad_out, const Tensor& kernel,
                             const Conv3dSpec& s) {
  Tensor gin({s.cin, s.d, s.h, s.w});
  const double* g = grad_out.data();
  const double* ker = kernel.data();
  double* gi = gin.data();

  const int64_t in_plane = s.h * s.w;
  const int64_t out_plane = s.oh * s.ow;
  const int64_t out_chan = s.od * out_plane;
  const int64_t in_chan = s.d * in_plane;
  const int64_t ker_chan = s.kd * s.kh * s.kw;

#pragma omp parallel for schedule(static)
  for (int64_t ic = 0; ic < s.cin; ++ic) {
    double* gchan = gi + ic * in_chan;
    for (int64_t oc = 0; oc < s.cout; ++oc) {
      const double* ochan = g + oc * out_chan;
      const double* kbase = ker + (oc * s.cin + ic) * ker_chan;
      for (int64_t kd = 0; kd < s.kd; ++kd) {
        int64_t odlo, odhi;
        valid_range(s.d, s.od, s.stride, kd, s.pd, &odlo, &odhi);
        for (int64_t kh = 0; kh < s.kh; ++kh) {
          int64_t ohlo, ohhi;
          valid_range(s.h, s.oh, s.stride, kh, s.ph, &ohlo, &ohhi);
          for (int64_t kw = 0; kw < s.kw; ++kw) {
            int64_t owlo, owhi;
            valid_range(s.w, s.ow, s.stride, kw, s.pw, &owlo, &owhi);
            const double kv = kbase[(kd * s.kh + kh) * s.kw + kw];
            for (int64_t od = odlo; od < odhi; ++od) {
              const int64_t id = od * s.stride + kd - s.pd;
              for (int64_t oh = ohlo; oh < ohhi; ++oh) {
                const int64_t ih = oh * s.stride + kh - s.ph;
                const double* orow = ochan + od * out_plane + oh * s.ow;
                double* grow = gchan + id * in_plane + ih * s.w + (kw - s.pw);
                if (s.stride == 1) {
                  for (int64_t ow = owlo; ow < owhi; ++ow) grow[ow] += kv * orow[ow];
                } else {
                  for (int64_t ow = owlo; ow < owhi; ++ow)
                    grow[ow * s.stride] += kv * orow[ow];
                }
              }
            }
          }
        }
      }
    }
  }
  return gin;
}

Tensor conv3d_backward_kernel(const Tensor& grad_out, const Tensor& input,
                              const Conv3dSpec& s) {
  Tensor gker({s.cout, s.cin, s.kd, s.kh, s.kw});
  const double* g = grad_out.data();
  const double* in = input.data();
  double* gk = gker.data();

  const int64_t in_plane = s.h * s.w;
  const int64_t out_plane = s.oh * s.ow;
  const int64_t out_chan = s.od * out_plane;
  const int64_t in_chan = s.d * in_plane;
  const int64_t ker_chan = s.kd * s.kh * s.kw;
  const int64_t pairs = s.cout * s.cin;

#pragma omp parallel for schedule(static)
  for (int64_t pair = 0; pair < pairs; ++pair) {
    const int64_t oc = pair / s.cin;
    const int64_t ic = pair % s.cin;
    const double* ochan = g + oc * out_chan;
    const double* ichan = in + ic * in_chan;
    double* kbase = gk + pair * ker_chan;
    for (int64_t kd = 0; kd < s.kd; ++kd) {
      int64_t odlo, odhi;
      valid_range(s.d, s.od, s.stride, kd, s.pd, &odlo, &odhi);
      for (int64_t kh = 0; kh < s.kh; ++kh) {
        int64_t ohlo, ohhi;
        valid_range(s.h, s.oh, s.stride, kh, s.ph, &ohlo, &ohhi);
        for (int64_t kw = 0; kw < s.kw; ++kw) {
          int64_t owlo, owhi;
          valid_range(s.w, s.ow, s.stride, kw, s.pw, &owlo, &owhi);
          double acc = 0.0;
          for (int64_t od = odlo; od < odhi; ++od) {
            const int64_t id = od * s.stride + kd - s.pd;
            for (int64_t oh = ohlo; oh < ohhi; ++oh) {
              const int64_t ih = oh * s.stride + kh - s.ph;
              const double* orow = ochan + od * out_plane + oh * s.ow;
              const double* irow = ichan + id * in_plane + ih * s.w + (kw - s.pw);
              if (s.stride == 1) {
                for (int64_t ow = owlo; ow < owhi; ++ow) acc += orow[ow] * irow[ow];
              } else {
                for (int64_t ow = owlo; ow < owhi; ++ow)
                  acc += orow[ow] * irow[ow * s.stride];
              }
            }
          }
          kbase[(kd * s.kh + kh) * s.kw + kw] = acc;
        }
      }
    }
  }
  return gker;
}

Tensor conv3d_backward_bias(const Tensor& grad_out) {
  const int64_t c = grad_out.dim(0);
  const int64_t chan = grad_out.numel() / c;
  Tensor gb({c});
  const double* g = grad_out.data();
  for (int64_t oc = 0; oc < c; ++oc) {
    double acc = 0.0;
    const double* base = g + oc * chan;
    for (int64_t i = 0; i < chan; ++i) acc += base[i];
    gb[oc] = acc;
  }
  return gb;
}

}  // namespace fndecomp

#ifndef FNDECOMP_AUTODIFF_HPP_
#define FNDECOMP_AUTODIFF_HPP_

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "fndecomp/tensor.hpp"

namespace fndecomp::ad {

using NodeId = int32_t;

// Lightweight handle into a Tape.
struct Var {
  NodeId id = -1;
  bool valid() const { return id >= 0; }
};

// Append-only reverse-mode differentiation record. Input ids always precede
// a node's own id; backward visits nodes in strictly reverse id order once.
// A tape is single-threaded; build a fresh one per training iteration.
class Tape {
 public:
  // Leaf that never receives a gradient.
  Var constant(Tensor value);
  // Trainable leaf; registered in parameters().
  Var parameter(Tensor value);
  // Leaf with caller-chosen gradient tracking.
  Var input(Tensor value, bool requires_grad);

  // Elementwise; shapes must match.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var scale(Var a, double s);
  Var abs(Var a);        // adjoint at 0 defined as 0
  Var sqrt(Var a);
  Var clamp_min(Var a, double floor);  // adjoint passes only where a > floor

  // Linear algebra (2-D).
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  // Inverse of (a + ridge*mean(diag a)*I); adjoint of B = A^-1 is
  // dA = -B^T dB B^T, plus the trace term from the ridge shift.
  Var inverse(Var a, double ridge);

  // Reductions.
  Var sum(Var a);                  // scalar, shape {1}
  Var mean(Var a);                 // scalar, shape {1}
  Var sum_axis(Var a, int axis);
  Var frobenius_sq(Var a);         // scalar, shape {1}

  // Neural primitives over channel-major volumes {C,D,H,W}.
  // Convolution kernel {Cout,Cin,kd,kh,kw}; zero "same" padding.
  Var conv3d(Var in, Var kernel, Var bias, int stride);
  // Transposed convolution, kernel {Cin,Cout,kd,kh,kw}; output extents are
  // exactly input * stride.
  Var tconv3d(Var in, Var kernel, Var bias, int stride);
  Var leaky_relu(Var a, double slope);
  Var sigmoid(Var a);
  // Per-channel normalization over spatial entries with learned scale/shift;
  // statistics are computed on this sample (batch size 1).
  Var channel_norm(Var x, Var gamma, Var beta, double eps);
  // Per-channel division by the channel max (over in-mask entries when a
  // mask is given; mask length == spatial size). Channels whose max is at or
  // below eps_max pass through unchanged. With grad_through_max the divisor
  // is treated as a function of the argmax entry (true gradient); otherwise
  // the max is a stopped constant.
  Var channel_max_scale(Var x, const std::vector<uint8_t>* mask, double eps_max,
                        bool grad_through_max);
  // Elementwise average of same-shaped tensors (temporal feature fusion).
  Var stack_mean(const std::vector<Var>& xs);
  Var concat_channels(Var a, Var b);
  // Gather in-mask voxels: {C,D,H,W} -> {C,S}; voxel_index holds S linear
  // spatial offsets. Adjoint scatters; out-of-mask voxels get zero gradient.
  Var flatten_masked(Var x, std::vector<int64_t> voxel_index);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  // Backpropagate from a scalar root (throws ShapeError otherwise).
  void backward(Var root);
  // Gradient of v after backward(); zeros if v never received one.
  Tensor grad(Var v) const;

  const std::vector<NodeId>& parameters() const { return params_; }
  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    // Accumulates into input slots via Tape::accum; null for leaves.
    std::function<void(Tape&, const Tensor&)> backward;
  };

  Var record(Tensor value, bool requires_grad,
             std::function<void(Tape&, const Tensor&)> bwd);
  void accum(NodeId id, Tensor g);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor>> grads_;
  std::vector<NodeId> params_;
};

// Central-difference gradient verification. `build` must reconstruct the
// same scalar expression from the given parameter leaves on every call.
struct GradCheckReport {
  std::vector<double> per_param_max_rel_err;
  double max_rel_err = 0.0;
  bool passed(double tolerance) const { return max_rel_err < tolerance; }
};

GradCheckReport grad_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& build,
    const std::vector<Tensor>& param_values, double step,
    int max_probes_per_param = 0 /* 0 = every element */, uint64_t seed = 0);

}  // namespace fndecomp::ad

#endif  // FNDECOMP_AUTODIFF_HPP_

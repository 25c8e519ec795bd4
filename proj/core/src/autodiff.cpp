#include "fndecomp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fndecomp/conv3d.hpp"
#include "fndecomp/rng.hpp"

namespace fndecomp::ad {

namespace {

int64_t spatial_size(const Tensor& t) {
  int64_t n = 1;
  for (int i = 1; i < t.ndim(); ++i) n *= t.dim(i);
  return n;
}

}  // namespace

Var Tape::record(Tensor value, bool requires_grad,
                 std::function<void(Tape&, const Tensor&)> bwd) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backward = std::move(bwd);
  nodes_.push_back(std::move(n));
  return Var{static_cast<NodeId>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size()) {
    throw ShapeError("invalid tape handle");
  }
  return nodes_[static_cast<size_t>(v.id)];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }
bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Var Tape::constant(Tensor value) { return record(std::move(value), false, nullptr); }

Var Tape::input(Tensor value, bool requires_grad) {
  return record(std::move(value), requires_grad, nullptr);
}

Var Tape::parameter(Tensor value) {
  Var v = record(std::move(value), true, nullptr);
  params_.push_back(v.id);
  return v;
}

void Tape::accum(NodeId id, Tensor g) {
  auto& slot = grads_[static_cast<size_t>(id)];
  if (!slot.has_value()) {
    slot = std::move(g);
  } else {
    Tensor& acc = *slot;
    const double* p = g.data();
    double* a = acc.data();
    for (int64_t i = 0; i < acc.numel(); ++i) a[i] += p[i];
  }
}

void Tape::backward(Var root) {
  const Node& r = node(root);
  if (r.value.numel() != 1) {
    throw ShapeError("backward root must be scalar, got " + r.value.shape_str());
  }
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[static_cast<size_t>(root.id)] = Tensor::full(r.value.shape(), 1.0);
  for (NodeId id = root.id; id >= 0; --id) {
    auto& g = grads_[static_cast<size_t>(id)];
    if (!g.has_value()) continue;
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.backward) n.backward(*this, *g);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (static_cast<size_t>(v.id) < grads_.size() &&
      grads_[static_cast<size_t>(v.id)].has_value()) {
    return *grads_[static_cast<size_t>(v.id)];
  }
  return Tensor::zeros(n.value.shape());
}

// ---- elementwise ----

Var Tape::add(Var a, Var b) {
  Tensor y = fndecomp::add(value(a), value(b));
  const bool req = requires_grad(a) || requires_grad(b);
  return record(std::move(y), req, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.accum(a.id, g);
    if (t.requires_grad(b)) t.accum(b.id, g);
  });
}

Var Tape::sub(Var a, Var b) {
  Tensor y = fndecomp::sub(value(a), value(b));
  const bool req = requires_grad(a) || requires_grad(b);
  return record(std::move(y), req, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.accum(a.id, g);
    if (t.requires_grad(b)) t.accum(b.id, fndecomp::scale(g, -1.0));
  });
}

Var Tape::mul(Var a, Var b) {
  Tensor y = fndecomp::mul(value(a), value(b));
  const bool req = requires_grad(a) || requires_grad(b);
  return record(std::move(y), req, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.accum(a.id, fndecomp::mul(g, t.value(b)));
    if (t.requires_grad(b)) t.accum(b.id, fndecomp::mul(g, t.value(a)));
  });
}

Var Tape::div(Var a, Var b) {
  Tensor y = fndecomp::div(value(a), value(b));
  const bool req = requires_grad(a) || requires_grad(b);
  return record(std::move(y), req, [a, b](Tape& t, const Tensor& g) {
    const Tensor& bv = t.value(b);
    if (t.requires_grad(a)) t.accum(a.id, fndecomp::div(g, bv));
    if (t.requires_grad(b)) {
      const Tensor& av = t.value(a);
      Tensor gb(g.shape());
      const double* pg = g.data();
      const double* pa = av.data();
      const double* pb = bv.data();
      double* po = gb.data();
      for (int64_t i = 0; i < gb.numel(); ++i) po[i] = -pg[i] * pa[i] / (pb[i] * pb[i]);
      t.accum(b.id, std::move(gb));
    }
  });
}

Var Tape::scale(Var a, double s) {
  return record(fndecomp::scale(value(a), s), requires_grad(a),
                [a, s](Tape& t, const Tensor& g) {
                  if (t.requires_grad(a)) t.accum(a.id, fndecomp::scale(g, s));
                });
}

Var Tape::abs(Var a) {
  return record(fndecomp::abs(value(a)), requires_grad(a),
                [a](Tape& t, const Tensor& g) {
                  if (!t.requires_grad(a)) return;
                  const Tensor& x = t.value(a);
                  Tensor ga(g.shape());
                  const double* pg = g.data();
                  const double* px = x.data();
                  double* po = ga.data();
                  for (int64_t i = 0; i < ga.numel(); ++i) {
                    // subgradient at 0 pinned to 0
                    po[i] = px[i] > 0.0 ? pg[i] : (px[i] < 0.0 ? -pg[i] : 0.0);
                  }
                  t.accum(a.id, std::move(ga));
                });
}

Var Tape::sqrt(Var a) {
  Tensor y = fndecomp::sqrt(value(a));
  Var out = record(std::move(y), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(out.id)].backward = [a, out](Tape& t, const Tensor& g) {
    if (!t.requires_grad(a)) return;
    const Tensor& yv = t.value(out);
    Tensor ga(g.shape());
    const double* pg = g.data();
    const double* py = yv.data();
    double* po = ga.data();
    for (int64_t i = 0; i < ga.numel(); ++i) po[i] = 0.5 * pg[i] / py[i];
    t.accum(a.id, std::move(ga));
  };
  return out;
}

Var Tape::clamp_min(Var a, double floor) {
  const Tensor& x = value(a);
  Tensor y(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = std::max(x[i], floor);
  return record(std::move(y), requires_grad(a),
                [a, floor](Tape& t, const Tensor& g) {
                  if (!t.requires_grad(a)) return;
                  const Tensor& x = t.value(a);
                  Tensor ga(g.shape());
                  for (int64_t i = 0; i < ga.numel(); ++i)
                    ga[i] = x[i] > floor ? g[i] : 0.0;
                  t.accum(a.id, std::move(ga));
                });
}

// ---- linear algebra ----

Var Tape::matmul(Var a, Var b) {
  Tensor y = fndecomp::matmul(value(a), value(b));
  const bool req = requires_grad(a) || requires_grad(b);
  return record(std::move(y), req, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a))
      t.accum(a.id, fndecomp::matmul(g, fndecomp::transpose(t.value(b))));
    if (t.requires_grad(b))
      t.accum(b.id, fndecomp::matmul(fndecomp::transpose(t.value(a)), g));
  });
}

Var Tape::transpose(Var a) {
  return record(fndecomp::transpose(value(a)), requires_grad(a),
                [a](Tape& t, const Tensor& g) {
                  if (t.requires_grad(a)) t.accum(a.id, fndecomp::transpose(g));
                });
}

Var Tape::inverse(Var a, double ridge) {
  Tensor b = fndecomp::inverse(value(a), ridge);
  Var out = record(std::move(b), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(out.id)].backward = [a, out, ridge](Tape& t,
                                                                 const Tensor& g) {
    if (!t.requires_grad(a)) return;
    const Tensor& bv = t.value(out);
    Tensor bt = fndecomp::transpose(bv);
    Tensor ga = fndecomp::scale(fndecomp::matmul(fndecomp::matmul(bt, g), bt), -1.0);
    if (ridge > 0.0) {
      // shift = ridge * mean(diag A): route the trace of the shifted-matrix
      // gradient back through the diagonal.
      const int64_t n = ga.dim(0);
      double tr = 0.0;
      for (int64_t i = 0; i < n; ++i) tr += ga.at(i, i);
      const double c = ridge * tr / static_cast<double>(n);
      for (int64_t i = 0; i < n; ++i) ga.at(i, i) += c;
    }
    t.accum(a.id, std::move(ga));
  };
  return out;
}

// ---- reductions ----

Var Tape::sum(Var a) {
  double s = 0.0;
  const Tensor& x = value(a);
  for (int64_t i = 0; i < x.numel(); ++i) s += x[i];
  return record(Tensor({1}, {s}), requires_grad(a), [a](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.accum(a.id, Tensor::full(t.value(a).shape(), g[0]));
  });
}

Var Tape::mean(Var a) {
  const Tensor& x = value(a);
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) s += x[i];
  const double inv_n = 1.0 / static_cast<double>(x.numel());
  return record(Tensor({1}, {s * inv_n}), requires_grad(a),
                [a, inv_n](Tape& t, const Tensor& g) {
                  if (t.requires_grad(a))
                    t.accum(a.id, Tensor::full(t.value(a).shape(), g[0] * inv_n));
                });
}

Var Tape::sum_axis(Var a, int axis) {
  Tensor y = fndecomp::reduce(value(a), axis, ReduceKind::kSum);
  return record(std::move(y), requires_grad(a), [a, axis](Tape& t, const Tensor& g) {
    if (!t.requires_grad(a)) return;
    const Tensor& x = t.value(a);
    const auto& shape = x.shape();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= shape[static_cast<size_t>(i)];
    const int64_t extent = shape[static_cast<size_t>(axis)];
    Tensor ga(x.shape());
    const double* pg = g.data();
    double* po = ga.data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t e = 0; e < extent; ++e)
        for (int64_t in = 0; in < inner; ++in)
          po[(o * extent + e) * inner + in] = pg[o * inner + in];
    t.accum(a.id, std::move(ga));
  });
}

Var Tape::frobenius_sq(Var a) {
  const double s = fndecomp::frobenius_sq(value(a));
  return record(Tensor({1}, {s}), requires_grad(a), [a](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.accum(a.id, fndecomp::scale(t.value(a), 2.0 * g[0]));
  });
}

// ---- neural primitives ----

Var Tape::conv3d(Var in, Var kernel, Var bias, int stride) {
  const Conv3dSpec spec = make_conv3d_spec(value(in), value(kernel), stride);
  Tensor y = conv3d_forward(value(in), value(kernel), value(bias), spec);
  const bool req = requires_grad(in) || requires_grad(kernel) || requires_grad(bias);
  return record(std::move(y), req, [in, kernel, bias, spec](Tape& t, const Tensor& g) {
    if (t.requires_grad(in))
      t.accum(in.id, conv3d_backward_input(g, t.value(kernel), spec));
    if (t.requires_grad(kernel))
      t.accum(kernel.id, conv3d_backward_kernel(g, t.value(in), spec));
    if (t.requires_grad(bias)) t.accum(bias.id, conv3d_backward_bias(g));
  });
}

Var Tape::tconv3d(Var in, Var kernel, Var bias, int stride) {
  const Tensor& x = value(in);
  const Tensor& q = value(kernel);
  if (x.ndim() != 4 || q.ndim() != 5) {
    throw ShapeError("tconv3d expects {C,D,H,W} input and {Cin,Cout,kd,kh,kw} kernel");
  }
  if (q.dim(0) != x.dim(0)) {
    throw ShapeError("tconv3d channel mismatch: kernel expects " +
                     std::to_string(q.dim(0)) + " input channels, volume has " +
                     std::to_string(x.dim(0)));
  }
  // The transposed convolution is the adjoint of a forward conv whose input
  // has the tconv's output extents; build that conv's spec.
  Conv3dSpec spec;
  spec.cin = q.dim(1);  // tconv output channels
  spec.d = x.dim(1) * stride;
  spec.h = x.dim(2) * stride;
  spec.w = x.dim(3) * stride;
  spec.cout = q.dim(0);
  spec.kd = q.dim(2);
  spec.kh = q.dim(3);
  spec.kw = q.dim(4);
  spec.stride = stride;
  spec.od = x.dim(1);
  spec.oh = x.dim(2);
  spec.ow = x.dim(3);
  spec.pd = std::max<int64_t>((spec.od - 1) * stride + spec.kd - spec.d, 0) / 2;
  spec.ph = std::max<int64_t>((spec.oh - 1) * stride + spec.kh - spec.h, 0) / 2;
  spec.pw = std::max<int64_t>((spec.ow - 1) * stride + spec.kw - spec.w, 0) / 2;

  Tensor y = conv3d_backward_input(x, q, spec);
  // bias per output channel
  const Tensor& b = value(bias);
  if (b.numel() != spec.cin) {
    throw ShapeError("tconv3d bias length " + std::to_string(b.numel()) +
                     " != output channels " + std::to_string(spec.cin));
  }
  const int64_t chan = spec.d * spec.h * spec.w;
  for (int64_t c = 0; c < spec.cin; ++c) {
    double* base = y.data() + c * chan;
    const double bv = b[c];
    for (int64_t i = 0; i < chan; ++i) base[i] += bv;
  }

  const bool req = requires_grad(in) || requires_grad(kernel) || requires_grad(bias);
  return record(std::move(y), req, [in, kernel, bias, spec](Tape& t, const Tensor& g) {
    if (t.requires_grad(in)) {
      Tensor zb({spec.cout});
      Conv3dSpec s2 = spec;
      t.accum(in.id, conv3d_forward(g, t.value(kernel), zb, s2));
    }
    if (t.requires_grad(kernel))
      t.accum(kernel.id, conv3d_backward_kernel(t.value(in), g, spec));
    if (t.requires_grad(bias)) t.accum(bias.id, conv3d_backward_bias(g));
  });
}

Var Tape::leaky_relu(Var a, double slope) {
  const Tensor& x = value(a);
  Tensor y(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0 ? x[i] : slope * x[i];
  return record(std::move(y), requires_grad(a), [a, slope](Tape& t, const Tensor& g) {
    if (!t.requires_grad(a)) return;
    const Tensor& x = t.value(a);
    Tensor ga(g.shape());
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] = x[i] > 0.0 ? g[i] : slope * g[i];
    t.accum(a.id, std::move(ga));
  });
}

Var Tape::sigmoid(Var a) {
  const Tensor& x = value(a);
  Tensor y(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
  Var out = record(std::move(y), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(out.id)].backward = [a, out](Tape& t, const Tensor& g) {
    if (!t.requires_grad(a)) return;
    const Tensor& yv = t.value(out);
    Tensor ga(g.shape());
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] = g[i] * yv[i] * (1.0 - yv[i]);
    t.accum(a.id, std::move(ga));
  };
  return out;
}

Var Tape::channel_norm(Var xv, Var gammav, Var betav, double eps) {
  const Tensor& x = value(xv);
  const int64_t c = x.dim(0);
  const int64_t n = spatial_size(x);
  const Tensor& gamma = value(gammav);
  const Tensor& beta = value(betav);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("channel_norm scale/shift must have one entry per channel");
  }

  std::vector<double> mu(static_cast<size_t>(c)), rstd(static_cast<size_t>(c));
  Tensor y(x.shape());
  for (int64_t ch = 0; ch < c; ++ch) {
    const double* px = x.data() + ch * n;
    double m = 0.0;
    for (int64_t i = 0; i < n; ++i) m += px[i];
    m /= static_cast<double>(n);
    double v = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double d = px[i] - m;
      v += d * d;
    }
    v /= static_cast<double>(n);
    const double r = 1.0 / std::sqrt(v + eps);
    mu[static_cast<size_t>(ch)] = m;
    rstd[static_cast<size_t>(ch)] = r;
    const double gc = gamma[ch], bc = beta[ch];
    double* py = y.data() + ch * n;
    for (int64_t i = 0; i < n; ++i) py[i] = gc * (px[i] - m) * r + bc;
  }

  const bool req = requires_grad(xv) || requires_grad(gammav) || requires_grad(betav);
  return record(std::move(y), req,
                [xv, gammav, betav, mu, rstd, c, n](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(xv);
    const Tensor& gamma = t.value(gammav);
    const bool need_x = t.requires_grad(xv);
    const bool need_g = t.requires_grad(gammav);
    const bool need_b = t.requires_grad(betav);
    Tensor gx = need_x ? Tensor(x.shape()) : Tensor();
    Tensor gg = need_g ? Tensor({c}) : Tensor();
    Tensor gb = need_b ? Tensor({c}) : Tensor();
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* px = x.data() + ch * n;
      const double* pg = g.data() + ch * n;
      const double m = mu[static_cast<size_t>(ch)];
      const double r = rstd[static_cast<size_t>(ch)];
      double sum_g = 0.0, sum_gx = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double xh = (px[i] - m) * r;
        sum_g += pg[i];
        sum_gx += pg[i] * xh;
      }
      if (need_b) gb[ch] = sum_g;
      if (need_g) gg[ch] = sum_gx;
      if (need_x) {
        const double gc = gamma[ch];
        double* pgx = gx.data() + ch * n;
        const double mean_g = sum_g * inv_n;
        const double mean_gx = sum_gx * inv_n;
        for (int64_t i = 0; i < n; ++i) {
          const double xh = (px[i] - m) * r;
          pgx[i] = gc * r * (pg[i] - mean_g - xh * mean_gx);
        }
      }
    }
    if (need_x) t.accum(xv.id, std::move(gx));
    if (need_g) t.accum(gammav.id, std::move(gg));
    if (need_b) t.accum(betav.id, std::move(gb));
  });
}

Var Tape::channel_max_scale(Var xv, const std::vector<uint8_t>* mask, double eps_max,
                            bool grad_through_max) {
  const Tensor& x = value(xv);
  const int64_t c = x.dim(0);
  const int64_t n = spatial_size(x);
  if (mask && static_cast<int64_t>(mask->size()) != n) {
    throw ShapeError("channel_max_scale mask length != spatial size");
  }

  std::vector<double> mx(static_cast<size_t>(c));
  std::vector<int64_t> arg(static_cast<size_t>(c), -1);
  Tensor y(x.shape());
  for (int64_t ch = 0; ch < c; ++ch) {
    const double* px = x.data() + ch * n;
    double best = -std::numeric_limits<double>::infinity();
    int64_t bi = -1;
    for (int64_t i = 0; i < n; ++i) {
      if (mask && !(*mask)[static_cast<size_t>(i)]) continue;
      if (px[i] > best) {
        best = px[i];
        bi = i;
      }
    }
    double* py = y.data() + ch * n;
    if (bi < 0 || best <= eps_max) {
      // degenerate channel: left unscaled
      mx[static_cast<size_t>(ch)] = 0.0;
      arg[static_cast<size_t>(ch)] = -1;
      std::copy(px, px + n, py);
    } else {
      mx[static_cast<size_t>(ch)] = best;
      arg[static_cast<size_t>(ch)] = bi;
      const double inv = 1.0 / best;
      for (int64_t i = 0; i < n; ++i) py[i] = px[i] * inv;
    }
  }

  return record(std::move(y), requires_grad(xv),
                [xv, mx, arg, c, n, grad_through_max](Tape& t, const Tensor& g) {
    if (!t.requires_grad(xv)) return;
    const Tensor& x = t.value(xv);
    Tensor gx(x.shape());
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* px = x.data() + ch * n;
      const double* pg = g.data() + ch * n;
      double* po = gx.data() + ch * n;
      const int64_t a = arg[static_cast<size_t>(ch)];
      if (a < 0) {
        std::copy(pg, pg + n, po);
        continue;
      }
      const double m = mx[static_cast<size_t>(ch)];
      const double inv = 1.0 / m;
      for (int64_t i = 0; i < n; ++i) po[i] = pg[i] * inv;
      if (grad_through_max) {
        double dot = 0.0;
        for (int64_t i = 0; i < n; ++i) dot += pg[i] * px[i];
        po[a] -= dot * inv * inv;
      }
    }
    t.accum(xv.id, std::move(gx));
  });
}

Var Tape::stack_mean(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("stack_mean needs at least one input");
  const Tensor& first = value(xs[0]);
  Tensor y(first.shape());
  for (Var v : xs) {
    const Tensor& x = value(v);
    if (!x.same_shape(first)) throw ShapeError("stack_mean inputs must share a shape");
    const double* px = x.data();
    double* py = y.data();
    for (int64_t i = 0; i < y.numel(); ++i) py[i] += px[i];
  }
  const double inv_t = 1.0 / static_cast<double>(xs.size());
  {
    double* py = y.data();
    for (int64_t i = 0; i < y.numel(); ++i) py[i] *= inv_t;
  }
  bool req = false;
  for (Var v : xs) req = req || requires_grad(v);
  return record(std::move(y), req, [xs, inv_t](Tape& t, const Tensor& g) {
    Tensor share = fndecomp::scale(g, inv_t);
    for (Var v : xs)
      if (t.requires_grad(v)) t.accum(v.id, share);
  });
}

Var Tape::concat_channels(Var a, Var b) {
  const Tensor& xa = value(a);
  const Tensor& xb = value(b);
  if (xa.ndim() != xb.ndim() || xa.ndim() < 2) {
    throw ShapeError("concat_channels rank mismatch");
  }
  for (int i = 1; i < xa.ndim(); ++i) {
    if (xa.dim(i) != xb.dim(i))
      throw ShapeError("concat_channels spatial extents differ: " + xa.shape_str() +
                       " vs " + xb.shape_str());
  }
  std::vector<int64_t> shape = xa.shape();
  shape[0] = xa.dim(0) + xb.dim(0);
  Tensor y(shape);
  std::copy(xa.data(), xa.data() + xa.numel(), y.data());
  std::copy(xb.data(), xb.data() + xb.numel(), y.data() + xa.numel());
  const int64_t na = xa.numel();
  const bool req = requires_grad(a) || requires_grad(b);
  return record(std::move(y), req, [a, b, na](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      const Tensor& xa = t.value(a);
      Tensor ga(xa.shape());
      std::copy(g.data(), g.data() + na, ga.data());
      t.accum(a.id, std::move(ga));
    }
    if (t.requires_grad(b)) {
      const Tensor& xb = t.value(b);
      Tensor gb(xb.shape());
      std::copy(g.data() + na, g.data() + na + xb.numel(), gb.data());
      t.accum(b.id, std::move(gb));
    }
  });
}

Var Tape::flatten_masked(Var xv, std::vector<int64_t> voxel_index) {
  const Tensor& x = value(xv);
  const int64_t c = x.dim(0);
  const int64_t n = spatial_size(x);
  const int64_t s = static_cast<int64_t>(voxel_index.size());
  for (int64_t idx : voxel_index) {
    if (idx < 0 || idx >= n) throw ShapeError("flatten_masked index out of range");
  }
  Tensor y({c, s});
  for (int64_t ch = 0; ch < c; ++ch) {
    const double* px = x.data() + ch * n;
    double* py = y.data() + ch * s;
    for (int64_t i = 0; i < s; ++i) py[i] = px[voxel_index[static_cast<size_t>(i)]];
  }
  return record(std::move(y), requires_grad(xv),
                [xv, idx = std::move(voxel_index), c, n, s](Tape& t, const Tensor& g) {
    if (!t.requires_grad(xv)) return;
    Tensor gx(t.value(xv).shape());
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* pg = g.data() + ch * s;
      double* po = gx.data() + ch * n;
      for (int64_t i = 0; i < s; ++i) po[idx[static_cast<size_t>(i)]] += pg[i];
    }
    t.accum(xv.id, std::move(gx));
  });
}

// ---- gradient checking ----

GradCheckReport grad_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& build,
    const std::vector<Tensor>& param_values, double step, int max_probes_per_param,
    uint64_t seed) {
  if (step <= 0.0) throw ShapeError("grad_check step must be positive");

  auto eval = [&](const std::vector<Tensor>& vals) {
    Tape t;
    std::vector<Var> vars;
    vars.reserve(vals.size());
    for (const Tensor& v : vals) vars.push_back(t.parameter(v));
    Var root = build(t, vars);
    if (t.value(root).numel() != 1) {
      throw ShapeError("grad_check expression must be scalar");
    }
    return t.value(root)[0];
  };

  // Adjoint pass.
  std::vector<Tensor> grads;
  {
    Tape t;
    std::vector<Var> vars;
    for (const Tensor& v : param_values) vars.push_back(t.parameter(v));
    Var root = build(t, vars);
    if (t.value(root).numel() != 1) {
      throw ShapeError("grad_check expression must be scalar");
    }
    t.backward(root);
    for (Var v : vars) grads.push_back(t.grad(v));
  }

  GradCheckReport report;
  Rng rng(seed ^ 0x5eedULL);
  std::vector<Tensor> work = param_values;
  for (size_t p = 0; p < work.size(); ++p) {
    const int64_t n = work[p].numel();
    std::vector<int64_t> probes(static_cast<size_t>(n));
    std::iota(probes.begin(), probes.end(), 0);
    if (max_probes_per_param > 0 && n > max_probes_per_param) {
      rng.shuffle(probes);
      probes.resize(static_cast<size_t>(max_probes_per_param));
      std::sort(probes.begin(), probes.end());
    }

    double ad_inf = 0.0;
    for (int64_t i = 0; i < n; ++i) ad_inf = std::max(ad_inf, std::fabs(grads[p][i]));
    // Floor keeps finite-difference roundoff on near-zero components from
    // dominating the relative error.
    const double floor = 1e-6 * std::max(1.0, ad_inf);

    double worst = 0.0;
    for (int64_t j : probes) {
      const double saved = work[p][j];
      work[p][j] = saved + step;
      const double fp = eval(work);
      work[p][j] = saved - step;
      const double fm = eval(work);
      work[p][j] = saved;
      const double fd = (fp - fm) / (2.0 * step);
      const double ad = grads[p][j];
      const double rel = std::fabs(ad - fd) / std::max(std::fabs(ad) + std::fabs(fd), floor);
      worst = std::max(worst, rel);
    }
    report.per_param_max_rel_err.push_back(worst);
    report.max_rel_err = std::max(report.max_rel_err, worst);
  }
  return report;
}

}  // namespace fndecomp::ad

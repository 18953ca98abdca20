#include "mimicparts/autograd.hpp"

#include <cmath>
#include <cstring>

namespace mimicparts {

namespace {

void require_same_tape(Var a, Var b, const char* op) {
  MP_REQUIRE(a.valid() && b.valid(), std::string(op) + ": invalid variable");
  MP_REQUIRE(a.tape == b.tape, std::string(op) + ": operands from different tapes");
}

// Reduces a gradient down to a trailing-block broadcast operand shape.
Tensor reduce_to_row(const Tensor& g, const Shape& row_shape) {
  int64_t d = shape_numel(row_shape);
  auto gv = g.data();
  std::vector<double> out(d, 0.0);
  for (size_t i = 0; i < gv.size(); ++i) out[i % d] += gv[i];
  return Tensor(row_shape, std::move(out));
}

Tensor tile_axis0(const Tensor& g, int n, const Shape& full_shape) {
  auto gv = g.data();
  std::vector<double> out(static_cast<size_t>(n) * gv.size());
  for (int i = 0; i < n; ++i) {
    std::copy(gv.begin(), gv.end(), out.begin() + static_cast<int64_t>(i) * gv.size());
  }
  return Tensor(full_shape, std::move(out));
}

}  // namespace

const Tensor& Var::value() const {
  MP_REQUIRE(valid(), "value() on invalid Var");
  return tape->value(*this);
}

Tensor GradMap::at(Var v) const {
  MP_REQUIRE(v.valid(), "GradMap::at on invalid Var");
  if (v.id < static_cast<int>(grads_.size()) && !grads_[v.id].empty()) return grads_[v.id];
  return Tensor::zeros(v.value().shape());
}

bool GradMap::has(Var v) const {
  return v.valid() && v.id < static_cast<int>(grads_.size()) && !grads_[v.id].empty();
}

Var Tape::push(Tensor value, std::vector<int> parents, VjpFn vjp) {
  Node n;
  n.value = std::move(value);
  for (int p : parents) {
    if (nodes_[p].needs_grad) n.needs_grad = true;
  }
  n.parents = std::move(parents);
  if (record_ && n.needs_grad) n.vjp = std::move(vjp);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1, this};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  check_finite(value, "leaf");
  Node n;
  n.value = std::move(value);
  n.needs_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1, this};
}

Var Tape::custom(Tensor value, const std::vector<Var>& parents, VjpFn vjp) {
  std::vector<int> ids;
  ids.reserve(parents.size());
  for (Var p : parents) {
    MP_REQUIRE(p.valid() && p.tape == this, "custom: parent from different tape");
    ids.push_back(p.id);
  }
  return push(std::move(value), std::move(ids), std::move(vjp));
}

const Tensor& Tape::value(Var v) const {
  MP_REQUIRE(v.tape == this && v.id >= 0 && v.id < static_cast<int>(nodes_.size()),
             "variable does not belong to this tape");
  return nodes_[v.id].value;
}

bool Tape::requires_grad(Var v) const {
  MP_REQUIRE(v.tape == this, "variable does not belong to this tape");
  return nodes_[v.id].needs_grad;
}

GradMap Tape::backward(Var loss) {
  MP_REQUIRE(record_, "backward() on a non-recording tape");
  MP_REQUIRE(!consumed_, "backward() called twice on a consumed tape");
  MP_REQUIRE(loss.tape == this, "loss from a different tape");
  MP_REQUIRE(loss.value().numel() == 1, "backward() requires a scalar loss");
  consumed_ = true;

  std::vector<Tensor> grads(nodes_.size());
  grads[loss.id] = Tensor::full(loss.value().shape(), 1.0);
  for (int id = loss.id; id >= 0; --id) {
    Node& node = nodes_[id];
    if (grads[id].empty() || !node.vjp) continue;
    std::vector<Tensor> pgrads = node.vjp(grads[id]);
    MP_REQUIRE(pgrads.size() == node.parents.size(), "vjp arity mismatch");
    for (size_t i = 0; i < node.parents.size(); ++i) {
      int pid = node.parents[i];
      if (!nodes_[pid].needs_grad) continue;
      check_finite(pgrads[i], "backward");
      if (grads[pid].empty()) {
        grads[pid] = std::move(pgrads[i]);
      } else {
        grads[pid] = ops::add(grads[pid], pgrads[i]);
      }
    }
    node.vjp = nullptr;  // free saved inputs as we go
  }
  return GradMap(std::move(grads));
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  Tensor out = ops::matmul(a.value(), b.value());
  Tensor av = a.value(), bv = b.value();
  return a.tape->custom(std::move(out), {a, b}, [av, bv](const Tensor& g) {
    return std::vector<Tensor>{ops::matmul(g, ops::transpose2d(bv)),
                               ops::matmul(ops::transpose2d(av), g)};
  });
}

Var bmm(Var a, Var b, bool trans_a, bool trans_b) {
  require_same_tape(a, b, "bmm");
  Tensor out = ops::bmm(a.value(), b.value(), trans_a, trans_b);
  Tensor av = a.value(), bv = b.value();
  return a.tape->custom(std::move(out), {a, b}, [av, bv, trans_a, trans_b](const Tensor& g) {
    Tensor da, db;
    if (!trans_a && !trans_b) {
      da = ops::bmm(g, bv, false, true);
      db = ops::bmm(av, g, true, false);
    } else if (!trans_a && trans_b) {
      da = ops::bmm(g, bv, false, false);
      db = ops::bmm(g, av, true, false);
    } else if (trans_a && !trans_b) {
      da = ops::bmm(bv, g, false, true);
      db = ops::bmm(av, g, false, false);
    } else {
      da = ops::bmm(bv, g, true, true);
      db = ops::bmm(g, av, true, true);
    }
    return std::vector<Tensor>{std::move(da), std::move(db)};
  });
}

Var transpose2d(Var a) {
  Tensor out = ops::transpose2d(a.value());
  return a.tape->custom(std::move(out), {a}, [](const Tensor& g) {
    return std::vector<Tensor>{ops::transpose2d(g)};
  });
}

Var reshape(Var a, Shape shape) {
  Shape orig = a.value().shape();
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape->custom(std::move(out), {a}, [orig](const Tensor& g) {
    return std::vector<Tensor>{g.reshaped(orig)};
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  Tensor out = ops::add(a.value(), b.value());
  bool same = a.value().same_shape(b.value());
  Shape bshape = b.value().shape();
  return a.tape->custom(std::move(out), {a, b}, [same, bshape](const Tensor& g) {
    Tensor db = same ? g : reduce_to_row(g, bshape);
    return std::vector<Tensor>{g, std::move(db)};
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b, "sub");
  Tensor out = ops::sub(a.value(), b.value());
  bool same = a.value().same_shape(b.value());
  Shape bshape = b.value().shape();
  return a.tape->custom(std::move(out), {a, b}, [same, bshape](const Tensor& g) {
    Tensor db = same ? ops::neg(g) : ops::neg(reduce_to_row(g, bshape));
    return std::vector<Tensor>{g, std::move(db)};
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b, "mul");
  Tensor out = ops::mul(a.value(), b.value());
  Tensor av = a.value(), bv = b.value();
  return a.tape->custom(std::move(out), {a, b}, [av, bv](const Tensor& g) {
    return std::vector<Tensor>{ops::mul(g, bv), ops::mul(g, av)};
  });
}

Var scale(Var a, double c) {
  Tensor out = ops::scale(a.value(), c);
  return a.tape->custom(std::move(out), {a}, [c](const Tensor& g) {
    return std::vector<Tensor>{ops::scale(g, c)};
  });
}

Var add_scalar(Var a, double c) {
  Tensor out = ops::add_scalar(a.value(), c);
  return a.tape->custom(std::move(out), {a}, [](const Tensor& g) {
    return std::vector<Tensor>{g};
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var exp(Var a) {
  Tensor out = ops::exp(a.value());
  Tensor saved = out;
  return a.tape->custom(std::move(out), {a}, [saved](const Tensor& g) {
    return std::vector<Tensor>{ops::mul(g, saved)};
  });
}

Var log(Var a) {
  Tensor out = ops::log(a.value());
  Tensor av = a.value();
  return a.tape->custom(std::move(out), {a}, [av](const Tensor& g) {
    auto gv = g.data();
    auto xv = av.data();
    std::vector<double> d(gv.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = gv[i] / xv[i];
    return std::vector<Tensor>{Tensor(av.shape(), std::move(d))};
  });
}

Var sqrt(Var a) {
  Tensor out = ops::sqrt(a.value());
  Tensor saved = out;
  return a.tape->custom(std::move(out), {a}, [saved](const Tensor& g) {
    auto gv = g.data();
    auto yv = saved.data();
    std::vector<double> d(gv.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = 0.5 * gv[i] / yv[i];
    return std::vector<Tensor>{Tensor(saved.shape(), std::move(d))};
  });
}

Var sin(Var a) {
  Tensor out = ops::sin(a.value());
  Tensor av = a.value();
  return a.tape->custom(std::move(out), {a}, [av](const Tensor& g) {
    auto gv = g.data();
    auto xv = av.data();
    std::vector<double> d(gv.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = gv[i] * std::cos(xv[i]);
    return std::vector<Tensor>{Tensor(av.shape(), std::move(d))};
  });
}

Var gelu(Var a) {
  Tensor out = ops::gelu(a.value());
  Tensor av = a.value();
  return a.tape->custom(std::move(out), {a}, [av](const Tensor& g) {
    auto gv = g.data();
    auto xv = av.data();
    std::vector<double> d(gv.size());
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (size_t i = 0; i < d.size(); ++i) {
      double x = xv[i];
      double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      d[i] = gv[i] * (cdf + x * pdf);
    }
    return std::vector<Tensor>{Tensor(av.shape(), std::move(d))};
  });
}

Var softmax_rows(Var a) {
  Tensor out = ops::softmax_rows(a.value());
  Tensor p = out;
  return a.tape->custom(std::move(out), {a}, [p](const Tensor& g) {
    int d = p.shape().back();
    auto pv = p.data();
    auto gv = g.data();
    std::vector<double> dx(gv.size());
    for (size_t r = 0; r < gv.size(); r += d) {
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += gv[r + j] * pv[r + j];
      for (int j = 0; j < d; ++j) dx[r + j] = pv[r + j] * (gv[r + j] - s);
    }
    return std::vector<Tensor>{Tensor(p.shape(), std::move(dx))};
  });
}

Var log_softmax_rows(Var a) {
  Tensor out = ops::log_softmax_rows(a.value());
  Tensor saved = out;
  return a.tape->custom(std::move(out), {a}, [saved](const Tensor& g) {
    int d = saved.shape().back();
    auto lv = saved.data();
    auto gv = g.data();
    std::vector<double> dx(gv.size());
    for (size_t r = 0; r < gv.size(); r += d) {
      double gsum = 0.0;
      for (int j = 0; j < d; ++j) gsum += gv[r + j];
      for (int j = 0; j < d; ++j) dx[r + j] = gv[r + j] - std::exp(lv[r + j]) * gsum;
    }
    return std::vector<Tensor>{Tensor(saved.shape(), std::move(dx))};
  });
}

Var sum_all(Var a) {
  Tensor out = ops::sum_all(a.value());
  Shape shape = a.value().shape();
  return a.tape->custom(std::move(out), {a}, [shape](const Tensor& g) {
    return std::vector<Tensor>{Tensor::full(shape, g.scalar_value())};
  });
}

Var mean_all(Var a) {
  Tensor out = ops::mean_all(a.value());
  Shape shape = a.value().shape();
  double n = static_cast<double>(a.value().numel());
  return a.tape->custom(std::move(out), {a}, [shape, n](const Tensor& g) {
    return std::vector<Tensor>{Tensor::full(shape, g.scalar_value() / n)};
  });
}

Var sum_axis0(Var a) {
  Tensor out = ops::sum_axis0(a.value());
  Shape shape = a.value().shape();
  return a.tape->custom(std::move(out), {a}, [shape](const Tensor& g) {
    return std::vector<Tensor>{tile_axis0(g, shape[0], shape)};
  });
}

Var mean_axis0(Var a) {
  Tensor out = ops::mean_axis0(a.value());
  Shape shape = a.value().shape();
  return a.tape->custom(std::move(out), {a}, [shape](const Tensor& g) {
    Tensor t = tile_axis0(g, shape[0], shape);
    return std::vector<Tensor>{ops::scale(t, 1.0 / shape[0])};
  });
}

Var mean_axis1(Var a) {
  Tensor out = ops::mean_axis1(a.value());
  Shape shape = a.value().shape();
  return a.tape->custom(std::move(out), {a}, [shape](const Tensor& g) {
    int B = shape[0], T = shape[1], d = shape[2];
    auto gv = g.data();
    std::vector<double> dx(static_cast<int64_t>(B) * T * d);
    for (int b = 0; b < B; ++b) {
      for (int t = 0; t < T; ++t) {
        double* dst = dx.data() + (static_cast<int64_t>(b) * T + t) * d;
        const double* src = gv.data() + static_cast<int64_t>(b) * d;
        for (int j = 0; j < d; ++j) dst[j] = src[j] / T;
      }
    }
    return std::vector<Tensor>{Tensor(shape, std::move(dx))};
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  MP_REQUIRE(!parts.empty(), "concat of zero vars");
  Tape* tape = parts[0].tape;
  std::vector<Tensor> values;
  std::vector<int> sizes;
  for (Var p : parts) {
    MP_REQUIRE(p.tape == tape, "concat: vars from different tapes");
    values.push_back(p.value());
    sizes.push_back(p.value().dim(axis));
  }
  Tensor out = ops::concat(values, axis);
  return tape->custom(std::move(out), parts, [axis, sizes](const Tensor& g) {
    return ops::split(g, axis, sizes);
  });
}

std::vector<Var> split(Var a, int axis, const std::vector<int>& sizes) {
  std::vector<Tensor> pieces = ops::split(a.value(), axis, sizes);
  Shape in_shape = a.value().shape();
  std::vector<Var> out;
  int offset = 0;
  for (size_t i = 0; i < pieces.size(); ++i) {
    int off = offset;
    int sz = sizes[i];
    out.push_back(a.tape->custom(
        std::move(pieces[i]), {a}, [in_shape, axis, off, sz](const Tensor& g) {
          // Embed g into zeros at the slice location.
          int64_t outer = 1;
          for (int ax = 0; ax < axis; ++ax) outer *= in_shape[ax];
          int64_t inner = 1;
          for (size_t ax = axis + 1; ax < in_shape.size(); ++ax) inner *= in_shape[ax];
          int64_t in_row = static_cast<int64_t>(in_shape[axis]) * inner;
          std::vector<double> d(shape_numel(in_shape), 0.0);
          auto gv = g.data();
          int64_t chunk = static_cast<int64_t>(sz) * inner;
          for (int64_t o = 0; o < outer; ++o) {
            std::copy(gv.begin() + o * chunk, gv.begin() + (o + 1) * chunk,
                      d.begin() + o * in_row + off * inner);
          }
          return std::vector<Tensor>{Tensor(in_shape, std::move(d))};
        }));
    offset += sizes[i];
  }
  return out;
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  require_same_tape(x, gain, "layer_norm");
  require_same_tape(x, bias, "layer_norm");
  Tensor out = ops::layer_norm_rows(x.value(), gain.value(), bias.value(), eps);
  Tensor xv = x.value(), gv = gain.value();
  return x.tape->custom(std::move(out), {x, gain, bias}, [xv, gv, eps](const Tensor& g) {
    int d = xv.shape().back();
    auto xd = xv.data();
    auto gd = g.data();
    auto gaind = gv.data();
    std::vector<double> dx(xd.size());
    std::vector<double> dgain(d, 0.0);
    std::vector<double> dbias(d, 0.0);
    std::vector<double> xhat(d);
    for (size_t r = 0; r < xd.size(); r += d) {
      double mean = 0.0;
      for (int j = 0; j < d; ++j) mean += xd[r + j];
      mean /= d;
      double var = 0.0;
      for (int j = 0; j < d; ++j) {
        double c = xd[r + j] - mean;
        var += c * c;
      }
      var /= d;
      double inv = 1.0 / std::sqrt(var + eps);
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (int j = 0; j < d; ++j) {
        xhat[j] = (xd[r + j] - mean) * inv;
        double dxh = gd[r + j] * gaind[j];
        sum_dxhat += dxh;
        sum_dxhat_xhat += dxh * xhat[j];
        dgain[j] += gd[r + j] * xhat[j];
        dbias[j] += gd[r + j];
      }
      for (int j = 0; j < d; ++j) {
        double dxh = gd[r + j] * gaind[j];
        dx[r + j] = inv * (dxh - sum_dxhat / d - xhat[j] * sum_dxhat_xhat / d);
      }
    }
    return std::vector<Tensor>{Tensor(xv.shape(), std::move(dx)),
                               Tensor(gv.shape(), std::move(dgain)),
                               Tensor(gv.shape(), std::move(dbias))};
  });
}

Var l2_normalize_rows(Var x) {
  Tensor out = ops::l2_normalize_rows(x.value());
  Tensor xv = x.value(), yv = out;
  return x.tape->custom(std::move(out), {x}, [xv, yv](const Tensor& g) {
    int d = xv.shape().back();
    auto xd = xv.data();
    auto yd = yv.data();
    auto gd = g.data();
    std::vector<double> dx(xd.size());
    for (size_t r = 0; r < xd.size(); r += d) {
      double norm = 0.0;
      for (int j = 0; j < d; ++j) norm += xd[r + j] * xd[r + j];
      norm = std::sqrt(norm);
      double gy = 0.0;
      for (int j = 0; j < d; ++j) gy += gd[r + j] * yd[r + j];
      for (int j = 0; j < d; ++j) dx[r + j] = (gd[r + j] - yd[r + j] * gy) / norm;
    }
    return std::vector<Tensor>{Tensor(xv.shape(), std::move(dx))};
  });
}

Var smooth_l1(Var a, Var b) {
  require_same_tape(a, b, "smooth_l1");
  Tensor out = ops::smooth_l1(a.value(), b.value());
  Tensor av = a.value(), bv = b.value();
  return a.tape->custom(std::move(out), {a, b}, [av, bv](const Tensor& g) {
    double g0 = g.scalar_value();
    auto ad = av.data();
    auto bd = bv.data();
    double n = static_cast<double>(ad.size());
    std::vector<double> da(ad.size());
    for (size_t i = 0; i < ad.size(); ++i) {
      double d = ad[i] - bd[i];
      double dd = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
      da[i] = g0 * dd / n;
    }
    Tensor ta(av.shape(), std::move(da));
    return std::vector<Tensor>{ta, ops::neg(ta)};
  });
}

Var l1_loss(Var a, Var b) {
  require_same_tape(a, b, "l1_loss");
  Tensor out = ops::l1_loss(a.value(), b.value());
  Tensor av = a.value(), bv = b.value();
  return a.tape->custom(std::move(out), {a, b}, [av, bv](const Tensor& g) {
    double g0 = g.scalar_value();
    auto ad = av.data();
    auto bd = bv.data();
    double n = static_cast<double>(ad.size());
    std::vector<double> da(ad.size());
    for (size_t i = 0; i < ad.size(); ++i) {
      double d = ad[i] - bd[i];
      da[i] = g0 * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / n;
    }
    Tensor ta(av.shape(), std::move(da));
    return std::vector<Tensor>{ta, ops::neg(ta)};
  });
}

Var conv1d(Var x, Var w, Var b, int stride, int pad) {
  require_same_tape(x, w, "conv1d");
  require_same_tape(x, b, "conv1d");
  Tensor out = ops::conv1d(x.value(), w.value(), b.value(), stride, pad);
  Tensor xv = x.value(), wv = w.value();
  Shape bshape = b.value().shape();
  return x.tape->custom(std::move(out), {x, w, b}, [xv, wv, bshape, stride, pad](const Tensor& g) {
    int B = xv.dim(0), T = xv.dim(1), cin = xv.dim(2);
    int K = wv.dim(0), cout = wv.dim(2);
    int t_out = g.dim(1);
    int64_t rows = static_cast<int64_t>(B) * t_out;
    int64_t cols = static_cast<int64_t>(K) * cin;

    // Rebuild the im2col matrix (cheaper than caching it on the tape).
    std::vector<double> col(rows * cols, 0.0);
    auto xd = xv.data();
    for (int bi = 0; bi < B; ++bi) {
      const double* xb = xd.data() + static_cast<int64_t>(bi) * T * cin;
      for (int t = 0; t < t_out; ++t) {
        double* dst = col.data() + (static_cast<int64_t>(bi) * t_out + t) * cols;
        int t0 = t * stride - pad;
        for (int k = 0; k < K; ++k) {
          int src = t0 + k;
          if (src < 0 || src >= T) continue;
          std::memcpy(dst + static_cast<int64_t>(k) * cin,
                      xb + static_cast<int64_t>(src) * cin, sizeof(double) * cin);
        }
      }
    }
    Tensor col_t({static_cast<int>(rows), static_cast<int>(cols)}, std::move(col));
    Tensor g_mat = g.reshaped({static_cast<int>(rows), cout});
    Tensor w_mat = wv.reshaped({static_cast<int>(cols), cout});

    Tensor dw = ops::matmul(ops::transpose2d(col_t), g_mat).reshaped(wv.shape());
    Tensor db_row = reduce_to_row(g_mat, {cout});
    Tensor dcol = ops::matmul(g_mat, ops::transpose2d(w_mat));

    // col2im scatter-add.
    std::vector<double> dx(xv.numel(), 0.0);
    auto dcv = dcol.data();
    for (int bi = 0; bi < B; ++bi) {
      double* xb = dx.data() + static_cast<int64_t>(bi) * T * cin;
      for (int t = 0; t < t_out; ++t) {
        const double* src = dcv.data() + (static_cast<int64_t>(bi) * t_out + t) * cols;
        int t0 = t * stride - pad;
        for (int k = 0; k < K; ++k) {
          int dst = t0 + k;
          if (dst < 0 || dst >= T) continue;
          double* row = xb + static_cast<int64_t>(dst) * cin;
          const double* s = src + static_cast<int64_t>(k) * cin;
          for (int c = 0; c < cin; ++c) row[c] += s[c];
        }
      }
    }
    return std::vector<Tensor>{Tensor(xv.shape(), std::move(dx)), std::move(dw),
                               db_row.reshaped(bshape)};
  });
}

Var upsample2(Var x) {
  Tensor out = ops::upsample2(x.value());
  Shape in_shape = x.value().shape();
  return x.tape->custom(std::move(out), {x}, [in_shape](const Tensor& g) {
    int B = in_shape[0], T = in_shape[1], C = in_shape[2];
    auto gv = g.data();
    std::vector<double> dx(shape_numel(in_shape));
    for (int bi = 0; bi < B; ++bi) {
      for (int t = 0; t < T; ++t) {
        const double* g0 = gv.data() + (static_cast<int64_t>(bi) * 2 * T + 2 * t) * C;
        double* d = dx.data() + (static_cast<int64_t>(bi) * T + t) * C;
        for (int c = 0; c < C; ++c) d[c] = g0[c] + g0[C + c];
      }
    }
    return std::vector<Tensor>{Tensor(in_shape, std::move(dx))};
  });
}

Var mse(Var a, Var b) {
  Var d = sub(a, b);
  return mean_all(mul(d, d));
}

Var cosine_similarity_matrix(Var a, Var b) {
  return matmul(l2_normalize_rows(a), transpose2d(l2_normalize_rows(b)));
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const ScalarFn& fn, const std::vector<Tensor>& point,
                           double h, double tol) {
  MP_REQUIRE(h >= 1e-7 && h <= 1e-3, "grad_check step h must be in [1e-7, 1e-3]");

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(xs.size());
    for (const auto& t : xs) vars.push_back(tape.constant(t));
    Var out = fn(tape, vars);
    MP_REQUIRE(out.value().numel() == 1, "grad_check: fn output must be scalar");
    return out.value().scalar_value();
  };

  // Analytic gradients.
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : point) vars.push_back(tape.leaf(t, true));
  Var loss = fn(tape, vars);
  MP_REQUIRE(loss.value().numel() == 1, "grad_check: fn output must be scalar");
  GradMap grads = tape.backward(loss);

  GradCheckReport report;
  std::vector<Tensor> xs = point;
  for (size_t i = 0; i < point.size(); ++i) {
    Tensor analytic = grads.at(vars[i]);
    auto base = point[i].data();
    for (int64_t j = 0; j < point[i].numel(); ++j) {
      std::vector<double> plus(base.begin(), base.end());
      std::vector<double> minus(base.begin(), base.end());
      plus[j] += h;
      minus[j] -= h;
      xs[i] = Tensor(point[i].shape(), std::move(plus));
      double f_plus = eval(xs);
      xs[i] = Tensor(point[i].shape(), std::move(minus));
      double f_minus = eval(xs);
      xs[i] = point[i];
      double fd = (f_plus - f_minus) / (2.0 * h);
      double an = analytic.at(j);
      double denom = std::max({1.0, std::abs(an), std::abs(fd)});
      report.max_rel_err = std::max(report.max_rel_err, std::abs(an - fd) / denom);
      ++report.n_checked;
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace mimicparts

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "epd/tensor.hpp"

namespace epd {

// Reverse-mode tape. Nodes are recorded in construction order, which is a
// topological order for a dynamic graph; backward walks them in exact
// reverse. Gradients are plain tensors (first order); anything that needs
// differentiable gradients (the Langevin drift) expresses them as tape ops.
class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
};

class Tape {
 public:
  using BackFn = std::function<void(Tape&)>;

  struct Node {
    Tensor value;
    Tensor grad;  // allocated during backward
    BackFn back;  // null for leaves and constants
  };

  int size() const { return static_cast<int>(nodes_.size()); }

  Var leaf(Tensor value) { return push(std::move(value), nullptr); }
  Var constant(Tensor value) { return push(std::move(value), nullptr); }

  Var push(Tensor value, BackFn back) {
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(back)});
    return Var{this, size() - 1};
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& value_at(int id) const { return nodes_[id].value; }
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
  const Tensor& grad_at(int id) const { return nodes_[id].grad; }

  void accum(int id, const Tensor& g) {
    Tensor& dst = nodes_[id].grad;
    require_same_shape(dst, g, "grad accum");
    for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] += g.data[i];
  }

  void accum_scaled(int id, double s, const Tensor& g) {
    Tensor& dst = nodes_[id].grad;
    require_same_shape(dst, g, "grad accum");
    for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] += s * g.data[i];
  }

  // Backward from a scalar output. Accumulators are zeroed for the whole
  // tape on every call.
  void backward(Var out) {
    if (!value(out).is_scalar())
      throw ShapeError("backward: output must be scalar, got " + value(out).shape_str());
    for (Node& n : nodes_) n.grad = Tensor(n.value.shape);
    nodes_[out.id].grad.data[0] = 1.0;
    for (int i = out.id; i >= 0; --i)
      if (nodes_[i].back) nodes_[i].back(*this);
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {
inline Tape* same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape) throw ShapeError(std::string(op) + ": vars on different tapes");
  return a.tape;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  Tape* t = detail::same_tape(a, b, "add");
  require_same_shape(t->value(a), t->value(b), "add");
  Tensor out = t->value(a);
  const Tensor& vb = t->value(b);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += vb.data[i];
  const int ia = a.id, ib = b.id, io = t->size();
  return t->push(std::move(out), [ia, ib, io](Tape& tp) {
    tp.accum(ia, tp.grad_at(io));
    tp.accum(ib, tp.grad_at(io));
  });
}

inline Var sub(Var a, Var b) {
  Tape* t = detail::same_tape(a, b, "sub");
  require_same_shape(t->value(a), t->value(b), "sub");
  Tensor out = t->value(a);
  const Tensor& vb = t->value(b);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= vb.data[i];
  const int ia = a.id, ib = b.id, io = t->size();
  return t->push(std::move(out), [ia, ib, io](Tape& tp) {
    tp.accum(ia, tp.grad_at(io));
    tp.accum_scaled(ib, -1.0, tp.grad_at(io));
  });
}

inline Var mul(Var a, Var b) {
  Tape* t = detail::same_tape(a, b, "mul");
  require_same_shape(t->value(a), t->value(b), "mul");
  Tensor out = t->value(a);
  const Tensor& vb = t->value(b);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= vb.data[i];
  const int ia = a.id, ib = b.id, io = t->size();
  return t->push(std::move(out), [ia, ib, io](Tape& tp) {
    const Tensor& g = tp.grad_at(io);
    Tensor da = g, db = g;
    const Tensor& va = tp.value_at(ia);
    const Tensor& vb2 = tp.value_at(ib);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      da.data[i] = g.data[i] * vb2.data[i];
      db.data[i] = g.data[i] * va.data[i];
    }
    tp.accum(ia, da);
    tp.accum(ib, db);
  });
}

inline Var div(Var a, Var b) {
  Tape* t = detail::same_tape(a, b, "div");
  require_same_shape(t->value(a), t->value(b), "div");
  Tensor out = t->value(a);
  const Tensor& vb = t->value(b);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] /= vb.data[i];
  const int ia = a.id, ib = b.id, io = t->size();
  return t->push(std::move(out), [ia, ib, io](Tape& tp) {
    const Tensor& g = tp.grad_at(io);
    const Tensor& va = tp.value_at(ia);
    const Tensor& vb2 = tp.value_at(ib);
    Tensor da = g, db = g;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double inv = 1.0 / vb2.data[i];
      da.data[i] = g.data[i] * inv;
      db.data[i] = -g.data[i] * va.data[i] * inv * inv;
    }
    tp.accum(ia, da);
    tp.accum(ib, db);
  });
}

inline Var neg(Var a) {
  Tape* t = a.tape;
  Tensor out = t->value(a);
  for (double& v : out.data) v = -v;
  const int ia = a.id, io = t->size();
  return t->push(std::move(out),
                 [ia, io](Tape& tp) { tp.accum_scaled(ia, -1.0, tp.grad_at(io)); });
}

inline Var smul(Var a, double s) {
  Tape* t = a.tape;
  Tensor out = t->value(a);
  for (double& v : out.data) v *= s;
  const int ia = a.id, io = t->size();
  return t->push(std::move(out),
                 [ia, io, s](Tape& tp) { tp.accum_scaled(ia, s, tp.grad_at(io)); });
}

inline Var sadd(Var a, double s) {
  Tape* t = a.tape;
  Tensor out = t->value(a);
  for (double& v : out.data) v += s;
  const int ia = a.id, io = t->size();
  return t->push(std::move(out), [ia, io](Tape& tp) { tp.accum(ia, tp.grad_at(io)); });
}

namespace detail {
// Shared shape for all unary f with pointwise derivative computed from
// (input value, output value).
template <class F, class D>
Var pointwise(Var a, F f, D dfdx_from_vals) {
  Tape* t = a.tape;
  Tensor out = t->value(a);
  for (double& v : out.data) v = f(v);
  const int ia = a.id, io = t->size();
  return t->push(std::move(out), [ia, io, dfdx_from_vals](Tape& tp) {
    const Tensor& g = tp.grad_at(io);
    const Tensor& x = tp.value_at(ia);
    const Tensor& y = tp.value_at(io);
    Tensor da = g;
    for (std::size_t i = 0; i < g.numel(); ++i)
      da.data[i] = g.data[i] * dfdx_from_vals(x.data[i], y.data[i]);
    tp.accum(ia, da);
  });
}
}  // namespace detail

inline Var tanh(Var a) {
  return detail::pointwise(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var a) {
  return detail::pointwise(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(Var a) {
  return detail::pointwise(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  return detail::pointwise(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(Var a) {
  return detail::pointwise(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

inline Var square(Var a) {
  return detail::pointwise(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape* t = detail::same_tape(a, b, "matmul");
  Tensor out = tmatmul(t->value(a), t->value(b));
  const int ia = a.id, ib = b.id, io = t->size();
  return t->push(std::move(out), [ia, ib, io](Tape& tp) {
    const Tensor& g = tp.grad_at(io);
    const Tensor& va = tp.value_at(ia);
    const Tensor& vb = tp.value_at(ib);
    tp.accum(ia, tmatmul(g, ttranspose(vb)));
    tp.accum(ib, tmatmul(ttranspose(va), g));
  });
}

inline Var transpose(Var a) {
  Tape* t = a.tape;
  Tensor out = ttranspose(t->value(a));
  const int ia = a.id, io = t->size();
  return t->push(std::move(out),
                 [ia, io](Tape& tp) { tp.accum(ia, ttranspose(tp.grad_at(io))); });
}

// m [r,c] + v [1,c], broadcast over rows. Bias-add.
inline Var add_rowvec(Var m, Var v) {
  Tape* t = detail::same_tape(m, v, "add_rowvec");
  const Tensor& vm = t->value(m);
  const Tensor& vv = t->value(v);
  if (vv.rows() != 1 || vv.cols() != vm.cols())
    throw ShapeError("add_rowvec: " + vm.shape_str() + " + " + vv.shape_str());
  Tensor out = vm;
  for (std::size_t i = 0; i < vm.rows(); ++i)
    for (std::size_t j = 0; j < vm.cols(); ++j) out.at(i, j) += vv.at(0, j);
  const int im = m.id, iv = v.id, io = t->size();
  return t->push(std::move(out), [im, iv, io](Tape& tp) {
    const Tensor& g = tp.grad_at(io);
    tp.accum(im, g);
    Tensor dv = Tensor::zeros(1, g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) dv.at(0, j) += g.at(i, j);
    tp.accum(iv, dv);
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Var reshape(Var a, std::size_t r, std::size_t c) {
  Tape* t = a.tape;
  const Tensor& va = t->value(a);
  if (va.numel() != r * c)
    throw ShapeError("reshape: " + va.shape_str() + " to " + std::to_string(r) + "x" +
                     std::to_string(c));
  Tensor out;
  out.shape = {r, c};
  out.data = va.data;
  const int ia = a.id, io = t->size();
  return t->push(std::move(out), [ia, io](Tape& tp) {
    const Tensor& g = tp.grad_at(io);
    Tensor da;
    da.shape = tp.value_at(ia).shape;
    da.data = g.data;
    tp.accum(ia, da);
  });
}

inline Var concat_cols(Var a, Var b) {
  Tape* t = detail::same_tape(a, b, "concat_cols");
  const Tensor& va = t->value(a);
  const Tensor& vb = t->value(b);
  if (va.rows() != vb.rows())
    throw ShapeError("concat_cols: " + va.shape_str() + " | " + vb.shape_str());
  const std::size_t r = va.rows(), ca = va.cols(), cb = vb.cols();
  Tensor out = Tensor::zeros(r, ca + cb);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < ca; ++j) out.at(i, j) = va.at(i, j);
    for (std::size_t j = 0; j < cb; ++j) out.at(i, ca + j) = vb.at(i, j);
  }
  const int ia = a.id, ib = b.id, io = t->size();
  return t->push(std::move(out), [ia, ib, io, ca, cb, r](Tape& tp) {
    const Tensor& g = tp.grad_at(io);
    Tensor da = Tensor::zeros(r, ca), db = Tensor::zeros(r, cb);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < ca; ++j) da.at(i, j) = g.at(i, j);
      for (std::size_t j = 0; j < cb; ++j) db.at(i, j) = g.at(i, ca + j);
    }
    tp.accum(ia, da);
    tp.accum(ib, db);
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty");
  Tape* t = parts[0].tape;
  const std::size_t c = t->value(parts[0]).cols();
  std::size_t r = 0;
  for (Var p : parts) {
    if (p.tape != t) throw ShapeError("concat_rows: vars on different tapes");
    if (t->value(p).cols() != c) throw ShapeError("concat_rows: column mismatch");
    r += t->value(p).rows();
  }
  Tensor out = Tensor::zeros(r, c);
  std::size_t row = 0;
  std::vector<int> ids;
  std::vector<std::size_t> row_counts;
  for (Var p : parts) {
    const Tensor& vp = t->value(p);
    std::copy(vp.data.begin(), vp.data.end(), out.data.begin() + row * c);
    row += vp.rows();
    ids.push_back(p.id);
    row_counts.push_back(vp.rows());
  }
  const int io = t->size();
  return t->push(std::move(out), [ids, row_counts, io, c](Tape& tp) {
    const Tensor& g = tp.grad_at(io);
    std::size_t row = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      Tensor dp = Tensor::zeros(row_counts[k], c);
      std::copy(g.data.begin() + row * c, g.data.begin() + (row + row_counts[k]) * c,
                dp.data.begin());
      tp.accum(ids[k], dp);
      row += row_counts[k];
    }
  });
}

inline Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
  Tape* t = a.tape;
  const Tensor& va = t->value(a);
  if (c1 > va.cols() || c0 >= c1)
    throw ShapeError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") of " + va.shape_str());
  const std::size_t r = va.rows(), c = c1 - c0;
  Tensor out = Tensor::zeros(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = va.at(i, c0 + j);
  const int ia = a.id, io = t->size();
  return t->push(std::move(out), [ia, io, c0, c](Tape& tp) {
    const Tensor& g = tp.grad_at(io);
    Tensor da = Tensor(tp.value_at(ia).shape);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j) da.at(i, c0 + j) = g.at(i, j);
    tp.accum(ia, da);
  });
}

inline Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
  Tape* t = a.tape;
  const Tensor& va = t->value(a);
  if (r1 > va.rows() || r0 >= r1)
    throw ShapeError("slice_rows [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") of " + va.shape_str());
  const std::size_t r = r1 - r0, c = va.cols();
  Tensor out = Tensor::zeros(r, c);
  std::copy(va.data.begin() + r0 * c, va.data.begin() + r1 * c, out.data.begin());
  const int ia = a.id, io = t->size();
  return t->push(std::move(out), [ia, io, r0, c](Tape& tp) {
    const Tensor& g = tp.grad_at(io);
    Tensor da = Tensor(tp.value_at(ia).shape);
    std::copy(g.data.begin(), g.data.end(), da.data.begin() + r0 * c);
    tp.accum(ia, da);
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

inline Var sum(Var a) {
  Tape* t = a.tape;
  double s = 0.0;
  for (double v : t->value(a).data) s += v;
  const int ia = a.id, io = t->size();
  return t->push(Tensor::scalar(s), [ia, io](Tape& tp) {
    const double g = tp.grad_at(io).data[0];
    Tensor da = Tensor(tp.value_at(ia).shape);
    for (double& v : da.data) v = g;
    tp.accum(ia, da);
  });
}

inline Var mean(Var a) {
  Tape* t = a.tape;
  const std::size_t n = t->value(a).numel();
  double s = 0.0;
  for (double v : t->value(a).data) s += v;
  const int ia = a.id, io = t->size();
  return t->push(Tensor::scalar(s / static_cast<double>(n)), [ia, io, n](Tape& tp) {
    const double g = tp.grad_at(io).data[0] / static_cast<double>(n);
    Tensor da = Tensor(tp.value_at(ia).shape);
    for (double& v : da.data) v = g;
    tp.accum(ia, da);
  });
}

inline Var l2norm(Var a) {
  Tape* t = a.tape;
  const double nrm = l2(t->value(a));
  const int ia = a.id, io = t->size();
  return t->push(Tensor::scalar(nrm), [ia, io](Tape& tp) {
    const double g = tp.grad_at(io).data[0];
    const double n = tp.value_at(io).data[0];
    const Tensor& x = tp.value_at(ia);
    Tensor da = x;
    const double s = n > 0.0 ? g / n : 0.0;
    for (double& v : da.data) v *= s;
    tp.accum(ia, da);
  });
}

// Row-stable softmax. axis=1 normalizes each row; axis=0 each column.
inline Var softmax(Var a, int axis = 1) {
  Tape* t = a.tape;
  const Tensor& x = t->value(a);
  Tensor y = x;
  const std::size_t r = x.rows(), c = x.cols();
  if (axis == 1) {
    for (std::size_t i = 0; i < r; ++i) {
      double mx = x.at(i, 0);
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) z += (y.at(i, j) = std::exp(x.at(i, j) - mx));
      for (std::size_t j = 0; j < c; ++j) y.at(i, j) /= z;
    }
  } else if (axis == 0) {
    for (std::size_t j = 0; j < c; ++j) {
      double mx = x.at(0, j);
      for (std::size_t i = 1; i < r; ++i) mx = std::max(mx, x.at(i, j));
      double z = 0.0;
      for (std::size_t i = 0; i < r; ++i) z += (y.at(i, j) = std::exp(x.at(i, j) - mx));
      for (std::size_t i = 0; i < r; ++i) y.at(i, j) /= z;
    }
  } else {
    throw ShapeError("softmax: axis must be 0 or 1");
  }
  const int ia = a.id, io = t->size();
  return t->push(std::move(y), [ia, io, axis](Tape& tp) {
    const Tensor& g = tp.grad_at(io);
    const Tensor& yv = tp.value_at(io);
    Tensor da = g;
    const std::size_t r = g.rows(), c = g.cols();
    if (axis == 1) {
      for (std::size_t i = 0; i < r; ++i) {
        double dotgy = 0.0;
        for (std::size_t j = 0; j < c; ++j) dotgy += g.at(i, j) * yv.at(i, j);
        for (std::size_t j = 0; j < c; ++j)
          da.at(i, j) = yv.at(i, j) * (g.at(i, j) - dotgy);
      }
    } else {
      for (std::size_t j = 0; j < c; ++j) {
        double dotgy = 0.0;
        for (std::size_t i = 0; i < r; ++i) dotgy += g.at(i, j) * yv.at(i, j);
        for (std::size_t i = 0; i < r; ++i)
          da.at(i, j) = yv.at(i, j) * (g.at(i, j) - dotgy);
      }
    }
    tp.accum(ia, da);
  });
}

// Per-row layer norm with learned gain/bias [1,c].
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-6) {
  Tape* t = x.tape;
  detail::same_tape(x, gain, "layer_norm");
  detail::same_tape(x, bias, "layer_norm");
  const Tensor& vx = t->value(x);
  const Tensor& vg = t->value(gain);
  const Tensor& vb = t->value(bias);
  const std::size_t r = vx.rows(), c = vx.cols();
  if (vg.cols() != c || vb.cols() != c || vg.rows() != 1 || vb.rows() != 1)
    throw ShapeError("layer_norm: gain/bias must be [1," + std::to_string(c) + "]");
  Tensor out = vx;
  Tensor xhat = vx;
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < c; ++j) m += vx.at(i, j);
    m /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = vx.at(i, j) - m;
      var += d * d;
    }
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat.at(i, j) = (vx.at(i, j) - m) * inv_std[i];
      out.at(i, j) = xhat.at(i, j) * vg.at(0, j) + vb.at(0, j);
    }
  }
  const int ix = x.id, ig = gain.id, ib = bias.id, io = t->size();
  return t->push(std::move(out), [ix, ig, ib, io, xhat, inv_std, r, c](Tape& tp) {
    const Tensor& g = tp.grad_at(io);
    const Tensor& vg = tp.value_at(ig);
    Tensor dx = Tensor::zeros(r, c);
    Tensor dgain = Tensor::zeros(1, c);
    Tensor dbias = Tensor::zeros(1, c);
    for (std::size_t i = 0; i < r; ++i) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double dy = g.at(i, j) * vg.at(0, j);
        sum_dy += dy;
        sum_dy_xhat += dy * xhat.at(i, j);
        dgain.at(0, j) += g.at(i, j) * xhat.at(i, j);
        dbias.at(0, j) += g.at(i, j);
      }
      const double cn = static_cast<double>(c);
      for (std::size_t j = 0; j < c; ++j) {
        const double dy = g.at(i, j) * vg.at(0, j);
        dx.at(i, j) =
            inv_std[i] * (dy - sum_dy / cn - xhat.at(i, j) * sum_dy_xhat / cn);
      }
    }
    tp.accum(ix, dx);
    tp.accum(ig, dgain);
    tp.accum(ib, dbias);
  });
}

// Convenience: mean squared error between same-shaped vars.
inline Var mse(Var a, Var b) {
  Var d = sub(a, b);
  return mean(mul(d, d));
}

}  // namespace epd

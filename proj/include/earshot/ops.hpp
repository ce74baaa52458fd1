#pragma once

// Differentiable operations over BasicVar. Every op records a backward
// closure only when at least one input requires a gradient.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "earshot/autodiff.hpp"

namespace earshot {

namespace detail {

template <typename Scalar>
bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename Scalar>
void require_same_graph(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  if (&a.graph() != &b.graph()) {
    throw InputError("operands belong to different graphs");
  }
}

struct AxisSplit {
  Index outer;
  Index extent;
  Index inner;
};

inline AxisSplit split_axis(const Shape& shape, Index axis) {
  const Index r = static_cast<Index>(shape.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(shape));
  }
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < r; ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

inline Index normalize_axis(Index axis, Index rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("axis out of range");
  }
  return axis;
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with suffix broadcasting: the smaller operand's shape
// must equal the trailing extents of the larger one (e.g. [D] against [T,D]).

template <typename Scalar>
BasicVar<Scalar> add(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::require_same_graph(a, b);
  auto& g = a.graph();
  const bool a_big = detail::is_suffix<Scalar>(b.shape(), a.shape());
  if (!a_big && !detail::is_suffix<Scalar>(a.shape(), b.shape())) {
    throw DimensionError("add: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " do not broadcast");
  }
  const BasicVar<Scalar> big = a_big ? a : b;
  const BasicVar<Scalar> small = a_big ? b : a;
  const Index inner = small.value().size();
  const Index outer = big.value().size() / inner;
  BasicTensor<Scalar> out = big.value();
  {
    Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
        o(out.raw(), outer, inner);
    o.rowwise() += small.value().data().transpose();
  }
  const bool rg = a.requires_grad() || b.requires_grad();
  const auto bid = big.id(), sid = small.id();
  return g.make(std::move(out), rg,
                [bid, sid, outer, inner](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  if (gr.requires_grad(bid)) gr.grad_buffer(bid).data() += go.data();
                  if (gr.requires_grad(sid)) {
                    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic,
                                                   Eigen::RowMajor>>
                        gm(go.raw(), outer, inner);
                    gr.grad_buffer(sid).data() += gm.colwise().sum().transpose();
                  }
                },
                "add");
}

template <typename Scalar>
BasicVar<Scalar> scale(const BasicVar<Scalar>& a, Scalar factor) {
  auto& g = a.graph();
  BasicTensor<Scalar> out = a.value();
  out.data() *= factor;
  const auto aid = a.id();
  return g.make(std::move(out), a.requires_grad(),
                [aid, factor](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  gr.grad_buffer(aid).data() += factor * go.data();
                },
                "scale");
}

template <typename Scalar>
BasicVar<Scalar> sub(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  return add(a, scale(b, Scalar(-1)));
}

template <typename Scalar>
BasicVar<Scalar> add_scalar(const BasicVar<Scalar>& a, Scalar offset) {
  auto& g = a.graph();
  BasicTensor<Scalar> out = a.value();
  out.data().array() += offset;
  const auto aid = a.id();
  return g.make(std::move(out), a.requires_grad(),
                [aid](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  gr.grad_buffer(aid).data() += go.data();
                },
                "add_scalar");
}

template <typename Scalar>
BasicVar<Scalar> mul(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::require_same_graph(a, b);
  auto& g = a.graph();
  const bool a_big = detail::is_suffix<Scalar>(b.shape(), a.shape());
  if (!a_big && !detail::is_suffix<Scalar>(a.shape(), b.shape())) {
    throw DimensionError("mul: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " do not broadcast");
  }
  const BasicVar<Scalar> big = a_big ? a : b;
  const BasicVar<Scalar> small = a_big ? b : a;
  const Index inner = small.value().size();
  const Index outer = big.value().size() / inner;
  using RM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  BasicTensor<Scalar> out = big.value();
  {
    Eigen::Map<RM> o(out.raw(), outer, inner);
    o.array().rowwise() *= small.value().data().transpose().array();
  }
  const bool rg = a.requires_grad() || b.requires_grad();
  const auto bid = big.id(), sid = small.id();
  return g.make(std::move(out), rg,
                [bid, sid, outer, inner](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  Eigen::Map<const RM> gm(go.raw(), outer, inner);
                  const auto& bv = gr.value(bid);
                  const auto& sv = gr.value(sid);
                  Eigen::Map<const RM> bm(bv.raw(), outer, inner);
                  if (gr.requires_grad(bid)) {
                    Eigen::Map<RM> gb(gr.grad_buffer(bid).raw(), outer, inner);
                    gb.array() += gm.array().rowwise() * sv.data().transpose().array();
                  }
                  if (gr.requires_grad(sid)) {
                    gr.grad_buffer(sid).data() +=
                        (gm.array() * bm.array()).colwise().sum().transpose().matrix();
                  }
                },
                "mul");
}

template <typename Scalar>
BasicVar<Scalar> square(const BasicVar<Scalar>& a) {
  auto& g = a.graph();
  BasicTensor<Scalar> out = a.value();
  out.data() = out.data().array().square().matrix();
  const auto aid = a.id();
  return g.make(std::move(out), a.requires_grad(),
                [aid](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  gr.grad_buffer(aid).data().array() +=
                      Scalar(2) * gr.value(aid).data().array() * go.data().array();
                },
                "square");
}

template <typename Scalar>
BasicVar<Scalar> sqrt(const BasicVar<Scalar>& a) {
  auto& g = a.graph();
  if ((a.value().data().array() < 0).any()) {
    throw NumericError("sqrt of negative value");
  }
  BasicTensor<Scalar> out = a.value();
  out.data() = out.data().array().sqrt().matrix();
  const auto aid = a.id();
  const auto oid = g.size();
  return g.make(std::move(out), a.requires_grad(),
                [aid, oid](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  gr.grad_buffer(aid).data().array() +=
                      go.data().array() / (Scalar(2) * gr.value(oid).data().array());
                },
                "sqrt");
}

template <typename Scalar>
BasicVar<Scalar> sigmoid(const BasicVar<Scalar>& a) {
  auto& g = a.graph();
  BasicTensor<Scalar> out = a.value();
  out.data() = out.data().unaryExpr([](Scalar x) { return detail::stable_sigmoid(x); });
  const auto aid = a.id();
  const auto oid = g.size();
  return g.make(std::move(out), a.requires_grad(),
                [aid, oid](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  const auto& y = gr.value(oid).data().array();
                  gr.grad_buffer(aid).data().array() += go.data().array() * y * (Scalar(1) - y);
                },
                "sigmoid");
}

/// x * sigmoid(x).
template <typename Scalar>
BasicVar<Scalar> silu(const BasicVar<Scalar>& a) {
  auto& g = a.graph();
  BasicTensor<Scalar> out = a.value();
  out.data() = out.data().unaryExpr([](Scalar x) { return x * detail::stable_sigmoid(x); });
  const auto aid = a.id();
  return g.make(std::move(out), a.requires_grad(),
                [aid](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  const auto& x = gr.value(aid).data();
                  auto& gx = gr.grad_buffer(aid).data();
                  for (Index i = 0; i < x.size(); ++i) {
                    const Scalar s = detail::stable_sigmoid(x[i]);
                    gx[i] += go.data()[i] * s * (Scalar(1) + x[i] * (Scalar(1) - s));
                  }
                },
                "silu");
}

enum class GateActivation { sigmoid, silu };

/// Splits the last axis in half and returns first * act(second).
template <typename Scalar>
BasicVar<Scalar> glu(const BasicVar<Scalar>& a, GateActivation act = GateActivation::sigmoid) {
  auto& g = a.graph();
  const auto& x = a.value();
  if (x.rank() == 0 || x.extent(-1) % 2 != 0) {
    throw DimensionError("glu: last extent must be even, got shape " +
                         shape_string(x.shape()));
  }
  const Index cols = x.extent(-1);
  const Index half = cols / 2;
  const Index rows = x.size() / cols;
  Shape shape = x.shape();
  shape.back() = half;
  BasicTensor<Scalar> out(shape);
  auto xm = x.matrix();
  auto om = out.matrix();
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < half; ++c) {
      const Scalar gate = xm(r, half + c);
      const Scalar s = detail::stable_sigmoid(gate);
      om(r, c) = xm(r, c) * (act == GateActivation::silu ? gate * s : s);
    }
  }
  const auto aid = a.id();
  return g.make(std::move(out), a.requires_grad(),
                [aid, rows, half, act](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  auto xm = gr.value(aid).matrix();
                  auto gx = gr.grad_buffer(aid).matrix();
                  auto gm = go.matrix();
                  for (Index r = 0; r < rows; ++r) {
                    for (Index c = 0; c < half; ++c) {
                      const Scalar lin = xm(r, c);
                      const Scalar gate = xm(r, half + c);
                      const Scalar s = detail::stable_sigmoid(gate);
                      Scalar f, df;
                      if (act == GateActivation::silu) {
                        f = gate * s;
                        df = s * (Scalar(1) + gate * (Scalar(1) - s));
                      } else {
                        f = s;
                        df = s * (Scalar(1) - s);
                      }
                      gx(r, c) += gm(r, c) * f;
                      gx(r, half + c) += gm(r, c) * lin * df;
                    }
                  }
                },
                "glu");
}

// ---------------------------------------------------------------------------
// Linear algebra.

/// Batched matrix product over the last two axes; leading (batch) axes
/// broadcast NumPy-style.
template <typename Scalar>
BasicVar<Scalar> matmul(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::require_same_graph(a, b);
  auto& g = a.graph();
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa.back() != sb[sb.size() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(sa) + " and " +
                         shape_string(sb));
  }
  const Index m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  const std::size_t ba = sa.size() - 2, bb = sb.size() - 2;
  const std::size_t bo = std::max(ba, bb);
  Shape batch(bo);
  std::vector<Index> stride_a(bo, 0), stride_b(bo, 0);
  {
    Index acc_a = 1, acc_b = 1;
    for (std::size_t i = 0; i < bo; ++i) {
      const std::size_t pos = bo - 1 - i;
      const Index ea = i < ba ? sa[ba - 1 - i] : 1;
      const Index eb = i < bb ? sb[bb - 1 - i] : 1;
      if (ea != eb && ea != 1 && eb != 1) {
        throw DimensionError("matmul: batch extents of " + shape_string(sa) + " and " +
                             shape_string(sb) + " do not broadcast");
      }
      batch[pos] = std::max(ea, eb);
      stride_a[pos] = ea == 1 ? 0 : acc_a;
      stride_b[pos] = eb == 1 ? 0 : acc_b;
      if (i < ba) acc_a *= ea;
      if (i < bb) acc_b *= eb;
    }
  }
  const Index nbatch = shape_size(batch);
  std::vector<Index> off_a(static_cast<std::size_t>(nbatch)), off_b(off_a.size());
  for (Index flat = 0; flat < nbatch; ++flat) {
    Index rem = flat, oa = 0, ob = 0;
    for (std::size_t i = bo; i-- > 0;) {
      const Index idx = rem % batch[i];
      rem /= batch[i];
      oa += idx * stride_a[i];
      ob += idx * stride_b[i];
    }
    off_a[static_cast<std::size_t>(flat)] = oa * m * k;
    off_b[static_cast<std::size_t>(flat)] = ob * k * n;
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  BasicTensor<Scalar> out(out_shape);
  using RM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  for (Index flat = 0; flat < nbatch; ++flat) {
    Eigen::Map<const RM> am(a.value().raw() + off_a[static_cast<std::size_t>(flat)], m, k);
    Eigen::Map<const RM> bm(b.value().raw() + off_b[static_cast<std::size_t>(flat)], k, n);
    Eigen::Map<RM> om(out.raw() + flat * m * n, m, n);
    om.noalias() = am * bm;
  }
  g.count_flops(static_cast<std::uint64_t>(2 * nbatch * m * k * n));
  const bool rg = a.requires_grad() || b.requires_grad();
  const auto aid = a.id(), bid = b.id();
  return g.make(std::move(out), rg,
                [aid, bid, m, k, n, nbatch, off_a = std::move(off_a), off_b = std::move(off_b)](
                    BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  const bool ga = gr.requires_grad(aid), gb = gr.requires_grad(bid);
                  for (Index flat = 0; flat < nbatch; ++flat) {
                    const auto oa = off_a[static_cast<std::size_t>(flat)];
                    const auto ob = off_b[static_cast<std::size_t>(flat)];
                    Eigen::Map<const RM> gm(go.raw() + flat * m * n, m, n);
                    if (ga) {
                      Eigen::Map<const RM> bm(gr.value(bid).raw() + ob, k, n);
                      Eigen::Map<RM> gam(gr.grad_buffer(aid).raw() + oa, m, k);
                      gam.noalias() += gm * bm.transpose();
                    }
                    if (gb) {
                      Eigen::Map<const RM> am(gr.value(aid).raw() + oa, m, k);
                      Eigen::Map<RM> gbm(gr.grad_buffer(bid).raw() + ob, k, n);
                      gbm.noalias() += am.transpose() * gm;
                    }
                  }
                },
                "matmul");
}

/// Swaps the two axes of a rank-2 tensor.
template <typename Scalar>
BasicVar<Scalar> transpose(const BasicVar<Scalar>& a) {
  auto& g = a.graph();
  if (a.value().rank() != 2) {
    throw DimensionError("transpose expects rank 2, got " + shape_string(a.shape()));
  }
  const Index r = a.extent(0), c = a.extent(1);
  BasicTensor<Scalar> out({c, r});
  out.matrix() = a.value().matrix().transpose();
  const auto aid = a.id();
  return g.make(std::move(out), a.requires_grad(),
                [aid](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  gr.grad_buffer(aid).matrix() += go.matrix().transpose();
                },
                "transpose");
}

/// x[..., In] * W[In, Out] + b[Out]. Pass a default-constructed Var to omit b.
template <typename Scalar>
BasicVar<Scalar> linear(const BasicVar<Scalar>& x, const BasicVar<Scalar>& w,
                        const BasicVar<Scalar>& b = {}) {
  auto& g = x.graph();
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() < 1 || wv.rank() != 2 || xv.extent(-1) != wv.extent(0)) {
    throw DimensionError("linear: input " + shape_string(xv.shape()) +
                         " incompatible with weight " + shape_string(wv.shape()));
  }
  const Index out_dim = wv.extent(1);
  if (b.valid() && (b.value().rank() != 1 || b.extent(0) != out_dim)) {
    throw DimensionError("linear: bias " + shape_string(b.shape()) +
                         " does not match output width " + std::to_string(out_dim));
  }
  Shape shape = xv.shape();
  shape.back() = out_dim;
  BasicTensor<Scalar> out(shape);
  auto om = out.matrix();
  om.noalias() = xv.matrix() * wv.matrix();
  if (b.valid()) om.rowwise() += b.value().data().transpose();
  g.count_flops(static_cast<std::uint64_t>(2 * om.rows() * wv.extent(0) * out_dim));
  const bool rg = x.requires_grad() || w.requires_grad() || (b.valid() && b.requires_grad());
  const auto xid = x.id(), wid = w.id();
  const bool has_b = b.valid();
  const auto bid = has_b ? b.id() : 0;
  return g.make(std::move(out), rg,
                [xid, wid, bid, has_b](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  auto gm = go.matrix();
                  if (gr.requires_grad(xid)) {
                    gr.grad_buffer(xid).matrix().noalias() +=
                        gm * gr.value(wid).matrix().transpose();
                  }
                  if (gr.requires_grad(wid)) {
                    gr.grad_buffer(wid).matrix().noalias() +=
                        gr.value(xid).matrix().transpose() * gm;
                  }
                  if (has_b && gr.requires_grad(bid)) {
                    gr.grad_buffer(bid).data() += gm.colwise().sum().transpose();
                  }
                },
                "linear");
}

// ---------------------------------------------------------------------------
// Normalisations and reductions.

/// Softmax along `axis`, max-shifted.
template <typename Scalar>
BasicVar<Scalar> softmax(const BasicVar<Scalar>& a, Index axis = -1) {
  auto& g = a.graph();
  const auto split = detail::split_axis(a.shape(), axis);
  BasicTensor<Scalar> out = a.value();
  Scalar* y = out.raw();
  for (Index o = 0; o < split.outer; ++o) {
    for (Index j = 0; j < split.inner; ++j) {
      const Index base = o * split.extent * split.inner + j;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index i = 0; i < split.extent; ++i) mx = std::max(mx, y[base + i * split.inner]);
      Scalar total = 0;
      for (Index i = 0; i < split.extent; ++i) {
        Scalar& v = y[base + i * split.inner];
        v = std::exp(v - mx);
        total += v;
      }
      for (Index i = 0; i < split.extent; ++i) y[base + i * split.inner] /= total;
    }
  }
  const auto aid = a.id();
  const auto oid = g.size();
  return g.make(std::move(out), a.requires_grad(),
                [aid, oid, split](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  const Scalar* yv = gr.value(oid).raw();
                  const Scalar* gv = go.raw();
                  Scalar* gx = gr.grad_buffer(aid).raw();
                  for (Index o = 0; o < split.outer; ++o) {
                    for (Index j = 0; j < split.inner; ++j) {
                      const Index base = o * split.extent * split.inner + j;
                      Scalar dot = 0;
                      for (Index i = 0; i < split.extent; ++i) {
                        const Index p = base + i * split.inner;
                        dot += gv[p] * yv[p];
                      }
                      for (Index i = 0; i < split.extent; ++i) {
                        const Index p = base + i * split.inner;
                        gx[p] += yv[p] * (gv[p] - dot);
                      }
                    }
                  }
                },
                "softmax");
}

/// Row softmax of a [R, C] tensor restricted to positions where `mask` (R*C,
/// row-major) is nonzero. Masked positions receive exactly zero weight.
template <typename Scalar>
BasicVar<Scalar> masked_softmax(const BasicVar<Scalar>& a, const Mask& mask) {
  auto& g = a.graph();
  if (a.value().rank() != 2) {
    throw DimensionError("masked_softmax expects rank 2, got " + shape_string(a.shape()));
  }
  const Index rows = a.extent(0), cols = a.extent(1);
  if (static_cast<Index>(mask.size()) != rows * cols) {
    throw DimensionError("masked_softmax: mask length " + std::to_string(mask.size()) +
                         " does not match " + shape_string(a.shape()));
  }
  BasicTensor<Scalar> out(a.shape());
  const Scalar* x = a.value().raw();
  Scalar* y = out.raw();
  for (Index r = 0; r < rows; ++r) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    bool any = false;
    for (Index c = 0; c < cols; ++c) {
      if (mask[static_cast<std::size_t>(r * cols + c)]) {
        mx = std::max(mx, x[r * cols + c]);
        any = true;
      }
    }
    if (!any) {
      throw PreconditionError("attention row " + std::to_string(r) +
                              " has every key masked");
    }
    Scalar total = 0;
    for (Index c = 0; c < cols; ++c) {
      const Index p = r * cols + c;
      y[p] = mask[static_cast<std::size_t>(p)] ? std::exp(x[p] - mx) : Scalar(0);
      total += y[p];
    }
    for (Index c = 0; c < cols; ++c) y[r * cols + c] /= total;
  }
  const auto aid = a.id();
  const auto oid = g.size();
  return g.make(std::move(out), a.requires_grad(),
                [aid, oid, rows, cols](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  const Scalar* yv = gr.value(oid).raw();
                  const Scalar* gv = go.raw();
                  Scalar* gx = gr.grad_buffer(aid).raw();
                  for (Index r = 0; r < rows; ++r) {
                    Scalar dot = 0;
                    for (Index c = 0; c < cols; ++c) dot += gv[r * cols + c] * yv[r * cols + c];
                    for (Index c = 0; c < cols; ++c) {
                      const Index p = r * cols + c;
                      gx[p] += yv[p] * (gv[p] - dot);
                    }
                  }
                },
                "masked_softmax");
}

/// (1/beta) * log(sum(exp(beta * x))) along `axis`; the axis is removed.
template <typename Scalar>
BasicVar<Scalar> logsumexp(const BasicVar<Scalar>& a, Index axis, Scalar beta) {
  if (!(beta > 0)) throw ConfigError("logsumexp: beta must be positive");
  auto& g = a.graph();
  const auto split = detail::split_axis(a.shape(), axis);
  Shape shape = a.shape();
  shape.erase(shape.begin() + detail::normalize_axis(axis, a.value().rank()));
  BasicTensor<Scalar> out(shape);
  BasicTensor<Scalar> weights(a.shape());
  const Scalar* x = a.value().raw();
  for (Index o = 0; o < split.outer; ++o) {
    for (Index j = 0; j < split.inner; ++j) {
      const Index base = o * split.extent * split.inner + j;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index i = 0; i < split.extent; ++i) mx = std::max(mx, x[base + i * split.inner]);
      Scalar total = 0;
      for (Index i = 0; i < split.extent; ++i) {
        const Index p = base + i * split.inner;
        weights[p] = std::exp(beta * (x[p] - mx));
        total += weights[p];
      }
      for (Index i = 0; i < split.extent; ++i) weights[base + i * split.inner] /= total;
      out[o * split.inner + j] = mx + std::log(total) / beta;
    }
  }
  const auto aid = a.id();
  return g.make(std::move(out), a.requires_grad(),
                [aid, split, weights = std::move(weights)](BasicGraph<Scalar>& gr,
                                                           const BasicTensor<Scalar>& go) {
                  Scalar* gx = gr.grad_buffer(aid).raw();
                  for (Index o = 0; o < split.outer; ++o) {
                    for (Index j = 0; j < split.inner; ++j) {
                      const Index base = o * split.extent * split.inner + j;
                      const Scalar up = go[o * split.inner + j];
                      for (Index i = 0; i < split.extent; ++i) {
                        const Index p = base + i * split.inner;
                        gx[p] += up * weights[p];
                      }
                    }
                  }
                },
                "logsumexp");
}

/// Temperature-controlled soft maximum of two ear scores:
/// (1/beta) * ln((exp(beta*left) + exp(beta*right)) / 2).
template <typename Scalar>
Scalar best_ear_pool(Scalar left, Scalar right, Scalar beta) {
  if (!(beta > 0)) throw ConfigError("best_ear_pool: beta must be positive");
  const Scalar mx = std::max(left, right);
  const Scalar el = std::exp(beta * (left - mx));
  const Scalar er = std::exp(beta * (right - mx));
  return mx + std::log(Scalar(0.5) * (el + er)) / beta;
}

template <typename Scalar>
BasicVar<Scalar> best_ear_pool(const BasicVar<Scalar>& left, const BasicVar<Scalar>& right,
                               Scalar beta) {
  detail::require_same_graph(left, right);
  if (left.value().size() != 1 || right.value().size() != 1) {
    throw DimensionError("best_ear_pool expects scalar ear scores");
  }
  auto& g = left.graph();
  const Scalar l = left.value()[0], r = right.value()[0];
  const Scalar pooled = best_ear_pool(l, r, beta);
  const Scalar mx = std::max(l, r);
  const Scalar el = std::exp(beta * (l - mx));
  const Scalar er = std::exp(beta * (r - mx));
  const Scalar wl = el / (el + er), wr = er / (el + er);
  const auto lid = left.id(), rid = right.id();
  return g.make(BasicTensor<Scalar>::scalar(pooled),
                left.requires_grad() || right.requires_grad(),
                [lid, rid, wl, wr](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  if (gr.requires_grad(lid)) gr.grad_buffer(lid).data().array() += wl * go[0];
                  if (gr.requires_grad(rid)) gr.grad_buffer(rid).data().array() += wr * go[0];
                },
                "best_ear_pool");
}

/// Layer normalisation over the last axis followed by an affine map.
template <typename Scalar>
BasicVar<Scalar> layer_norm(const BasicVar<Scalar>& x, const BasicVar<Scalar>& gain,
                            const BasicVar<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  auto& g = x.graph();
  const auto& xv = x.value();
  if (xv.rank() < 1) throw DimensionError("layer_norm needs rank >= 1");
  const Index d = xv.extent(-1);
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: affine parameters do not match width " +
                         std::to_string(d));
  }
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  const Index rows = xv.size() / d;
  using RM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RM xhat(rows, d);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(rows);
  auto xm = xv.matrix();
  for (Index r = 0; r < rows; ++r) {
    const Scalar mean = xm.row(r).mean();
    const Scalar var = (xm.row(r).array() - mean).square().mean();
    inv_std[r] = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (xm.row(r).array() - mean) * inv_std[r];
  }
  BasicTensor<Scalar> out(xv.shape());
  auto om = out.matrix();
  om = (xhat.array().rowwise() * gain.value().data().transpose().array()).matrix();
  om.rowwise() += bias.value().data().transpose();
  const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  const auto xid = x.id(), gid = gain.id(), bid = bias.id();
  return g.make(
      std::move(out), rg,
      [xid, gid, bid, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
        auto gm = go.matrix();
        if (gr.requires_grad(gid)) {
          gr.grad_buffer(gid).data() +=
              (gm.array() * xhat.array()).colwise().sum().transpose().matrix();
        }
        if (gr.requires_grad(bid)) {
          gr.grad_buffer(bid).data() += gm.colwise().sum().transpose();
        }
        if (gr.requires_grad(xid)) {
          auto gx = gr.grad_buffer(xid).matrix();
          const auto& gain_v = gr.value(gid).data();
          for (Index r = 0; r < rows; ++r) {
            const auto dxhat = (gm.row(r).array() * gain_v.transpose().array()).eval();
            const Scalar m1 = dxhat.mean();
            const Scalar m2 = (dxhat * xhat.row(r).array()).mean();
            gx.row(r).array() += inv_std[r] * (dxhat - m1 - xhat.row(r).array() * m2);
          }
        }
        (void)d;
      },
      "layer_norm");
}

/// Sum of all elements, returned as a rank-0 tensor.
template <typename Scalar>
BasicVar<Scalar> sum(const BasicVar<Scalar>& a) {
  auto& g = a.graph();
  const auto aid = a.id();
  return g.make(BasicTensor<Scalar>::scalar(a.value().data().sum()), a.requires_grad(),
                [aid](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  gr.grad_buffer(aid).data().array() += go[0];
                },
                "sum");
}

template <typename Scalar>
BasicVar<Scalar> mean(const BasicVar<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

/// Mean over the rows of x[T, D] where `mask` is set. Masked rows get zero
/// gradient and never influence the result.
template <typename Scalar>
BasicVar<Scalar> masked_mean(const BasicVar<Scalar>& x, const Mask& mask) {
  auto& g = x.graph();
  if (x.value().rank() != 2) {
    throw DimensionError("masked_mean expects [T,D], got " + shape_string(x.shape()));
  }
  const Index t = x.extent(0), d = x.extent(1);
  if (static_cast<Index>(mask.size()) != t) {
    throw DimensionError("masked_mean: mask length " + std::to_string(mask.size()) +
                         " != " + std::to_string(t));
  }
  Index count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) throw PreconditionError("masked_mean: every position is masked");
  BasicTensor<Scalar> out({d});
  auto xm = x.value().matrix();
  for (Index r = 0; r < t; ++r) {
    if (mask[static_cast<std::size_t>(r)]) out.data() += xm.row(r).transpose();
  }
  out.data() /= static_cast<Scalar>(count);
  const auto xid = x.id();
  return g.make(std::move(out), x.requires_grad(),
                [xid, mask, count, t](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  auto gx = gr.grad_buffer(xid).matrix();
                  const Scalar w = Scalar(1) / static_cast<Scalar>(count);
                  for (Index r = 0; r < t; ++r) {
                    if (mask[static_cast<std::size_t>(r)]) gx.row(r) += w * go.data().transpose();
                  }
                },
                "masked_mean");
}

// ---------------------------------------------------------------------------
// Convolution.

/// SAME-padded dilated 1-D convolution with stride 1:
/// out[t] = b + sum_k x[t + (k - K/2) * dilation] * w[k], zeros outside [0, T).
template <typename Scalar>
BasicVar<Scalar> conv1d_dilated(const BasicVar<Scalar>& x, const BasicVar<Scalar>& w,
                                const BasicVar<Scalar>& b, Index dilation) {
  auto& g = x.graph();
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (wv.rank() != 3) throw DimensionError("conv1d: weight must be [K,Cin,Cout]");
  const Index k = wv.extent(0), cin = wv.extent(1), cout = wv.extent(2);
  if (k % 2 == 0) throw ConfigError("conv1d: kernel size must be odd, got " + std::to_string(k));
  if (dilation < 1) throw ConfigError("conv1d: dilation must be >= 1");
  if (xv.rank() != 2 || xv.extent(1) != cin) {
    throw DimensionError("conv1d: input " + shape_string(xv.shape()) + " vs weight " +
                         shape_string(wv.shape()));
  }
  if (b.valid() && b.value().size() != cout) {
    throw DimensionError("conv1d: bias does not match Cout");
  }
  const Index t = xv.extent(0);
  using RM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  BasicTensor<Scalar> out({t, cout});
  auto om = out.matrix();
  auto xm = xv.matrix();
  const Index half = k / 2;
  for (Index tap = 0; tap < k; ++tap) {
    const Index shift = (tap - half) * dilation;
    const Index lo = std::max<Index>(0, -shift);
    const Index hi = std::min<Index>(t, t - shift);
    if (hi <= lo) continue;
    Eigen::Map<const RM> wk(wv.raw() + tap * cin * cout, cin, cout);
    om.middleRows(lo, hi - lo).noalias() += xm.middleRows(lo + shift, hi - lo) * wk;
  }
  if (b.valid()) om.rowwise() += b.value().data().transpose();
  g.count_flops(static_cast<std::uint64_t>(2 * t * k * cin * cout));
  const bool rg = x.requires_grad() || w.requires_grad() || (b.valid() && b.requires_grad());
  const auto xid = x.id(), wid = w.id();
  const bool has_b = b.valid();
  const auto bid = has_b ? b.id() : 0;
  return g.make(
      std::move(out), rg,
      [xid, wid, bid, has_b, k, cin, cout, t, half, dilation](BasicGraph<Scalar>& gr,
                                                              const BasicTensor<Scalar>& go) {
        auto gm = go.matrix();
        const bool gx_on = gr.requires_grad(xid), gw_on = gr.requires_grad(wid);
        for (Index tap = 0; tap < k; ++tap) {
          const Index shift = (tap - half) * dilation;
          const Index lo = std::max<Index>(0, -shift);
          const Index hi = std::min<Index>(t, t - shift);
          if (hi <= lo) continue;
          if (gx_on) {
            Eigen::Map<const RM> wk(gr.value(wid).raw() + tap * cin * cout, cin, cout);
            gr.grad_buffer(xid).matrix().middleRows(lo + shift, hi - lo).noalias() +=
                gm.middleRows(lo, hi - lo) * wk.transpose();
          }
          if (gw_on) {
            Eigen::Map<RM> gwk(gr.grad_buffer(wid).raw() + tap * cin * cout, cin, cout);
            gwk.noalias() += gr.value(xid).matrix().middleRows(lo + shift, hi - lo).transpose() *
                             gm.middleRows(lo, hi - lo);
          }
        }
        if (has_b && gr.requires_grad(bid)) {
          gr.grad_buffer(bid).data() += gm.colwise().sum().transpose();
        }
      },
      "conv1d_dilated");
}

// ---------------------------------------------------------------------------
// Regularisation.

/// Inverted dropout driven by an explicit seed. Identity when `train` is
/// false or p == 0.
template <typename Scalar>
BasicVar<Scalar> dropout(const BasicVar<Scalar>& x, Scalar p, std::uint64_t seed, bool train) {
  if (p < 0 || p >= 1) throw ConfigError("dropout: p must lie in [0, 1)");
  if (!train || p == 0) return x;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Scalar> unif(Scalar(0), Scalar(1));
  BasicTensor<Scalar> keep(x.shape());
  const Scalar factor = Scalar(1) / (Scalar(1) - p);
  for (Index i = 0; i < keep.size(); ++i) keep[i] = unif(rng) >= p ? factor : Scalar(0);
  auto& g = x.graph();
  BasicTensor<Scalar> out = x.value();
  out.data().array() *= keep.data().array();
  const auto xid = x.id();
  return g.make(std::move(out), x.requires_grad(),
                [xid, keep = std::move(keep)](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  gr.grad_buffer(xid).data().array() += go.data().array() * keep.data().array();
                },
                "dropout");
}

/// Dropout drawing its seed from the owning graph's generator.
template <typename Scalar>
BasicVar<Scalar> dropout(const BasicVar<Scalar>& x, Scalar p) {
  auto& g = x.graph();
  if (!g.training() || p == 0) {
    if (p < 0 || p >= 1) throw ConfigError("dropout: p must lie in [0, 1)");
    return x;
  }
  return dropout(x, p, g.rng()(), true);
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <typename Scalar>
BasicVar<Scalar> reshape(const BasicVar<Scalar>& x, Shape shape) {
  auto& g = x.graph();
  BasicTensor<Scalar> out = x.value();
  out.reshape(std::move(shape));
  const auto xid = x.id();
  return g.make(std::move(out), x.requires_grad(),
                [xid](BasicGraph<Scalar>& gr, const BasicTensor<Scalar>& go) {
                  gr.grad_buffer(xid).data() += go.data();
                },
                "reshape");
}

/// Concatenates along `axis`; all other extents must agree.
template <typename Scalar>
BasicVar<Scalar> concat(std::span<const BasicVar<Scalar>> parts, Index axis) {
  if (parts.empty()) throw InputError("concat of zero tensors");
  auto& g = parts.front().graph();
  const Shape& first = parts.front().shape();
  const Index ax = detail::normalize_axis(axis, static_cast<Index>(first.size()));
  Shape shape = first;
  shape[static_cast<std::size_t>(ax)] = 0;
  std::vector<detail::AxisSplit> splits;
  for (const auto& p : parts) {
    detail::require_same_graph(parts.front(), p);
    Shape s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<Index>(i) != ax && s[i] != first[i]) {
        throw DimensionError("concat: shapes " + shape_string(first) + " and " +
                             shape_string(s) + " differ off-axis");
      }
    }
    shape[static_cast<std::size_t>(ax)] += s[static_cast<std::size_t>(ax)];
    splits.push_back(detail::split_axis(s, ax));
  }
  BasicTensor<Scalar> out(shape);
  const Index outer = splits.front().outer, inner = splits.front().inner;
  const Index total = shape[static_cast<std::size_t>(ax)];
  std::vector<std::size_t> ids;
  std::vector<Index> widths;
  bool rg = false;
  Index offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const Index w = splits[pi].extent * inner;
    const Scalar* src = parts[pi].value().raw();
    for (Index o = 0; o < outer; ++o) {
      std::copy(src + o * w, src + (o + 1) * w, out.raw() + o * total * inner + offset);
    }
    offset += w;
    ids.push_back(parts[pi].id());
    widths.push_back(w);
    rg = rg || parts[pi].requires_grad();
  }
  return g.make(std::move(out), rg,
                [ids, widths, outer, total, inner](BasicGraph<Scalar>& gr,
                                                   const BasicTensor<Scalar>& go) {
                  Index off = 0;
                  for (std::size_t pi = 0; pi < ids.size(); ++pi) {
                    const Index w = widths[pi];
                    if (gr.requires_grad(ids[pi])) {
                      Scalar* dst = gr.grad_buffer(ids[pi]).raw();
                      for (Index o = 0; o < outer; ++o) {
                        const Scalar* src = go.raw() + o * total * inner + off;
                        for (Index i = 0; i < w; ++i) dst[o * w + i] += src[i];
                      }
                    }
                    off += w;
                  }
                },
                "concat");
}

template <typename Scalar>
BasicVar<Scalar> concat(std::initializer_list<BasicVar<Scalar>> parts, Index axis) {
  std::vector<BasicVar<Scalar>> v(parts);
  return concat(std::span<const BasicVar<Scalar>>(v), axis);
}

/// Stacks equally shaped tensors along a new leading axis.
template <typename Scalar>
BasicVar<Scalar> stack(std::span<const BasicVar<Scalar>> parts) {
  std::vector<BasicVar<Scalar>> rows;
  rows.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s = p.shape();
    s.insert(s.begin(), 1);
    rows.push_back(reshape(p, s));
  }
  return concat(std::span<const BasicVar<Scalar>>(rows), 0);
}

/// Contiguous range [begin, begin + count) along `axis`.
template <typename Scalar>
BasicVar<Scalar> slice(const BasicVar<Scalar>& x, Index axis, Index begin, Index count) {
  auto& g = x.graph();
  const auto split = detail::split_axis(x.shape(), axis);
  if (begin < 0 || count < 1 || begin + count > split.extent) {
    throw DimensionError("slice [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_string(x.shape()));
  }
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(detail::normalize_axis(axis, x.value().rank()))] = count;
  BasicTensor<Scalar> out(shape);
  const Index src_w = split.extent * split.inner, dst_w = count * split.inner;
  const Scalar* src = x.value().raw();
  for (Index o = 0; o < split.outer; ++o) {
    std::copy(src + o * src_w + begin * split.inner,
              src + o * src_w + begin * split.inner + dst_w, out.raw() + o * dst_w);
  }
  const auto xid = x.id();
  return g.make(std::move(out), x.requires_grad(),
                [xid, split, begin, src_w, dst_w](BasicGraph<Scalar>& gr,
                                                  const BasicTensor<Scalar>& go) {
                  Scalar* dst = gr.grad_buffer(xid).raw();
                  for (Index o = 0; o < split.outer; ++o) {
                    for (Index i = 0; i < dst_w; ++i) {
                      dst[o * src_w + begin * split.inner + i] += go[o * dst_w + i];
                    }
                  }
                },
                "slice");
}

/// Row `i` of a rank-2 tensor as a rank-1 tensor.
template <typename Scalar>
BasicVar<Scalar> row(const BasicVar<Scalar>& x, Index i) {
  return reshape(slice(x, 0, i, 1), Shape{x.extent(1)});
}

// ---------------------------------------------------------------------------
// Loss.

/// sqrt(mean((pred - truth)^2)) for a rank-1 prediction vector.
template <typename Scalar>
BasicVar<Scalar> rmse_loss(const BasicVar<Scalar>& pred, const BasicTensor<Scalar>& truth) {
  if (pred.value().size() != truth.size() || truth.size() == 0) {
    throw DimensionError("rmse_loss: prediction/target sizes differ");
  }
  auto& g = pred.graph();
  BasicTensor<Scalar> t = truth;
  t.reshape(pred.shape());
  return sqrt(mean(square(sub(pred, g.constant(std::move(t))))));
}

}  // namespace earshot

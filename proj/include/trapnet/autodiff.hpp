#pragma once

// Reverse-mode automatic differentiation over BasicTensor.
//
// A Tape owns every node created during a forward pass. Each primitive stores
// its value and, when any input requires a gradient, a closure that pushes the
// output gradient back to its inputs. Nodes are appended in creation order, so
// walking the tape backwards is a valid reverse topological order.

#include "trapnet/tensor.hpp"

#include <cmath>
#include <functional>
#include <limits>

namespace trapnet {

template <typename S>
class Tape;

template <typename S>
class Var {
 public:
  Var() = default;
  Var(Tape<S>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<S>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const BasicTensor<S>& value() const { return tape_->value(*this); }
  const BasicTensor<S>& grad() const { return tape_->grad(*this); }
  const Shape& shape() const { return value().shape(); }
  Index dim(Index i) const { return value().dim(i); }
  bool requires_grad() const { return tape_->requires_grad(*this); }

 private:
  Tape<S>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename S>
class Tape {
 public:
  using TensorT = BasicTensor<S>;
  using Backward = std::function<void(Tape&, const TensorT& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> leaf(TensorT value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, true, nullptr});
    return Var<S>(this, nodes_.size() - 1);
  }
  Var<S> constant(TensorT value) { return leaf(std::move(value), false); }
  Var<S> variable(TensorT value) { return leaf(std::move(value), true); }

  /// Appends an op node. The backward closure is kept only if some input
  /// participates in differentiation.
  Var<S> record(TensorT value, std::initializer_list<Var<S>> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var<S>>(inputs.begin(), inputs.size()), std::move(backward));
  }

  Var<S> record(TensorT value, std::span<const Var<S>> inputs, Backward backward) {
    bool rg = false;
    for (const Var<S>& in : inputs) {
      if (&in.tape() != this) throw Error("autodiff: input belongs to a different tape");
      rg = rg || nodes_[in.id()].requires_grad;
    }
    if (rg) ++ops_;
    nodes_.push_back(Node{std::move(value), {}, rg, false, rg ? std::move(backward) : nullptr});
    return Var<S>(this, nodes_.size() - 1);
  }

  /// Populates grad() of every node reachable from `loss`; requires_grad
  /// leaves that do not influence the loss receive zeros.
  void backward(Var<S> loss) {
    if (&loss.tape() != this) throw Error("backward: loss belongs to a different tape");
    const TensorT& lv = nodes_[loss.id()].value;
    if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got " + to_string(lv.shape()));
    for (Node& n : nodes_) n.grad = TensorT();
    nodes_[loss.id()].grad = TensorT(lv.shape(), S(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.is_null()) n.backward(*this, n.grad);
    }
    for (Node& n : nodes_)
      if (n.is_leaf && n.requires_grad && n.grad.is_null()) n.grad = TensorT(n.value.shape(), S(0));
  }

  const TensorT& value(Var<S> v) const { return nodes_.at(v.id()).value; }
  const TensorT& grad(Var<S> v) const { return nodes_.at(v.id()).grad; }
  bool requires_grad(Var<S> v) const { return nodes_.at(v.id()).requires_grad; }

  /// Gradient buffer of `v` for accumulation, allocated as zeros on first use;
  /// nullptr when `v` does not require a gradient.
  TensorT* grad_buffer(Var<S> v) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return nullptr;
    if (n.grad.is_null()) n.grad = TensorT(n.value.shape(), S(0));
    return &n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t op_count() const { return ops_; }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    bool requires_grad;
    bool is_leaf;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::size_t ops_ = 0;
};

enum class Reduction { None, Sum, Mean };
enum class Padding { Valid, Same };

struct Conv2dOptions {
  Index stride = 1;
  Padding padding = Padding::Valid;
};

namespace detail {

template <typename S>
void require_same_shape(const char* op, const Var<S>& a, const Var<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <typename S>
void require_rank(const char* op, const Var<S>& a, Index rank) {
  if (a.value().rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(a.shape()));
}

template <typename S, typename Expr>
void accumulate(Tape<S>& tape, const Var<S>& v, const Expr& g) {
  if (auto* buf = tape.grad_buffer(v)) buf->array() += g;
}

inline Index pooled_extent(Index in, Index window, Index stride) { return (in - window) / stride + 1; }

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::require_same_shape("add", a, b);
  BasicTensor<S> out(a.shape(), typename BasicTensor<S>::Array(a.value().array() + b.value().array()));
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<S>& t, const BasicTensor<S>& g) {
    detail::accumulate(t, a, g.array());
    detail::accumulate(t, b, g.array());
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::require_same_shape("sub", a, b);
  BasicTensor<S> out(a.shape(), typename BasicTensor<S>::Array(a.value().array() - b.value().array()));
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<S>& t, const BasicTensor<S>& g) {
    detail::accumulate(t, a, g.array());
    detail::accumulate(t, b, -g.array());
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::require_same_shape("mul", a, b);
  BasicTensor<S> out(a.shape(), typename BasicTensor<S>::Array(a.value().array() * b.value().array()));
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<S>& t, const BasicTensor<S>& g) {
    detail::accumulate(t, a, g.array() * b.value().array());
    detail::accumulate(t, b, g.array() * a.value().array());
  });
}

template <typename S>
Var<S> scale(Var<S> a, S factor) {
  BasicTensor<S> out(a.shape(), typename BasicTensor<S>::Array(a.value().array() * factor));
  return a.tape().record(std::move(out), {a}, [a, factor](Tape<S>& t, const BasicTensor<S>& g) {
    detail::accumulate(t, a, g.array() * factor);
  });
}

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }
template <typename S>
Var<S> operator*(Var<S> a, S factor) { return scale(a, factor); }
template <typename S>
Var<S> operator*(S factor, Var<S> a) { return scale(a, factor); }

template <typename S>
Var<S> relu(Var<S> a) {
  BasicTensor<S> out(a.shape(), typename BasicTensor<S>::Array(a.value().array().max(S(0))));
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const BasicTensor<S>& g) {
    detail::accumulate(t, a, (a.value().array() > S(0)).select(g.array(), S(0)));
  });
}

template <typename S>
Var<S> tanh(Var<S> a) {
  BasicTensor<S> out(a.shape(), typename BasicTensor<S>::Array(a.value().array().tanh()));
  BasicTensor<S> saved = out;
  return a.tape().record(std::move(out), {a}, [a, saved](Tape<S>& t, const BasicTensor<S>& g) {
    detail::accumulate(t, a, g.array() * (S(1) - saved.array().square()));
  });
}

/// Elementwise clamp; the gradient passes where lo <= x <= hi.
template <typename S>
Var<S> clip(Var<S> a, S lo, S hi) {
  BasicTensor<S> out(a.shape(), typename BasicTensor<S>::Array(a.value().array().max(lo).min(hi)));
  return a.tape().record(std::move(out), {a}, [a, lo, hi](Tape<S>& t, const BasicTensor<S>& g) {
    const auto& x = a.value().array();
    detail::accumulate(t, a, (x >= lo && x <= hi).select(g.array(), S(0)));
  });
}

/// sign with sign(0) = 0. Piecewise constant, so it contributes no gradient.
template <typename S>
Var<S> sign(Var<S> a) {
  BasicTensor<S> out(a.shape(), typename BasicTensor<S>::Array(a.value().array().sign()));
  return a.tape().constant(std::move(out));
}

/// Uniform quantization to `levels` values in [0,1]. With straight_through the
/// backward pass treats the stage as identity; otherwise its gradient is zero.
template <typename S>
Var<S> quantize(Var<S> a, int levels, bool straight_through) {
  if (levels < 2) throw PreconditionError("quantize: need at least 2 levels");
  const S q = S(levels - 1);
  BasicTensor<S> out(a.shape(),
                     typename BasicTensor<S>::Array((a.value().array().max(S(0)).min(S(1)) * q).round() / q));
  if (!straight_through) return a.tape().constant(std::move(out));
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const BasicTensor<S>& g) {
    detail::accumulate(t, a, g.array());
  });
}

// ------------------------------------------------------------------ reshaping

template <typename S>
Var<S> reshape(Var<S> a, Shape shape) {
  BasicTensor<S> out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const BasicTensor<S>& g) {
    detail::accumulate(t, a, g.array());
  });
}

/// [N, ...] -> [N, prod(...)]
template <typename S>
Var<S> flatten(Var<S> a) {
  return reshape(a, Shape{a.dim(0), a.value().row_size()});
}

/// Picks columns of a [N, D] value.
template <typename S>
Var<S> select_columns(Var<S> a, std::vector<Index> columns) {
  detail::require_rank("select_columns", a, 2);
  const Index n = a.dim(0), d = a.dim(1), k = Index(columns.size());
  if (k == 0) throw ShapeError("select_columns: empty column set");
  BasicTensor<S> out(Shape{n, k});
  auto src = a.value().matrix();
  auto dst = out.matrix();
  for (Index j = 0; j < k; ++j) {
    if (columns[j] < 0 || columns[j] >= d)
      throw ShapeError("select_columns: column " + std::to_string(columns[j]) + " outside width " + std::to_string(d));
    dst.col(j) = src.col(columns[j]);
  }
  return a.tape().record(std::move(out), {a}, [a, columns](Tape<S>& t, const BasicTensor<S>& g) {
    if (auto* buf = t.grad_buffer(a)) {
      auto gm = g.matrix();
      auto bm = buf->matrix();
      for (Index j = 0; j < Index(columns.size()); ++j) bm.col(columns[j]) += gm.col(j);
    }
  });
}

/// Joins [N, D_i] values (any trailing rank, flattened per row) into [N, sum D_i].
template <typename S>
Var<S> concat_columns(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_columns: no inputs");
  const Index n = parts[0].dim(0);
  Index width = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != n) throw ShapeError("concat_columns: leading dims differ");
    width += p.value().row_size();
  }
  BasicTensor<S> out(Shape{n, width});
  auto dst = out.matrix();
  Index off = 0;
  for (const auto& p : parts) {
    const Index w = p.value().row_size();
    dst.middleCols(off, w) = p.value().matrix();
    off += w;
  }
  return parts[0].tape().record(std::move(out), std::span<const Var<S>>(parts),
                                [parts](Tape<S>& t, const BasicTensor<S>& g) {
                                  auto gm = g.matrix();
                                  Index o = 0;
                                  for (const auto& p : parts) {
                                    const Index w = p.value().row_size();
                                    if (auto* buf = t.grad_buffer(p)) buf->matrix() += gm.middleCols(o, w);
                                    o += w;
                                  }
                                });
}

// ------------------------------------------------------------------ reductions

template <typename S>
Var<S> sum(Var<S> a) {
  BasicTensor<S> out = BasicTensor<S>::scalar(a.value().array().sum());
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const BasicTensor<S>& g) {
    if (auto* buf = t.grad_buffer(a)) buf->array() += g[0];
  });
}

template <typename S>
Var<S> mean(Var<S> a) {
  return scale(sum(a), S(1) / S(a.value().size()));
}

/// [N, ...] -> [N]
template <typename S>
Var<S> sum_rows(Var<S> a) {
  const Index n = a.dim(0);
  BasicTensor<S> out(Shape{n});
  out.array() = a.value().matrix().rowwise().sum().array();
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const BasicTensor<S>& g) {
    if (auto* buf = t.grad_buffer(a)) buf->matrix().colwise() += g.array().matrix();
  });
}

// --------------------------------------------------------------- linear algebra

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dims differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
  BasicTensor<S> out(Shape{a.dim(0), b.dim(1)});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<S>& t, const BasicTensor<S>& g) {
    if (auto* ga = t.grad_buffer(a)) ga->matrix().noalias() += g.matrix() * b.value().matrix().transpose();
    if (auto* gb = t.grad_buffer(b)) gb->matrix().noalias() += a.value().matrix().transpose() * g.matrix();
  });
}

/// x [N, ...] flattened per row, weight [out, in], bias [out] -> [N, out].
template <typename S>
Var<S> linear(Var<S> x, Var<S> weight, Var<S> bias) {
  detail::require_rank("linear", weight, 2);
  const Index n = x.dim(0), in = x.value().row_size(), outw = weight.dim(0);
  if (weight.dim(1) != in)
    throw ShapeError("linear: input width " + std::to_string(in) + " vs weight " + to_string(weight.shape()));
  if (bias.value().size() != outw) throw ShapeError("linear: bias " + to_string(bias.shape()) + " vs out " + std::to_string(outw));
  BasicTensor<S> out(Shape{n, outw});
  out.matrix().noalias() = x.value().matrix() * weight.value().matrix().transpose();
  out.matrix().rowwise() += bias.value().array().matrix().transpose();
  return x.tape().record(std::move(out), {x, weight, bias}, [x, weight, bias](Tape<S>& t, const BasicTensor<S>& g) {
    auto gm = g.matrix();
    if (auto* gx = t.grad_buffer(x)) gx->matrix().noalias() += gm * weight.value().matrix();
    if (auto* gw = t.grad_buffer(weight)) gw->matrix().noalias() += gm.transpose() * x.value().matrix();
    if (auto* gb = t.grad_buffer(bias)) gb->array() += gm.colwise().sum().transpose().array();
  });
}

/// 2-D convolution. x is NCHW, weight OIHW, bias [O] (pass an invalid Var
/// for no bias). Lowered to a single GEMM over an im2col buffer.
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> weight, Var<S> bias, Conv2dOptions opt = {}) {
  using RowMatrix = typename BasicTensor<S>::RowMatrix;
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", weight, 4);
  if (opt.stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c)
    throw ShapeError("conv2d: input channels " + std::to_string(c) + " vs kernel " + to_string(weight.shape()));
  if (bias.valid() && bias.value().size() != o) throw ShapeError("conv2d: bias size " + to_string(bias.shape()));
  Index oh, ow, pad_t = 0, pad_l = 0;
  if (opt.padding == Padding::Valid) {
    if (kh > h || kw > w)
      throw ShapeError("conv2d: kernel " + to_string(weight.shape()) + " larger than input " + to_string(x.shape()));
    oh = (h - kh) / opt.stride + 1;
    ow = (w - kw) / opt.stride + 1;
  } else {
    oh = (h + opt.stride - 1) / opt.stride;
    ow = (w + opt.stride - 1) / opt.stride;
    pad_t = std::max<Index>((oh - 1) * opt.stride + kh - h, 0) / 2;
    pad_l = std::max<Index>((ow - 1) * opt.stride + kw - w, 0) / 2;
  }
  const Index p = oh * ow, ckk = c * kh * kw, stride = opt.stride;

  RowMatrix cols = RowMatrix::Zero(ckk, n * p);
  const S* xd = x.value().data();
  for (Index ci = 0; ci < c; ++ci)
    for (Index a = 0; a < kh; ++a)
      for (Index b = 0; b < kw; ++b) {
        const Index r = (ci * kh + a) * kw + b;
        for (Index ni = 0; ni < n; ++ni) {
          const S* plane = xd + (ni * c + ci) * h * w;
          S* dst = cols.data() + r * n * p + ni * p;
          for (Index i = 0; i < oh; ++i) {
            const Index yy = i * stride + a - pad_t;
            if (yy < 0 || yy >= h) continue;
            for (Index j = 0; j < ow; ++j) {
              const Index xx = j * stride + b - pad_l;
              if (xx >= 0 && xx < w) dst[i * ow + j] = plane[yy * w + xx];
            }
          }
        }
      }

  RowMatrix prod(o, n * p);
  prod.noalias() = weight.value().matrix(o, ckk) * cols;
  BasicTensor<S> out(Shape{n, o, oh, ow});
  for (Index ni = 0; ni < n; ++ni)
    for (Index oi = 0; oi < o; ++oi) {
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> dst(out.data() + (ni * o + oi) * p, p);
      dst = prod.row(oi).segment(ni * p, p).transpose();
      if (bias.valid()) dst.array() += bias.value()[oi];
    }

  std::vector<Var<S>> inputs{x, weight};
  if (bias.valid()) inputs.push_back(bias);
  return x.tape().record(
      std::move(out), std::span<const Var<S>>(inputs),
      [=, cols = std::move(cols)](Tape<S>& t, const BasicTensor<S>& g) {
        RowMatrix gm(o, n * p);
        for (Index ni = 0; ni < n; ++ni)
          for (Index oi = 0; oi < o; ++oi)
            gm.row(oi).segment(ni * p, p) =
                Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(g.data() + (ni * o + oi) * p, p);
        if (auto* gw = t.grad_buffer(weight)) gw->matrix(o, ckk).noalias() += gm * cols.transpose();
        if (bias.valid())
          if (auto* gb = t.grad_buffer(bias)) gb->array() += gm.rowwise().sum().array();
        if (auto* gx = t.grad_buffer(x)) {
          RowMatrix gcols(ckk, n * p);
          gcols.noalias() = weight.value().matrix(o, ckk).transpose() * gm;
          S* gxd = gx->data();
          for (Index ci = 0; ci < c; ++ci)
            for (Index a = 0; a < kh; ++a)
              for (Index b = 0; b < kw; ++b) {
                const Index r = (ci * kh + a) * kw + b;
                for (Index ni = 0; ni < n; ++ni) {
                  S* plane = gxd + (ni * c + ci) * h * w;
                  const S* src = gcols.data() + r * n * p + ni * p;
                  for (Index i = 0; i < oh; ++i) {
                    const Index yy = i * stride + a - pad_t;
                    if (yy < 0 || yy >= h) continue;
                    for (Index j = 0; j < ow; ++j) {
                      const Index xx = j * stride + b - pad_l;
                      if (xx >= 0 && xx < w) plane[yy * w + xx] += src[i * ow + j];
                    }
                  }
                }
              }
        }
      });
}

template <typename S>
Var<S> maxpool2d(Var<S> x, Index window, Index stride) {
  detail::require_rank("maxpool2d", x, 4);
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window < 1 || stride < 1 || window > h || window > w)
    throw ShapeError("maxpool2d: window " + std::to_string(window) + " invalid for " + to_string(x.shape()));
  const Index oh = detail::pooled_extent(h, window, stride), ow = detail::pooled_extent(w, window, stride);
  BasicTensor<S> out(Shape{n, c, oh, ow});
  std::vector<Index> argmax(std::size_t(out.size()));
  const S* xd = x.value().data();
  Index k = 0;
  for (Index plane = 0; plane < n * c; ++plane)
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j, ++k) {
        Index best = plane * h * w + (i * stride) * w + j * stride;
        for (Index a = 0; a < window; ++a)
          for (Index b = 0; b < window; ++b) {
            const Index idx = plane * h * w + (i * stride + a) * w + j * stride + b;
            if (xd[idx] > xd[best]) best = idx;
          }
        argmax[std::size_t(k)] = best;
        out[k] = xd[best];
      }
  return x.tape().record(std::move(out), {x}, [x, argmax = std::move(argmax)](Tape<S>& t, const BasicTensor<S>& g) {
    if (auto* gx = t.grad_buffer(x))
      for (std::size_t q = 0; q < argmax.size(); ++q) (*gx)[argmax[q]] += g[Index(q)];
  });
}

template <typename S>
Var<S> avgpool2d(Var<S> x, Index window, Index stride) {
  detail::require_rank("avgpool2d", x, 4);
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window < 1 || stride < 1 || window > h || window > w)
    throw ShapeError("avgpool2d: window " + std::to_string(window) + " invalid for " + to_string(x.shape()));
  const Index oh = detail::pooled_extent(h, window, stride), ow = detail::pooled_extent(w, window, stride);
  const S inv = S(1) / S(window * window);
  BasicTensor<S> out(Shape{n, c, oh, ow});
  const S* xd = x.value().data();
  Index k = 0;
  for (Index plane = 0; plane < n * c; ++plane)
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j, ++k) {
        S acc = 0;
        for (Index a = 0; a < window; ++a)
          for (Index b = 0; b < window; ++b) acc += xd[plane * h * w + (i * stride + a) * w + j * stride + b];
        out[k] = acc * inv;
      }
  return x.tape().record(std::move(out), {x}, [=](Tape<S>& t, const BasicTensor<S>& g) {
    auto* gx = t.grad_buffer(x);
    if (!gx) return;
    Index q = 0;
    for (Index plane = 0; plane < n * c; ++plane)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j, ++q)
          for (Index a = 0; a < window; ++a)
            for (Index b = 0; b < window; ++b) (*gx)[plane * h * w + (i * stride + a) * w + j * stride + b] += g[q] * inv;
  });
}

// ------------------------------------------------------------ classification

namespace detail {

template <typename S>
typename BasicTensor<S>::RowMatrix softmax_rows(const BasicTensor<S>& logits) {
  auto z = logits.matrix();
  typename BasicTensor<S>::RowMatrix y = z.colwise() - z.rowwise().maxCoeff();
  y = y.array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

}  // namespace detail

/// Row-wise softmax of [N, C] logits.
template <typename S>
Var<S> softmax(Var<S> logits) {
  detail::require_rank("softmax", logits, 2);
  BasicTensor<S> out(logits.shape());
  out.matrix() = detail::softmax_rows(logits.value());
  BasicTensor<S> saved = out;
  return logits.tape().record(std::move(out), {logits}, [logits, saved](Tape<S>& t, const BasicTensor<S>& g) {
    if (auto* gz = t.grad_buffer(logits)) {
      auto y = saved.matrix();
      auto gm = g.matrix();
      auto dot = (gm.array() * y.array()).rowwise().sum();
      gz->matrix().array() += y.array() * (gm.array().colwise() - dot);
    }
  });
}

/// Cross-entropy of softmax(logits) against integer labels, computed stably
/// from logits. Reduction::None yields [N].
template <typename S>
Var<S> cross_entropy(Var<S> logits, std::span<const int> labels, Reduction reduction = Reduction::Mean) {
  detail::require_rank("cross_entropy", logits, 2);
  const Index n = logits.dim(0), k = logits.dim(1);
  if (Index(labels.size()) != n)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + to_string(logits.shape()));
  for (int l : labels)
    if (l < 0 || l >= k) throw ShapeError("cross_entropy: label " + std::to_string(l) + " outside " + std::to_string(k) + " classes");
  auto z = logits.value().matrix();
  typename BasicTensor<S>::RowMatrix probs = detail::softmax_rows(logits.value());
  BasicTensor<S> per(Shape{n});
  for (Index i = 0; i < n; ++i) {
    const S m = z.row(i).maxCoeff();
    const S lse = m + std::log((z.row(i).array() - m).exp().sum());
    per[i] = lse - z(i, labels[std::size_t(i)]);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  Var<S> losses = logits.tape().record(std::move(per), {logits},
                                       [logits, probs = std::move(probs), lab](Tape<S>& t, const BasicTensor<S>& g) {
                                         if (auto* gz = t.grad_buffer(logits)) {
                                           auto gm = gz->matrix();
                                           for (Index i = 0; i < Index(lab.size()); ++i) {
                                             gm.row(i) += g[i] * probs.row(i);
                                             gm(i, lab[std::size_t(i)]) -= g[i];
                                           }
                                         }
                                       });
  switch (reduction) {
    case Reduction::None: return losses;
    case Reduction::Sum: return sum(losses);
    case Reduction::Mean: return mean(losses);
  }
  return losses;
}

/// Targeted logit-margin loss max(max_{j != t} z_j - z_t, -confidence), per row.
template <typename S>
Var<S> margin_loss(Var<S> logits, std::span<const int> targets, S confidence) {
  detail::require_rank("margin_loss", logits, 2);
  const Index n = logits.dim(0), k = logits.dim(1);
  if (Index(targets.size()) != n) throw ShapeError("margin_loss: target count mismatch");
  auto z = logits.value().matrix();
  BasicTensor<S> out(Shape{n});
  std::vector<Index> other(std::size_t(n), -1);
  for (Index i = 0; i < n; ++i) {
    const int t = targets[std::size_t(i)];
    if (t < 0 || t >= k) throw ShapeError("margin_loss: target outside class range");
    Index best = -1;
    for (Index j = 0; j < k; ++j)
      if (j != t && (best < 0 || z(i, j) > z(i, best))) best = j;
    const S m = z(i, best) - z(i, t);
    if (m > -confidence) {
      out[i] = m;
      other[std::size_t(i)] = best;
    } else {
      out[i] = -confidence;
    }
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.tape().record(std::move(out), {logits}, [logits, other, tg](Tape<S>& t, const BasicTensor<S>& g) {
    if (auto* gz = t.grad_buffer(logits)) {
      auto gm = gz->matrix();
      for (Index i = 0; i < Index(tg.size()); ++i) {
        if (other[std::size_t(i)] < 0) continue;
        gm(i, other[std::size_t(i)]) += g[i];
        gm(i, tg[std::size_t(i)]) -= g[i];
      }
    }
  });
}

/// Row-wise cosine similarity of a [N, D] against b [N, D] or a shared b [D].
/// Zero-norm rows have no defined direction and raise an error.
template <typename S>
Var<S> cosine_similarity(Var<S> a, Var<S> b) {
  const Index n = a.dim(0), d = a.value().row_size();
  const bool shared = b.value().rank() == 1;
  if (shared ? b.value().size() != d : (b.dim(0) != n || b.value().row_size() != d))
    throw ShapeError("cosine_similarity: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  auto am = a.value().matrix(n, d);
  auto bm = b.value().matrix(shared ? 1 : n, d);
  BasicTensor<S> out(Shape{n});
  Vec na(n), nb(n);
  for (Index i = 0; i < n; ++i) {
    na[i] = am.row(i).norm();
    nb[i] = bm.row(shared ? 0 : i).norm();
    if (na[i] == S(0) || nb[i] == S(0)) throw Error("cosine_similarity: zero-norm vector in row " + std::to_string(i));
    out[i] = am.row(i).dot(bm.row(shared ? 0 : i)) / (na[i] * nb[i]);
  }
  BasicTensor<S> cosv = out;
  return a.tape().record(std::move(out), {a, b}, [a, b, n, d, shared, na, nb, cosv](Tape<S>& t, const BasicTensor<S>& g) {
    auto am2 = a.value().matrix(n, d);
    auto bm2 = b.value().matrix(shared ? 1 : n, d);
    auto* ga = t.grad_buffer(a);
    auto* gb = t.grad_buffer(b);
    for (Index i = 0; i < n; ++i) {
      const auto brow = bm2.row(shared ? 0 : i);
      const auto arow = am2.row(i);
      if (ga)
        ga->matrix(n, d).row(i) += g[i] * (brow / (na[i] * nb[i]) - cosv[i] * arow / (na[i] * na[i]));
      if (gb)
        gb->matrix(shared ? 1 : n, d).row(shared ? 0 : i) +=
            g[i] * (arow / (na[i] * nb[i]) - cosv[i] * brow / (nb[i] * nb[i]));
    }
  });
}

}  // namespace trapnet

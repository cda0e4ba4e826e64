#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include <cblas.h>

#include "structkd/common.hpp"
#include "structkd/tensor.hpp"

namespace structkd {
namespace ops {

/// Controls how normalization layers treat batch statistics.
/// TrainNoUpdate normalizes with the current batch but leaves the running
/// estimates untouched, so repeated passes stay side-effect free.
enum class Mode { Train, TrainNoUpdate, Eval };

/// Convolution backend. Im2col lowers each sample to a matrix product and
/// supports gradient-of-gradient; Direct is a fused reference kernel whose
/// backward cannot be differentiated again.
enum class ConvImpl { Im2col, Direct };

// Feature maps are [N,C,H,W], matrices [R,K], vectors [C]; scalars use
// shape {1}. Binary arithmetic broadcasts only between equal shapes or
// against a scalar. Reductions accumulate in double.

inline Tensor add(const Tensor& a, const Tensor& b);
inline Tensor sub(const Tensor& a, const Tensor& b);
inline Tensor mul(const Tensor& a, const Tensor& b);
inline Tensor div(const Tensor& a, const Tensor& b);
inline Tensor scale(const Tensor& x, double c);
inline Tensor add_scalar(const Tensor& x, double c);
inline Tensor neg(const Tensor& x);
inline Tensor square(const Tensor& x);
inline Tensor relu(const Tensor& x);
inline Tensor exp(const Tensor& x);
inline Tensor log(const Tensor& x);
inline Tensor sqrt(const Tensor& x);
inline Tensor reshape(const Tensor& x, Shape shape);
inline Tensor transpose2d(const Tensor& x);
inline Tensor select0(const Tensor& x, int i);
inline Tensor scatter0(const Tensor& s, int i, const Shape& full);
inline Tensor stack0(const std::vector<Tensor>& xs);
inline Tensor concat_c(const Tensor& a, const Tensor& b);
inline Tensor slice_c(const Tensor& x, int c0, int c1);
inline Tensor scatter_c(const Tensor& s, int c0, int c_total);
inline Tensor sum_all(const Tensor& x);
inline Tensor mean_all(const Tensor& x);
inline Tensor broadcast_to(const Tensor& s, const Shape& shape);
inline Tensor sum_tail(const Tensor& x, int nkeep);
inline Tensor expand_tail(const Tensor& v, const Shape& full);
inline Tensor chan_sum(const Tensor& x);
inline Tensor chan_expand(const Tensor& v, const Shape& full);
inline Tensor cpix_sum(const Tensor& x);
inline Tensor cpix_expand(const Tensor& s, int channels);
inline Tensor matmul(const Tensor& a, const Tensor& b);
inline Tensor softmax(const Tensor& x);
inline Tensor log_softmax(const Tensor& x);
inline Tensor gather_label(const Tensor& x,
                           std::shared_ptr<const std::vector<int>> labels);
inline Tensor scatter_label(const Tensor& g,
                            std::shared_ptr<const std::vector<int>> labels,
                            int channels);
inline Tensor im2col(const Tensor& x, int k, int stride, int pad);
inline Tensor col2im(const Tensor& cols, const Shape& xshape, int k, int stride,
                     int pad);
inline Tensor avg_pool(const Tensor& x, int k);
inline Tensor avg_unpool(const Tensor& x, int k);
inline Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w);
inline Tensor upsample_bilinear_adj(const Tensor& g, int in_h, int in_w);
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                     int stride, int pad, ConvImpl impl = ConvImpl::Im2col);
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, Tensor& running_mean,
                         Tensor& running_var, float eps, float momentum,
                         Mode mode);

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace opdetail {

/// Vector-Jacobian callback: receives the upstream gradient and the op's own
/// output, returns gradients aligned with the op's inputs.
using VjpFn = std::function<std::vector<Tensor>(const Tensor&, const Tensor&)>;

inline void check_finite(const std::vector<float>& v, const char* name) {
#ifndef NDEBUG
  for (float x : v)
    SKD_CHECK(std::isfinite(x), Numeric,
              name << " produced a non-finite value");
#else
  (void)v;
  (void)name;
#endif
}

/// Wraps freshly computed values in a Tensor and, when grad tracking is on
/// and some input carries grad, records the op on the active tape. Vjp
/// bodies call back into ops, so recording them again yields the graph
/// needed for second derivatives.
inline Tensor make_op(const char* name, Shape shape, std::vector<float> vals,
                      std::vector<Tensor> inputs, VjpFn vjp) {
  check_finite(vals, name);
  bool needs = false;
  for (const Tensor& t : inputs)
    if (t.defined() && t.requires_grad()) needs = true;
  Tensor out = Tensor::from(std::move(shape), std::move(vals));
  if (needs && autograd::recording_active()) {
    out.set_requires_grad(true);
    out.ptr()->from_op = true;
    autograd::TapeEntry e;
    e.out = out.ptr();
    e.inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) e.inputs.push_back(t.ptr());
    e.vjp = [fn = std::move(vjp), out](const Tensor& g) {
      return fn(g, out);
    };
    autograd::current_tape()->record(std::move(e));
  }
  return out;
}

template <class F>
std::pair<Shape, std::vector<float>> binary_map(const char* name,
                                                const Tensor& a,
                                                const Tensor& b, F f) {
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<float> out;
  if (a.shape() == b.shape()) {
    out.resize(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
    return {a.shape(), std::move(out)};
  }
  if (b.size() == 1) {
    out.resize(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[0]);
    return {a.shape(), std::move(out)};
  }
  if (a.size() == 1) {
    out.resize(bv.size());
    for (size_t i = 0; i < bv.size(); ++i) out[i] = f(av[0], bv[i]);
    return {b.shape(), std::move(out)};
  }
  SKD_CHECK(false, Shape, name << ": shapes " << shape_str(a.shape())
                               << " and " << shape_str(b.shape())
                               << " must match or one side must be scalar");
  return {};
}

/// Collapses a broadcast gradient back to the operand's shape.
inline Tensor reduce_like(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  return sum_all(g);
}

}  // namespace opdetail

// ---------------------------------------------------------------------------
// elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  auto [sh, v] = opdetail::binary_map("add", a, b,
                                      [](float x, float y) { return x + y; });
  Shape as = a.shape(), bs = b.shape();
  return opdetail::make_op(
      "add", std::move(sh), std::move(v), {a, b},
      [as, bs](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {opdetail::reduce_like(g, as), opdetail::reduce_like(g, bs)};
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  auto [sh, v] = opdetail::binary_map("sub", a, b,
                                      [](float x, float y) { return x - y; });
  Shape as = a.shape(), bs = b.shape();
  return opdetail::make_op(
      "sub", std::move(sh), std::move(v), {a, b},
      [as, bs](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {opdetail::reduce_like(g, as),
                opdetail::reduce_like(scale(g, -1.0), bs)};
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  auto [sh, v] = opdetail::binary_map("mul", a, b,
                                      [](float x, float y) { return x * y; });
  Shape as = a.shape(), bs = b.shape();
  return opdetail::make_op(
      "mul", std::move(sh), std::move(v), {a, b},
      [a, b, as, bs](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {opdetail::reduce_like(mul(g, b), as),
                opdetail::reduce_like(mul(g, a), bs)};
      });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  auto [sh, v] = opdetail::binary_map("div", a, b,
                                      [](float x, float y) { return x / y; });
  Shape as = a.shape(), bs = b.shape();
  return opdetail::make_op(
      "div", std::move(sh), std::move(v), {a, b},
      [a, b, as, bs](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        Tensor ga = opdetail::reduce_like(div(g, b), as);
        Tensor gb =
            opdetail::reduce_like(scale(div(mul(g, a), mul(b, b)), -1.0), bs);
        return {ga, gb};
      });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<float> v(x.values());
  for (float& e : v) e = static_cast<float>(e * c);
  return opdetail::make_op(
      "scale", x.shape(), std::move(v), {x},
      [c](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {scale(g, c)};
      });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  std::vector<float> v(x.values());
  for (float& e : v) e = static_cast<float>(e + c);
  return opdetail::make_op(
      "add_scalar", x.shape(), std::move(v), {x},
      [](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {g};
      });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor square(const Tensor& x) { return mul(x, x); }

// ---------------------------------------------------------------------------
// elementwise nonlinearities

inline Tensor relu(const Tensor& x) {
  std::vector<float> v(x.values());
  std::vector<float> m(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    m[i] = v[i] > 0.0f ? 1.0f : 0.0f;
    if (v[i] < 0.0f) v[i] = 0.0f;
  }
  // The derivative is a constant step a.e., so the mask is captured as data.
  Tensor mask = Tensor::from(x.shape(), std::move(m));
  return opdetail::make_op(
      "relu", x.shape(), std::move(v), {x},
      [mask](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {mul(g, mask)};
      });
}

inline Tensor exp(const Tensor& x) {
  std::vector<float> v(x.values());
  for (float& e : v) e = std::exp(e);
  return opdetail::make_op(
      "exp", x.shape(), std::move(v), {x},
      [](const Tensor& g, const Tensor& y) -> std::vector<Tensor> {
        return {mul(g, y)};
      });
}

inline Tensor log(const Tensor& x) {
  std::vector<float> v(x.values());
  for (float& e : v) {
    SKD_CHECK(e > 0.0f, Domain, "log requires strictly positive inputs");
    e = std::log(e);
  }
  return opdetail::make_op(
      "log", x.shape(), std::move(v), {x},
      [x](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {div(g, x)};
      });
}

inline Tensor sqrt(const Tensor& x) {
  std::vector<float> v(x.values());
  for (float& e : v) {
    SKD_CHECK(e >= 0.0f, Domain, "sqrt requires non-negative inputs");
    e = std::sqrt(e);
  }
  return opdetail::make_op(
      "sqrt", x.shape(), std::move(v), {x},
      [](const Tensor& g, const Tensor& y) -> std::vector<Tensor> {
        return {scale(div(g, y), 0.5)};
      });
}

// ---------------------------------------------------------------------------
// shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  SKD_CHECK(numel(shape) == x.size(), Shape,
            "reshape: " << shape_str(x.shape()) << " has " << x.size()
                        << " elements, target " << shape_str(shape) << " has "
                        << numel(shape));
  Shape xs = x.shape();
  return opdetail::make_op(
      "reshape", std::move(shape), x.values(), {x},
      [xs](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {reshape(g, xs)};
      });
}

inline Tensor transpose2d(const Tensor& x) {
  SKD_CHECK(x.ndim() == 2, Shape,
            "transpose2d expects a matrix, got " << shape_str(x.shape()));
  const int r = x.dim(0), c = x.dim(1);
  std::vector<float> v(static_cast<size_t>(r) * c);
  const float* src = x.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      v[static_cast<size_t>(j) * r + i] = src[static_cast<size_t>(i) * c + j];
  return opdetail::make_op(
      "transpose2d", {c, r}, std::move(v), {x},
      [](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {transpose2d(g)};
      });
}

inline Tensor select0(const Tensor& x, int i) {
  SKD_CHECK(x.ndim() >= 1, Shape, "select0 needs at least rank 1");
  const int n = x.dim(0);
  SKD_CHECK(i >= 0 && i < n, Shape,
            "select0 index " << i << " out of range [0," << n << ")");
  Shape elem;
  if (x.ndim() == 1) {
    elem = {1};
  } else {
    elem.assign(x.shape().begin() + 1, x.shape().end());
  }
  const int64_t block = numel(elem);
  std::vector<float> v(static_cast<size_t>(block));
  std::memcpy(v.data(), x.data() + static_cast<size_t>(i) * block,
              static_cast<size_t>(block) * sizeof(float));
  Shape xs = x.shape();
  return opdetail::make_op(
      "select0", std::move(elem), std::move(v), {x},
      [i, xs](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {scatter0(g, i, xs)};
      });
}

inline Tensor scatter0(const Tensor& s, int i, const Shape& full) {
  SKD_CHECK(!full.empty(), Shape, "scatter0 needs a rank >= 1 target");
  const int n = full[0];
  SKD_CHECK(i >= 0 && i < n, Shape,
            "scatter0 index " << i << " out of range [0," << n << ")");
  const int64_t block = numel(full) / n;
  SKD_CHECK(s.size() == block, Shape,
            "scatter0: slice has " << s.size() << " elements, target slice has "
                                   << block);
  std::vector<float> v(static_cast<size_t>(numel(full)), 0.0f);
  std::memcpy(v.data() + static_cast<size_t>(i) * block, s.data(),
              static_cast<size_t>(block) * sizeof(float));
  return opdetail::make_op(
      "scatter0", full, std::move(v), {s},
      [i](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {select0(g, i)};
      });
}

inline Tensor stack0(const std::vector<Tensor>& xs) {
  SKD_CHECK(!xs.empty(), Shape, "stack0 needs at least one tensor");
  const Shape& elem = xs[0].shape();
  for (const Tensor& t : xs)
    SKD_CHECK(t.shape() == elem, Shape,
              "stack0: mismatched element shapes " << shape_str(elem) << " vs "
                                                   << shape_str(t.shape()));
  const int n = static_cast<int>(xs.size());
  Shape out_shape;
  if (elem == Shape{1}) {
    out_shape = {n};
  } else {
    out_shape.push_back(n);
    out_shape.insert(out_shape.end(), elem.begin(), elem.end());
  }
  const int64_t block = numel(elem);
  std::vector<float> v(static_cast<size_t>(block) * n);
  for (int i = 0; i < n; ++i)
    std::memcpy(v.data() + static_cast<size_t>(i) * block, xs[i].data(),
                static_cast<size_t>(block) * sizeof(float));
  return opdetail::make_op(
      "stack0", std::move(out_shape), std::move(v), xs,
      [n](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        std::vector<Tensor> r;
        r.reserve(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) r.push_back(select0(g, i));
        return r;
      });
}

inline Tensor concat_c(const Tensor& a, const Tensor& b) {
  SKD_CHECK(a.ndim() == 4 && b.ndim() == 4, Shape,
            "concat_c expects [N,C,H,W] inputs");
  SKD_CHECK(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
                a.dim(3) == b.dim(3),
            Shape, "concat_c: " << shape_str(a.shape()) << " and "
                                << shape_str(b.shape())
                                << " differ outside the channel axis");
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const int hw = a.dim(2) * a.dim(3);
  std::vector<float> v(static_cast<size_t>(n) * (ca + cb) * hw);
  for (int i = 0; i < n; ++i) {
    std::memcpy(v.data() + static_cast<size_t>(i) * (ca + cb) * hw,
                a.data() + static_cast<size_t>(i) * ca * hw,
                static_cast<size_t>(ca) * hw * sizeof(float));
    std::memcpy(v.data() + static_cast<size_t>(i) * (ca + cb) * hw +
                    static_cast<size_t>(ca) * hw,
                b.data() + static_cast<size_t>(i) * cb * hw,
                static_cast<size_t>(cb) * hw * sizeof(float));
  }
  return opdetail::make_op(
      "concat_c", {n, ca + cb, a.dim(2), a.dim(3)}, std::move(v), {a, b},
      [ca, cb](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {slice_c(g, 0, ca), slice_c(g, ca, ca + cb)};
      });
}

inline Tensor slice_c(const Tensor& x, int c0, int c1) {
  SKD_CHECK(x.ndim() == 4, Shape, "slice_c expects [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  SKD_CHECK(c0 >= 0 && c0 < c1 && c1 <= c, Shape,
            "slice_c range [" << c0 << "," << c1 << ") invalid for C=" << c);
  const int cs = c1 - c0, hw = h * w;
  std::vector<float> v(static_cast<size_t>(n) * cs * hw);
  for (int i = 0; i < n; ++i)
    std::memcpy(v.data() + static_cast<size_t>(i) * cs * hw,
                x.data() + (static_cast<size_t>(i) * c + c0) * hw,
                static_cast<size_t>(cs) * hw * sizeof(float));
  return opdetail::make_op(
      "slice_c", {n, cs, h, w}, std::move(v), {x},
      [c0, c](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {scatter_c(g, c0, c)};
      });
}

inline Tensor scatter_c(const Tensor& s, int c0, int c_total) {
  SKD_CHECK(s.ndim() == 4, Shape, "scatter_c expects [N,C,H,W]");
  const int n = s.dim(0), cs = s.dim(1), h = s.dim(2), w = s.dim(3);
  SKD_CHECK(c0 >= 0 && c0 + cs <= c_total, Shape,
            "scatter_c range [" << c0 << "," << c0 + cs
                                << ") invalid for C=" << c_total);
  const int hw = h * w;
  std::vector<float> v(static_cast<size_t>(n) * c_total * hw, 0.0f);
  for (int i = 0; i < n; ++i)
    std::memcpy(v.data() + (static_cast<size_t>(i) * c_total + c0) * hw,
                s.data() + static_cast<size_t>(i) * cs * hw,
                static_cast<size_t>(cs) * hw * sizeof(float));
  return opdetail::make_op(
      "scatter_c", {n, c_total, h, w}, std::move(v), {s},
      [c0, cs](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {slice_c(g, c0, c0 + cs)};
      });
}

// ---------------------------------------------------------------------------
// reductions and their expansion duals

inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (float e : x.values()) acc += e;
  Shape xs = x.shape();
  return opdetail::make_op(
      "sum_all", {1}, {static_cast<float>(acc)}, {x},
      [xs](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {broadcast_to(g, xs)};
      });
}

inline Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

inline Tensor broadcast_to(const Tensor& s, const Shape& shape) {
  SKD_CHECK(s.size() == 1, Shape,
            "broadcast_to expects a scalar, got " << shape_str(s.shape()));
  std::vector<float> v(static_cast<size_t>(numel(shape)), s.data()[0]);
  return opdetail::make_op(
      "broadcast_to", shape, std::move(v), {s},
      [](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {sum_all(g)};
      });
}

/// Sums away all axes after the first `nkeep`, e.g. [N,C,H,W] with nkeep=2
/// becomes [N,C].
inline Tensor sum_tail(const Tensor& x, int nkeep) {
  SKD_CHECK(nkeep >= 1 && nkeep < x.ndim(), Shape,
            "sum_tail: nkeep " << nkeep << " invalid for rank " << x.ndim());
  Shape prefix(x.shape().begin(), x.shape().begin() + nkeep);
  const int64_t p = numel(prefix);
  const int64_t t = x.size() / p;
  std::vector<float> v(static_cast<size_t>(p));
  const float* src = x.data();
  for (int64_t i = 0; i < p; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < t; ++j) acc += src[i * t + j];
    v[static_cast<size_t>(i)] = static_cast<float>(acc);
  }
  Shape xs = x.shape();
  return opdetail::make_op(
      "sum_tail", std::move(prefix), std::move(v), {x},
      [xs](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {expand_tail(g, xs)};
      });
}

/// Repeats each entry of `v` across the trailing axes of `full`; the shape
/// of `v` must be a prefix of `full`.
inline Tensor expand_tail(const Tensor& v, const Shape& full) {
  const int nkeep = v.ndim();
  SKD_CHECK(nkeep < static_cast<int>(full.size()), Shape,
            "expand_tail: target rank must exceed source rank");
  for (int i = 0; i < nkeep; ++i)
    SKD_CHECK(v.dim(i) == full[static_cast<size_t>(i)], Shape,
              "expand_tail: " << shape_str(v.shape())
                              << " is not a prefix of " << shape_str(full));
  const int64_t p = v.size();
  const int64_t t = numel(full) / p;
  std::vector<float> out(static_cast<size_t>(p * t));
  const float* src = v.data();
  for (int64_t i = 0; i < p; ++i)
    for (int64_t j = 0; j < t; ++j)
      out[static_cast<size_t>(i * t + j)] = src[i];
  return opdetail::make_op(
      "expand_tail", full, std::move(out), {v},
      [nkeep](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {sum_tail(g, nkeep)};
      });
}

/// Per-channel sum over batch and spatial axes: [N,C,H,W] -> [C].
inline Tensor chan_sum(const Tensor& x) {
  SKD_CHECK(x.ndim() == 4, Shape, "chan_sum expects [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> acc(static_cast<size_t>(c), 0.0);
  const float* src = x.data();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const float* p = src + (static_cast<size_t>(i) * c + ch) * hw;
      double a = 0.0;
      for (int j = 0; j < hw; ++j) a += p[j];
      acc[static_cast<size_t>(ch)] += a;
    }
  std::vector<float> v(acc.begin(), acc.end());
  Shape xs = x.shape();
  return opdetail::make_op(
      "chan_sum", {c}, std::move(v), {x},
      [xs](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {chan_expand(g, xs)};
      });
}

/// Broadcasts a per-channel vector across batch and spatial axes.
inline Tensor chan_expand(const Tensor& v, const Shape& full) {
  SKD_CHECK(full.size() == 4, Shape, "chan_expand target must be [N,C,H,W]");
  SKD_CHECK(v.ndim() == 1 && v.dim(0) == full[1], Shape,
            "chan_expand: vector " << shape_str(v.shape())
                                   << " does not match C=" << full[1]);
  const int n = full[0], c = full[1], hw = full[2] * full[3];
  std::vector<float> out(static_cast<size_t>(n) * c * hw);
  const float* src = v.data();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      float* p = out.data() + (static_cast<size_t>(i) * c + ch) * hw;
      for (int j = 0; j < hw; ++j) p[j] = src[ch];
    }
  return opdetail::make_op(
      "chan_expand", full, std::move(out), {v},
      [](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {chan_sum(g)};
      });
}

/// Per-position channel sum: [N,C,H,W] -> [N,1,H,W].
inline Tensor cpix_sum(const Tensor& x) {
  SKD_CHECK(x.ndim() == 4, Shape, "cpix_sum expects [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<float> v(static_cast<size_t>(n) * hw);
  const float* src = x.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < hw; ++j) {
      double acc = 0.0;
      for (int ch = 0; ch < c; ++ch)
        acc += src[(static_cast<size_t>(i) * c + ch) * hw + j];
      v[static_cast<size_t>(i) * hw + j] = static_cast<float>(acc);
    }
  const int cc = c;
  return opdetail::make_op(
      "cpix_sum", {n, 1, x.dim(2), x.dim(3)}, std::move(v), {x},
      [cc](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {cpix_expand(g, cc)};
      });
}

/// Repeats a single-channel map across `channels`: [N,1,H,W] -> [N,C,H,W].
inline Tensor cpix_expand(const Tensor& s, int channels) {
  SKD_CHECK(s.ndim() == 4 && s.dim(1) == 1, Shape,
            "cpix_expand expects [N,1,H,W], got " << shape_str(s.shape()));
  const int n = s.dim(0), hw = s.dim(2) * s.dim(3);
  std::vector<float> v(static_cast<size_t>(n) * channels * hw);
  const float* src = s.data();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < channels; ++ch)
      std::memcpy(v.data() + (static_cast<size_t>(i) * channels + ch) * hw,
                  src + static_cast<size_t>(i) * hw,
                  static_cast<size_t>(hw) * sizeof(float));
  return opdetail::make_op(
      "cpix_expand", {n, channels, s.dim(2), s.dim(3)}, std::move(v), {s},
      [](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {cpix_sum(g)};
      });
}

// ---------------------------------------------------------------------------
// matrix product

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  SKD_CHECK(a.ndim() == 2 && b.ndim() == 2, Shape,
            "matmul expects matrices, got " << shape_str(a.shape()) << " and "
                                            << shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  SKD_CHECK(k == k2, Shape, "matmul: inner dimensions " << k << " and " << k2
                                                        << " differ");
  std::vector<float> v(static_cast<size_t>(m) * n, 0.0f);
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0f,
              a.data(), k, b.data(), n, 0.0f, v.data(), n);
  return opdetail::make_op(
      "matmul", {m, n}, std::move(v), {a, b},
      [a, b](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {matmul(g, transpose2d(b)), matmul(transpose2d(a), g)};
      });
}

// ---------------------------------------------------------------------------
// softmax family

/// Row softmax for matrices, channel softmax per spatial position for
/// [N,C,H,W]. Inputs are shifted by the row maximum before exponentiation.
inline Tensor softmax(const Tensor& x) {
  SKD_CHECK(x.ndim() == 2 || x.ndim() == 4, Shape,
            "softmax expects [R,K] or [N,C,H,W], got "
                << shape_str(x.shape()));
  std::vector<float> v(x.values());
  if (x.ndim() == 2) {
    const int r = x.dim(0), k = x.dim(1);
    for (int i = 0; i < r; ++i) {
      float* row = v.data() + static_cast<size_t>(i) * k;
      float mx = row[0];
      for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      double s = 0.0;
      for (int j = 0; j < k; ++j) {
        row[j] = std::exp(row[j] - mx);
        s += row[j];
      }
      const float inv = static_cast<float>(1.0 / s);
      for (int j = 0; j < k; ++j) row[j] *= inv;
    }
  } else {
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < hw; ++j) {
        float* base = v.data() + static_cast<size_t>(i) * c * hw + j;
        float mx = base[0];
        for (int ch = 1; ch < c; ++ch)
          mx = std::max(mx, base[static_cast<size_t>(ch) * hw]);
        double s = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          float& e = base[static_cast<size_t>(ch) * hw];
          e = std::exp(e - mx);
          s += e;
        }
        const float inv = static_cast<float>(1.0 / s);
        for (int ch = 0; ch < c; ++ch)
          base[static_cast<size_t>(ch) * hw] *= inv;
      }
  }
  return opdetail::make_op(
      "softmax", x.shape(), std::move(v), {x},
      [](const Tensor& g, const Tensor& y) -> std::vector<Tensor> {
        if (y.ndim() == 2) {
          Tensor s = sum_tail(mul(y, g), 1);
          return {mul(y, sub(g, expand_tail(s, y.shape())))};
        }
        Tensor s = cpix_sum(mul(y, g));
        return {mul(y, sub(g, cpix_expand(s, y.dim(1))))};
      });
}

/// Channel log-softmax per spatial position for [N,C,H,W].
inline Tensor log_softmax(const Tensor& x) {
  SKD_CHECK(x.ndim() == 4, Shape,
            "log_softmax expects [N,C,H,W], got " << shape_str(x.shape()));
  std::vector<float> v(x.values());
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < hw; ++j) {
      float* base = v.data() + static_cast<size_t>(i) * c * hw + j;
      float mx = base[0];
      for (int ch = 1; ch < c; ++ch)
        mx = std::max(mx, base[static_cast<size_t>(ch) * hw]);
      double s = 0.0;
      for (int ch = 0; ch < c; ++ch)
        s += std::exp(base[static_cast<size_t>(ch) * hw] - mx);
      const float lse = mx + static_cast<float>(std::log(s));
      for (int ch = 0; ch < c; ++ch) base[static_cast<size_t>(ch) * hw] -= lse;
    }
  return opdetail::make_op(
      "log_softmax", x.shape(), std::move(v), {x},
      [](const Tensor& g, const Tensor& y) -> std::vector<Tensor> {
        Tensor p = exp(y);
        Tensor sg = cpix_sum(g);
        return {sub(g, mul(p, cpix_expand(sg, y.dim(1))))};
      });
}

// ---------------------------------------------------------------------------
// label indexing

/// Picks x[n, labels[n,h,w], h, w] for every position: [N,C,H,W] -> [N,H,W].
inline Tensor gather_label(const Tensor& x,
                           std::shared_ptr<const std::vector<int>> labels) {
  SKD_CHECK(x.ndim() == 4, Shape, "gather_label expects [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int hw = h * w;
  SKD_CHECK(labels && static_cast<int64_t>(labels->size()) ==
                          static_cast<int64_t>(n) * hw,
            Shape, "gather_label: label count does not match N*H*W");
  std::vector<float> v(static_cast<size_t>(n) * hw);
  const float* src = x.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < hw; ++j) {
      const int l = (*labels)[static_cast<size_t>(i) * hw + j];
      SKD_CHECK(l >= 0 && l < c, Domain,
                "gather_label: label " << l << " outside [0," << c << ")");
      v[static_cast<size_t>(i) * hw + j] =
          src[(static_cast<size_t>(i) * c + l) * hw + j];
    }
  const int cc = c;
  return opdetail::make_op(
      "gather_label", {n, h, w}, std::move(v), {x},
      [labels, cc](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {scatter_label(g, labels, cc)};
      });
}

/// Adjoint of gather_label: writes g[n,h,w] into channel labels[n,h,w].
inline Tensor scatter_label(const Tensor& g,
                            std::shared_ptr<const std::vector<int>> labels,
                            int channels) {
  SKD_CHECK(g.ndim() == 3, Shape, "scatter_label expects [N,H,W]");
  const int n = g.dim(0), h = g.dim(1), w = g.dim(2);
  const int hw = h * w;
  SKD_CHECK(labels && static_cast<int64_t>(labels->size()) ==
                          static_cast<int64_t>(n) * hw,
            Shape, "scatter_label: label count does not match N*H*W");
  std::vector<float> v(static_cast<size_t>(n) * channels * hw, 0.0f);
  const float* src = g.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < hw; ++j) {
      const int l = (*labels)[static_cast<size_t>(i) * hw + j];
      SKD_CHECK(l >= 0 && l < channels, Domain,
                "scatter_label: label " << l << " outside [0," << channels
                                        << ")");
      v[(static_cast<size_t>(i) * channels + l) * hw + j] =
          src[static_cast<size_t>(i) * hw + j];
    }
  return opdetail::make_op(
      "scatter_label", {n, channels, h, w}, std::move(v), {g},
      [labels](const Tensor& gg, const Tensor&) -> std::vector<Tensor> {
        return {gather_label(gg, labels)};
      });
}

// ---------------------------------------------------------------------------
// convolution lowering

/// Unfolds a [C,H,W] map into a [C*k*k, OH*OW] patch matrix with zero
/// padding, so convolution becomes a matrix product.
inline Tensor im2col(const Tensor& x, int k, int stride, int pad) {
  SKD_CHECK(x.ndim() == 3, Shape, "im2col expects [C,H,W]");
  SKD_CHECK(k >= 1 && stride >= 1 && pad >= 0, Config,
            "im2col: invalid geometry k=" << k << " stride=" << stride
                                          << " pad=" << pad);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = conv_out_dim(h, k, stride, pad);
  const int ow = conv_out_dim(w, k, stride, pad);
  SKD_CHECK(oh >= 1 && ow >= 1, Shape,
            "im2col: kernel " << k << " does not fit input " << h << "x" << w);
  std::vector<float> v(static_cast<size_t>(c) * k * k * oh * ow, 0.0f);
  const float* src = x.data();
  for (int ch = 0; ch < c; ++ch)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const size_t row =
            (static_cast<size_t>(ch) * k + ki) * k + kj;
        for (int i = 0; i < oh; ++i) {
          const int ih = i * stride + ki - pad;
          if (ih < 0 || ih >= h) continue;
          for (int j = 0; j < ow; ++j) {
            const int iw = j * stride + kj - pad;
            if (iw < 0 || iw >= w) continue;
            v[row * oh * ow + static_cast<size_t>(i) * ow + j] =
                src[(static_cast<size_t>(ch) * h + ih) * w + iw];
          }
        }
      }
  Shape xs = x.shape();
  return opdetail::make_op(
      "im2col", {c * k * k, oh * ow}, std::move(v), {x},
      [xs, k, stride, pad](const Tensor& g,
                           const Tensor&) -> std::vector<Tensor> {
        return {col2im(g, xs, k, stride, pad)};
      });
}

/// Adjoint of im2col: folds a patch matrix back onto [C,H,W], accumulating
/// overlapping contributions.
inline Tensor col2im(const Tensor& cols, const Shape& xshape, int k, int stride,
                     int pad) {
  SKD_CHECK(cols.ndim() == 2 && xshape.size() == 3, Shape,
            "col2im expects a patch matrix and a [C,H,W] target");
  const int c = xshape[0], h = xshape[1], w = xshape[2];
  const int oh = conv_out_dim(h, k, stride, pad);
  const int ow = conv_out_dim(w, k, stride, pad);
  SKD_CHECK(cols.dim(0) == c * k * k && cols.dim(1) == oh * ow, Shape,
            "col2im: patch matrix " << shape_str(cols.shape())
                                    << " does not match target geometry");
  std::vector<float> v(static_cast<size_t>(c) * h * w, 0.0f);
  const float* src = cols.data();
  for (int ch = 0; ch < c; ++ch)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const size_t row = (static_cast<size_t>(ch) * k + ki) * k + kj;
        for (int i = 0; i < oh; ++i) {
          const int ih = i * stride + ki - pad;
          if (ih < 0 || ih >= h) continue;
          for (int j = 0; j < ow; ++j) {
            const int iw = j * stride + kj - pad;
            if (iw < 0 || iw >= w) continue;
            v[(static_cast<size_t>(ch) * h + ih) * w + iw] +=
                src[row * oh * ow + static_cast<size_t>(i) * ow + j];
          }
        }
      }
  return opdetail::make_op(
      "col2im", {c, h, w}, std::move(v), {cols},
      [k, stride, pad](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {im2col(g, k, stride, pad)};
      });
}

// ---------------------------------------------------------------------------
// pooling and resampling

/// Non-overlapping k x k mean pooling; spatial dims must divide evenly.
inline Tensor avg_pool(const Tensor& x, int k) {
  SKD_CHECK(x.ndim() == 4, Shape, "avg_pool expects [N,C,H,W]");
  SKD_CHECK(k >= 1, Config, "avg_pool: window must be positive");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  SKD_CHECK(h % k == 0 && w % k == 0, Shape,
            "avg_pool: " << h << "x" << w << " not divisible by window " << k);
  const int oh = h / k, ow = w / k;
  std::vector<float> v(static_cast<size_t>(n) * c * oh * ow);
  const float* src = x.data();
  const double inv = 1.0 / (static_cast<double>(k) * k);
  for (int i = 0; i < n * c; ++i)
    for (int a = 0; a < oh; ++a)
      for (int b = 0; b < ow; ++b) {
        double acc = 0.0;
        for (int di = 0; di < k; ++di)
          for (int dj = 0; dj < k; ++dj)
            acc += src[(static_cast<size_t>(i) * h + a * k + di) * w + b * k +
                       dj];
        v[(static_cast<size_t>(i) * oh + a) * ow + b] =
            static_cast<float>(acc * inv);
      }
  return opdetail::make_op(
      "avg_pool", {n, c, oh, ow}, std::move(v), {x},
      [k](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {avg_unpool(g, k)};
      });
}

/// Adjoint of avg_pool: spreads each cell over its k x k block divided by k^2.
inline Tensor avg_unpool(const Tensor& x, int k) {
  SKD_CHECK(x.ndim() == 4, Shape, "avg_unpool expects [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h * k, ow = w * k;
  std::vector<float> v(static_cast<size_t>(n) * c * oh * ow);
  const float* src = x.data();
  const float inv = 1.0f / (static_cast<float>(k) * k);
  for (int i = 0; i < n * c; ++i)
    for (int a = 0; a < oh; ++a)
      for (int b = 0; b < ow; ++b)
        v[(static_cast<size_t>(i) * oh + a) * ow + b] =
            src[(static_cast<size_t>(i) * h + a / k) * w + b / k] * inv;
  return opdetail::make_op(
      "avg_unpool", {n, c, oh, ow}, std::move(v), {x},
      [k](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {avg_pool(g, k)};
      });
}

namespace opdetail {

struct BilinearTap {
  int i0, i1;
  float l;  ///< weight of i1; i0 gets 1-l
};

inline BilinearTap bilinear_tap(int dst, int in_dim, int out_dim) {
  const double s = static_cast<double>(in_dim) / out_dim;
  double src = (dst + 0.5) * s - 0.5;
  if (src < 0.0) src = 0.0;
  BilinearTap t;
  t.i0 = static_cast<int>(src);
  if (t.i0 > in_dim - 1) t.i0 = in_dim - 1;
  t.i1 = std::min(t.i0 + 1, in_dim - 1);
  t.l = static_cast<float>(src - t.i0);
  return t;
}

}  // namespace opdetail

/// Bilinear resize of [N,C,H,W] with half-pixel centre alignment.
inline Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
  SKD_CHECK(x.ndim() == 4, Shape, "upsample_bilinear expects [N,C,H,W]");
  SKD_CHECK(out_h >= 1 && out_w >= 1, Shape,
            "upsample_bilinear: bad target " << out_h << "x" << out_w);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<float> v(static_cast<size_t>(n) * c * out_h * out_w);
  const float* src = x.data();
  for (int oh = 0; oh < out_h; ++oh) {
    const auto th = opdetail::bilinear_tap(oh, h, out_h);
    for (int ow = 0; ow < out_w; ++ow) {
      const auto tw = opdetail::bilinear_tap(ow, w, out_w);
      for (int i = 0; i < n * c; ++i) {
        const float* p = src + static_cast<size_t>(i) * h * w;
        const float top =
            (1.0f - tw.l) * p[th.i0 * w + tw.i0] + tw.l * p[th.i0 * w + tw.i1];
        const float bot =
            (1.0f - tw.l) * p[th.i1 * w + tw.i0] + tw.l * p[th.i1 * w + tw.i1];
        v[(static_cast<size_t>(i) * out_h + oh) * out_w + ow] =
            (1.0f - th.l) * top + th.l * bot;
      }
    }
  }
  const int ih = h, iw = w;
  return opdetail::make_op(
      "upsample_bilinear", {n, c, out_h, out_w}, std::move(v), {x},
      [ih, iw](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {upsample_bilinear_adj(g, ih, iw)};
      });
}

/// Adjoint of upsample_bilinear: accumulates each output gradient into its
/// four source taps.
inline Tensor upsample_bilinear_adj(const Tensor& g, int in_h, int in_w) {
  SKD_CHECK(g.ndim() == 4, Shape, "upsample_bilinear_adj expects [N,C,H,W]");
  const int n = g.dim(0), c = g.dim(1), oh = g.dim(2), ow = g.dim(3);
  std::vector<float> v(static_cast<size_t>(n) * c * in_h * in_w, 0.0f);
  const float* src = g.data();
  for (int y = 0; y < oh; ++y) {
    const auto th = opdetail::bilinear_tap(y, in_h, oh);
    for (int x = 0; x < ow; ++x) {
      const auto tw = opdetail::bilinear_tap(x, in_w, ow);
      for (int i = 0; i < n * c; ++i) {
        const float gv = src[(static_cast<size_t>(i) * oh + y) * ow + x];
        float* p = v.data() + static_cast<size_t>(i) * in_h * in_w;
        p[th.i0 * in_w + tw.i0] += (1.0f - th.l) * (1.0f - tw.l) * gv;
        p[th.i0 * in_w + tw.i1] += (1.0f - th.l) * tw.l * gv;
        p[th.i1 * in_w + tw.i0] += th.l * (1.0f - tw.l) * gv;
        p[th.i1 * in_w + tw.i1] += th.l * tw.l * gv;
      }
    }
  }
  const int goh = oh, gow = ow;
  return opdetail::make_op(
      "upsample_bilinear_adj", {n, c, in_h, in_w}, std::move(v), {g},
      [goh, gow](const Tensor& gg, const Tensor&) -> std::vector<Tensor> {
        return {upsample_bilinear(gg, goh, gow)};
      });
}

// ---------------------------------------------------------------------------
// convolution

namespace opdetail {

inline Tensor conv2d_direct(const Tensor& x, const Tensor& w, const Tensor& b,
                            int stride, int pad) {
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int co = w.dim(0), k = w.dim(2);
  const int oh = conv_out_dim(h, k, stride, pad);
  const int ow = conv_out_dim(ww, k, stride, pad);
  std::vector<float> v(static_cast<size_t>(n) * co * oh * ow);
  const float* xp = x.data();
  const float* wp = w.data();
  const float* bp = b.data();
  for (int in = 0; in < n; ++in)
    for (int oc = 0; oc < co; ++oc)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double acc = bp[oc];
          for (int ic = 0; ic < ci; ++ic)
            for (int ki = 0; ki < k; ++ki) {
              const int ih = i * stride + ki - pad;
              if (ih < 0 || ih >= h) continue;
              for (int kj = 0; kj < k; ++kj) {
                const int iw = j * stride + kj - pad;
                if (iw < 0 || iw >= ww) continue;
                acc += static_cast<double>(
                           xp[((static_cast<size_t>(in) * ci + ic) * h + ih) *
                                  ww +
                              iw]) *
                       wp[((static_cast<size_t>(oc) * ci + ic) * k + ki) * k +
                          kj];
              }
            }
          v[((static_cast<size_t>(in) * co + oc) * oh + i) * ow + j] =
              static_cast<float>(acc);
        }
  return make_op(
      "conv2d", {n, co, oh, ow}, std::move(v), {x, w, b},
      [x, w, stride, pad](const Tensor& g,
                          const Tensor&) -> std::vector<Tensor> {
        SKD_CHECK(!autograd::recording_active(), Numeric,
                  "direct convolution backward cannot be differentiated "
                  "again; use the im2col backend");
        // Fused adjoint loops, opaque to the tape by design.
        const int n = g.dim(0), co = g.dim(1), oh = g.dim(2), ow = g.dim(3);
        const int ci = x.dim(1), h = x.dim(2), iw2 = x.dim(3), k = w.dim(2);
        std::vector<double> gx(x.values().size(), 0.0);
        std::vector<double> gw(w.values().size(), 0.0);
        std::vector<double> gb(static_cast<size_t>(co), 0.0);
        const float* gp = g.data();
        const float* xp = x.data();
        const float* wp = w.data();
        for (int in = 0; in < n; ++in)
          for (int oc = 0; oc < co; ++oc)
            for (int i = 0; i < oh; ++i)
              for (int j = 0; j < ow; ++j) {
                const double gv =
                    gp[((static_cast<size_t>(in) * co + oc) * oh + i) * ow + j];
                gb[static_cast<size_t>(oc)] += gv;
                for (int ic = 0; ic < ci; ++ic)
                  for (int ki = 0; ki < k; ++ki) {
                    const int ih = i * stride + ki - pad;
                    if (ih < 0 || ih >= h) continue;
                    for (int kj = 0; kj < k; ++kj) {
                      const int iw = j * stride + kj - pad;
                      if (iw < 0 || iw >= iw2) continue;
                      const size_t xi =
                          ((static_cast<size_t>(in) * ci + ic) * h + ih) * iw2 +
                          iw;
                      const size_t wi =
                          ((static_cast<size_t>(oc) * ci + ic) * k + ki) * k +
                          kj;
                      gx[xi] += gv * wp[wi];
                      gw[wi] += gv * xp[xi];
                    }
                  }
              }
        auto to_tensor = [](const std::vector<double>& d, Shape s) {
          std::vector<float> f(d.begin(), d.end());
          return Tensor::from(std::move(s), std::move(f));
        };
        return {to_tensor(gx, x.shape()), to_tensor(gw, w.shape()),
                to_tensor(gb, {co})};
      });
}

}  // namespace opdetail

/// 2D convolution over [N,Ci,H,W] with an odd square kernel [Co,Ci,k,k] and
/// bias [Co]. The im2col backend lowers each sample to a matrix product.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                     int stride, int pad, ConvImpl impl) {
  SKD_CHECK(x.ndim() == 4, Shape,
            "conv2d expects [N,Ci,H,W] input, got " << shape_str(x.shape()));
  SKD_CHECK(w.ndim() == 4 && w.dim(2) == w.dim(3), Shape,
            "conv2d expects a square [Co,Ci,k,k] kernel, got "
                << shape_str(w.shape()));
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), iw = x.dim(3);
  const int co = w.dim(0), k = w.dim(2);
  SKD_CHECK(k % 2 == 1, Config, "conv2d kernel size must be odd, got " << k);
  SKD_CHECK(w.dim(1) == ci, Shape, "conv2d: kernel expects " << w.dim(1)
                                   << " input channels, input has " << ci);
  SKD_CHECK(b.ndim() == 1 && b.dim(0) == co, Shape,
            "conv2d: bias must be [" << co << "], got "
                                     << shape_str(b.shape()));
  SKD_CHECK(stride >= 1 && pad >= 0, Config,
            "conv2d: invalid stride " << stride << " or pad " << pad);
  const int oh = conv_out_dim(h, k, stride, pad);
  const int ow = conv_out_dim(iw, k, stride, pad);
  SKD_CHECK(oh >= 1 && ow >= 1, Shape, "conv2d: kernel " << k
                                       << " does not fit input " << h << "x"
                                       << iw << " with pad " << pad);
  if (impl == ConvImpl::Direct) {
    return opdetail::conv2d_direct(x, w, b, stride, pad);
  }
  Tensor w2 = reshape(w, {co, ci * k * k});
  std::vector<Tensor> outs;
  outs.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tensor cols = im2col(select0(x, i), k, stride, pad);
    Tensor y = add(matmul(w2, cols), expand_tail(b, {co, oh * ow}));
    outs.push_back(reshape(y, {co, oh, ow}));
  }
  return stack0(outs);
}

// ---------------------------------------------------------------------------
// batch normalization

/// Per-channel normalization with affine parameters gamma and beta. Train
/// modes standardize with batch statistics; Mode::Train additionally folds
/// them into the running estimates, which Mode::Eval consumes.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, Tensor& running_mean,
                         Tensor& running_var, float eps, float momentum,
                         Mode mode) {
  SKD_CHECK(x.ndim() == 4, Shape,
            "batch_norm expects [N,C,H,W], got " << shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  SKD_CHECK(gamma.ndim() == 1 && gamma.dim(0) == c && beta.ndim() == 1 &&
                beta.dim(0) == c,
            Shape, "batch_norm: affine parameters must be [" << c << "]");
  SKD_CHECK(running_mean.ndim() == 1 && running_mean.dim(0) == c &&
                running_var.ndim() == 1 && running_var.dim(0) == c,
            Shape, "batch_norm: running statistics must be [" << c << "]");
  const Shape& xs = x.shape();
  Tensor xhat;
  if (mode == Mode::Eval) {
    Tensor denom = sqrt(add_scalar(running_var, eps));
    xhat = div(sub(x, chan_expand(running_mean, xs)), chan_expand(denom, xs));
  } else {
    const double cnt = static_cast<double>(n) * h * w;
    Tensor mean = scale(chan_sum(x), 1.0 / cnt);
    Tensor xc = sub(x, chan_expand(mean, xs));
    Tensor var = scale(chan_sum(square(xc)), 1.0 / cnt);
    if (mode == Mode::Train) {
      const double corr = cnt > 1.0 ? cnt / (cnt - 1.0) : 1.0;
      auto& rm = running_mean.values();
      auto& rv = running_var.values();
      for (int i = 0; i < c; ++i) {
        rm[static_cast<size_t>(i)] =
            (1.0f - momentum) * rm[static_cast<size_t>(i)] +
            momentum * mean.data()[i];
        rv[static_cast<size_t>(i)] =
            (1.0f - momentum) * rv[static_cast<size_t>(i)] +
            momentum * static_cast<float>(var.data()[i] * corr);
      }
    }
    Tensor denom = sqrt(add_scalar(var, eps));
    xhat = div(xc, chan_expand(denom, xs));
  }
  return add(mul(xhat, chan_expand(gamma, xs)), chan_expand(beta, xs));
}

/// Caps the BLAS worker pool; deterministic runs keep it at one.
inline void set_blas_threads(int n) { openblas_set_num_threads(n); }

}  // namespace ops

namespace detail {
inline Tensor engine_add(const Tensor& a, const Tensor& b) {
  return ops::add(a, b);
}
}  // namespace detail

}  // namespace structkd

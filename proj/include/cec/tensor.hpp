#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "cec/parallel.hpp"

namespace cec {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// (batch, channels, height, width)
struct Shape {
  std::int64_t n = 0, c = 0, h = 0, w = 0;

  std::int64_t numel() const { return n * c * h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

template <typename T>
class Tensor;

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

namespace detail {
inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

// Dense 4-D tensor with reverse-mode autodiff. Each op records its inputs
// and a backward closure on the output node; nodes carry monotonically
// increasing creation ids, so replaying closures in descending id order is a
// valid reverse-topological sweep of the tape.
template <typename T>
class Tensor {
 public:
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated on first use, same length as data
  bool requires_grad = false;

  std::uint64_t node_id = detail::next_node_id();
  std::vector<TensorPtr<T>> parents;
  std::function<void(Tensor<T>&)> backward_fn;
  const char* op = "leaf";
  bool backward_ran = false;

  explicit Tensor(Shape s, bool req = false)
      : shape(s), data(static_cast<std::size_t>(s.numel()), T(0)),
        requires_grad(req) {}

  std::int64_t numel() const { return shape.numel(); }

  std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t y,
                     std::int64_t x) const {
    return ((n * shape.c + c) * shape.h + y) * shape.w + x;
  }
  T& at(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) {
    return data[static_cast<std::size_t>(index(n, c, y, x))];
  }
  T at(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) const {
    return data[static_cast<std::size_t>(index(n, c, y, x))];
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  void zero_grad() {
    grad.assign(data.size(), T(0));
    backward_ran = false;
  }
  void accumulate_grad(const std::vector<T>& g) {
    ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
};

template <typename T>
TensorPtr<T> make_tensor(Shape s, bool requires_grad = false) {
  return std::make_shared<Tensor<T>>(s, requires_grad);
}

template <typename T>
TensorPtr<T> make_tensor(Shape s, std::vector<T> values,
                         bool requires_grad = false) {
  auto t = std::make_shared<Tensor<T>>(s, requires_grad);
  if (static_cast<std::int64_t>(values.size()) != s.numel())
    throw ShapeError("tensor data length does not match shape " + s.str());
  t->data = std::move(values);
  return t;
}

template <typename T>
TensorPtr<T> zeros_like(const TensorPtr<T>& x) {
  return make_tensor<T>(x->shape);
}

template <typename T>
TensorPtr<T> full(Shape s, T value) {
  auto t = make_tensor<T>(s);
  std::fill(t->data.begin(), t->data.end(), value);
  return t;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* where) {
  for (const T v : t.data) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string("non-finite value in ") + where);
  }
}

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const TensorPtr<T>*> inputs) {
  for (const auto* p : inputs)
    if ((*p)->requires_grad) return true;
  return false;
}

// Wire an output node into the tape.
template <typename T, typename Fn>
void record(const TensorPtr<T>& out, const char* name,
            std::vector<TensorPtr<T>> inputs, Fn&& fn) {
  out->op = name;
  bool need = false;
  for (const auto& in : inputs) need = need || in->requires_grad;
  if (!need) return;
  out->requires_grad = true;
  out->parents = std::move(inputs);
  out->backward_fn = std::forward<Fn>(fn);
}

}  // namespace detail

// Reverse sweep from a scalar loss. Gradients accumulate additively into
// every requires_grad tensor reachable through the tape.
template <typename T>
void backward(const TensorPtr<T>& loss) {
  if (loss->numel() != 1)
    throw ShapeError("backward requires a scalar, got " + loss->shape.str());
  if (loss->backward_ran)
    throw std::logic_error("backward called twice without grad reset");
  loss->backward_ran = true;

  // Collect the reachable tape and sort by creation order.
  std::vector<Tensor<T>*> nodes;
  std::unordered_set<Tensor<T>*> seen;
  std::vector<Tensor<T>*> stack{loss.get()};
  seen.insert(loss.get());
  while (!stack.empty()) {
    Tensor<T>* t = stack.back();
    stack.pop_back();
    nodes.push_back(t);
    for (const auto& p : t->parents) {
      if (p->requires_grad && seen.insert(p.get()).second)
        stack.push_back(p.get());
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const Tensor<T>* a, const Tensor<T>* b) {
              return a->node_id > b->node_id;
            });

  loss->ensure_grad();
  loss->grad[0] += T(1);
  for (Tensor<T>* t : nodes) {
    if (t->backward_fn) {
      t->ensure_grad();
      t->backward_fn(*t);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise / dense primitives
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> relu(const TensorPtr<T>& x) {
  auto y = make_tensor<T>(x->shape);
  for (std::size_t i = 0; i < x->data.size(); ++i)
    y->data[i] = x->data[i] > T(0) ? x->data[i] : T(0);
  detail::record(y, "relu", {x}, [x](Tensor<T>& out) {
    x->ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      if (x->data[i] > T(0)) x->grad[i] += out.grad[i];  // f'(0) = 0
  });
  return y;
}

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (!(a->shape == b->shape))
    throw ShapeError("add shape mismatch " + a->shape.str() + " vs " +
                     b->shape.str());
  auto y = make_tensor<T>(a->shape);
  for (std::size_t i = 0; i < y->data.size(); ++i)
    y->data[i] = a->data[i] + b->data[i];
  detail::record(y, "add", {a, b}, [a, b](Tensor<T>& out) {
    if (a->requires_grad) a->accumulate_grad(out.grad);
    if (b->requires_grad) b->accumulate_grad(out.grad);
  });
  return y;
}

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& x, T factor) {
  auto y = make_tensor<T>(x->shape);
  for (std::size_t i = 0; i < y->data.size(); ++i)
    y->data[i] = factor * x->data[i];
  detail::record(y, "scale", {x}, [x, factor](Tensor<T>& out) {
    x->ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      x->grad[i] += factor * out.grad[i];
  });
  return y;
}

template <typename T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (!(a->shape == b->shape))
    throw ShapeError("mul shape mismatch " + a->shape.str() + " vs " +
                     b->shape.str());
  auto y = make_tensor<T>(a->shape);
  for (std::size_t i = 0; i < y->data.size(); ++i)
    y->data[i] = a->data[i] * b->data[i];
  detail::record(y, "mul", {a, b}, [a, b](Tensor<T>& out) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i)
        a->grad[i] += b->data[i] * out.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i)
        b->grad[i] += a->data[i] * out.grad[i];
    }
  });
  return y;
}

template <typename T>
TensorPtr<T> sum_all(const TensorPtr<T>& x) {
  auto y = make_tensor<T>(Shape{1, 1, 1, 1});
  T acc = T(0);
  for (const T v : x->data) acc += v;
  y->data[0] = acc;
  detail::record(y, "sum", {x}, [x](Tensor<T>& out) {
    x->ensure_grad();
    const T g = out.grad[0];
    for (auto& v : x->grad) v += g;
  });
  return y;
}

// Selects one element as a scalar; backward routes the upstream gradient to
// exactly that position. Used for ERF gradient injection.
template <typename T>
TensorPtr<T> pick(const TensorPtr<T>& x, std::int64_t n, std::int64_t c,
                  std::int64_t y, std::int64_t w) {
  if (n >= x->shape.n || c >= x->shape.c || y >= x->shape.h ||
      w >= x->shape.w || n < 0 || c < 0 || y < 0 || w < 0)
    throw ShapeError("pick index out of range for " + x->shape.str());
  const std::int64_t idx = x->index(n, c, y, w);
  auto out = make_tensor<T>(Shape{1, 1, 1, 1});
  out->data[0] = x->data[static_cast<std::size_t>(idx)];
  detail::record(out, "pick", {x}, [x, idx](Tensor<T>& o) {
    x->ensure_grad();
    x->grad[static_cast<std::size_t>(idx)] += o.grad[0];
  });
  return out;
}

template <typename T>
TensorPtr<T> global_avg_pool(const TensorPtr<T>& x) {
  const Shape s = x->shape;
  auto y = make_tensor<T>(Shape{s.n, s.c, 1, 1});
  const std::int64_t hw = s.h * s.w;
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c) {
      T acc = T(0);
      const T* row = x->data.data() + x->index(n, c, 0, 0);
      for (std::int64_t i = 0; i < hw; ++i) acc += row[i];
      y->at(n, c, 0, 0) = acc / static_cast<T>(hw);
    }
  detail::record(y, "global_avg_pool", {x}, [x](Tensor<T>& out) {
    x->ensure_grad();
    const Shape s = x->shape;
    const std::int64_t hw = s.h * s.w;
    const T inv = T(1) / static_cast<T>(hw);
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t c = 0; c < s.c; ++c) {
        const T g = out.grad[static_cast<std::size_t>((n * s.c + c))] * inv;
        T* row = x->grad.data() + x->index(n, c, 0, 0);
        for (std::int64_t i = 0; i < hw; ++i) row[i] += g;
      }
  });
  return y;
}

// x: (n, f, 1, 1); weight: (classes, f, 1, 1); bias: (1, classes, 1, 1).
template <typename T>
TensorPtr<T> linear(const TensorPtr<T>& x, const TensorPtr<T>& weight,
                    const TensorPtr<T>& bias) {
  const std::int64_t n = x->shape.n;
  const std::int64_t f = x->shape.c * x->shape.h * x->shape.w;
  const std::int64_t classes = weight->shape.n;
  if (weight->shape.c * weight->shape.h * weight->shape.w != f)
    throw ShapeError("linear fan-in mismatch: input " + x->shape.str() +
                     " vs weight " + weight->shape.str());
  if (bias->numel() != classes)
    throw ShapeError("linear bias length mismatch");
  auto y = make_tensor<T>(Shape{n, classes, 1, 1});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < classes; ++k) {
      T acc = bias->data[static_cast<std::size_t>(k)];
      const T* xi = x->data.data() + i * f;
      const T* wk = weight->data.data() + k * f;
      for (std::int64_t j = 0; j < f; ++j) acc += wk[j] * xi[j];
      y->data[static_cast<std::size_t>(i * classes + k)] = acc;
    }
  detail::record(y, "linear", {x, weight, bias},
                 [x, weight, bias, n, f, classes](Tensor<T>& out) {
    if (x->requires_grad) {
      x->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t k = 0; k < classes; ++k) {
          const T g = out.grad[static_cast<std::size_t>(i * classes + k)];
          const T* wk = weight->data.data() + k * f;
          T* gx = x->grad.data() + i * f;
          for (std::int64_t j = 0; j < f; ++j) gx[j] += g * wk[j];
        }
    }
    if (weight->requires_grad) {
      weight->ensure_grad();
      for (std::int64_t k = 0; k < classes; ++k)
        for (std::int64_t i = 0; i < n; ++i) {
          const T g = out.grad[static_cast<std::size_t>(i * classes + k)];
          const T* xi = x->data.data() + i * f;
          T* gw = weight->grad.data() + k * f;
          for (std::int64_t j = 0; j < f; ++j) gw[j] += g * xi[j];
        }
    }
    if (bias->requires_grad) {
      bias->ensure_grad();
      for (std::int64_t k = 0; k < classes; ++k) {
        T acc = T(0);
        for (std::int64_t i = 0; i < n; ++i)
          acc += out.grad[static_cast<std::size_t>(i * classes + k)];
        bias->grad[static_cast<std::size_t>(k)] += acc;
      }
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace detail {

// y += conv(x, w), same padding, stride 1, k in {1, 3}. The taps of one
// kernel row (and, on interior rows, the whole 3x3 stencil) are fused into a
// single pass so the per-row loop overhead stays small on 8x8 and 16x16
// planes. Each job owns one output plane, so any thread count gives the
// same bitwise result.
template <typename T>
void conv_accum_s1(const T* xd, std::int64_t n_batch, std::int64_t ic,
                   std::int64_t h, std::int64_t w, const T* wd,
                   std::int64_t oc, std::int64_t k, T* yd) {
  const std::int64_t plane = h * w;
  parallel_for(0, n_batch * oc, [&](std::int64_t job) {
    const std::int64_t n = job / oc, co = job % oc;
    T* ypl = yd + (n * oc + co) * plane;
    for (std::int64_t ci = 0; ci < ic; ++ci) {
      const T* xpl = xd + (n * ic + ci) * plane;
      const T* wk = wd + (co * ic + ci) * k * k;
      if (k == 1) {
        const T wv = wk[0];
        for (std::int64_t i = 0; i < plane; ++i) ypl[i] += wv * xpl[i];
        continue;
      }
      const T w00 = wk[0], w01 = wk[1], w02 = wk[2], w10 = wk[3],
              w11 = wk[4], w12 = wk[5], w20 = wk[6], w21 = wk[7],
              w22 = wk[8];
      auto row3 = [w](T* yr, const T* xr, T wl, T wc, T wr) {
        yr[0] += wc * xr[0] + wr * xr[1];
        for (std::int64_t ox = 1; ox < w - 1; ++ox)
          yr[ox] += wl * xr[ox - 1] + wc * xr[ox] + wr * xr[ox + 1];
        yr[w - 1] += wl * xr[w - 2] + wc * xr[w - 1];
      };
      for (std::int64_t oy = 0; oy < h; ++oy) {
        T* yr = ypl + oy * w;
        const T* xm = oy > 0 ? xpl + (oy - 1) * w : nullptr;
        const T* x0 = xpl + oy * w;
        const T* xp = oy < h - 1 ? xpl + (oy + 1) * w : nullptr;
        if (xm && xp) {
          yr[0] += w01 * xm[0] + w02 * xm[1] + w11 * x0[0] + w12 * x0[1] +
                   w21 * xp[0] + w22 * xp[1];
          for (std::int64_t ox = 1; ox < w - 1; ++ox)
            yr[ox] += w00 * xm[ox - 1] + w01 * xm[ox] + w02 * xm[ox + 1] +
                      w10 * x0[ox - 1] + w11 * x0[ox] + w12 * x0[ox + 1] +
                      w20 * xp[ox - 1] + w21 * xp[ox] + w22 * xp[ox + 1];
          yr[w - 1] += w00 * xm[w - 2] + w01 * xm[w - 1] + w10 * x0[w - 2] +
                       w11 * x0[w - 1] + w20 * xp[w - 2] + w21 * xp[w - 1];
        } else {
          if (xm) row3(yr, xm, w00, w01, w02);
          row3(yr, x0, w10, w11, w12);
          if (xp) row3(yr, xp, w20, w21, w22);
        }
      }
    }
  });
}

}  // namespace detail

// weight: (out_channels, in_channels, k, k), same-padding floor(k/2), no bias.
template <typename T>
TensorPtr<T> conv2d(const TensorPtr<T>& x, const TensorPtr<T>& weight,
                    int stride) {
  const Shape xs = x->shape;
  const Shape ws = weight->shape;
  const std::int64_t k = ws.h;
  if (ws.w != k || (k != 1 && k != 3))
    throw ShapeError("conv2d kernel must be 1x1 or 3x3, got " + ws.str());
  if (stride != 1 && stride != 2)
    throw ShapeError("conv2d stride must be 1 or 2");
  if (xs.c != ws.c)
    throw ShapeError("conv2d channel mismatch: input " + xs.str() +
                     " vs weight " + ws.str());
  if (xs.h < k || xs.w < k)
    throw ShapeError("conv2d input smaller than kernel");
  check_finite(*x, "conv2d input");

  const std::int64_t p = k / 2;
  const std::int64_t oc = ws.n, ic = ws.c;
  const std::int64_t oh = (xs.h + stride - 1) / stride;
  const std::int64_t ow = (xs.w + stride - 1) / stride;
  auto y = make_tensor<T>(Shape{xs.n, oc, oh, ow});

  if (stride == 1) {
    detail::conv_accum_s1(x->data.data(), xs.n, ic, xs.h, xs.w,
                          weight->data.data(), oc, k, y->data.data());
  } else {
    parallel_for(0, xs.n * oc, [&](std::int64_t job) {
      const std::int64_t n = job / oc;
      const std::int64_t co = job % oc;
      for (std::int64_t cin = 0; cin < ic; ++cin) {
        const T* xin = x->data.data() + x->index(n, cin, 0, 0);
        for (std::int64_t ky = 0; ky < k; ++ky)
          for (std::int64_t kx = 0; kx < k; ++kx) {
            const T wv = weight->at(co, cin, ky, kx);
            for (std::int64_t oy = 0; oy < oh; ++oy) {
              const std::int64_t iy = oy * stride + ky - p;
              if (iy < 0 || iy >= xs.h) continue;
              T* yrow = y->data.data() + y->index(n, co, oy, 0);
              const T* xrow = xin + iy * xs.w;
              for (std::int64_t ox = 0; ox < ow; ++ox) {
                const std::int64_t ix = ox * 2 + kx - p;
                if (ix >= 0 && ix < xs.w) yrow[ox] += wv * xrow[ix];
              }
            }
          }
      }
    });
  }
  check_finite(*y, "conv2d output");

  detail::record(y, "conv2d", {x, weight},
                 [x, weight, stride](Tensor<T>& out) {
    const Shape xs = x->shape;
    const Shape ws = weight->shape;
    const std::int64_t k = ws.h, p = k / 2;
    const std::int64_t oc = ws.n, ic = ws.c;
    const std::int64_t oh = out.shape.h, ow = out.shape.w;
    if (x->requires_grad) {
      x->ensure_grad();
      if (stride == 1) {
        // dx = same-padding conv of dy with the transposed, 180-degree
        // rotated kernel; reuses the fused forward kernel.
        std::vector<T> wt(static_cast<std::size_t>(ic * oc * k * k));
        for (std::int64_t co = 0; co < oc; ++co)
          for (std::int64_t cin = 0; cin < ic; ++cin)
            for (std::int64_t ky = 0; ky < k; ++ky)
              for (std::int64_t kx = 0; kx < k; ++kx)
                wt[static_cast<std::size_t>(
                    ((cin * oc + co) * k + (k - 1 - ky)) * k +
                    (k - 1 - kx))] =
                    weight->data[static_cast<std::size_t>(
                        ((co * ic + cin) * k + ky) * k + kx)];
        detail::conv_accum_s1(out.grad.data(), xs.n, oc, xs.h, xs.w,
                              wt.data(), ic, k, x->grad.data());
      } else {
        parallel_for(0, xs.n * ic, [&](std::int64_t job) {
          const std::int64_t n = job / ic;
          const std::int64_t cin = job % ic;
          T* gx = x->grad.data() + x->index(n, cin, 0, 0);
          for (std::int64_t co = 0; co < oc; ++co) {
            const T* gy = out.grad.data() + out.index(n, co, 0, 0);
            for (std::int64_t ky = 0; ky < k; ++ky)
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const T wv = weight->at(co, cin, ky, kx);
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                  const std::int64_t iy = oy * stride + ky - p;
                  if (iy < 0 || iy >= xs.h) continue;
                  const T* grow = gy + oy * ow;
                  T* xrow = gx + iy * xs.w;
                  for (std::int64_t ox = 0; ox < ow; ++ox) {
                    const std::int64_t ix = ox * 2 + kx - p;
                    if (ix >= 0 && ix < xs.w) xrow[ix] += wv * grow[ox];
                  }
                }
              }
          }
        });
      }
    }
    if (weight->requires_grad) {
      weight->ensure_grad();
      const std::int64_t plane = oh * ow;
      if (stride == 1) {
        // dw[co][ci,ky,kx] = sum over (n, pixel) of dy * column(x). Built as
        // a per-sample im2col followed by axpy updates of whole weight-grad
        // rows; no reduction loops, so the inner loops vectorize. Tiles of
        // four output channels own disjoint rows, keeping the accumulation
        // order fixed for any thread count.
        const std::int64_t q = ic * k * k;
        std::vector<T> col(static_cast<std::size_t>(plane * q));
        for (std::int64_t n = 0; n < xs.n; ++n) {
          const T* xn = x->data.data() + x->index(n, 0, 0, 0);
          for (std::int64_t oy = 0; oy < oh; ++oy)
            for (std::int64_t ox = 0; ox < ow; ++ox) {
              T* row = col.data() + (oy * ow + ox) * q;
              for (std::int64_t ci = 0; ci < ic; ++ci) {
                const T* xpl = xn + ci * plane;
                if (k == 1) {
                  row[ci] = xpl[oy * ow + ox];
                  continue;
                }
                for (std::int64_t ky = 0; ky < 3; ++ky) {
                  const std::int64_t iy = oy + ky - 1;
                  for (std::int64_t kx = 0; kx < 3; ++kx) {
                    const std::int64_t ix = ox + kx - 1;
                    row[ci * 9 + ky * 3 + kx] =
                        (iy >= 0 && iy < xs.h && ix >= 0 && ix < xs.w)
                            ? xpl[iy * xs.w + ix]
                            : T(0);
                  }
                }
              }
            }
          const T* gn = out.grad.data() + out.index(n, 0, 0, 0);
          parallel_for(0, (oc + 3) / 4, [&](std::int64_t tile) {
            const std::int64_t c0 = tile * 4;
            const std::int64_t c1 = std::min<std::int64_t>(oc, c0 + 4);
            if (c1 - c0 == 4) {
              T* w0 = weight->grad.data() + c0 * q;
              T* w1 = w0 + q;
              T* w2 = w1 + q;
              T* w3 = w2 + q;
              for (std::int64_t i = 0; i < plane; ++i) {
                const T* br = col.data() + i * q;
                const T g0 = gn[c0 * plane + i];
                const T g1 = gn[(c0 + 1) * plane + i];
                const T g2 = gn[(c0 + 2) * plane + i];
                const T g3 = gn[(c0 + 3) * plane + i];
                for (std::int64_t j = 0; j < q; ++j) {
                  const T b = br[j];
                  w0[j] += g0 * b;
                  w1[j] += g1 * b;
                  w2[j] += g2 * b;
                  w3[j] += g3 * b;
                }
              }
            } else {
              for (std::int64_t co = c0; co < c1; ++co) {
                T* wg = weight->grad.data() + co * q;
                for (std::int64_t i = 0; i < plane; ++i) {
                  const T* br = col.data() + i * q;
                  const T g = gn[co * plane + i];
                  for (std::int64_t j = 0; j < q; ++j) wg[j] += g * br[j];
                }
              }
            }
          });
        }
        return;
      }
      parallel_for(0, oc, [&](std::int64_t co) {
        for (std::int64_t cin = 0; cin < ic; ++cin) {
          for (std::int64_t ky = 0; ky < k; ++ky)
            for (std::int64_t kx = 0; kx < k; ++kx) {
              T a0 = T(0);
              for (std::int64_t n = 0; n < xs.n; ++n) {
                const T* gy = out.grad.data() + out.index(n, co, 0, 0);
                const T* xin = x->data.data() + x->index(n, cin, 0, 0);
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                  const std::int64_t iy = oy * stride + ky - p;
                  if (iy < 0 || iy >= xs.h) continue;
                  const T* grow = gy + oy * ow;
                  const T* xrow = xin + iy * xs.w;
                  for (std::int64_t ox = 0; ox < ow; ++ox) {
                    const std::int64_t ix = ox * 2 + kx - p;
                    if (ix >= 0 && ix < xs.w) a0 += grow[ox] * xrow[ix];
                  }
                }
              }
              weight->grad[static_cast<std::size_t>(
                  weight->index(co, cin, ky, kx))] += a0;
            }
        }
      });
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Training mode normalizes with batch statistics (population variance) and
// updates running statistics in place; inference mode uses the running
// statistics. Differentiable w.r.t. x, gamma, beta.
template <typename T>
TensorPtr<T> batchnorm2d(const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                         const TensorPtr<T>& beta,
                         std::vector<T>& running_mean,
                         std::vector<T>& running_var, T momentum, T eps,
                         bool training) {
  const Shape s = x->shape;
  if (gamma->numel() != s.c || beta->numel() != s.c ||
      static_cast<std::int64_t>(running_mean.size()) != s.c ||
      static_cast<std::int64_t>(running_var.size()) != s.c)
    throw ShapeError("batchnorm2d parameter length mismatch for " + s.str());
  const std::int64_t m = s.n * s.h * s.w;  // reduction size per channel
  if (training && m < 2)
    throw NumericError("batchnorm2d degenerate statistics: n*h*w < 2");

  auto y = make_tensor<T>(s);
  auto mean = std::make_shared<std::vector<T>>(s.c);
  auto invstd = std::make_shared<std::vector<T>>(s.c);

  parallel_for(0, s.c, [&](std::int64_t c) {
    T mu, var;
    if (training) {
      T acc = T(0);
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* row = x->data.data() + x->index(n, c, 0, 0);
        for (std::int64_t i = 0; i < s.h * s.w; ++i) acc += row[i];
      }
      mu = acc / static_cast<T>(m);
      T vacc = T(0);
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* row = x->data.data() + x->index(n, c, 0, 0);
        for (std::int64_t i = 0; i < s.h * s.w; ++i) {
          const T d = row[i] - mu;
          vacc += d * d;
        }
      }
      var = vacc / static_cast<T>(m);  // population variance
    } else {
      mu = running_mean[static_cast<std::size_t>(c)];
      var = running_var[static_cast<std::size_t>(c)];
      if (!(var > T(0)))
        throw NumericError("batchnorm2d running variance must be positive");
    }
    const T is = T(1) / std::sqrt(var + eps);
    (*mean)[static_cast<std::size_t>(c)] = mu;
    (*invstd)[static_cast<std::size_t>(c)] = is;
    const T g = gamma->data[static_cast<std::size_t>(c)];
    const T b = beta->data[static_cast<std::size_t>(c)];
    for (std::int64_t n = 0; n < s.n; ++n) {
      const T* row = x->data.data() + x->index(n, c, 0, 0);
      T* yrow = y->data.data() + y->index(n, c, 0, 0);
      for (std::int64_t i = 0; i < s.h * s.w; ++i)
        yrow[i] = g * (row[i] - mu) * is + b;
    }
    if (training) {
      running_mean[static_cast<std::size_t>(c)] =
          (T(1) - momentum) * running_mean[static_cast<std::size_t>(c)] +
          momentum * mu;
      running_var[static_cast<std::size_t>(c)] =
          (T(1) - momentum) * running_var[static_cast<std::size_t>(c)] +
          momentum * var;
    }
  });
  check_finite(*y, "batchnorm2d output");

  detail::record(y, "batchnorm2d", {x, gamma, beta},
                 [x, gamma, beta, mean, invstd, training](Tensor<T>& out) {
    const Shape s = x->shape;
    const std::int64_t m = s.n * s.h * s.w;
    if (x->requires_grad) x->ensure_grad();
    if (gamma->requires_grad) gamma->ensure_grad();
    if (beta->requires_grad) beta->ensure_grad();
    parallel_for(0, s.c, [&](std::int64_t c) {
      const T mu = (*mean)[static_cast<std::size_t>(c)];
      const T is = (*invstd)[static_cast<std::size_t>(c)];
      const T g = gamma->data[static_cast<std::size_t>(c)];
      // per-channel reductions
      T sum_dy = T(0), sum_dy_xhat = T(0);
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* xr = x->data.data() + x->index(n, c, 0, 0);
        const T* gr = out.grad.data() + out.index(n, c, 0, 0);
        for (std::int64_t i = 0; i < s.h * s.w; ++i) {
          sum_dy += gr[i];
          sum_dy_xhat += gr[i] * (xr[i] - mu) * is;
        }
      }
      if (beta->requires_grad)
        beta->grad[static_cast<std::size_t>(c)] += sum_dy;
      if (gamma->requires_grad)
        gamma->grad[static_cast<std::size_t>(c)] += sum_dy_xhat;
      if (x->requires_grad) {
        if (training) {
          const T mean_dy = sum_dy / static_cast<T>(m);
          const T mean_dy_xhat = sum_dy_xhat / static_cast<T>(m);
          for (std::int64_t n = 0; n < s.n; ++n) {
            const T* xr = x->data.data() + x->index(n, c, 0, 0);
            const T* gr = out.grad.data() + out.index(n, c, 0, 0);
            T* gx = x->grad.data() + x->index(n, c, 0, 0);
            for (std::int64_t i = 0; i < s.h * s.w; ++i) {
              const T xhat = (xr[i] - mu) * is;
              gx[i] += g * is * (gr[i] - mean_dy - xhat * mean_dy_xhat);
            }
          }
        } else {
          for (std::int64_t n = 0; n < s.n; ++n) {
            const T* gr = out.grad.data() + out.index(n, c, 0, 0);
            T* gx = x->grad.data() + x->index(n, c, 0, 0);
            for (std::int64_t i = 0; i < s.h * s.w; ++i)
              gx[i] += g * is * gr[i];
          }
        }
      }
    });
  });
  return y;
}

// ---------------------------------------------------------------------------
// Pooling / resampling / channel ops
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> maxpool2x2(const TensorPtr<T>& x) {
  const Shape s = x->shape;
  if (s.h % 2 != 0 || s.w % 2 != 0)
    throw ShapeError("maxpool2x2 requires even spatial dims, got " + s.str());
  auto y = make_tensor<T>(Shape{s.n, s.c, s.h / 2, s.w / 2});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(y->numel()));
  const std::int64_t oh = s.h / 2, ow = s.w / 2;
  parallel_for(0, s.n * s.c, [&](std::int64_t job) {
    const std::int64_t n = job / s.c, c = job % s.c;
    for (std::int64_t oy = 0; oy < oh; ++oy)
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        // row-major window scan; ties keep the first occurrence
        std::int64_t best = x->index(n, c, 2 * oy, 2 * ox);
        T bv = x->data[static_cast<std::size_t>(best)];
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::int64_t idx = x->index(n, c, 2 * oy + dy, 2 * ox + dx);
            const T v = x->data[static_cast<std::size_t>(idx)];
            if (v > bv) {
              bv = v;
              best = idx;
            }
          }
        const std::int64_t oidx = y->index(n, c, oy, ox);
        y->data[static_cast<std::size_t>(oidx)] = bv;
        (*argmax)[static_cast<std::size_t>(oidx)] = best;
      }
  });
  detail::record(y, "maxpool2x2", {x}, [x, argmax](Tensor<T>& out) {
    x->ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      x->grad[static_cast<std::size_t>((*argmax)[i])] += out.grad[i];
  });
  return y;
}

namespace detail {
// Half-pixel-center sampling: output pixel i reads input (i+0.5)*in/out - 0.5
// clamped to the border. Shared by the autodiff upsampler and the data
// pipeline's resize so the two paths agree exactly when out == 2*in.
struct LerpTap {
  std::int64_t i0, i1;
  double w0, w1;
};

inline std::vector<LerpTap> lerp_taps(std::int64_t in, std::int64_t out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    if (src > static_cast<double>(in - 1)) src = static_cast<double>(in - 1);
    const std::int64_t i0 = static_cast<std::int64_t>(std::floor(src));
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    const double f = src - static_cast<double>(i0);
    taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - f, f};
  }
  return taps;
}
}  // namespace detail

template <typename T>
TensorPtr<T> upsample_bilinear2(const TensorPtr<T>& x) {
  const Shape s = x->shape;
  check_finite(*x, "upsample_bilinear2 input");
  const std::int64_t oh = 2 * s.h, ow = 2 * s.w;
  auto y = make_tensor<T>(Shape{s.n, s.c, oh, ow});
  auto ty = std::make_shared<std::vector<detail::LerpTap>>(
      detail::lerp_taps(s.h, oh));
  auto tx = std::make_shared<std::vector<detail::LerpTap>>(
      detail::lerp_taps(s.w, ow));
  parallel_for(0, s.n * s.c, [&](std::int64_t job) {
    const std::int64_t n = job / s.c, c = job % s.c;
    const T* in = x->data.data() + x->index(n, c, 0, 0);
    T* out = y->data.data() + y->index(n, c, 0, 0);
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      const auto& a = (*ty)[static_cast<std::size_t>(oy)];
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const auto& b = (*tx)[static_cast<std::size_t>(ox)];
        out[oy * ow + ox] = static_cast<T>(
            a.w0 * (b.w0 * in[a.i0 * s.w + b.i0] +
                    b.w1 * in[a.i0 * s.w + b.i1]) +
            a.w1 * (b.w0 * in[a.i1 * s.w + b.i0] +
                    b.w1 * in[a.i1 * s.w + b.i1]));
      }
    }
  });
  detail::record(y, "upsample_bilinear2", {x}, [x, ty, tx](Tensor<T>& out) {
    x->ensure_grad();
    const Shape s = x->shape;
    const std::int64_t oh = out.shape.h, ow = out.shape.w;
    parallel_for(0, s.n * s.c, [&](std::int64_t job) {
      const std::int64_t n = job / s.c, c = job % s.c;
      const T* g = out.grad.data() + out.index(n, c, 0, 0);
      T* gx = x->grad.data() + x->index(n, c, 0, 0);
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        const auto& a = (*ty)[static_cast<std::size_t>(oy)];
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          const auto& b = (*tx)[static_cast<std::size_t>(ox)];
          const T gv = g[oy * ow + ox];
          gx[a.i0 * s.w + b.i0] += static_cast<T>(a.w0 * b.w0) * gv;
          gx[a.i0 * s.w + b.i1] += static_cast<T>(a.w0 * b.w1) * gv;
          gx[a.i1 * s.w + b.i0] += static_cast<T>(a.w1 * b.w0) * gv;
          gx[a.i1 * s.w + b.i1] += static_cast<T>(a.w1 * b.w1) * gv;
        }
      }
    });
  });
  return y;
}

template <typename T>
TensorPtr<T> concat_channels(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  const Shape sa = a->shape, sb = b->shape;
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw ShapeError("concat_channels batch/spatial mismatch " + sa.str() +
                     " vs " + sb.str());
  auto y = make_tensor<T>(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::int64_t hw = sa.h * sa.w;
  for (std::int64_t n = 0; n < sa.n; ++n) {
    std::copy_n(a->data.data() + n * sa.c * hw, sa.c * hw,
                y->data.data() + n * (sa.c + sb.c) * hw);
    std::copy_n(b->data.data() + n * sb.c * hw, sb.c * hw,
                y->data.data() + n * (sa.c + sb.c) * hw + sa.c * hw);
  }
  detail::record(y, "concat_channels", {a, b}, [a, b](Tensor<T>& out) {
    const Shape sa = a->shape, sb = b->shape;
    const std::int64_t hw = sa.h * sa.w;
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::int64_t n = 0; n < sa.n; ++n) {
        const T* g = out.grad.data() + n * (sa.c + sb.c) * hw;
        T* ga = a->grad.data() + n * sa.c * hw;
        for (std::int64_t i = 0; i < sa.c * hw; ++i) ga[i] += g[i];
      }
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::int64_t n = 0; n < sa.n; ++n) {
        const T* g = out.grad.data() + n * (sa.c + sb.c) * hw + sa.c * hw;
        T* gb = b->grad.data() + n * sb.c * hw;
        for (std::int64_t i = 0; i < sb.c * hw; ++i) gb[i] += g[i];
      }
    }
  });
  return y;
}

// Parameter-free channel reduction: output channel j = in[2j] + in[2j+1].
template <typename T>
TensorPtr<T> channel_halve_sum(const TensorPtr<T>& x) {
  const Shape s = x->shape;
  if (s.c % 2 != 0)
    throw ShapeError("channel_halve_sum requires even channels, got " +
                     s.str());
  auto y = make_tensor<T>(Shape{s.n, s.c / 2, s.h, s.w});
  const std::int64_t hw = s.h * s.w;
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c / 2; ++c) {
      const T* e = x->data.data() + x->index(n, 2 * c, 0, 0);
      const T* o = x->data.data() + x->index(n, 2 * c + 1, 0, 0);
      T* out = y->data.data() + y->index(n, c, 0, 0);
      for (std::int64_t i = 0; i < hw; ++i) out[i] = e[i] + o[i];
    }
  detail::record(y, "channel_halve_sum", {x}, [x](Tensor<T>& out) {
    x->ensure_grad();
    const Shape s = x->shape;
    const std::int64_t hw = s.h * s.w;
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t c = 0; c < s.c / 2; ++c) {
        const T* g = out.grad.data() + out.index(n, c, 0, 0);
        T* ge = x->grad.data() + x->index(n, 2 * c, 0, 0);
        T* go = x->grad.data() + x->index(n, 2 * c + 1, 0, 0);
        for (std::int64_t i = 0; i < hw; ++i) {
          ge[i] += g[i];
          go[i] += g[i];
        }
      }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Weighted mean of per-sample cross-entropies: sum_i w_{y_i} * nll_i divided
// by sum_i w_{y_i}. Softmax uses max-subtraction.
template <typename T>
TensorPtr<T> weighted_cross_entropy(const TensorPtr<T>& logits,
                                    const std::vector<int>& labels,
                                    const std::vector<T>& class_weights) {
  const std::int64_t n = logits->shape.n;
  const std::int64_t classes =
      logits->shape.c * logits->shape.h * logits->shape.w;
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw ShapeError("weighted_cross_entropy label count mismatch");
  if (static_cast<std::int64_t>(class_weights.size()) != classes)
    throw ShapeError("weighted_cross_entropy weight count mismatch");
  for (const T w : class_weights)
    if (!(w > T(0)))
      throw std::invalid_argument("class weights must be positive");
  for (const int y : labels)
    if (y < 0 || y >= classes)
      throw std::out_of_range("label out of range");

  auto probs = std::make_shared<std::vector<T>>(
      static_cast<std::size_t>(n * classes));
  T loss_acc = T(0), weight_acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    const T* row = logits->data.data() + i * classes;
    T mx = row[0];
    for (std::int64_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    T z = T(0);
    for (std::int64_t c = 0; c < classes; ++c) {
      const T e = std::exp(row[c] - mx);
      (*probs)[static_cast<std::size_t>(i * classes + c)] = e;
      z += e;
    }
    T logz = std::log(z);
    for (std::int64_t c = 0; c < classes; ++c)
      (*probs)[static_cast<std::size_t>(i * classes + c)] /= z;
    const T w = class_weights[static_cast<std::size_t>(labels[i])];
    const T nll = logz - (row[labels[i]] - mx);
    loss_acc += w * nll;
    weight_acc += w;
  }
  auto loss = make_tensor<T>(Shape{1, 1, 1, 1});
  loss->data[0] = loss_acc / weight_acc;
  check_finite(*loss, "weighted_cross_entropy loss");

  detail::record(loss, "weighted_cross_entropy", {logits},
                 [logits, labels, class_weights, probs, weight_acc,
                  n, classes](Tensor<T>& out) {
    logits->ensure_grad();
    const T g = out.grad[0] / weight_acc;
    for (std::int64_t i = 0; i < n; ++i) {
      const T w = class_weights[static_cast<std::size_t>(labels[i])];
      for (std::int64_t c = 0; c < classes; ++c) {
        T d = (*probs)[static_cast<std::size_t>(i * classes + c)];
        if (c == labels[i]) d -= T(1);
        logits->grad[static_cast<std::size_t>(i * classes + c)] += g * w * d;
      }
    }
  });
  return loss;
}

}  // namespace cec

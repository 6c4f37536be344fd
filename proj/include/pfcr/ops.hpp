#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <vector>

#include "pfcr/blas.hpp"
#include "pfcr/errors.hpp"
#include "pfcr/tensor.hpp"

// Differentiable primitives. Every op computes its forward value eagerly and,
// when a tape is active and an input needs a gradient, records a closure that
// accumulates vector-Jacobian products into its inputs.

namespace pfcr {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k)
      if (T* g = detail::grad_of(n, k))
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& n) {
    const auto& av = n.inputs[0]->data;
    const auto& bv = n.inputs[1]->data;
    if (T* g = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bv[i];
    if (T* g = detail::grad_of(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * av[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [factor](Node<T>& n) {
    if (T* g = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + offset;
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [](Node<T>& n) {
    if (T* g = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

// Broadcast `rows` [R, D] over the leading dimensions of x [..., R, D].
template <typename T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& rows) {
  if (rows.rank() != 2 || x.rank() < 2 || x.dim(x.rank() - 1) != rows.dim(1) ||
      x.dim(x.rank() - 2) != rows.dim(0))
    throw DimensionError("add_rows: cannot broadcast " + shape_str(rows.shape()) + " onto " +
                         shape_str(x.shape()));
  const std::size_t block = rows.numel();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + rows[i % block];
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &rows}, [block](Node<T>& n) {
    if (T* g = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    if (T* g = detail::grad_of(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % block] += n.grad[i];
  });
}

// Repeats a per-channel vector s[C] along axis 0 of `shape`.
template <typename T>
Tensor<T> expand_axis0(const Tensor<T>& s, const Shape& shape) {
  if (shape.empty() || (s.numel() != shape[0] && s.numel() != 1))
    throw DimensionError("expand_axis0: " + shape_str(s.shape()) + " vs " + shape_str(shape));
  const std::size_t total = numel_of(shape);
  const std::size_t channels = s.numel();
  const std::size_t inner = total / shape[0];
  std::vector<T> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = s[channels == 1 ? 0 : i / inner];
  return detail::make_result<T>(shape, std::move(out), {&s}, [channels, inner](Node<T>& n) {
    if (T* g = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[channels == 1 ? 0 : i / inner] += n.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return detail::make_result<T>(Shape{1}, {acc}, {&x}, [](Node<T>& n) {
    if (T* g = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.inputs[0]->data.size(); ++i) g[i] += n.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  blas::gemm<T>(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0),
                out.data(), n);
  return detail::make_result<T>(Shape{m, n}, std::move(out), {&a, &b}, [m, k, n](Node<T>& nd) {
    const T* av = nd.inputs[0]->data.data();
    const T* bv = nd.inputs[1]->data.data();
    const T* dy = nd.grad.data();
    if (T* ga = detail::grad_of(nd, 0)) blas::gemm<T>(false, true, m, k, n, T(1), dy, n, bv, n, T(1), ga, k);
    if (T* gb = detail::grad_of(nd, 1)) blas::gemm<T>(true, false, k, n, m, T(1), av, k, dy, n, T(1), gb, n);
  });
}

// y = x W^T + b over the last axis; W is [out, in], b is [out] or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.rank() != 2 || x.rank() < 1 || x.dim(x.rank() - 1) != w.dim(1))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  const std::size_t in = w.dim(1), out_f = w.dim(0);
  if (b.defined() && b.numel() != out_f)
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " vs " + std::to_string(out_f));
  const std::size_t rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out_f;
  std::vector<T> out(rows * out_f);
  if (b.defined())
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(b.data().begin(), b.data().end(), out.begin() + r * out_f);
  blas::gemm<T>(false, true, rows, out_f, in, T(1), x.data().data(), in, w.data().data(), in,
                b.defined() ? T(1) : T(0), out.data(), out_f);
  return detail::make_result<T>(
      std::move(shape), std::move(out), {&x, &w, &b}, [rows, in, out_f](Node<T>& n) {
        const T* dy = n.grad.data();
        if (T* gx = detail::grad_of(n, 0))
          blas::gemm<T>(false, false, rows, in, out_f, T(1), dy, out_f, n.inputs[1]->data.data(),
                        in, T(1), gx, in);
        if (T* gw = detail::grad_of(n, 1))
          blas::gemm<T>(true, false, out_f, in, rows, T(1), dy, out_f, n.inputs[0]->data.data(),
                        in, T(1), gw, in);
        if (n.inputs[2])
          if (T* gb = detail::grad_of(n, 2))
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t o = 0; o < out_f; ++o) gb[o] += dy[r * out_f + o];
      });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = gamma.numel();
  if (x.rank() < 1 || x.dim(x.rank() - 1) != d || beta.numel() != d)
    throw DimensionError("layernorm: last axis of " + shape_str(x.shape()) + " vs " +
                         std::to_string(d));
  if (!(eps >= T(0))) throw ContractError("layernorm: eps must be non-negative");
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  const T* xv = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * d;
    T mu = T(0);
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= T(d);
    T var = T(0);
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= T(d);
    const T denom = std::sqrt(var + eps);
    const T rs = denom > T(0) ? T(1) / denom : T(0);
    rstd[r] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (row[i] - mu) * rs;
      xhat[r * d + i] = h;
      out[r * d + i] = gamma[i] * h + beta[i];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& n) {
        const T* dy = n.grad.data();
        const T* g = n.inputs[1]->data.data();
        if (T* gx = detail::grad_of(n, 0)) {
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = T(0), m2 = T(0);
            for (std::size_t i = 0; i < d; ++i) {
              const T dh = dy[r * d + i] * g[i];
              m1 += dh;
              m2 += dh * xhat[r * d + i];
            }
            m1 /= T(d);
            m2 /= T(d);
            for (std::size_t i = 0; i < d; ++i) {
              const T dh = dy[r * d + i] * g[i];
              gx[r * d + i] += rstd[r] * (dh - m1 - xhat[r * d + i] * m2);
            }
          }
        }
        if (T* gg = detail::grad_of(n, 1))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) gg[i] += dy[r * d + i] * xhat[r * d + i];
        if (T* gb = detail::grad_of(n, 2))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) gb[i] += dy[r * d + i];
      });
}

// Softmax along `axis`, with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  std::vector<T> out(x.numel());
  const T* xv = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      T z = T(0);
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [outer, inner, len](Node<T>& n) {
    T* gx = detail::grad_of(n, 0);
    if (!gx) return;
    const T* y = n.data.data();
    const T* dy = n.grad.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = T(0);
        for (std::size_t j = 0; j < len; ++j) dot += dy[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j)
          gx[base + j * inner] += y[base + j * inner] * (dy[base + j * inner] - dot);
      }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  return softmax(x, x.rank() - 1);
}

// Exact erf-form GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> out(x.numel()), cdf(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    cdf[i] = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
    out[i] = x[i] * cdf[i];
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [cdf = std::move(cdf)](Node<T>& n) {
    T* gx = detail::grad_of(n, 0);
    if (!gx) return;
    const T inv_sqrt_2pi = T(0.5) * std::numbers::inv_sqrtpi_v<T> * std::numbers::sqrt2_v<T>;
    const auto& xv = n.inputs[0]->data;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T v = xv[i];
      gx[i] += n.grad[i] * (cdf[i] + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v));
    }
  });
}

// Round half to even; identity Jacobian in the backward pass.
template <typename T>
Tensor<T> ste_round(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::nearbyint(x[i]);
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [](Node<T>& n) {
    if (T* gx = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
  });
}

// Hard clip: gradient passes only where lo <= x <= hi.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(x[i], lo), hi);
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [lo, hi](Node<T>& n) {
    T* gx = detail::grad_of(n, 0);
    if (!gx) return;
    const auto& xv = n.inputs[0]->data;
    for (std::size_t i = 0; i < xv.size(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) gx[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mse_loss");
  const std::size_t count = a.numel();
  T acc = T(0);
  for (std::size_t i = 0; i < count; ++i) {
    const T d = a[i] - b[i];
    acc += d * d;
  }
  acc /= T(count);
  return detail::make_result<T>(Shape{1}, {acc}, {&a, &b}, [count](Node<T>& n) {
    const auto& av = n.inputs[0]->data;
    const auto& bv = n.inputs[1]->data;
    const T c = T(2) * n.grad[0] / T(count);
    if (T* ga = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < count; ++i) ga[i] += c * (av[i] - bv[i]);
    if (T* gb = detail::grad_of(n, 1))
      for (std::size_t i = 0; i < count; ++i) gb[i] -= c * (av[i] - bv[i]);
  });
}

// q, k: [B, N, D] split into `heads` heads; returns factor * Q K^T per head, [B, H, N, N].
template <typename T>
Tensor<T> attention_scores(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads, T factor) {
  detail::require_same_shape(q.shape(), k.shape(), "attention_scores");
  if (q.rank() != 3 || heads == 0 || q.dim(2) % heads != 0)
    throw DimensionError("attention_scores: bad shape " + shape_str(q.shape()));
  const std::size_t batch = q.dim(0), tokens = q.dim(1), width = q.dim(2), dh = width / heads;
  std::vector<T> out(batch * heads * tokens * tokens);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      blas::gemm<T>(false, true, tokens, tokens, dh, factor,
                    q.data().data() + b * tokens * width + h * dh, width,
                    k.data().data() + b * tokens * width + h * dh, width, T(0),
                    out.data() + (b * heads + h) * tokens * tokens, tokens);
  return detail::make_result<T>(
      Shape{batch, heads, tokens, tokens}, std::move(out), {&q, &k},
      [batch, heads, tokens, width, dh, factor](Node<T>& n) {
        T* gq = detail::grad_of(n, 0);
        T* gk = detail::grad_of(n, 1);
        const T* qv = n.inputs[0]->data.data();
        const T* kv = n.inputs[1]->data.data();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const T* ds = n.grad.data() + (b * heads + h) * tokens * tokens;
            const std::size_t off = b * tokens * width + h * dh;
            if (gq)
              blas::gemm<T>(false, false, tokens, dh, tokens, factor, ds, tokens, kv + off, width,
                            T(1), gq + off, width);
            if (gk)
              blas::gemm<T>(true, false, tokens, dh, tokens, factor, ds, tokens, qv + off, width,
                            T(1), gk + off, width);
          }
      });
}

// p: [B, H, N, N], v: [B, N, D] -> per-head P V concatenated back to [B, N, D].
template <typename T>
Tensor<T> attention_context(const Tensor<T>& p, const Tensor<T>& v) {
  if (p.rank() != 4 || v.rank() != 3 || p.dim(0) != v.dim(0) || p.dim(2) != v.dim(1) ||
      p.dim(3) != v.dim(1) || v.dim(2) % p.dim(1) != 0)
    throw DimensionError("attention_context: " + shape_str(p.shape()) + " vs " +
                         shape_str(v.shape()));
  const std::size_t batch = p.dim(0), heads = p.dim(1), tokens = p.dim(2), width = v.dim(2),
                    dh = width / heads;
  std::vector<T> out(batch * tokens * width);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      blas::gemm<T>(false, false, tokens, dh, tokens, T(1),
                    p.data().data() + (b * heads + h) * tokens * tokens, tokens,
                    v.data().data() + b * tokens * width + h * dh, width, T(0),
                    out.data() + b * tokens * width + h * dh, width);
  return detail::make_result<T>(
      v.shape(), std::move(out), {&p, &v}, [batch, heads, tokens, width, dh](Node<T>& n) {
        T* gp = detail::grad_of(n, 0);
        T* gv = detail::grad_of(n, 1);
        const T* pv = n.inputs[0]->data.data();
        const T* vv = n.inputs[1]->data.data();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t poff = (b * heads + h) * tokens * tokens;
            const std::size_t off = b * tokens * width + h * dh;
            const T* dy = n.grad.data() + off;
            if (gp)
              blas::gemm<T>(false, true, tokens, tokens, dh, T(1), dy, width, vv + off, width,
                            T(1), gp + poff, tokens);
            if (gv)
              blas::gemm<T>(true, false, tokens, dh, tokens, T(1), pv + poff, tokens, dy, width,
                            T(1), gv + off, width);
          }
      });
}

// images [B, C, H, W] -> [B, N, C*P*P], patches in row-major grid order.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch) {
  if (images.rank() != 4 || patch == 0 || images.dim(2) % patch || images.dim(3) % patch)
    throw DimensionError("patchify: image shape " + shape_str(images.shape()) +
                         " incompatible with patch " + std::to_string(patch));
  const std::size_t batch = images.dim(0), ch = images.dim(1), hgt = images.dim(2),
                    wid = images.dim(3);
  const std::size_t gx = wid / patch, gy = hgt / patch, tokens = gx * gy,
                    feat = ch * patch * patch;
  std::vector<std::size_t> src(batch * tokens * feat);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t py = 0; py < gy; ++py)
      for (std::size_t px = 0; px < gx; ++px)
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t i = 0; i < patch; ++i)
            for (std::size_t j = 0; j < patch; ++j) {
              const std::size_t dst =
                  (b * tokens + py * gx + px) * feat + c * patch * patch + i * patch + j;
              src[dst] = ((b * ch + c) * hgt + py * patch + i) * wid + px * patch + j;
            }
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = images[src[i]];
  return detail::make_result<T>(Shape{batch, tokens, feat}, std::move(out), {&images},
                                [src = std::move(src)](Node<T>& n) {
                                  if (T* g = detail::grad_of(n, 0))
                                    for (std::size_t i = 0; i < src.size(); ++i)
                                      g[src[i]] += n.grad[i];
                                });
}

// [B, N, D] -> [B, D], averaging over tokens.
template <typename T>
Tensor<T> mean_tokens(const Tensor<T>& x) {
  if (x.rank() != 3) throw DimensionError("mean_tokens: expected rank 3");
  const std::size_t batch = x.dim(0), tokens = x.dim(1), width = x.dim(2);
  std::vector<T> out(batch * width, T(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t d = 0; d < width; ++d)
        out[b * width + d] += x[(b * tokens + t) * width + d];
  for (auto& v : out) v /= T(tokens);
  return detail::make_result<T>(Shape{batch, width}, std::move(out), {&x},
                                [batch, tokens, width](Node<T>& n) {
                                  T* g = detail::grad_of(n, 0);
                                  if (!g) return;
                                  const T inv = T(1) / T(tokens);
                                  for (std::size_t b = 0; b < batch; ++b)
                                    for (std::size_t t = 0; t < tokens; ++t)
                                      for (std::size_t d = 0; d < width; ++d)
                                        g[(b * tokens + t) * width + d] +=
                                            n.grad[b * width + d] * inv;
                                });
}

// Mean softmax cross-entropy over the batch.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  std::vector<T> probs(logits.numel());
  T loss = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = logits.data().data() + b * classes;
    const T mx = *std::max_element(row, row + classes);
    T z = T(0);
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - mx) / z;
    const int y = labels[b];
    if (y < 0 || std::size_t(y) >= classes) throw ContractError("cross_entropy: label out of range");
    loss -= row[y] - mx - std::log(z);
  }
  loss /= T(batch);
  return detail::make_result<T>(
      Shape{1}, {loss}, {&logits},
      [labels, probs = std::move(probs), batch, classes](Node<T>& n) {
        T* g = detail::grad_of(n, 0);
        if (!g) return;
        const T c = n.grad[0] / T(batch);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t k = 0; k < classes; ++k)
            g[b * classes + k] +=
                c * (probs[b * classes + k] - (int(k) == labels[b] ? T(1) : T(0)));
      });
}

}  // namespace pfcr

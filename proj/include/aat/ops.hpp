#pragma once

// Differentiable tensor operations recorded on a Tape.

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "aat/errors.hpp"
#include "aat/tape.hpp"
#include "aat/tensor.hpp"

namespace aat {

namespace detail {

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " needs a matrix, got " + shape_str(t.shape()));
  }
}

// out[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[k x n] += a[m x k]^T * g[m x n]
inline void gemm_tn(const double* a, const double* g, double* out, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

inline Tensor transposed(const Tensor& t) {
  require_rank2(t, "transpose");
  const std::size_t r = t.dim(0), c = t.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t[i * c + j];
  return out;
}

inline double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
}

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace detail

/// Matrix product a[m x k] * b[k x n].
inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) + " by " +
                         shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  detail::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.tape().record("matmul", std::move(out), {a, b}, [m, k, n](const BackwardArgs& ctx) {
    const double* g = ctx.grad.data().data();
    if (ctx.grad_in[0]) {
      const Tensor bt = detail::transposed(*ctx.in[1]);
      detail::gemm_nn(g, bt.data().data(), ctx.grad_in[0]->data().data(), m, n, k);
    }
    if (ctx.grad_in[1]) {
      detail::gemm_tn(ctx.in[0]->data().data(), g, ctx.grad_in[1]->data().data(), m, k, n);
    }
  });
}

/// Elementwise sum. `b` may also match the trailing dimensions of `a`, in
/// which case it is broadcast over the leading ones (bias add).
inline Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Shape& as = av.shape();
  const Shape& bs = bv.shape();
  const bool same = as == bs;
  const bool trailing =
      !same && bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin());
  if (!same && !trailing) {
    throw DimensionError("add: shapes " + shape_str(as) + " and " + shape_str(bs) +
                         " do not broadcast");
  }
  const std::size_t inner = bv.size();
  Tensor out = av;
  if (inner > 0) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % inner];
  }
  return a.tape().record("add", std::move(out), {a, b}, [inner](const BackwardArgs& ctx) {
    detail::accumulate(ctx.grad_in[0], ctx.grad);
    if (Tensor* gb = ctx.grad_in[1]; gb && inner > 0) {
      for (std::size_t i = 0; i < ctx.grad.size(); ++i) (*gb)[i % inner] += ctx.grad[i];
    }
  });
}

/// Elementwise (Hadamard) product of equally shaped tensors.
inline Var multiply(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("multiply: shapes " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()) + " differ");
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record("multiply", std::move(out), {a, b}, [](const BackwardArgs& ctx) {
    const Tensor& g = ctx.grad;
    if (Tensor* ga = ctx.grad_in[0]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (*ctx.in[1])[i];
    }
    if (Tensor* gb = ctx.grad_in[1]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * (*ctx.in[0])[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return a.tape().record("scale", std::move(out), {a}, [s](const BackwardArgs& ctx) {
    Tensor& ga = *ctx.grad_in[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * ctx.grad[i];
  });
}

inline Var transpose(Var a) {
  Tensor out = detail::transposed(a.value());
  return a.tape().record("transpose", std::move(out), {a}, [](const BackwardArgs& ctx) {
    detail::accumulate(ctx.grad_in[0], detail::transposed(ctx.grad));
  });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record("reshape", std::move(out), {a}, [](const BackwardArgs& ctx) {
    detail::accumulate(ctx.grad_in[0], ctx.grad);
  });
}

/// Joins tensors along `axis`; all other dimensions must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  Shape out_shape = first;
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || axis >= s.size()) {
      throw DimensionError("concat: incompatible " + shape_str(first) + " and " + shape_str(s));
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw DimensionError("concat: incompatible " + shape_str(first) + " and " +
                             shape_str(s));
      }
    }
    widths.push_back(s[axis]);
    total += s[axis];
  }
  out_shape[axis] = total;
  Tensor out(out_shape);
  const auto split = detail::split_axis(out_shape, axis);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& src = parts[k].value();
    const std::size_t w = widths[k] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(src.data().data() + o * w, w,
                  out.data().data() + o * total * split.inner + offset * split.inner);
    }
    offset += widths[k];
  }
  return parts.front().tape().record(
      "concat", std::move(out), parts, [widths, split, total](const BackwardArgs& ctx) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const std::size_t w = widths[k] * split.inner;
          if (Tensor* gk = ctx.grad_in[k]) {
            for (std::size_t o = 0; o < split.outer; ++o) {
              const double* src = ctx.grad.data().data() + o * total * split.inner +
                                  offset * split.inner;
              double* dst = gk->data().data() + o * w;
              for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
            }
          }
          offset += widths[k];
        }
      });
}

/// `length` entries of `axis` starting at `start`.
inline Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  const auto split = detail::split_axis(s, axis);
  if (start + length > split.n) {
    throw DimensionError("slice [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") exceeds axis " +
                         std::to_string(axis) + " of " + shape_str(s));
  }
  Shape out_shape = s;
  out_shape[axis] = length;
  Tensor out(out_shape);
  const std::size_t w = length * split.inner;
  const Tensor& src = a.value();
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(src.data().data() + (o * split.n + start) * split.inner, w,
                out.data().data() + o * w);
  }
  return a.tape().record("slice", std::move(out), {a}, [split, start, w](const BackwardArgs& ctx) {
    Tensor& ga = *ctx.grad_in[0];
    for (std::size_t o = 0; o < split.outer; ++o) {
      double* dst = ga.data().data() + (o * split.n + start) * split.inner;
      const double* g = ctx.grad.data().data() + o * w;
      for (std::size_t i = 0; i < w; ++i) dst[i] += g[i];
    }
  });
}

/// Mean over `axis`, which is removed from the shape.
inline Var mean(Var a, std::size_t axis) {
  const Shape& s = a.shape();
  const auto split = detail::split_axis(s, axis);
  if (split.n == 0) throw DimensionError("mean over an empty axis");
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  Tensor out(out_shape);
  const Tensor& x = a.value();
  const double inv = 1.0 / static_cast<double>(split.n);
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t j = 0; j < split.n; ++j)
      for (std::size_t i = 0; i < split.inner; ++i)
        out[o * split.inner + i] += x[(o * split.n + j) * split.inner + i];
  for (double& v : out.data()) v *= inv;
  return a.tape().record("mean", std::move(out), {a}, [split, inv](const BackwardArgs& ctx) {
    Tensor& ga = *ctx.grad_in[0];
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t j = 0; j < split.n; ++j)
        for (std::size_t i = 0; i < split.inner; ++i)
          ga[(o * split.n + j) * split.inner + i] += inv * ctx.grad[o * split.inner + i];
  });
}

/// Sum of all entries as a scalar.
inline Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return a.tape().record("sum", Tensor::scalar(total), {a}, [](const BackwardArgs& ctx) {
    const double g = ctx.grad[0];
    for (double& v : ctx.grad_in[0]->data()) v += g;
  });
}

inline Var sigmoid(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) {
    v = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return a.tape().record("sigmoid", std::move(out), {a}, [](const BackwardArgs& ctx) {
    Tensor& ga = *ctx.grad_in[0];
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double y = ctx.out[i];
      ga[i] += ctx.grad[i] * y * (1.0 - y);
    }
  });
}

/// Exact GELU, x * Phi(x).
inline Var gelu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = detail::gelu_value(v);
  return a.tape().record("gelu", std::move(out), {a}, [](const BackwardArgs& ctx) {
    Tensor& ga = *ctx.grad_in[0];
    const Tensor& x = *ctx.in[0];
    for (std::size_t i = 0; i < ga.size(); ++i) {
      ga[i] += ctx.grad[i] * detail::gelu_derivative(x[i]);
    }
  });
}

/// Max-subtracted softmax along `axis`.
inline Var softmax(Var a, std::size_t axis) {
  const auto split = detail::split_axis(a.shape(), axis);
  Tensor out = a.value();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t i = 0; i < split.inner; ++i) {
      double* base = out.data().data() + o * split.n * split.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < split.n; ++j) mx = std::max(mx, base[j * split.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < split.n; ++j) {
        double& v = base[j * split.inner];
        v = std::exp(v - mx);
        z += v;
      }
      for (std::size_t j = 0; j < split.n; ++j) base[j * split.inner] /= z;
    }
  }
  return a.tape().record("softmax", std::move(out), {a}, [split](const BackwardArgs& ctx) {
    Tensor& ga = *ctx.grad_in[0];
    for (std::size_t o = 0; o < split.outer; ++o) {
      for (std::size_t i = 0; i < split.inner; ++i) {
        const std::size_t base = o * split.n * split.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < split.n; ++j) {
          const std::size_t idx = base + j * split.inner;
          dot += ctx.grad[idx] * ctx.out[idx];
        }
        for (std::size_t j = 0; j < split.n; ++j) {
          const std::size_t idx = base + j * split.inner;
          ga[idx] += ctx.out[idx] * (ctx.grad[idx] - dot);
        }
      }
    }
  });
}

/// Normalises the last axis with the population variance, then applies
/// gamma and beta.
inline Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-6) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("layernorm of a scalar");
  const std::size_t d = xv.shape().back();
  if (d == 0) throw DimensionError("layernorm over a zero-width axis");
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layernorm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match last dim of " +
                         shape_str(xv.shape()));
  }
  const std::size_t rows = xv.size() / d;
  Tensor xhat(xv.shape());
  std::vector<double> rstd(rows);
  Tensor out(xv.shape());
  const Tensor& g = gamma.value();
  const Tensor& b = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * g[j] + b[j];
    }
  }
  return x.tape().record(
      "layernorm", std::move(out), {x, gamma, beta},
      [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](const BackwardArgs& ctx) {
        const Tensor& gv = *ctx.in[1];
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = ctx.grad.data().data() + r * d;
          const double* h = xhat.data().data() + r * d;
          if (Tensor* gx = ctx.grad_in[0]) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dy[j] * gv[j];
              s1 += dh;
              s2 += dh * h[j];
            }
            s1 *= inv_d;
            s2 *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              (*gx)[r * d + j] += rstd[r] * (dy[j] * gv[j] - s1 - h[j] * s2);
            }
          }
          if (Tensor* gg = ctx.grad_in[1]) {
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += dy[j] * h[j];
          }
          if (Tensor* gb = ctx.grad_in[2]) {
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += dy[j];
          }
        }
      });
}

/// x * W + b.
inline Var linear(Var x, Var weight, Var bias) { return add(matmul(x, weight), bias); }

}  // namespace aat

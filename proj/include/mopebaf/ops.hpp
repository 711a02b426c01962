#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mopebaf/bool_matrix.hpp"
#include "mopebaf/errors.hpp"
#include "mopebaf/tensor.hpp"

namespace mopebaf {

namespace kernels {

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn_acc(const double* __restrict A, const double* __restrict B,
                        double* __restrict C, std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = C + (i + 0) * n;
    double* c1 = C + (i + 1) * n;
    double* c2 = C + (i + 2) * n;
    double* c3 = C + (i + 3) * n;
    const double* a0 = A + (i + 0) * k;
    const double* a1 = A + (i + 1) * k;
    const double* a2 = A + (i + 2) * k;
    const double* a3 = A + (i + 3) * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* b = B + p * n;
      const double x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = b[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    double* c = C + i * n;
    const double* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* b = B + p * n;
      const double x = a[p];
      for (std::size_t j = 0; j < n; ++j) c[j] += x * b[j];
    }
  }
}

// C[k,n] += A[m,k]^T * G[m,n]
inline void gemm_tn_acc(const double* __restrict A, const double* __restrict G,
                        double* __restrict C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* g = G + i * n;
    const double* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      double* c = C + p * n;
      const double x = a[p];
      for (std::size_t j = 0; j < n; ++j) c[j] += x * g[j];
    }
  }
}

inline void transpose(const double* src, double* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace kernels

/// Fault injection for verifying that the gradient checker catches broken
/// backward rules. Never enabled outside negative-control tests.
namespace fault_injection {
inline std::atomic<bool>& corrupt_gelu_backward() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace fault_injection

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline Tensor make_output(Shape shape, bool track) {
  Tensor out(std::move(shape));
  out.set_requires_grad(track);
  return out;
}

}  // namespace detail

/// Matrix product. `a` may carry leading batch dimensions which are
/// flattened into rows: a[..., k] x b[k, n] -> [..., n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t k = b.dim(0), n = b.dim(1);
  const std::size_t rows = shape_numel(Shape(a.shape().begin(), a.shape().end() - 1));
  Shape shape = a.shape();
  shape.back() = n;
  const bool track = detail::any_requires_grad({&a, &b});
  Tensor out = detail::make_output(shape, track);
  kernels::gemm_nn_acc(a.data().data(), b.data().data(), out.data().data(), rows, k, n);
  if (track) {
    GradTape::active()->record([a, b, out, rows, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        std::vector<double> bt(k * n);
        kernels::transpose(b.data().data(), bt.data(), k, n);
        kernels::gemm_nn_acc(g, bt.data(), a.ensure_grad().data(), rows, n, k);
      }
      if (b.requires_grad()) {
        kernels::gemm_tn_acc(a.data().data(), g, b.ensure_grad().data(), rows, k, n);
      }
    });
  }
  return out;
}

/// Batched product over the leading dimension: a[B,m,k] x b[B,k,n] -> [B,m,n],
/// or with transpose_b, a[B,m,k] x b[B,n,k]^T -> [B,m,n].
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  detail::require_rank(a, 3, "bmm");
  detail::require_rank(b, 3, "bmm");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || bk != k) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + (transpose_b ? " (transposed)" : ""));
  }
  const bool track = detail::any_requires_grad({&a, &b});
  Tensor out = detail::make_output({batch, m, n}, track);
  std::vector<double> scratch(k * n);
  for (std::size_t s = 0; s < batch; ++s) {
    const double* bp = b.data().data() + s * k * n;
    if (transpose_b) {
      kernels::transpose(bp, scratch.data(), n, k);
      bp = scratch.data();
    }
    kernels::gemm_nn_acc(a.data().data() + s * m * k, bp, out.data().data() + s * m * n, m, k, n);
  }
  if (track) {
    GradTape::active()->record([a, b, out, batch, m, k, n, transpose_b]() mutable {
      if (!out.has_grad()) return;
      std::vector<double> tmp(k * n);
      for (std::size_t s = 0; s < batch; ++s) {
        const double* g = out.grad().data() + s * m * n;
        const double* ap = a.data().data() + s * m * k;
        const double* bp = b.data().data() + s * k * n;
        if (a.requires_grad()) {
          double* ga = a.ensure_grad().data() + s * m * k;
          if (transpose_b) {
            // b holds [n,k]: dA = G[m,n] * B[n,k]
            kernels::gemm_nn_acc(g, bp, ga, m, n, k);
          } else {
            kernels::transpose(bp, tmp.data(), k, n);
            kernels::gemm_nn_acc(g, tmp.data(), ga, m, n, k);
          }
        }
        if (b.requires_grad()) {
          double* gb = b.ensure_grad().data() + s * k * n;
          if (transpose_b) {
            // dB[n,k] = G^T[n,m] * A[m,k]
            kernels::gemm_tn_acc(g, ap, gb, m, n, k);
          } else {
            kernels::gemm_tn_acc(ap, g, gb, m, k, n);
          }
        }
      }
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  const bool track = detail::any_requires_grad({&a, &b});
  Tensor out = detail::make_output(a.shape(), track);
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (track) {
    GradTape::active()->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = t->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  const bool track = detail::any_requires_grad({&a, &b});
  Tensor out = detail::make_output(a.shape(), track);
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  if (track) {
    GradTape::active()->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  const bool track = detail::any_requires_grad({&a});
  Tensor out = detail::make_output(a.shape(), track);
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * s;
  if (track) {
    GradTape::active()->record([a, out, s]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

/// x[..., d] + bias[d], broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank(bias, 1, "add_bias");
  if (x.rank() < 1 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " vs bias " +
                         shape_str(bias.shape()));
  }
  const std::size_t d = bias.dim(0);
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  const bool track = detail::any_requires_grad({&x, &bias});
  Tensor out = detail::make_output(x.shape(), track);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] + bias[j];
  if (track) {
    GradTape::active()->record([x, bias, out, rows, d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
    });
  }
  return out;
}

inline Tensor sum(const Tensor& a) {
  const bool track = detail::any_requires_grad({&a});
  Tensor out = detail::make_output({1}, track);
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out[0] = acc;
  if (track) {
    GradTape::active()->record([a, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      for (double& v : a.ensure_grad()) v += g;
    });
  }
  return out;
}

/// Same values, new shape (element count must match).
inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  const bool track = detail::any_requires_grad({&a});
  Tensor out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  out.set_requires_grad(track);
  if (track) {
    GradTape::active()->record([a, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

/// Softmax over the last axis of scores[..., q, k], restricted to the
/// entries allowed by mask[q, k]. Masked entries are exactly zero.
inline Tensor masked_softmax(const Tensor& scores, const BoolMatrix& mask) {
  if (scores.rank() < 2) throw DimensionError("masked_softmax: rank < 2: " + shape_str(scores.shape()));
  const std::size_t q = scores.dim(scores.rank() - 2), k = scores.dim(scores.rank() - 1);
  if (mask.rows() != q || mask.cols() != k) {
    throw DimensionError("masked_softmax: mask " + std::to_string(mask.rows()) + "x" +
                         std::to_string(mask.cols()) + " vs scores " + shape_str(scores.shape()));
  }
  for (std::size_t r = 0; r < q; ++r) {
    if (mask.row_count(r) == 0) {
      throw ConfigError("masked_softmax: query row " + std::to_string(r) + " has no allowed key");
    }
  }
  const std::size_t slices = q * k == 0 ? 0 : scores.numel() / (q * k);
  const bool track = detail::any_requires_grad({&scores});
  Tensor out = detail::make_output(scores.shape(), track);
  for (std::size_t s = 0; s < slices; ++s) {
    for (std::size_t r = 0; r < q; ++r) {
      const double* x = scores.data().data() + (s * q + r) * k;
      double* y = out.data().data() + (s * q + r) * k;
      const std::uint8_t* allowed = mask.row_ptr(r);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c)
        if (allowed[c]) mx = std::max(mx, x[c]);
      double total = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        y[c] = allowed[c] ? std::exp(x[c] - mx) : 0.0;
        total += y[c];
      }
      const double inv = 1.0 / total;
      for (std::size_t c = 0; c < k; ++c) y[c] *= inv;
    }
  }
  if (track) {
    GradTape::active()->record([scores, out, slices, q, k]() mutable {
      if (!out.has_grad()) return;
      auto gx = scores.ensure_grad();
      for (std::size_t row = 0; row < slices * q; ++row) {
        const double* y = out.data().data() + row * k;
        const double* g = out.grad().data() + row * k;
        double dot = 0.0;
        for (std::size_t c = 0; c < k; ++c) dot += y[c] * g[c];
        for (std::size_t c = 0; c < k; ++c) gx[row * k + c] += y[c] * (g[c] - dot);
      }
    });
  }
  return out;
}

/// Row-wise layer normalization of x[..., d] with affine gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  detail::require_rank(gamma, 1, "layer_norm");
  detail::require_rank(beta, 1, "layer_norm");
  if (x.rank() < 1 || x.shape().back() != gamma.dim(0) || gamma.dim(0) != beta.dim(0) ||
      gamma.dim(0) == 0) {
    throw DimensionError("layer_norm: " + shape_str(x.shape()) + " with gamma " +
                         shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  const std::size_t d = gamma.dim(0), rows = x.numel() / d;
  const bool track = detail::any_requires_grad({&x, &gamma, &beta});
  Tensor out = detail::make_output(x.shape(), track);
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = gamma[j] * h + beta[j];
    }
  }
  if (track) {
    GradTape::active()->record([x, gamma, beta, out, xhat = std::move(xhat),
                                inv_std = std::move(inv_std), rows, d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (gamma.requires_grad()) {
        auto gg = gamma.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
      }
      if (beta.requires_grad()) {
        auto gb = beta.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
      if (x.requires_grad()) {
        auto gx = x.ensure_grad();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = g[r * d + j] * gamma[j];
            mean_g += gh;
            mean_gx += gh * xhat[r * d + j];
          }
          mean_g *= inv_d;
          mean_gx *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = g[r * d + j] * gamma[j];
            gx[r * d + j] += inv_std[r] * (gh - mean_g - xhat[r * d + j] * mean_gx);
          }
        }
      }
    });
  }
  return out;
}

/// Exact GELU: x * Phi(x) with the erf-based normal CDF.
inline Tensor gelu(const Tensor& x) {
  const bool track = detail::any_requires_grad({&x});
  Tensor out = detail::make_output(x.shape(), track);
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
  if (track) {
    GradTape::active()->record([x, out]() mutable {
      if (!out.has_grad()) return;
      constexpr double inv_sqrt_2pi = 0.39894228040143267794;
      const double fudge = fault_injection::corrupt_gelu_backward().load() ? 1.01 : 1.0;
      auto g = out.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        gx[i] += g[i] * (cdf + v * pdf) * fudge;
      }
    });
  }
  return out;
}

/// Identifies one row of one source tensor.
struct RowRef {
  std::uint32_t source;
  std::uint32_t row;
};

/// Builds a [rows.size(), d] matrix whose i-th row is sources[rows[i].source]
/// row rows[i].row. All sources must be [*, d]. Gathering, slicing,
/// concatenation and broadcasting of rows are all special cases.
inline Tensor assemble_rows(std::span<const Tensor> sources, std::span<const RowRef> rows) {
  if (sources.empty()) throw DimensionError("assemble_rows: no sources");
  const std::size_t d = sources[0].rank() == 2 ? sources[0].dim(1) : 0;
  bool track = false;
  for (const Tensor& s : sources) {
    if (s.rank() != 2 || s.dim(1) != d) {
      throw DimensionError("assemble_rows: source " + shape_str(s.shape()) +
                           " incompatible with width " + std::to_string(d));
    }
    track = track || detail::any_requires_grad({&s});
  }
  for (const RowRef& r : rows) {
    if (r.source >= sources.size() || r.row >= sources[r.source].dim(0)) {
      throw InputError("assemble_rows: row " + std::to_string(r.row) + " of source " +
                       std::to_string(r.source) + " out of range");
    }
  }
  Tensor out = detail::make_output({rows.size(), d}, track);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* src = sources[rows[i].source].data().data() + rows[i].row * d;
    std::copy(src, src + d, out.data().data() + i * d);
  }
  if (track) {
    GradTape::active()->record([srcs = std::vector<Tensor>(sources.begin(), sources.end()),
                                map = std::vector<RowRef>(rows.begin(), rows.end()), out,
                                d]() mutable {
      if (!out.has_grad()) return;
      for (Tensor& s : srcs)
        if (s.requires_grad()) s.ensure_grad();
      for (std::size_t i = 0; i < map.size(); ++i) {
        Tensor& s = srcs[map[i].source];
        if (!s.requires_grad()) continue;
        double* dst = s.grad().data() + map[i].row * d;
        const double* g = out.grad().data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  std::vector<RowRef> map(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) map[i] = {0, static_cast<std::uint32_t>(index[i])};
  return assemble_rows(std::span<const Tensor>(&x, 1), map);
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> index(end - begin);
  std::iota(index.begin(), index.end(), begin);
  return gather_rows(x, index);
}

inline Tensor concat_rows(std::span<const Tensor> parts) {
  std::vector<RowRef> map;
  for (std::size_t p = 0; p < parts.size(); ++p)
    for (std::size_t r = 0; r < parts[p].dim(0); ++r)
      map.push_back({static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(r)});
  return assemble_rows(parts, map);
}

/// Embedding lookup: rows of table[vocab, d] selected by token id.
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
  std::vector<std::size_t> index(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.dim(0)) {
      throw InputError("embedding: unknown token id " + std::to_string(ids[i]) +
                       " (vocabulary size " + std::to_string(table.dim(0)) + ")");
    }
    index[i] = static_cast<std::size_t>(ids[i]);
  }
  return gather_rows(table, index);
}

/// Columns `cols` of x[n, m] -> [n, cols.size()].
inline Tensor select_cols(const Tensor& x, std::span<const std::size_t> cols) {
  detail::require_rank(x, 2, "select_cols");
  const std::size_t n = x.dim(0), m = x.dim(1), w = cols.size();
  for (std::size_t c : cols)
    if (c >= m) throw InputError("select_cols: column " + std::to_string(c) + " out of range");
  const bool track = detail::any_requires_grad({&x});
  Tensor out = detail::make_output({n, w}, track);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = x[r * m + cols[j]];
  if (track) {
    GradTape::active()->record([x, out, idx = std::vector<std::size_t>(cols.begin(), cols.end()),
                                n, m, w]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < w; ++j) gx[r * m + idx[j]] += g[r * w + j];
    });
  }
  return out;
}

/// Elements idx of a rank-1 tensor.
inline Tensor select(const Tensor& x, std::span<const std::size_t> idx) {
  detail::require_rank(x, 1, "select");
  Tensor as_row = reshape(x, {1, x.dim(0)});
  return reshape(select_cols(as_row, idx), {idx.size()});
}

namespace detail {

// [batch*len, heads*dh] <-> [batch*heads, len, dh]
inline void permute_heads(const double* src, double* dst, std::size_t batch, std::size_t len,
                          std::size_t heads, std::size_t dh, bool split, bool accumulate) {
  const std::size_t d = heads * dh;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t flat = (b * len + t) * d + h * dh;
        const std::size_t headed = ((b * heads + h) * len + t) * dh;
        const double* s = src + (split ? flat : headed);
        double* o = dst + (split ? headed : flat);
        if (accumulate) {
          for (std::size_t j = 0; j < dh; ++j) o[j] += s[j];
        } else {
          std::copy(s, s + dh, o);
        }
      }
}

}  // namespace detail

/// x[batch*len, d] -> [batch*heads, len, d/heads].
inline Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  detail::require_rank(x, 2, "split_heads");
  const std::size_t d = x.dim(1);
  if (heads == 0 || d % heads != 0 || batch == 0 || x.dim(0) % batch != 0) {
    throw DimensionError("split_heads: " + shape_str(x.shape()) + " into batch " +
                         std::to_string(batch) + ", heads " + std::to_string(heads));
  }
  const std::size_t len = x.dim(0) / batch, dh = d / heads;
  const bool track = detail::any_requires_grad({&x});
  Tensor out = detail::make_output({batch * heads, len, dh}, track);
  detail::permute_heads(x.data().data(), out.data().data(), batch, len, heads, dh, true, false);
  if (track) {
    GradTape::active()->record([x, out, batch, len, heads, dh]() mutable {
      if (!out.has_grad()) return;
      detail::permute_heads(out.grad().data(), x.ensure_grad().data(), batch, len, heads, dh,
                            false, true);
    });
  }
  return out;
}

/// Inverse of split_heads: [batch*heads, len, dh] -> [batch*len, heads*dh].
inline Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  detail::require_rank(x, 3, "merge_heads");
  if (batch == 0 || heads == 0 || x.dim(0) != batch * heads) {
    throw DimensionError("merge_heads: " + shape_str(x.shape()) + " with batch " +
                         std::to_string(batch) + ", heads " + std::to_string(heads));
  }
  const std::size_t len = x.dim(1), dh = x.dim(2);
  const bool track = detail::any_requires_grad({&x});
  Tensor out = detail::make_output({batch * len, heads * dh}, track);
  detail::permute_heads(x.data().data(), out.data().data(), batch, len, heads, dh, false, false);
  if (track) {
    GradTape::active()->record([x, out, batch, len, heads, dh]() mutable {
      if (!out.has_grad()) return;
      detail::permute_heads(out.grad().data(), x.ensure_grad().data(), batch, len, heads, dh,
                            true, true);
    });
  }
  return out;
}

/// Mean negative log-likelihood of the true classes under softmax(logits).
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t b = logits.dim(0), K = logits.dim(1);
  if (labels.size() != b || b == 0) {
    throw InputError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(b) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw InputError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                       std::to_string(K) + ")");
    }
  }
  const bool track = detail::any_requires_grad({&logits});
  Tensor out = detail::make_output({1}, track);
  std::vector<double> probs(b * K);
  double total = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    const double* z = logits.data().data() + r * K;
    const double mx = *std::max_element(z, z + K);
    double s = 0.0;
    for (std::size_t c = 0; c < K; ++c) s += std::exp(z[c] - mx);
    const double log_s = std::log(s);
    for (std::size_t c = 0; c < K; ++c) probs[r * K + c] = std::exp(z[c] - mx - log_s);
    total += -(z[labels[r]] - mx - log_s);
  }
  out[0] = total / static_cast<double>(b);
  if (track) {
    GradTape::active()->record([logits, out, probs = std::move(probs),
                                y = std::vector<int>(labels.begin(), labels.end()), b,
                                K]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] / static_cast<double>(b);
      auto gl = logits.ensure_grad();
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t c = 0; c < K; ++c)
          gl[r * K + c] += g * (probs[r * K + c] - (static_cast<int>(c) == y[r] ? 1.0 : 0.0));
    });
  }
  return out;
}

/// Plain stable softmax of a vector of logits.
inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double s = 0.0;
  for (double& v : p) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : p) v /= s;
  return p;
}

}  // namespace mopebaf

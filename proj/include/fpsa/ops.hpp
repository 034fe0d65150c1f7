#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fpsa/autodiff.hpp"
#include "fpsa/tensor.hpp"

namespace fpsa {
namespace ops {

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<EMat<T>>;
template <typename T>
using MapCM = Eigen::Map<const EMat<T>>;

// C (m x n) += or = A (m x k) * B (k x n), row-major raw buffers.
template <typename T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  MapCM<T> A(a, m, k);
  MapCM<T> B(b, k, n);
  MapM<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  // C (m x n) = A (m x k) * B^T where B is (n x k)
  MapCM<T> A(a, m, k);
  MapCM<T> B(b, n, k);
  MapM<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  // C (m x n) = A^T * B where A is (k x m), B is (k x n)
  MapCM<T> A(a, k, m);
  MapCM<T> B(b, k, n);
  MapM<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

inline int64_t leading_numel(const Shape& s, int upto) {
  int64_t n = 1;
  for (int i = 0; i < upto; ++i) n *= s[i];
  return n;
}

template <typename T>
void accum_into(Node<T>& p, const Tensor<T>& g) {
  p.ensure_grad();
  for (int64_t i = 0; i < g.numel(); ++i) p.grad[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: a [..., M, K] x b, where b is either a rank-2 weight [K, N] shared
// over the leading batch dims of a, or has the same leading dims as a.
// ---------------------------------------------------------------------------
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& A = a->value;
  const Tensor<T>& B = b->value;
  if (A.rank() < 2 || B.rank() < 2)
    throw ShapeError("matmul needs rank >= 2, got " + shape_str(A.shape) + " and " +
                     shape_str(B.shape));
  const int64_t K = A.shape[A.rank() - 1];
  const int64_t M = A.shape[A.rank() - 2];
  const bool weight_case = (B.rank() == 2);
  if (!weight_case) {
    if (B.rank() != A.rank() ||
        !std::equal(A.shape.begin(), A.shape.end() - 2, B.shape.begin()))
      throw ShapeError("matmul batch dims mismatch: " + shape_str(A.shape) + " vs " +
                       shape_str(B.shape));
  }
  if (B.shape[B.rank() - 2] != K)
    throw ShapeError("matmul inner dims disagree: " + shape_str(A.shape) + " vs " +
                     shape_str(B.shape));
  const int64_t N = B.shape[B.rank() - 1];
  const int64_t batch = detail::leading_numel(A.shape, A.rank() - 2);

  Shape out_shape(A.shape.begin(), A.shape.end() - 1);
  out_shape.push_back(N);
  Tensor<T> out(out_shape);
  if (weight_case) {
    detail::gemm(A.data.data(), B.data.data(), out.data.data(), batch * M, K, N, false);
  } else {
    for (int64_t i = 0; i < batch; ++i)
      detail::gemm(A.data.data() + i * M * K, B.data.data() + i * K * N,
                   out.data.data() + i * M * N, M, K, N, false);
  }

  return attach<T>(std::move(out), {a, b}, [M, K, N, batch, weight_case](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const T* g = self.grad.data.data();
    if (pa.requires_grad) {
      pa.ensure_grad();
      if (weight_case) {
        detail::gemm_nt(g, pb.value.data.data(), pa.grad.data.data(), batch * M, N, K, true);
      } else {
        for (int64_t i = 0; i < batch; ++i)
          detail::gemm_nt(g + i * M * N, pb.value.data.data() + i * K * N,
                          pa.grad.data.data() + i * M * K, M, N, K, true);
      }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      if (weight_case) {
        detail::gemm_tn(pa.value.data.data(), g, pb.grad.data.data(), K, batch * M, N, true);
      } else {
        for (int64_t i = 0; i < batch; ++i)
          detail::gemm_tn(pa.value.data.data() + i * M * K, g + i * M * N,
                          pb.grad.data.data() + i * K * N, K, M, N, true);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// elementwise / shape ops
// ---------------------------------------------------------------------------

// add with optional suffix broadcast: b.shape must equal a.shape or a tail of
// it (bias over leading dims).
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>&A = a->value, &B = b->value;
  const int64_t bn = B.numel();
  bool suffix = false;
  if (A.shape != B.shape) {
    if (B.rank() > A.rank() ||
        !std::equal(B.shape.rbegin(), B.shape.rend(), A.shape.rbegin()))
      throw ShapeError("add shapes incompatible: " + shape_str(A.shape) + " vs " +
                       shape_str(B.shape));
    suffix = true;
  }
  Tensor<T> out(A.shape);
  for (int64_t i = 0; i < A.numel(); ++i) out[i] = A[i] + B[i % bn];
  return attach<T>(std::move(out), {a, b}, [bn, suffix](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) detail::accum_into(pa, self.grad);
    if (pb.requires_grad) {
      pb.ensure_grad();
      if (!suffix) {
        for (int64_t i = 0; i < self.grad.numel(); ++i) pb.grad[i] += self.grad[i];
      } else {
        for (int64_t i = 0; i < self.grad.numel(); ++i) pb.grad[i % bn] += self.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>&A = a->value, &B = b->value;
  if (A.shape != B.shape)
    throw ShapeError("sub shapes differ: " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  Tensor<T> out(A.shape);
  for (int64_t i = 0; i < A.numel(); ++i) out[i] = A[i] - B[i];
  return attach<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) detail::accum_into(pa, self.grad);
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>&A = a->value, &B = b->value;
  if (A.shape != B.shape)
    throw ShapeError("mul shapes differ: " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  Tensor<T> out(A.shape);
  for (int64_t i = 0; i < A.numel(); ++i) out[i] = A[i] * B[i];
  return attach<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i)
        pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i)
        pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, double s) {
  Tensor<T> out(x->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(x->value[i] * s);
  return attach<T>(std::move(out), {x}, [s](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      p.grad[i] += static_cast<T>(self.grad[i] * s);
  });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> out(x->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(x->value[i]);
  return attach<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      T y = self.value[i];
      p.grad[i] += self.grad[i] * (T(1) - y * y);
    }
  });
}

// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865476;
  Tensor<T> out(x->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i) {
    double v = static_cast<double>(x->value[i]);
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  return attach<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    constexpr double inv_sqrt2 = 0.7071067811865476;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      double v = static_cast<double>(p.value[i]);
      double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      p.grad[i] += static_cast<T>(static_cast<double>(self.grad[i]) * (cdf + v * pdf));
    }
  });
}

template <typename T>
Var<T> softplus(const Var<T>& x) {
  Tensor<T> out(x->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i) {
    double v = static_cast<double>(x->value[i]);
    out[i] = static_cast<T>(v > 20.0 ? v : std::log1p(std::exp(v)));
  }
  return attach<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      double v = static_cast<double>(p.value[i]);
      double sig = 1.0 / (1.0 + std::exp(-v));
      p.grad[i] += static_cast<T>(static_cast<double>(self.grad[i]) * sig);
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x->value.numel())
    throw ShapeError("reshape " + shape_str(x->value.shape) + " -> " + shape_str(new_shape) +
                     " changes element count");
  Tensor<T> out(std::move(new_shape), x->value.data);
  return attach<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i) p.grad[i] += self.grad[i];
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x, std::vector<int> perm) {
  const Tensor<T>& X = x->value;
  const int r = X.rank();
  if (static_cast<int>(perm.size()) != r)
    throw ShapeError("transpose perm size " + std::to_string(perm.size()) +
                     " does not match rank " + std::to_string(r));
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = X.shape[normalize_axis(perm[i], r)];
  auto in_strides = shape_strides(X.shape);
  auto out_strides = shape_strides(out_shape);
  Tensor<T> out(out_shape);
  std::vector<int64_t> idx(r, 0);
  for (int64_t o = 0; o < out.numel(); ++o) {
    int64_t rem = o, src = 0;
    for (int i = 0; i < r; ++i) {
      int64_t c = rem / out_strides[i];
      rem %= out_strides[i];
      src += c * in_strides[perm[i]];
    }
    out[o] = X[src];
  }
  return attach<T>(std::move(out), {x},
                   [perm = std::move(perm), in_strides, out_strides, r](Node<T>& self) {
                     auto& p = *self.parents[0];
                     if (!p.requires_grad) return;
                     p.ensure_grad();
                     for (int64_t o = 0; o < self.grad.numel(); ++o) {
                       int64_t rem = o, src = 0;
                       for (int i = 0; i < r; ++i) {
                         int64_t c = rem / out_strides[i];
                         rem %= out_strides[i];
                         src += c * in_strides[perm[i]];
                       }
                       p.grad[src] += self.grad[o];
                     }
                   });
}

template <typename T>
Var<T> slice(const Var<T>& x, int axis, int64_t start, int64_t len) {
  const Tensor<T>& X = x->value;
  const int a = normalize_axis(axis, X.rank());
  if (start < 0 || len <= 0 || start + len > X.shape[a])
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of range on axis " + std::to_string(axis) + " of " +
                     shape_str(X.shape));
  Shape out_shape = X.shape;
  out_shape[a] = len;
  const int64_t inner = detail::leading_numel(X.shape, X.rank()) /
                        detail::leading_numel(X.shape, a + 1);
  const int64_t outer = detail::leading_numel(X.shape, a);
  const int64_t L = X.shape[a];
  Tensor<T> out(out_shape);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < len; ++j)
      for (int64_t i = 0; i < inner; ++i)
        out[(o * len + j) * inner + i] = X[(o * L + start + j) * inner + i];
  return attach<T>(std::move(out), {x}, [start, len, inner, outer, L](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < len; ++j)
        for (int64_t i = 0; i < inner; ++i)
          p.grad[(o * L + start + j) * inner + i] += self.grad[(o * len + j) * inner + i];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int r = parts[0]->value.rank();
  const int a = normalize_axis(axis, r);
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p->value.rank() != r)
      throw ShapeError("concat rank mismatch: " + shape_str(parts[0]->value.shape) + " vs " +
                       shape_str(p->value.shape));
    for (int i = 0; i < r; ++i)
      if (i != a && p->value.shape[i] != parts[0]->value.shape[i])
        throw ShapeError("concat shapes differ off-axis: " + shape_str(parts[0]->value.shape) +
                         " vs " + shape_str(p->value.shape));
    total += p->value.shape[a];
  }
  Shape out_shape = parts[0]->value.shape;
  out_shape[a] = total;
  const int64_t outer = detail::leading_numel(out_shape, a);
  const int64_t inner = shape_numel(out_shape) / (outer * total);
  Tensor<T> out(out_shape);
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const int64_t L = p->value.shape[a];
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < L; ++j)
        for (int64_t i = 0; i < inner; ++i)
          out[(o * total + off + j) * inner + i] = p->value[(o * L + j) * inner + i];
    off += L;
  }
  return attach<T>(std::move(out), std::vector<Var<T>>(parts),
                   [offsets, outer, inner, total, a](Node<T>& self) {
                     for (size_t k = 0; k < self.parents.size(); ++k) {
                       auto& p = *self.parents[k];
                       if (!p.requires_grad) continue;
                       p.ensure_grad();
                       const int64_t L = p.value.shape[a];
                       const int64_t off = offsets[k];
                       for (int64_t o = 0; o < outer; ++o)
                         for (int64_t j = 0; j < L; ++j)
                           for (int64_t i = 0; i < inner; ++i)
                             p.grad[(o * L + j) * inner + i] +=
                                 self.grad[(o * total + off + j) * inner + i];
                     }
                   });
}

// ---------------------------------------------------------------------------
// softmax / layer norm / loss
// ---------------------------------------------------------------------------

// Max-subtracted softmax along an axis.
template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
  const Tensor<T>& X = x->value;
  const int a = normalize_axis(axis, X.rank());
  const int64_t L = X.shape[a];
  const int64_t outer = detail::leading_numel(X.shape, a);
  const int64_t inner = X.numel() / (outer * L);
  Tensor<T> out(X.shape);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * L * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t k = 0; k < L; ++k)
        mx = std::max(mx, static_cast<double>(X[base + k * inner]));
      double denom = 0;
      for (int64_t k = 0; k < L; ++k) {
        double e = std::exp(static_cast<double>(X[base + k * inner]) - mx);
        out[base + k * inner] = static_cast<T>(e);
        denom += e;
      }
      for (int64_t k = 0; k < L; ++k)
        out[base + k * inner] = static_cast<T>(out[base + k * inner] / denom);
    }
  }
  return attach<T>(std::move(out), {x}, [L, outer, inner](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t base = o * L * inner + i;
        double dot = 0;
        for (int64_t k = 0; k < L; ++k)
          dot += static_cast<double>(self.grad[base + k * inner]) *
                 static_cast<double>(self.value[base + k * inner]);
        for (int64_t k = 0; k < L; ++k) {
          const int64_t idx = base + k * inner;
          p.grad[idx] += static_cast<T>(static_cast<double>(self.value[idx]) *
                                        (static_cast<double>(self.grad[idx]) - dot));
        }
      }
    }
  });
}

// LayerNorm over the last axis with affine gain/bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps = 1e-5) {
  if (eps <= 0) throw ConfigError("layer_norm eps must be positive");
  const Tensor<T>& X = x->value;
  const int64_t C = X.shape[X.rank() - 1];
  if (gain->value.numel() != C || bias->value.numel() != C)
    throw ShapeError("layer_norm affine params must match last dim " + std::to_string(C));
  const int64_t rows = X.numel() / C;
  Tensor<T> out(X.shape);
  Tensor<T> xhat(X.shape);
  std::vector<double> inv_std(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t base = r * C;
    double mean = 0;
    for (int64_t c = 0; c < C; ++c) mean += static_cast<double>(X[base + c]);
    mean /= C;
    double var = 0;
    for (int64_t c = 0; c < C; ++c) {
      double d = static_cast<double>(X[base + c]) - mean;
      var += d * d;
    }
    var /= C;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (int64_t c = 0; c < C; ++c) {
      double xh = (static_cast<double>(X[base + c]) - mean) * inv_std[r];
      xhat[base + c] = static_cast<T>(xh);
      out[base + c] = static_cast<T>(xh * static_cast<double>(gain->value[c]) +
                                     static_cast<double>(bias->value[c]));
    }
  }
  return attach<T>(std::move(out), {x, gain, bias},
                   [C, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                     auto& px = *self.parents[0];
                     auto& pg = *self.parents[1];
                     auto& pb = *self.parents[2];
                     if (pg.requires_grad) pg.ensure_grad();
                     if (pb.requires_grad) pb.ensure_grad();
                     if (px.requires_grad) px.ensure_grad();
                     for (int64_t r = 0; r < rows; ++r) {
                       const int64_t base = r * C;
                       double mean_dxh = 0, mean_dxh_xh = 0;
                       for (int64_t c = 0; c < C; ++c) {
                         double gy = static_cast<double>(self.grad[base + c]);
                         double xh = static_cast<double>(xhat[base + c]);
                         if (pg.requires_grad) pg.grad[c] += static_cast<T>(gy * xh);
                         if (pb.requires_grad) pb.grad[c] += static_cast<T>(gy);
                         double dxh = gy * static_cast<double>(pg.value[c]);
                         mean_dxh += dxh;
                         mean_dxh_xh += dxh * xh;
                       }
                       if (!px.requires_grad) continue;
                       mean_dxh /= C;
                       mean_dxh_xh /= C;
                       for (int64_t c = 0; c < C; ++c) {
                         double gy = static_cast<double>(self.grad[base + c]);
                         double xh = static_cast<double>(xhat[base + c]);
                         double dxh = gy * static_cast<double>(pg.value[c]);
                         px.grad[base + c] +=
                             static_cast<T>(inv_std[r] * (dxh - mean_dxh - xh * mean_dxh_xh));
                       }
                     }
                   });
}

// Mean negative log-softmax of the target class over the batch.
template <typename T>
Var<T> cross_entropy_logits(const Var<T>& logits, const std::vector<int64_t>& targets) {
  const Tensor<T>& Z = logits->value;
  if (Z.rank() != 2)
    throw ShapeError("cross_entropy_logits expects [batch, classes], got " + shape_str(Z.shape));
  const int64_t B = Z.shape[0], C = Z.shape[1];
  if (static_cast<int64_t>(targets.size()) != B)
    throw ShapeError("cross_entropy_logits target count " + std::to_string(targets.size()) +
                     " does not match batch " + std::to_string(B));
  for (int64_t t : targets)
    if (t < 0 || t >= C)
      throw DataError("target class " + std::to_string(t) + " outside [0, " + std::to_string(C) +
                      ")");
  double loss = 0;
  Tensor<T> probs({B, C});
  for (int64_t b = 0; b < B; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(Z[b * C + c]));
    double denom = 0;
    for (int64_t c = 0; c < C; ++c) denom += std::exp(static_cast<double>(Z[b * C + c]) - mx);
    for (int64_t c = 0; c < C; ++c)
      probs[b * C + c] =
          static_cast<T>(std::exp(static_cast<double>(Z[b * C + c]) - mx) / denom);
    loss -= (static_cast<double>(Z[b * C + targets[b]]) - mx - std::log(denom));
  }
  loss /= B;
  return attach<T>(Tensor<T>::scalar(static_cast<T>(loss)), {logits},
                   [B, C, probs = std::move(probs), targets](Node<T>& self) {
                     auto& p = *self.parents[0];
                     if (!p.requires_grad) return;
                     p.ensure_grad();
                     const double g0 = static_cast<double>(self.grad[0]) / B;
                     for (int64_t b = 0; b < B; ++b)
                       for (int64_t c = 0; c < C; ++c) {
                         double delta = (c == targets[b]) ? 1.0 : 0.0;
                         p.grad[b * C + c] +=
                             static_cast<T>(g0 * (static_cast<double>(probs[b * C + c]) - delta));
                       }
                   });
}

// ---------------------------------------------------------------------------
// reductions, lookups
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  double s = 0;
  for (int64_t i = 0; i < x->value.numel(); ++i) s += static_cast<double>(x->value[i]);
  return attach<T>(Tensor<T>::scalar(static_cast<T>(s)), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += self.grad[0];
  });
}

template <typename T>
Var<T> mean_axis(const Var<T>& x, int axis) {
  const Tensor<T>& X = x->value;
  const int a = normalize_axis(axis, X.rank());
  const int64_t L = X.shape[a];
  const int64_t outer = detail::leading_numel(X.shape, a);
  const int64_t inner = X.numel() / (outer * L);
  Shape out_shape;
  for (int i = 0; i < X.rank(); ++i)
    if (i != a) out_shape.push_back(X.shape[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<T> out(out_shape);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      double s = 0;
      for (int64_t k = 0; k < L; ++k) s += static_cast<double>(X[(o * L + k) * inner + i]);
      out[o * inner + i] = static_cast<T>(s / L);
    }
  return attach<T>(std::move(out), {x}, [L, outer, inner](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        T g = static_cast<T>(self.grad[o * inner + i] / static_cast<T>(L));
        for (int64_t k = 0; k < L; ++k) p.grad[(o * L + k) * inner + i] += g;
      }
  });
}

// Row lookup: out[b, n, :] = table[idx[b, n], :].
template <typename T>
Var<T> embedding(const Var<T>& table, const Tensor<int64_t>& idx) {
  const Tensor<T>& W = table->value;
  if (W.rank() != 2) throw ShapeError("embedding table must be rank 2");
  const int64_t V = W.shape[0], C = W.shape[1];
  for (int64_t i = 0; i < idx.numel(); ++i)
    if (idx[i] < 0 || idx[i] >= V)
      throw DataError("embedding index " + std::to_string(idx[i]) + " outside [0, " +
                      std::to_string(V) + ")");
  Shape out_shape = idx.shape;
  out_shape.push_back(C);
  Tensor<T> out(out_shape);
  for (int64_t i = 0; i < idx.numel(); ++i)
    std::copy_n(W.data.begin() + idx[i] * C, C, out.data.begin() + i * C);
  return attach<T>(std::move(out), {table}, [idx, C](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t i = 0; i < idx.numel(); ++i)
      for (int64_t c = 0; c < C; ++c) p.grad[idx[i] * C + c] += self.grad[i * C + c];
  });
}

// ---------------------------------------------------------------------------
// attention-specific scalar plumbing
// ---------------------------------------------------------------------------

// y_h = k / tau_h (per-head softmax temperature -> score scale).
template <typename T>
Var<T> recip_scaled(const Var<T>& tau, double k) {
  Tensor<T> out(tau->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<T>(k / static_cast<double>(tau->value[i]));
  return attach<T>(std::move(out), {tau}, [k](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      double t = static_cast<double>(p.value[i]);
      p.grad[i] += static_cast<T>(-k / (t * t) * static_cast<double>(self.grad[i]));
    }
  });
}

// out[b, h, i, j] = x[b, h, i, j] * s[h].
template <typename T>
Var<T> scale_per_head(const Var<T>& x, const Var<T>& s) {
  const Tensor<T>& X = x->value;
  if (X.rank() != 4) throw ShapeError("scale_per_head expects [B, H, N, M]");
  const int64_t H = X.shape[1];
  if (s->value.numel() != H)
    throw ShapeError("scale_per_head: got " + std::to_string(s->value.numel()) +
                     " scales for " + std::to_string(H) + " heads");
  const int64_t B = X.shape[0], NM = X.shape[2] * X.shape[3];
  Tensor<T> out(X.shape);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < H; ++h) {
      const T sh = s->value[h];
      const int64_t base = (b * H + h) * NM;
      for (int64_t i = 0; i < NM; ++i) out[base + i] = X[base + i] * sh;
    }
  return attach<T>(std::move(out), {x, s}, [B, H, NM](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& ps = *self.parents[1];
    if (px.requires_grad) px.ensure_grad();
    if (ps.requires_grad) ps.ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < H; ++h) {
        const int64_t base = (b * H + h) * NM;
        if (px.requires_grad) {
          const T sh = ps.value[h];
          for (int64_t i = 0; i < NM; ++i) px.grad[base + i] += self.grad[base + i] * sh;
        }
        if (ps.requires_grad) {
          double acc = 0;
          for (int64_t i = 0; i < NM; ++i)
            acc += static_cast<double>(self.grad[base + i]) *
                   static_cast<double>(px.value[base + i]);
          ps.grad[h] += static_cast<T>(acc);
        }
      }
  });
}

// sigma = u^T W v with constant direction vectors (power-iteration state).
template <typename T>
Var<T> bilinear_form(const Var<T>& w, const Tensor<T>& u, const Tensor<T>& v) {
  const Tensor<T>& W = w->value;
  if (W.rank() != 2 || u.numel() != W.shape[0] || v.numel() != W.shape[1])
    throw ShapeError("bilinear_form dims mismatch for " + shape_str(W.shape));
  const int64_t R = W.shape[0], C = W.shape[1];
  double s = 0;
  for (int64_t r = 0; r < R; ++r) {
    double row = 0;
    for (int64_t c = 0; c < C; ++c)
      row += static_cast<double>(W[r * C + c]) * static_cast<double>(v[c]);
    s += static_cast<double>(u[r]) * row;
  }
  return attach<T>(Tensor<T>::scalar(static_cast<T>(s)), {w}, [u, v, R, C](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const T g = self.grad[0];
    for (int64_t r = 0; r < R; ++r)
      for (int64_t c = 0; c < C; ++c) p.grad[r * C + c] += g * u[r] * v[c];
  });
}

// W / max(sigma, 1): spectral normalization only ever shrinks.
template <typename T>
Var<T> spectral_scale(const Var<T>& w, const Var<T>& sigma) {
  if (sigma->value.numel() != 1) throw ShapeError("spectral_scale sigma must be scalar");
  const double s = static_cast<double>(sigma->value[0]);
  const double denom = std::max(s, 1.0);
  Tensor<T> out(w->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<T>(static_cast<double>(w->value[i]) / denom);
  return attach<T>(std::move(out), {w, sigma}, [s, denom](Node<T>& self) {
    auto& pw = *self.parents[0];
    auto& ps = *self.parents[1];
    if (pw.requires_grad) {
      pw.ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i)
        pw.grad[i] += static_cast<T>(static_cast<double>(self.grad[i]) / denom);
    }
    if (ps.requires_grad && s > 1.0) {
      ps.ensure_grad();
      double acc = 0;
      for (int64_t i = 0; i < self.grad.numel(); ++i)
        acc += static_cast<double>(self.grad[i]) * static_cast<double>(pw.value[i]);
      ps.grad[0] += static_cast<T>(-acc / (s * s));
    }
  });
}

// x @ W + b for x [..., in], W [in, out], b [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add(matmul(x, w), b);
}

}  // namespace ops
}  // namespace fpsa

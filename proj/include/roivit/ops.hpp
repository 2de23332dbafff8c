#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "roivit/tensor.hpp"

namespace roivit {

namespace testing_hooks {
// Negates the GELU backward rule. Exists only so the gradient checker can be
// shown to catch a broken rule.
inline std::atomic<bool> negate_gelu_grad{false};
}  // namespace testing_hooks

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

inline std::size_t last_extent(const Shape& s, const char* op) {
  if (s.empty()) throw ShapeError(std::string(op) + ": rank-0 tensor");
  return s.back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (T* g = detail::grad_sink(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = detail::grad_sink(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [](Node<T>& self) {
    const auto& x = self.inputs[0]->data;
    const auto& y = self.inputs[1]->data;
    if (T* g = detail::grad_sink(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (T* g = detail::grad_sink(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {a}, [factor](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

// x[..., C] + bias[C], bias broadcast over every leading position.
template <class T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t c = detail::last_extent(x.shape(), "add_row");
  if (bias.numel() != c) {
    throw ShapeError("add_row: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  auto xd = x.data(), bd = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + bd[i % c];
  return detail::make_result<T>(x.shape(), std::move(out), "add_row", {x, bias}, [c](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = detail::grad_sink(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % c] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  return detail::make_result<T>(x.shape(), std::move(out), "relu", {x}, [](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0)) {
      const auto& xd = self.inputs[0]->data;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (xd[i] > T(0)) g[i] += self.grad[i];
      }
    }
  });
}

// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xd = x.data();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(0.5) * xd[i] * (T(1) + std::erf(xd[i] * inv_sqrt2));
  }
  return detail::make_result<T>(x.shape(), std::move(out), "gelu", {x}, [inv_sqrt2](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0)) {
      const auto& xd = self.inputs[0]->data;
      const T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
      const T sign = testing_hooks::negate_gelu_grad.load() ? T(-1) : T(1);
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(xd[i] * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * xd[i] * xd[i]);
        g[i] += sign * self.grad[i] * (cdf + xd[i] * pdf);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;  // wide accumulator keeps f32 finite differences clean
  for (T v : x.data()) acc += static_cast<double>(v);
  return detail::make_result<T>({1}, {static_cast<T>(acc)}, "sum", {x}, [](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0)) {
      const std::size_t n = self.inputs[0]->data.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Softmax cross-entropy of a single logit vector against a class index.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t label) {
  const std::size_t k = logits.numel();
  if (label >= k) {
    throw UsageError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                     std::to_string(k) + " classes");
  }
  auto z = logits.data();
  T mx = z[0];
  for (T v : z) mx = std::max(mx, v);
  T denom = T(0);
  for (T v : z) denom += std::exp(v - mx);
  const T loss = std::log(denom) + mx - z[label];
  return detail::make_result<T>({1}, {loss}, "cross_entropy", {logits}, [label, mx, denom](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0)) {
      const auto& z = self.inputs[0]->data;
      for (std::size_t i = 0; i < z.size(); ++i) {
        const T p = std::exp(z[i] - mx) / denom;
        g[i] += self.grad[0] * (p - (i == label ? T(1) : T(0)));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return detail::make_result<T>(std::move(shape), x.to_vector(), "reshape", {x}, [](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// General axis permutation: out.shape[i] = x.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute: rank mismatch for " + shape_str(x.shape()));
  Shape out_shape(r);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.dim(i);
  std::vector<bool> seen(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || seen[perm[i]]) throw ShapeError("permute: invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = x.dim(perm[i]);
  }
  // moving only unit axes leaves the element order intact
  std::size_t last = 0;
  bool order_kept = true;
  for (std::size_t i = 0; i < r; ++i) {
    if (x.dim(perm[i]) == 1) continue;
    if (perm[i] < last) order_kept = false;
    last = perm[i];
  }
  if (order_kept) return reshape(x, out_shape);
  // source offset for each destination element
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[perm[i]];
    src[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> out(n);
  auto xd = x.data();
  for (std::size_t o = 0; o < n; ++o) out[o] = xd[src[o]];
  return detail::make_result<T>(out_shape, std::move(out), "permute", {x},
                                [src = std::move(src)](Node<T>& self) {
                                  if (T* g = detail::grad_sink(self, 0)) {
                                    for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += self.grad[o];
                                  }
                                });
}

template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: rank < 2 for " + shape_str(x.shape()));
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

namespace detail {

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
    if (!ok) throw ShapeError("concat: extent mismatch " + shape_str(ref) + " vs " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  const auto split = detail::split_at(out_shape, axis);
  std::vector<T> out(numel_of(out_shape));
  std::vector<std::size_t> offsets, exts;
  std::size_t at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    exts.push_back(p.dim(axis));
    const std::size_t ext = p.dim(axis);
    auto pd = p.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(pd.begin() + o * ext * split.inner, ext * split.inner,
                  out.begin() + (o * split.extent + at) * split.inner);
    }
    at += ext;
  }
  return detail::make_result<T>(out_shape, std::move(out), "concat", parts,
                                [split, offsets, exts](Node<T>& self) {
                                  for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                    T* g = detail::grad_sink(self, k);
                                    if (!g) continue;
                                    const std::size_t ext = exts[k];
                                    for (std::size_t o = 0; o < split.outer; ++o) {
                                      const T* src = self.grad.data() + (o * split.extent + offsets[k]) * split.inner;
                                      T* dst = g + o * ext * split.inner;
                                      for (std::size_t i = 0; i < ext * split.inner; ++i) dst[i] += src[i];
                                    }
                                  }
                                });
}

// Half-open range [begin, end) along axis.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const auto split = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t ext = end - begin;
  std::vector<T> out(numel_of(out_shape));
  auto xd = x.data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(xd.begin() + (o * split.extent + begin) * split.inner, ext * split.inner,
                out.begin() + o * ext * split.inner);
  }
  return detail::make_result<T>(out_shape, std::move(out), "slice", {x}, [split, begin, ext](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0)) {
      for (std::size_t o = 0; o < split.outer; ++o) {
        const T* src = self.grad.data() + o * ext * split.inner;
        T* dst = g + (o * split.extent + begin) * split.inner;
        for (std::size_t i = 0; i < ext * split.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

// C = alpha op(A) op(B) + beta C, row-major with explicit leading
// dimensions; op(A) is m x k and op(B) is k x n. beta is 0 or 1.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* A,
          std::size_t lda, const T* B, std::size_t ldb, T beta, T* C, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstView = Eigen::Map<const Matrix, 0, Eigen::OuterStride<>>;
  using View = Eigen::Map<Matrix, 0, Eigen::OuterStride<>>;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  View c(C, ei(m), ei(n), Eigen::OuterStride<>(ei(ldc)));
  if (beta == T(0)) c.setZero();
  if (k == 0) return;
  const ConstView a(A, ei(trans_a ? k : m), ei(trans_a ? m : k), Eigen::OuterStride<>(ei(lda)));
  const ConstView b(B, ei(trans_b ? n : k), ei(trans_b ? k : n), Eigen::OuterStride<>(ei(ldb)));
  if (m == 1 || n == 1) {
    // a single row or column: summed in index order
    for (Eigen::Index i = 0; i < ei(m); ++i) {
      for (Eigen::Index j = 0; j < ei(n); ++j) {
        T acc = T(0);
        for (Eigen::Index l = 0; l < ei(k); ++l) {
          acc += (trans_a ? a(l, i) : a(i, l)) * (trans_b ? b(j, l) : b(l, j));
        }
        c(i, j) += alpha * acc;
      }
    }
    return;
  }
  // The packed kernel's summation order depends only on the extents, never
  // on buffer addresses.
  const auto packed = [&](const auto& lhs, const auto& rhs) {
    using Lhs = std::decay_t<decltype(lhs)>;
    using Rhs = std::decay_t<decltype(rhs)>;
    Eigen::internal::generic_product_impl<Lhs, Rhs, Eigen::DenseShape, Eigen::DenseShape,
                                          Eigen::GemmProduct>::scaleAndAddTo(c, lhs, rhs, alpha);
  };
  if (!trans_a && !trans_b) {
    packed(a, b);
  } else if (!trans_a) {
    packed(a, b.transpose());
  } else if (!trans_b) {
    packed(a.transpose(), b);
  } else {
    packed(a.transpose(), b.transpose());
  }
}

// C[m, p] += op(A) * op(B) for densely packed row-major operands, where op
// transposes when requested. op(A) is m x k and op(B) is k x p.
template <class T>
void gemm_accumulate(bool trans_a, bool trans_b, const T* A, const T* B, T* C, std::size_t m, std::size_t k,
                     std::size_t p) {
  gemm(trans_a, trans_b, m, p, k, T(1), A, trans_a ? m : k, B, trans_b ? k : p, T(1), C, p);
}

}  // namespace detail

// a[..., M, K] x b[..., K, P]. Leading batch axes must match, or one operand
// is a plain matrix and is broadcast over the other's batch.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands must be at least rank 2, got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t k2 = b.dim(b.rank() - 2), p = b.dim(b.rank() - 1);
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  const bool a_bcast = batch_a.empty(), b_bcast = batch_b.empty();
  if (k != k2 || (!a_bcast && !b_bcast && batch_a != batch_b)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape& batch = a_bcast ? batch_b : batch_a;
  const std::size_t nb = numel_of(batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(p);
  std::vector<T> out(nb * m * p, T(0));
  auto ad = a.data(), bd = b.data();
  for (std::size_t s = 0; s < nb; ++s) {
    detail::gemm_accumulate(false, false, ad.data() + (a_bcast ? 0 : s * m * k),
                            bd.data() + (b_bcast ? 0 : s * k * p), out.data() + s * m * p, m, k, p);
  }
  return detail::make_result<T>(out_shape, std::move(out), "matmul", {a, b},
                                [m, k, p, nb, a_bcast, b_bcast](Node<T>& self) {
                                  const T* A0 = self.inputs[0]->data.data();
                                  const T* B0 = self.inputs[1]->data.data();
                                  T* ga = detail::grad_sink(self, 0);
                                  T* gb = detail::grad_sink(self, 1);
                                  for (std::size_t s = 0; s < nb; ++s) {
                                    const T* A = A0 + (a_bcast ? 0 : s * m * k);
                                    const T* B = B0 + (b_bcast ? 0 : s * k * p);
                                    const T* G = self.grad.data() + s * m * p;
                                    if (ga) {
                                      // dA += G B^T
                                      detail::gemm_accumulate(false, true, G, B, ga + (a_bcast ? 0 : s * m * k), m,
                                                              p, k);
                                    }
                                    if (gb) {
                                      // dB += A^T G
                                      detail::gemm_accumulate(true, false, A, G, gb + (b_bcast ? 0 : s * k * p), k,
                                                              m, p);
                                    }
                                  }
                                });
}

// Affine map over the last axis: x[..., In] W[In, Out] (+ b[Out]).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  return matmul(x, w);
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_row(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Normalization

namespace detail {

// e^x for x <= 0 in float with branch-free, vectorizable code: x = n ln 2 + y
// with |y| <= ln(2) / 2, e^y by its degree-7 Taylor polynomial, 2^n through
// the exponent bits. Inputs below -87 give values under 2^-125, not zero.
// Among non-positive floats a larger bit pattern is a more negative value.
inline float exp_nonpositive(float x) {
  constexpr std::uint32_t floor_bits = 0xC2AE0000u;  // -87.0f
  std::uint32_t xb = std::bit_cast<std::uint32_t>(x);
  xb = xb > floor_bits ? floor_bits : xb;
  x = std::bit_cast<float>(xb);
  const float t = x * 1.44269504088896341f;
  const float n = (t + 12582912.0f) - 12582912.0f;
  // x - n ln 2 with ln 2 split into an exactly representable head and a tail
  const float y = std::fma(-n, -2.12194440e-4f, std::fma(-n, 0.693359375f, x));
  float p = 1.0f / 5040.0f;
  p = p * y + 1.0f / 720.0f;
  p = p * y + 1.0f / 120.0f;
  p = p * y + 1.0f / 24.0f;
  p = p * y + 1.0f / 6.0f;
  p = p * y + 0.5f;
  p = p * y + 1.0f;
  p = p * y + 1.0f;
  const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

inline double exp_nonpositive(double x) { return std::exp(x); }

// out = softmax(in) over n entries, with the row maximum subtracted first.
template <class T>
void softmax_row(const T* in, T* out, std::size_t n) {
  using Row = Eigen::Array<T, Eigen::Dynamic, 1>;
  const T mx = Eigen::Map<const Row>(in, static_cast<Eigen::Index>(n)).maxCoeff();
  for (std::size_t j = 0; j < n; ++j) out[j] = exp_nonpositive(in[j] - mx);
  // sixteen interleaved partial sums combined in a fixed order
  std::array<T, 16> lanes{};
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) {
    for (std::size_t l = 0; l < 16; ++l) lanes[l] += out[j + l];
  }
  for (std::size_t l = 0; l < 16 && j + l < n; ++l) lanes[l] += out[j + l];
  T denom = T(0);
  for (T v : lanes) denom += v;
  const T inv = T(1) / denom;
  for (std::size_t i = 0; i < n; ++i) out[i] *= inv;
}

}  // namespace detail

template <class T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  const std::size_t n = detail::last_extent(x.shape(), "softmax_last");
  if (n == 0) throw ShapeError("softmax_last: empty last axis");
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) detail::softmax_row(xd.data() + r * n, out.data() + r * n, n);
  return detail::make_result<T>(x.shape(), std::move(out), "softmax_last", {x}, [n, rows](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self.data.data() + r * n;
        const T* dy = self.grad.data() + r * n;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
      }
    }
  });
}

// softmax(q k^T / sqrt(d)) v per head, for q [Nq, C] and k, v [Nk, C] with
// heads taking consecutive column groups of width d = C / heads. Query rows
// are processed in blocks so the scores never exist as a whole. Records no
// graph edge; callers use it only when no gradient is needed.
template <class T>
Tensor<T> attention_inference(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
  const std::size_t c = q.dim(1), nq = q.dim(0), nk = k.dim(0), d = c / heads;
  constexpr std::size_t block = 64;
  std::vector<T> out(nq * c);
  std::vector<T> scores(std::min(block, nq) * nk);
  const T alpha = T(1) / std::sqrt(static_cast<T>(d));
  const T *qd = q.data().data(), *kd = k.data().data(), *vd = v.data().data();
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t r0 = 0; r0 < nq; r0 += block) {
      const std::size_t bs = std::min(block, nq - r0);
      detail::gemm(false, true, bs, nk, d, alpha, qd + r0 * c + h * d, c, kd + h * d, c, T(0), scores.data(), nk);
      for (std::size_t r = 0; r < bs; ++r) detail::softmax_row(scores.data() + r * nk, scores.data() + r * nk, nk);
      detail::gemm(false, false, bs, d, nk, T(1), scores.data(), nk, vd + h * d, c, T(0), out.data() + r0 * c + h * d,
                   c);
    }
  }
  return Tensor<T>({nq, c}, std::move(out));
}

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  const std::size_t c = detail::last_extent(x.shape(), "layer_norm");
  if (gain.numel() != c || bias.numel() != c) {
    throw ShapeError("layer_norm: affine params " + shape_str(gain.shape()) + " do not match input " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = c ? x.numel() / c : 0;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  auto xd = x.data(), gd = gain.data(), bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * c;
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += in[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(c);
    rstd[r] = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (in[j] - mu) * rstd[r];
      out[r * c + j] = xhat[r * c + j] * gd[j] + bd[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), "layer_norm", {x, gain, bias},
      [c, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        const auto& gd = self.inputs[1]->data;
        T* gx = detail::grad_sink(self, 0);
        T* gg = detail::grad_sink(self, 1);
        T* gb = detail::grad_sink(self, 2);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * c;
          const T* xh = xhat.data() + r * c;
          if (gg || gb) {
            for (std::size_t j = 0; j < c; ++j) {
              if (gg) gg[j] += dy[j] * xh[j];
              if (gb) gb[j] += dy[j];
            }
          }
          if (gx) {
            T mean_d = T(0), mean_dx = T(0);
            for (std::size_t j = 0; j < c; ++j) {
              const T d = dy[j] * gd[j];
              mean_d += d;
              mean_dx += d * xh[j];
            }
            mean_d /= static_cast<T>(c);
            mean_dx /= static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j) {
              gx[r * c + j] += rstd[r] * (dy[j] * gd[j] - mean_d - xh[j] * mean_dx);
            }
          }
        }
      });
}

// Maps min -> 0 and max -> 1 over the whole tensor. A constant input maps to
// all zeros.
template <class T>
Tensor<T> minmax_normalize(const Tensor<T>& x) {
  if (x.numel() == 0) return x.detach();
  auto xd = x.data();
  std::size_t lo = 0, hi = 0;
  for (std::size_t i = 1; i < xd.size(); ++i) {
    if (xd[i] < xd[lo]) lo = i;
    if (xd[i] > xd[hi]) hi = i;
  }
  const T range = xd[hi] - xd[lo];
  std::vector<T> out(xd.size(), T(0));
  if (range > T(0)) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (xd[i] - xd[lo]) / range;
  }
  return detail::make_result<T>(x.shape(), std::move(out), "minmax_normalize", {x},
                                [lo, hi, range](Node<T>& self) {
                                  T* g = detail::grad_sink(self, 0);
                                  if (!g || !(range > T(0))) return;
                                  const auto& y = self.data;
                                  T d_lo = T(0), d_hi = T(0);
                                  for (std::size_t i = 0; i < y.size(); ++i) {
                                    g[i] += self.grad[i] / range;
                                    d_lo += self.grad[i] * (y[i] - T(1)) / range;
                                    d_hi -= self.grad[i] * y[i] / range;
                                  }
                                  g[lo] += d_lo;
                                  g[hi] += d_hi;
                                });
}

// ---------------------------------------------------------------------------
// Spatial ops on [C, H, W]

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ShapeError("convolution stride must be positive");
  if (in + 2 * pad < kernel) return 0;
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace detail {

template <class T>
Tensor<T> conv2d_impl(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, std::size_t stride,
                      std::size_t pad) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0)) {
    throw ShapeError("strided_conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                     shape_str(w.shape()));
  }
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t ho = conv_out_extent(h, kh, stride, pad), wo = conv_out_extent(wd, kw, stride, pad);
  if (ho == 0 || wo == 0) {
    throw ShapeError("strided_conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  if (bias && bias->numel() != cout) throw ShapeError("strided_conv2d: bias length mismatch");
  std::vector<T> out(cout * ho * wo, T(0));
  auto xd = x.data(), wdat = w.data();
  for (std::size_t co = 0; co < cout; ++co) {
    T* o = out.data() + co * ho * wo;
    if (bias) std::fill(o, o + ho * wo, bias->data()[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* in = xd.data() + ci * h * wd;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const T wv = wdat[((co * cin + ci) * kh + ky) * kw + kx];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
              o[oy * wo + ox] += wv * in[iy * wd + ix];
            }
          }
        }
      }
    }
  }
  std::vector<Tensor<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return make_result<T>({cout, ho, wo}, std::move(out), "strided_conv2d", inputs,
                        [=](Node<T>& self) {
                          const T* X = self.inputs[0]->data.data();
                          const T* W = self.inputs[1]->data.data();
                          T* gx = grad_sink(self, 0);
                          T* gw = grad_sink(self, 1);
                          T* gb = self.inputs.size() > 2 ? grad_sink(self, 2) : nullptr;
                          const T* G = self.grad.data();
                          for (std::size_t co = 0; co < cout; ++co) {
                            const T* go = G + co * ho * wo;
                            if (gb) {
                              for (std::size_t i = 0; i < ho * wo; ++i) gb[co] += go[i];
                            }
                            for (std::size_t ci = 0; ci < cin; ++ci) {
                              for (std::size_t ky = 0; ky < kh; ++ky) {
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                  const std::size_t widx = ((co * cin + ci) * kh + ky) * kw + kx;
                                  T wacc = T(0);
                                  for (std::size_t oy = 0; oy < ho; ++oy) {
                                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                              static_cast<std::ptrdiff_t>(pad);
                                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                    for (std::size_t ox = 0; ox < wo; ++ox) {
                                      const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                                static_cast<std::ptrdiff_t>(pad);
                                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                      const std::size_t xi = (ci * h + iy) * wd + ix;
                                      const T gv = go[oy * wo + ox];
                                      wacc += gv * X[xi];
                                      if (gx) gx[xi] += gv * W[widx];
                                    }
                                  }
                                  if (gw) gw[widx] += wacc;
                                }
                              }
                            }
                          }
                        });
}

}  // namespace detail

// Cross-correlation of x[C_in, H, W] with kernel[C_out, C_in, k, k].
template <class T>
Tensor<T> strided_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t pad) {
  return detail::conv2d_impl<T>(x, kernel, nullptr, stride, pad);
}

template <class T>
Tensor<T> strided_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                         std::size_t pad) {
  return detail::conv2d_impl<T>(x, kernel, &bias, stride, pad);
}

// Per-channel convolution: x[C, H, W] with kernel[C, k, k].
template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t pad) {
  if (x.rank() != 3 || kernel.rank() != 3 || kernel.dim(0) != x.dim(0)) {
    throw ShapeError("depthwise_conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                     shape_str(kernel.shape()));
  }
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2), kh = kernel.dim(1), kw = kernel.dim(2);
  const std::size_t ho = conv_out_extent(h, kh, stride, pad), wo = conv_out_extent(wd, kw, stride, pad);
  if (ho == 0 || wo == 0) {
    throw ShapeError("depthwise_conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  // Visits every (output, input, tap) triple of the convolution in a fixed order.
  auto for_each_tap = [=](auto&& visit) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::size_t w_idx = (ch * kh + ky) * kw + kx;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
              visit((ch * ho + oy) * wo + ox, (ch * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix),
                    w_idx);
            }
          }
        }
      }
    }
  };
  std::vector<T> out(c * ho * wo, T(0));
  auto xd = x.data(), kd = kernel.data();
  for_each_tap([&](std::size_t o, std::size_t i, std::size_t w) { out[o] += kd[w] * xd[i]; });
  return detail::make_result<T>({c, ho, wo}, std::move(out), "depthwise_conv2d", {x, kernel},
                                [for_each_tap](Node<T>& self) {
                                  const auto& X = self.inputs[0]->data;
                                  const auto& K = self.inputs[1]->data;
                                  T* gx = detail::grad_sink(self, 0);
                                  T* gk = detail::grad_sink(self, 1);
                                  for_each_tap([&](std::size_t o, std::size_t i, std::size_t w) {
                                    const T gv = self.grad[o];
                                    if (gx) gx[i] += gv * K[w];
                                    if (gk) gk[w] += gv * X[i];
                                  });
                                });
}

template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride, std::size_t pad = 0) {
  if (x.rank() != 3) throw ShapeError("max_pool2d: expected [C, H, W], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t ho = conv_out_extent(h, kernel, stride, pad), wo = conv_out_extent(wd, kernel, stride, pad);
  if (ho == 0 || wo == 0) throw ShapeError("max_pool2d: window larger than padded input " + shape_str(x.shape()));
  std::vector<T> out(c * ho * wo);
  std::vector<std::size_t> arg(c * ho * wo);
  auto xd = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
            const std::size_t i = (ch * h + iy) * wd + ix;
            if (xd[i] > best) {
              best = xd[i];
              best_i = i;
            }
          }
        }
        const std::size_t o = (ch * ho + oy) * wo + ox;
        out[o] = best;
        arg[o] = best_i;
      }
    }
  }
  return detail::make_result<T>({c, ho, wo}, std::move(out), "max_pool2d", {x},
                                [arg = std::move(arg)](Node<T>& self) {
                                  if (T* g = detail::grad_sink(self, 0)) {
                                    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
                                  }
                                });
}

// Mean over the spatial axes: [C, H, W] -> [C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("global_avg_pool: expected [C, H, W], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<T> out(c, T(0));
  auto xd = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) out[ch] += xd[ch * hw + i];
    out[ch] /= static_cast<T>(hw);
  }
  return detail::make_result<T>({c}, std::move(out), "global_avg_pool", {x}, [c, hw](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0)) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T share = self.grad[ch] / static_cast<T>(hw);
        for (std::size_t i = 0; i < hw; ++i) g[ch * hw + i] += share;
      }
    }
  });
}

// Bilinear resize of the last two axes with corner-aligned sampling: the
// corner pixels of input and output coincide.
template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() < 2 || out_h == 0 || out_w == 0) {
    throw ShapeError("upsample_bilinear: bad request " + shape_str(x.shape()) + " -> " + std::to_string(out_h) +
                     "x" + std::to_string(out_w));
  }
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / (h * w);
  struct Sample {
    std::size_t i0, i1;
    double t;
  };
  auto axis = [](std::size_t in, std::size_t out) {
    std::vector<Sample> s(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double pos = (out > 1 && in > 1) ? static_cast<double>(o) * static_cast<double>(in - 1) /
                                                   static_cast<double>(out - 1)
                                             : 0.0;
      const std::size_t i0 = std::min(static_cast<std::size_t>(std::floor(pos)), in - 1);
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      s[o] = {i0, i1, pos - static_cast<double>(i0)};
    }
    return s;
  };
  auto ys = axis(h, out_h), xs = axis(w, out_w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = out_h;
  out_shape[out_shape.size() - 1] = out_w;
  std::vector<T> out(planes * out_h * out_w);
  auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* in = xd.data() + p * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& sy = ys[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& sx = xs[ox];
        const T ty = static_cast<T>(sy.t), tx = static_cast<T>(sx.t);
        const T top = in[sy.i0 * w + sx.i0] * (T(1) - tx) + in[sy.i0 * w + sx.i1] * tx;
        const T bot = in[sy.i1 * w + sx.i0] * (T(1) - tx) + in[sy.i1 * w + sx.i1] * tx;
        out[(p * out_h + oy) * out_w + ox] = top * (T(1) - ty) + bot * ty;
      }
    }
  }
  return detail::make_result<T>(out_shape, std::move(out), "upsample_bilinear", {x},
                                [=](Node<T>& self) {
                                  T* g = detail::grad_sink(self, 0);
                                  if (!g) return;
                                  for (std::size_t p = 0; p < planes; ++p) {
                                    T* gi = g + p * h * w;
                                    for (std::size_t oy = 0; oy < out_h; ++oy) {
                                      const auto& sy = ys[oy];
                                      for (std::size_t ox = 0; ox < out_w; ++ox) {
                                        const auto& sx = xs[ox];
                                        const T ty = static_cast<T>(sy.t), tx = static_cast<T>(sx.t);
                                        const T gv = self.grad[(p * out_h + oy) * out_w + ox];
                                        gi[sy.i0 * w + sx.i0] += gv * (T(1) - ty) * (T(1) - tx);
                                        gi[sy.i0 * w + sx.i1] += gv * (T(1) - ty) * tx;
                                        gi[sy.i1 * w + sx.i0] += gv * ty * (T(1) - tx);
                                        gi[sy.i1 * w + sx.i1] += gv * ty * tx;
                                      }
                                    }
                                  }
                                });
}

}  // namespace roivit

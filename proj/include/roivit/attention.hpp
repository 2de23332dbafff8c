#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "roivit/init.hpp"
#include "roivit/ops.hpp"
#include "roivit/patch_embed.hpp"

namespace roivit {

// Strides of the q and k/v pooling convolutions. Kernel 3, padding 1.
struct PoolingSpec {
  static constexpr std::size_t kernel = 3;
  static constexpr std::size_t padding = 1;
  std::size_t q_stride = 1;
  std::size_t kv_stride = 1;

  void validate() const {
    if ((q_stride != 1 && q_stride != 2) || (kv_stride != 1 && kv_stride != 2)) {
      throw ConfigError("pooling strides must be 1 or 2");
    }
  }
};

// Projected q/k/v and the softmax weights [heads, Nq, Nk] of one attention call.
template <class T>
struct AttentionTrace {
  Tensor<T> q, k, v;
  Tensor<T> weights;
};

template <class T>
struct LayerNormParams {
  Tensor<T> gain, bias;

  static LayerNormParams create(std::size_t width) {
    return {parameter_full<T>({width}, T(1)), parameter_full<T>({width}, T(0))};
  }
  void append_to(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
struct AttentionParams {
  Tensor<T> w_q, w_k, w_v;            // [C_in, C_out]
  Tensor<T> w_o;                      // [C_out, C_out]
  Tensor<T> pool_q, pool_k, pool_v;   // depthwise [C_out, 3, 3]
  std::optional<Tensor<T>> w_res;     // [C_in, C_out], present iff C_in != C_out
  std::size_t heads = 1;
  PoolingSpec pooling;

  std::size_t in_width() const { return w_q.dim(0); }
  std::size_t out_width() const { return w_q.dim(1); }

  static AttentionParams create(std::size_t c_in, std::size_t c_out, std::size_t heads, PoolingSpec pooling,
                                std::uint64_t seed, const std::string& prefix) {
    if (heads == 0 || c_out % heads != 0) {
      throw ConfigError(prefix + ": width " + std::to_string(c_out) + " not divisible by " + std::to_string(heads) +
                        " heads");
    }
    pooling.validate();
    AttentionParams p;
    p.w_q = truncated_normal<T>({c_in, c_out}, 0.02, seed, prefix + ".w_q");
    p.w_k = truncated_normal<T>({c_in, c_out}, 0.02, seed, prefix + ".w_k");
    p.w_v = truncated_normal<T>({c_in, c_out}, 0.02, seed, prefix + ".w_v");
    p.w_o = truncated_normal<T>({c_out, c_out}, 0.02, seed, prefix + ".w_o");
    p.pool_q = center_delta_kernel<T>(c_out, PoolingSpec::kernel, true);
    p.pool_k = center_delta_kernel<T>(c_out, PoolingSpec::kernel, true);
    p.pool_v = center_delta_kernel<T>(c_out, PoolingSpec::kernel, true);
    if (c_in != c_out) p.w_res = truncated_normal<T>({c_in, c_out}, 0.02, seed, prefix + ".w_res");
    p.heads = heads;
    p.pooling = pooling;
    return p;
  }

  void append_to(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w_q", w_q);
    out.emplace_back(prefix + ".w_k", w_k);
    out.emplace_back(prefix + ".w_v", w_v);
    out.emplace_back(prefix + ".w_o", w_o);
    out.emplace_back(prefix + ".pool_q", pool_q);
    out.emplace_back(prefix + ".pool_k", pool_k);
    out.emplace_back(prefix + ".pool_v", pool_v);
    if (w_res) out.emplace_back(prefix + ".w_res", *w_res);
  }
};

template <class T>
struct FfnParams {
  Tensor<T> w1, b1;  // [C, 4C], [4C]
  Tensor<T> w2, b2;  // [4C, C], [C]

  static FfnParams create(std::size_t width, std::uint64_t seed, const std::string& prefix) {
    return {truncated_normal<T>({width, 4 * width}, 0.02, seed, prefix + ".w1"), parameter_full<T>({4 * width}, T(0)),
            truncated_normal<T>({4 * width, width}, 0.02, seed, prefix + ".w2"), parameter_full<T>({width}, T(0))};
  }
  void append_to(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2);
    out.emplace_back(prefix + ".b2", b2);
  }
};

// Pre-norm transformer block whose attention is MHPA.
template <class T>
struct BlockParams {
  LayerNormParams<T> ln1;
  AttentionParams<T> attn;
  LayerNormParams<T> ln2;
  FfnParams<T> ffn;

  static BlockParams create(std::size_t c_in, std::size_t c_out, std::size_t heads, PoolingSpec pooling,
                            std::uint64_t seed, const std::string& prefix) {
    return {LayerNormParams<T>::create(c_in), AttentionParams<T>::create(c_in, c_out, heads, pooling, seed, prefix + ".attn"),
            LayerNormParams<T>::create(c_out), FfnParams<T>::create(c_out, seed, prefix + ".ffn")};
  }
  void append_to(NamedTensors<T>& out, const std::string& prefix) const {
    ln1.append_to(out, prefix + ".ln1");
    attn.append_to(out, prefix + ".attn");
    ln2.append_to(out, prefix + ".ln2");
    ffn.append_to(out, prefix + ".ffn");
  }
};

// One branch's half of the cross-attention fusion.
template <class T>
struct FusionParams {
  LayerNormParams<T> ln;
  Tensor<T> w_q, w_k, w_v, w_o;  // [C, C]
  std::size_t heads = 1;

  static FusionParams create(std::size_t width, std::size_t heads, std::uint64_t seed, const std::string& prefix) {
    if (heads == 0 || width % heads != 0) throw ConfigError(prefix + ": width not divisible by heads");
    return {LayerNormParams<T>::create(width), truncated_normal<T>({width, width}, 0.02, seed, prefix + ".w_q"),
            truncated_normal<T>({width, width}, 0.02, seed, prefix + ".w_k"),
            truncated_normal<T>({width, width}, 0.02, seed, prefix + ".w_v"),
            truncated_normal<T>({width, width}, 0.02, seed, prefix + ".w_o"), heads};
  }
  void append_to(NamedTensors<T>& out, const std::string& prefix) const {
    ln.append_to(out, prefix + ".ln");
    out.emplace_back(prefix + ".w_q", w_q);
    out.emplace_back(prefix + ".w_k", w_k);
    out.emplace_back(prefix + ".w_v", w_v);
    out.emplace_back(prefix + ".w_o", w_o);
  }
};

// ---------------------------------------------------------------------------

// Scaled dot-product attention split across heads. q [Nq, C], k/v [Nk, C].
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               AttentionTrace<T>* trace = nullptr) {
  const std::size_t c = q.dim(1), nq = q.dim(0), nk = k.dim(0);
  if (k.dim(1) != c || v.dim(1) != c || v.dim(0) != nk || c % heads != 0) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()) + " with " + std::to_string(heads) + " heads");
  }
  if (!trace && !detail::records_graph<T>({&q, &k, &v}) && nq > 0 && nk > 0) {
    return attention_inference(q, k, v, heads);
  }
  const std::size_t d = c / heads;
  auto split = [&](const Tensor<T>& t, std::size_t n) { return permute(reshape(t, {n, heads, d}), {1, 0, 2}); };
  // the 1/sqrt(d) factor is applied to q so the [h, Nq, Nk] scores are formed once
  auto qh = split(scale(q, T(1) / std::sqrt(static_cast<T>(d))), nq), kh = split(k, nk), vh = split(v, nk);
  auto scores = matmul(qh, transpose_last2(kh));
  auto weights = softmax_last(scores);  // [h, Nq, Nk]
  auto out = permute(matmul(weights, vh), {1, 0, 2});
  if (trace) *trace = {q, k, v, weights};
  return reshape(out, {nq, c});
}

// Spatial pooling of patch tokens [N, C] laid out on a rows x cols grid.
template <class T>
Tensor<T> pool_patches(const Tensor<T>& patches, std::size_t rows, std::size_t cols, const Tensor<T>& kernel,
                       std::size_t stride, std::size_t& out_rows, std::size_t& out_cols) {
  const std::size_t c = patches.dim(1);
  if (patches.dim(0) != rows * cols) {
    throw ShapeError("pooling: " + std::to_string(patches.dim(0)) + " tokens cannot form a " + std::to_string(rows) +
                     "x" + std::to_string(cols) + " grid");
  }
  if (rows * cols == 0) {
    out_rows = out_cols = 0;
    return patches;
  }
  auto grid = reshape(transpose_last2(patches), {c, rows, cols});
  auto pooled = depthwise_conv2d(grid, kernel, stride, PoolingSpec::padding);
  out_rows = pooled.dim(1);
  out_cols = pooled.dim(2);
  return transpose_last2(reshape(pooled, {c, out_rows * out_cols}));
}

// Fixed 3x3 average window for the strided skip path.
template <class T>
Tensor<T> skip_pool(const Tensor<T>& patches, std::size_t rows, std::size_t cols, std::size_t stride,
                    std::size_t& out_rows, std::size_t& out_cols) {
  if (stride == 1 || rows * cols == 0) {
    out_rows = rows;
    out_cols = cols;
    return patches;
  }
  auto kernel = Tensor<T>::full({patches.dim(1), PoolingSpec::kernel, PoolingSpec::kernel}, T(1) / T(9));
  return pool_patches(patches, rows, cols, kernel, stride, out_rows, out_cols);
}

// MHPA with separate attention input and skip input:
//   Attention(P_q(h W_q), P_k(h W_k), P_v(h W_v)) W_o + skip(x)
// where skip pools x with the q stride and projects it when the width changes.
// CLS rows bypass pooling.
template <class T>
TokenSequence<T> mhpa(const TokenSequence<T>& normed, const TokenSequence<T>& residual, const AttentionParams<T>& p,
                      AttentionTrace<T>* trace = nullptr) {
  normed.validate();
  residual.validate();
  if (normed.width() != p.in_width() || residual.width() != p.in_width()) {
    throw ShapeError("mhpa: token width " + std::to_string(normed.width()) + " vs params " +
                     std::to_string(p.in_width()));
  }
  const std::size_t n = normed.count();
  auto hs = normed.stacked();
  auto project = [&](const Tensor<T>& w, const Tensor<T>& kernel, std::size_t stride, std::size_t& r,
                     std::size_t& c) {
    auto all = matmul(hs, w);
    auto cls = slice(all, 0, 0, 1);
    if (n == 0) {
      r = c = 0;
      return cls;
    }
    auto pooled = pool_patches(slice(all, 0, 1, n + 1), normed.rows, normed.cols, kernel, stride, r, c);
    return concat<T>({cls, pooled}, 0);
  };
  std::size_t qr, qc, kr, kc, vr, vc;
  auto q = project(p.w_q, p.pool_q, p.pooling.q_stride, qr, qc);
  auto k = project(p.w_k, p.pool_k, p.pooling.kv_stride, kr, kc);
  auto v = project(p.w_v, p.pool_v, p.pooling.kv_stride, vr, vc);
  auto attended = matmul(multi_head_attention(q, k, v, p.heads, trace), p.w_o);

  std::size_t sr, sc;
  Tensor<T> skip = residual.cls;
  if (n > 0) {
    skip = concat<T>({residual.cls, skip_pool(residual.patches, residual.rows, residual.cols, p.pooling.q_stride, sr, sc)}, 0);
  }
  if (p.w_res) skip = matmul(skip, *p.w_res);
  return TokenSequence<T>::split(add(attended, skip), qr, qc);
}

template <class T>
TokenSequence<T> mhpa(const TokenSequence<T>& x, const AttentionParams<T>& p, AttentionTrace<T>* trace = nullptr) {
  return mhpa(x, x, p, trace);
}

template <class T>
TokenSequence<T> layer_norm(const TokenSequence<T>& x, const LayerNormParams<T>& ln) {
  return TokenSequence<T>::split(layer_norm(x.stacked(), ln.gain, ln.bias), x.rows, x.cols);
}

template <class T>
Tensor<T> feed_forward(const Tensor<T>& x, const FfnParams<T>& f) {
  return linear(gelu(linear(x, f.w1, f.b1)), f.w2, f.b2);
}

// y = skip(x) + MHPA-attention(LN(x));  out = y + FFN(LN(y)).
template <class T>
TokenSequence<T> transformer_block(const TokenSequence<T>& x, const BlockParams<T>& b,
                                   AttentionTrace<T>* trace = nullptr) {
  auto y = mhpa(layer_norm(x, b.ln1), x, b.attn, trace);
  auto ys = y.stacked();
  auto out = add(ys, feed_forward(layer_norm(ys, b.ln2.gain, b.ln2.bias), b.ffn));
  return TokenSequence<T>::split(out, y.rows, y.cols);
}

// CLS of `query` attends over [query.cls || other.patches]; returns the
// updated CLS token.
template <class T>
Tensor<T> cross_attention_cls(const TokenSequence<T>& query, const TokenSequence<T>& other, const FusionParams<T>& p,
                              AttentionTrace<T>* trace = nullptr) {
  const std::size_t n = other.count();
  auto joined = n == 0 ? query.cls : concat<T>({query.cls, other.patches}, 0);
  auto normed = layer_norm(joined, p.ln.gain, p.ln.bias);
  auto q = matmul(slice(normed, 0, 0, 1), p.w_q);
  auto k = matmul(normed, p.w_k);
  auto v = matmul(normed, p.w_v);
  auto ca = matmul(multi_head_attention(q, k, v, p.heads, trace), p.w_o);
  return add(query.cls, ca);
}

template <class T>
struct FusedPair {
  TokenSequence<T> pest;
  TokenSequence<T> roi;
};

// Both CLS updates read the pre-fusion inputs; patch tokens pass through as
// the very same tensors.
template <class T>
FusedPair<T> cross_attention_fuse(const TokenSequence<T>& pest, const TokenSequence<T>& roi,
                                  const FusionParams<T>& p_pest, const FusionParams<T>& p_roi,
                                  AttentionTrace<T>* pest_trace = nullptr, AttentionTrace<T>* roi_trace = nullptr) {
  pest.validate();
  roi.validate();
  if (pest.width() != roi.width() || pest.count() != roi.count()) {
    throw ShapeError("cross_attention_fuse: branch mismatch, pest " + shape_str(pest.patches.shape()) + " vs roi " +
                     shape_str(roi.patches.shape()));
  }
  if (p_pest.w_q.dim(0) != pest.width() || p_roi.w_q.dim(0) != roi.width()) {
    throw ShapeError("cross_attention_fuse: parameter width does not match tokens");
  }
  FusedPair<T> out{pest, roi};
  out.pest.cls = cross_attention_cls(pest, roi, p_pest, pest_trace);
  out.roi.cls = cross_attention_cls(roi, pest, p_roi, roi_trace);
  return out;
}

template <class T>
struct DualBlockTraces {
  AttentionTrace<T> pest_tb, roi_tb;
  AttentionTrace<T> pest_ca, roi_ca;
};

// One TB per branch, then the cross-attention fusion.
template <class T>
FusedPair<T> dual_block(const TokenSequence<T>& pest, const TokenSequence<T>& roi, const BlockParams<T>& pest_tb,
                        const BlockParams<T>& roi_tb, const FusionParams<T>& pest_fuse,
                        const FusionParams<T>& roi_fuse, DualBlockTraces<T>* traces = nullptr) {
  auto p = transformer_block(pest, pest_tb, traces ? &traces->pest_tb : nullptr);
  auto r = transformer_block(roi, roi_tb, traces ? &traces->roi_tb : nullptr);
  return cross_attention_fuse(p, r, pest_fuse, roi_fuse, traces ? &traces->pest_ca : nullptr,
                              traces ? &traces->roi_ca : nullptr);
}

}  // namespace roivit

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "roivit/image.hpp"
#include "roivit/init.hpp"
#include "roivit/ops.hpp"

namespace roivit {

// One branch's token state: a CLS token plus a row-major grid of patch tokens.
template <class T>
struct TokenSequence {
  Tensor<T> cls;      // [1, C]
  Tensor<T> patches;  // [N, C], N == rows * cols
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t width() const { return cls.dim(1); }
  std::size_t count() const { return rows * cols; }

  void validate() const {
    if (cls.rank() != 2 || cls.dim(0) != 1 || patches.rank() != 2 || patches.dim(0) != rows * cols ||
        patches.dim(1) != cls.dim(1)) {
      throw ShapeError("token sequence inconsistent: cls " + shape_str(cls.shape()) + ", patches " +
                       shape_str(patches.shape()) + ", grid " + std::to_string(rows) + "x" + std::to_string(cols));
    }
  }

  // [1 + N, C] stack with CLS first.
  Tensor<T> stacked() const { return rows * cols == 0 ? cls : concat<T>({cls, patches}, 0); }

  static TokenSequence split(const Tensor<T>& stack, std::size_t rows, std::size_t cols) {
    TokenSequence s;
    s.cls = slice(stack, 0, 0, 1);
    s.patches = slice(stack, 0, 1, stack.dim(0));
    s.rows = rows;
    s.cols = cols;
    s.validate();
    return s;
  }
};

template <class T>
struct PatchEmbedding {
  std::size_t patch_size = 4;
  Tensor<T> projection;  // [C, channels, patch, patch]
  Tensor<T> bias;        // [C]
  Tensor<T> cls_token;   // [1, C]
  Tensor<T> pos_embedding;  // [N + 1, C]

  std::size_t width() const { return projection.dim(0); }
  std::size_t channels() const { return projection.dim(1); }

  static PatchEmbedding create(std::size_t channels, std::size_t width, std::size_t patch_size,
                               std::size_t image_size, std::uint64_t seed, const std::string& prefix) {
    PatchEmbedding e;
    e.patch_size = patch_size;
    const std::size_t grid = image_size / patch_size;
    e.projection = truncated_normal<T>({width, channels, patch_size, patch_size}, 0.02, seed, prefix + ".projection");
    e.bias = parameter_full<T>({width}, T(0));
    e.cls_token = parameter_full<T>({1, width}, T(0));
    e.pos_embedding = truncated_normal<T>({grid * grid + 1, width}, 0.02, seed, prefix + ".pos_embedding");
    return e;
  }

  std::vector<std::pair<std::string, Tensor<T>>> parameters(const std::string& prefix) const {
    return {{prefix + ".projection", projection},
            {prefix + ".bias", bias},
            {prefix + ".cls_token", cls_token},
            {prefix + ".pos_embedding", pos_embedding}};
  }
};

// Image [channels, H, W] -> CLS + patch tokens with positional embedding.
template <class T>
TokenSequence<T> tokenize(const Tensor<T>& image, const PatchEmbedding<T>& emb) {
  const std::size_t p = emb.patch_size;
  if (image.rank() != 3 || image.dim(0) != emb.channels() || image.dim(1) % p != 0 || image.dim(2) % p != 0) {
    throw ShapeError("tokenize: image " + shape_str(image.shape()) + " incompatible with " +
                     std::to_string(emb.channels()) + "-channel patch size " + std::to_string(p));
  }
  const std::size_t rows = image.dim(1) / p, cols = image.dim(2) / p, c = emb.width();
  if (emb.pos_embedding.dim(0) != rows * cols + 1) {
    throw ShapeError("tokenize: positional embedding " + shape_str(emb.pos_embedding.shape()) + " sized for a different image than " +
                     shape_str(image.shape()));
  }
  auto feat = strided_conv2d(image, emb.projection, emb.bias, p, 0);          // [C, rows, cols]
  auto patches = transpose_last2(reshape(feat, {c, rows * cols}));            // [N, C]
  auto stack = add(concat<T>({emb.cls_token, patches}, 0), emb.pos_embedding);  // [N + 1, C]
  return TokenSequence<T>::split(stack, rows, cols);
}

template <class T>
TokenSequence<T> tokenize(const ImageTensor& image, const PatchEmbedding<T>& emb) {
  return tokenize(image.to_tensor<T>(), emb);
}

}  // namespace roivit

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "roivit/hash.hpp"
#include "roivit/tensor.hpp"

namespace roivit {

// Each parameter draws from its own generator seeded by (seed, name), so the
// values of one parameter never depend on which other parameters exist.
inline std::mt19937_64 parameter_rng(std::uint64_t seed, std::string_view name) {
  return std::mt19937_64(seed ^ fnv1a(name));
}

// Normal(0, sigma) resampled until |v| <= 2 sigma.
template <class T>
Tensor<T> truncated_normal(const Shape& shape, double sigma, std::uint64_t seed, std::string_view name) {
  auto rng = parameter_rng(seed, name);
  std::normal_distribution<double> dist(0.0, sigma);
  std::vector<T> data(numel_of(shape));
  for (auto& v : data) {
    double s;
    do {
      s = dist(rng);
    } while (std::abs(s) > 2.0 * sigma);
    v = static_cast<T>(s);
  }
  Tensor<T> t(shape, std::move(data));
  t.set_requires_grad(true);
  return t;
}

template <class T>
Tensor<T> parameter_full(const Shape& shape, T value) {
  auto t = Tensor<T>::full(shape, value);
  t.set_requires_grad(true);
  return t;
}

// Depthwise kernel [C, k, k] with 1 at the centre tap: identity at stride 1,
// plain subsampling at stride 2.
template <class T>
Tensor<T> center_delta_kernel(std::size_t channels, std::size_t k, bool trainable) {
  auto t = Tensor<T>::zeros({channels, k, k});
  auto d = t.mutable_data();
  for (std::size_t c = 0; c < channels; ++c) d[(c * k + k / 2) * k + k / 2] = T(1);
  t.set_requires_grad(trainable);
  return t;
}

}  // namespace roivit

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "roivit/tensor.hpp"

namespace roivit {

struct GradCheckResult {
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[<index>]"
  bool passed(double tol) const { return coordinates > 0 && max_rel_error < tol; }
};

// Compares reverse-mode gradients of a scalar loss against central finite
// differences on randomly sampled parameter coordinates. The error measure is
// |analytic - numeric| / max(1, |numeric|). The step is rel_step * max(1, |x|).
template <class T>
GradCheckResult gradient_check(const std::function<Tensor<T>()>& loss_fn,
                               std::vector<std::pair<std::string, Tensor<T>>> params, std::size_t samples,
                               double rel_step, std::uint64_t seed) {
  for (auto& [name, p] : params) p.zero_grad();
  backward(loss_fn());

  std::vector<std::pair<std::size_t, std::size_t>> pool;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].second.numel(); ++j) pool.emplace_back(i, j);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  if (pool.size() > samples) pool.resize(samples);

  GradCheckResult result;
  for (auto [pi, j] : pool) {
    auto& [name, p] = params[pi];
    const double analytic = p.has_grad() ? static_cast<double>(p.grad()[j]) : 0.0;
    const T orig = p.data()[j];
    const T h = static_cast<T>(rel_step * std::max(1.0, std::abs(static_cast<double>(orig))));
    p.mutable_data()[j] = orig + h;
    const double up = static_cast<double>(loss_fn().item());
    p.mutable_data()[j] = orig - h;
    const double down = static_cast<double>(loss_fn().item());
    p.mutable_data()[j] = orig;
    // the step actually realised in T precision
    const double step = static_cast<double>((orig + h) - (orig - h));
    const double numeric = (up - down) / step;
    const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
    ++result.coordinates;
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst = name + "[" + std::to_string(j) + "]";
    }
  }
  return result;
}

}  // namespace roivit

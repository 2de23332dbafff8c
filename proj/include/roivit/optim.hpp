#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "roivit/tensor.hpp"

namespace roivit {

struct AdamSettings {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments are kept in double per parameter element.
template <class T>
class Adam {
 public:
  Adam(NamedTensors<T> params, AdamSettings settings) : params_(std::move(params)), s_(settings) {
    for (const auto& [name, p] : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  // p <- p - lr * m_hat / (sqrt(v_hat) + eps); parameters without a gradient
  // buffer are treated as having gradient zero.
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      auto data = p.mutable_data();
      const bool has = p.has_grad();
      auto grad = p.grad();
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = has ? static_cast<double>(grad[j]) : 0.0;
        m_[i][j] = s_.beta1 * m_[i][j] + (1.0 - s_.beta1) * g;
        v_[i][j] = s_.beta2 * v_[i][j] + (1.0 - s_.beta2) * g * g;
        const double update = s_.lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + s_.eps);
        data[j] = static_cast<T>(static_cast<double>(data[j]) - update);
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  const NamedTensors<T>& parameters() const { return params_; }

 private:
  NamedTensors<T> params_;
  AdamSettings s_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace roivit

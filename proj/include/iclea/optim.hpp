#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "iclea/error.hpp"
#include "iclea/tensor.hpp"

namespace iclea::ad {

struct AdamOptions {
  double learning_rate = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction. Moment buffers are allocated per parameter on
// construction; step() consumes the accumulated grads and zeroes them.
template <class T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamOptions options) : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) {
      if (!p.is_leaf()) throw ContractError("Adam parameters must be leaf tensors");
      first_.emplace_back(p.size(), 0.0);
      second_.emplace_back(p.size(), 0.0);
    }
  }

  void step() {
    ++step_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto& g = p.grad_buffer();
      if (g.empty()) continue;
      auto values = p.mutable_values();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double gi = g[i];
        m[i] = b1 * m[i] + (1.0 - b1) * gi;
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        values[i] = static_cast<T>(values[i] - options_.learning_rate * mhat / (std::sqrt(vhat) + options_.epsilon));
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  double learning_rate() const { return options_.learning_rate; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  std::size_t step_count() const { return step_; }
  const std::vector<std::vector<double>>& first_moments() const { return first_; }
  const std::vector<std::vector<double>>& second_moments() const { return second_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::size_t step_ = 0;
};

}  // namespace iclea::ad

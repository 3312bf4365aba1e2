#pragma once

#include <cstddef>
#include <vector>

#include "mixvi/parameters.hpp"

namespace mixvi {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are lazily sized to the store on the
/// first step.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Applies one update. Throws TrainingError naming the parameter if any
  /// gradient entry is non-finite; in that case no parameter is modified.
  void step(ParameterStore& params, const std::vector<Tensor>& grads);

  std::size_t steps() const noexcept { return step_; }
  const AdamConfig& config() const noexcept { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }

 private:
  AdamConfig config_;
  std::size_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace mixvi

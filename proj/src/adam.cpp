#include "mixvi/adam.hpp"

#include <cmath>

#include "mixvi/errors.hpp"

namespace mixvi {

void Adam::step(ParameterStore& params, const std::vector<Tensor>& grads) {
  if (grads.size() != params.size()) throw DimensionError("adam: gradient count does not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != params.value(i).size()) {
      throw DimensionError("adam: gradient shape mismatch for " + params[i].name);
    }
    if (!grads[i].all_finite()) {
      throw TrainingError("non-finite gradient", params[i].name);
    }
  }
  if (m_.size() != params.size()) {
    m_.clear();
    v_.clear();
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.emplace_back(params.value(i).shape(), 0.0);
      v_.emplace_back(params.value(i).shape(), 0.0);
    }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params.value(i);
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

}  // namespace mixvi

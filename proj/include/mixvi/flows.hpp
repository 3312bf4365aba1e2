#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mixvi/autodiff.hpp"
#include "mixvi/densities.hpp"
#include "mixvi/parameters.hpp"

namespace mixvi {

class Rng;

struct MadeConfig {
  std::size_t dim = 2;
  std::vector<std::size_t> hidden{10, 10};
  /// Width of an optional conditioning vector added to every hidden layer.
  std::size_t context_dim = 0;
};

/// Masked autoencoder producing a shift and a pre-scale per coordinate.
/// Output i depends only on inputs that precede i in order().
class MadeNet {
 public:
  struct Output {
    Var shift;
    Var pre_scale;
  };

  /// Registers parameters under `prefix`. The output layer starts at zero.
  MadeNet(ParameterStore& store, std::string prefix, MadeConfig config, bool reversed, Rng& rng);

  Output forward(const ParamBinding& params, Var z, std::optional<Var> context = std::nullopt) const;

  std::size_t dim() const noexcept { return config_.dim; }
  const MadeConfig& config() const noexcept { return config_; }
  /// order()[k] is the coordinate produced k-th.
  const std::vector<std::size_t>& order() const noexcept { return order_; }
  std::size_t output_weight_handle() const noexcept { return out_w_; }
  std::size_t output_bias_handle() const noexcept { return out_b_; }

 private:
  struct Layer {
    std::size_t weight;
    std::size_t bias;
    std::optional<std::size_t> context_weight;
    Tensor mask;
  };
  MadeConfig config_;
  std::vector<std::size_t> order_;
  std::vector<Layer> hidden_;
  std::size_t out_w_ = 0;
  std::size_t out_b_ = 0;
  Tensor out_mask_;
};

/// Per-coordinate scale of an affine autoregressive step:
/// sigmoid(pre + 2) / sigmoid(2), so a zero pre-scale is the identity.
double flow_scale(double pre_scale);
inline constexpr double kFlowScaleBias = 2.0;

/// T affine autoregressive transforms z_t = shift(z_{t-1}) + scale(z_{t-1}) * z_{t-1},
/// alternating the autoregressive order between successive steps.
class FlowStack {
 public:
  struct Result {
    Var z;        ///< n x d
    Var log_det;  ///< n x 1, sum over steps of log|det J|
  };

  FlowStack(ParameterStore& store, const std::string& prefix, std::size_t steps, MadeConfig config, Rng& rng,
            std::size_t owner = 0);

  std::size_t steps() const noexcept { return transforms_.size(); }
  std::size_t dim() const noexcept { return config_.dim; }
  std::size_t owner() const noexcept { return owner_; }
  const std::vector<MadeNet>& transforms() const noexcept { return transforms_; }

  Result forward(const ParamBinding& params, Var z0, std::optional<Var> context = std::nullopt) const;

  /// Coordinate-by-coordinate inversion on plain values. Throws
  /// NumericalError if the reconstruction does not reproduce zT.
  Tensor inverse(const ParameterStore& store, const Tensor& zT, const Tensor* context = nullptr) const;
  /// Forward on plain values; returns zT and fills `log_det` (n values).
  Tensor forward_values(const ParameterStore& store, const Tensor& z0, std::vector<double>* log_det = nullptr,
                        const Tensor* context = nullptr) const;

 private:
  MadeConfig config_;
  std::vector<MadeNet> transforms_;
  std::size_t owner_;
};

/// log q of component j's flowed density at the flowed image of a BASE-space
/// sample z_s: log q_base_j(z_s) - sum_t log|det df_j/dz|, where the flow of
/// component j is evaluated at z_s. Rows of z_s -> n x 1.
Var flow_extended_log_q(const ParamBinding& params, Var z_s, const GaussianVars& base_j, const FlowStack* stack_j,
                        std::optional<Var> context_j = std::nullopt);

}  // namespace mixvi

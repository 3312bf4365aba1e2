#pragma once

// Mixture VAE building blocks: encoder banks, the shared decoder, the
// two-level hierarchy, flows on the lower latent and the shared VampPrior.
//
// Parameter names:
//   enc.{s}.*        encoder s (flat: x -> z; hierarchical: top x -> z2 and
//                    low [x, z2] -> z1)
//   flow.{s}.t{t}.*  flow of component s
//   dec.*            shared decoder
//   prior1.*         learnable p(z1 | z2) of the hierarchy
//   vamp.*           pseudo-input generator

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mixvi/autodiff.hpp"
#include "mixvi/densities.hpp"
#include "mixvi/flows.hpp"
#include "mixvi/parameters.hpp"

namespace mixvi {

class Rng;

/// Fully connected net with tanh hidden layers and a linear output.
class Mlp {
 public:
  Mlp() = default;
  /// zero_init: every weight starts at 0 (biases always start at 0).
  Mlp(ParameterStore& store, const std::string& prefix, std::size_t in, const std::vector<std::size_t>& hidden,
      std::size_t out, Rng& rng, bool zero_init = false);

  Var forward(const ParamBinding& params, Var x, Var* last_hidden = nullptr) const;
  Tensor forward_values(const ParameterStore& store, const Tensor& x) const;

  std::size_t in_dim() const noexcept { return in_; }
  std::size_t out_dim() const noexcept { return out_; }
  std::size_t weight_count(const ParameterStore& store) const;
  std::size_t bias_count(const ParameterStore& store) const;
  const std::vector<std::size_t>& weight_handles() const noexcept { return weights_; }

 private:
  std::vector<std::size_t> weights_;
  std::vector<std::size_t> biases_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

inline constexpr double kMinLogVar = -6.0;
inline constexpr double kMaxLogVar = 2.0;

/// Splits a 2d-wide head into a mean and a clamped log-variance.
GaussianVars gaussian_head(Var out, std::size_t dim);

struct VaeConfig {
  std::size_t data_dim = 784;
  std::size_t hidden = 300;
  std::size_t hidden_layers = 2;
  /// Latent width (flat model) or lower-level width (hierarchical).
  std::size_t latent = 40;
  /// Upper-level width of the hierarchy.
  std::size_t latent_top = 40;
  std::size_t components = 1;
  bool hierarchical = false;
  std::size_t flow_steps = 0;
  std::size_t flow_hidden = 80;
  /// Pseudo-input count; 0 gives a standard-normal top prior.
  std::size_t pseudo_inputs = 0;
  /// Priors are shared by all components; false is rejected.
  bool shared_prior = true;
  std::uint64_t seed = 1;

  void validate() const;
  /// Single-line key=value form, parsed back by parse().
  std::string describe() const;
  static VaeConfig parse(const std::string& description);
  bool operator==(const VaeConfig&) const = default;
};

struct ParameterCounts {
  /// Weight-matrix entries of the encoder bank (the convention of the Big-IWAE table).
  std::size_t encoder_params = 0;
  std::size_t encoder_biases = 0;
  /// Every scalar of the encoder bank including flows.
  std::size_t encoder_scalars = 0;
  std::size_t decoder_params = 0;
  std::size_t prior_params = 0;
  std::size_t total_params = 0;
};

/// Per-component encoder output at one batch.
struct EncoderOutput {
  GaussianVars q;           ///< flat: q(z|x); hierarchical: q(z2|x), B rows
  std::optional<Var> context;  ///< flat flow context, B rows
};

/// Lower-level output at given z2 rows.
struct LowerOutput {
  GaussianVars q;  ///< q(z1 | z2, x)
  std::optional<Var> context;
};

class MixtureVae {
 public:
  explicit MixtureVae(VaeConfig config);

  const VaeConfig& config() const noexcept { return config_; }
  ParameterStore& store() noexcept { return store_; }
  const ParameterStore& store() const noexcept { return store_; }
  std::size_t components() const noexcept { return config_.components; }
  bool has_flows() const noexcept { return config_.flow_steps > 0; }

  /// Deterministic encoder pass for component s on a single data vector:
  /// the flat posterior, or q(z2|x) for the hierarchy.
  DiagGaussian encode(std::size_t s, std::span<const double> x) const;
  EncoderOutput encode(const ParamBinding& params, std::size_t s, Var x) const;
  /// q(z1 | z2, x) of component s; x rows are repeated to match z2.
  LowerOutput encode_lower(const ParamBinding& params, std::size_t s, Var x, Var z2) const;

  const FlowStack* flow(std::size_t s) const;

  /// Pixel logits from the lowest latent (and z2 for the hierarchy).
  Var decode(const ParamBinding& params, Var z, std::optional<Var> z2 = std::nullopt) const;
  /// Top-level prior: N(0, I) or the VampPrior.
  Var log_prior_top(const ParamBinding& params, Var z) const;
  /// Learnable p(z1 | z2).
  Var log_prior_lower(const ParamBinding& params, Var z1, Var z2) const;

  /// VampPrior pseudo-inputs u_k (K x d_x), in (0, 1).
  Var pseudo_inputs(const ParamBinding& params) const;
  /// Log of the (K*S)-component VampPrior at rows of z.
  Var vampprior_log_prob(const ParamBinding& params, Var z) const;
  double vampprior_log_prob(std::span<const double> z) const;

  ParameterCounts count_parameters() const;

  /// Handles of shared modules, for identity checks.
  std::vector<std::size_t> decoder_handles() const { return decoder_.weight_handles(); }
  std::optional<std::size_t> generator_handle() const { return vamp_w_; }
  std::vector<std::size_t> prior_handles() const { return prior1_.weight_handles(); }

 private:
  const Mlp& top_net(std::size_t s) const;
  void check_component(std::size_t s) const;

  VaeConfig config_;
  ParameterStore store_;
  std::vector<Mlp> top_;    // flat encoder or q(z2|x)
  std::vector<Mlp> lower_;  // q(z1|z2,x)
  std::vector<std::unique_ptr<FlowStack>> flows_;
  Mlp decoder_;
  Mlp prior1_;
  std::optional<std::size_t> vamp_w_;
  std::optional<std::size_t> vamp_b_;
};

/// Uniform mixture over every row of every encoder output: each entry of
/// `encoded` holds one encoder's Gaussians at the K pseudo-inputs.
Var vampprior_mixture_log_prob(Var z, std::span<const GaussianVars> encoded);

/// Composite model: hierarchical bank, flows on z1, VampPrior on z2, shared
/// decoder and p(z1|z2). Throws ConfigError for a config outside that shape.
MixtureVae build_composite(VaeConfig config);

/// Checkpoint I/O: "MIXVI1" header, the model description, then named tensors.
void save_checkpoint(const MixtureVae& model, const std::string& path);
/// Throws VersionError on a header or model-description mismatch.
void load_checkpoint(MixtureVae& model, const std::string& path);
/// Reads only the model description stored in a checkpoint.
VaeConfig read_checkpoint_config(const std::string& path);

}  // namespace mixvi

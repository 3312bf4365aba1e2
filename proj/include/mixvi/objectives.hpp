#pragma once

// Variational bounds and importance-sampling estimators.
//
// Batches hold B datapoints. With L inner samples the sampled rows are laid
// out l-major: row l * B + b is draw l for datapoint b. Components draw their
// noise in order s = 0..S-1, and for the hierarchy z2 before z1, each as one
// (L*B) x d block of standard normals from the supplied Rng.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mixvi/autodiff.hpp"
#include "mixvi/densities.hpp"
#include "mixvi/flows.hpp"

namespace mixvi {

class Rng;
class MixtureVae;

/// log p(x | z) and log p(z) per sampled row, each (L*B) x 1.
struct LogJoint {
  Var log_likelihood;
  Var log_prior;
};

/// Receives the numerator latent rows (L*B of them) and the number of tiles L.
using LogJointFn = std::function<LogJoint(Var z, std::size_t tiles)>;
/// Hierarchical variant receiving (z1 after flows, z2).
using HierLogJointFn = std::function<LogJoint(Var z1, Var z2, std::size_t tiles)>;

/// One variational component at a batch: Gaussian base with B rows and an
/// optional flow (with its context, B rows) applied to base samples.
struct Component {
  GaussianVars base;
  const FlowStack* flow = nullptr;
  std::optional<Var> context;
  /// Binding the flow parameters live on; required when flow is set.
  const ParamBinding* params = nullptr;
};

/// Two-level component: q(z2|x) with B rows, and a map from z2 rows to the
/// lower-level component q(z1|z2,x) evaluated on those rows.
struct HierComponent {
  GaussianVars top;
  std::function<Component(Var z2)> lower;
};

/// Which density divides each sample's joint.
enum class Denominator {
  mixture,  ///< (1/S) sum_j q_j, every component evaluated on every sample
  own,      ///< only the sampling component (independent ensemble members)
};

struct BoundEstimate {
  double value = 0.0;  ///< mean over datapoints, nats
  Var objective;       ///< differentiable scalar with that value
  /// Per-datapoint values (B).
  std::vector<double> per_point;
  /// L = 1 split of the objective: mean log p(x|z) and mean
  /// log p(z) - log(denominator). Invalid for L > 1.
  Var recon;
  Var prior_term;
  std::size_t S = 1;
  std::size_t L = 1;
  bool differentiable = true;
  /// Number of cross-component density evaluations (q_j at samples of s, j != s).
  std::size_t cross_evaluations = 0;
};

BoundEstimate elbo(const Component& q, const LogJointFn& joint, Rng& rng);
BoundEstimate iwelbo(const Component& q, const LogJointFn& joint, std::size_t L, Rng& rng);
/// (1/S) sum_s log (1/L) sum_l p(x, z_sl) / ((1/S) sum_j q_j(z_sl)), with each
/// component contributing its own L draws.
BoundEstimate miselbo(std::span<const Component> bank, const LogJointFn& joint, std::size_t L, Rng& rng,
                      Denominator denominator = Denominator::mixture);
/// Both levels of term s are drawn from component s; q_j(z_s) evaluates
/// component j's full chain (including its lower-level flow) on those samples.
BoundEstimate miselbo_hierarchical(std::span<const HierComponent> bank, const HierLogJointFn& joint, std::size_t L,
                                   Rng& rng, Denominator denominator = Denominator::mixture);

/// recon + beta * prior_term. Throws ContractError unless 0 <= beta <= 1.
double beta_objective(double recon, double prior_term, double beta);
Var beta_objective(Var recon, Var prior_term, double beta);

/// beta(epoch) = min(epoch / epochs_to_one, 1); epochs_to_one = 0 means beta = 1.
struct WarmupSchedule {
  std::size_t epochs_to_one = 100;
  double beta(std::size_t epoch) const;
};

/// Self-normalised log importance weights of one or several proposals.
/// Rows are samples; `log_numerators` are log p, `log_components` the
/// per-proposal log densities (n x J) at those samples.
struct ImportanceWeightSet {
  std::vector<double> log_numerators;
  std::vector<double> log_denominators;

  /// Denominator log sum_j pi_j q_j; uniform weights when pi is empty.
  static ImportanceWeightSet mixture(std::vector<double> log_numerators, const Tensor& log_components,
                                     std::span<const double> pi = {});
  static ImportanceWeightSet single(std::vector<double> log_numerators, std::vector<double> log_proposal);
  std::vector<double> log_weights() const;
  /// exp(log_weights), normalised to sum 1.
  std::vector<double> normalized() const;
  double log_mean_weight() const;
  double ess() const;
};

/// Importance-weighted reverse KL -E[log (1/L) sum_l p(z_l) / q(z_l)] against
/// a plane target, for a single Gaussian or a uniform mixture (rows of a
/// 1 x d GaussianVars each). Differentiable scalar.
Var iw_kl_objective(std::span<const Component> q, const std::function<Var(Var)>& log_target, std::size_t L,
                    std::size_t batch, Rng& rng, Denominator denominator = Denominator::mixture,
                    std::size_t* cross_evaluations = nullptr);

enum class NllMode { mixture, single };

struct NllConfig {
  std::size_t L = 100;
  NllMode mode = NllMode::mixture;
  /// Repetitions S of the single-proposal estimator (ignored for mixtures).
  std::size_t repetitions = 1;
  std::uint64_t seed = 1;
  /// Upper bound on S * L * d_latent sampled values per datapoint.
  std::size_t max_samples = 20'000'000;
  /// Datapoints evaluated together.
  std::size_t chunk = 1;
};

struct NllEstimate {
  double nll = 0.0;  ///< mean over datapoints, nats
  double standard_error = 0.0;
  std::vector<double> per_point;
};

/// Component bank and joint of a model at a batch, for the estimators above.
struct ModelBatch {
  std::vector<Component> flat;
  std::vector<HierComponent> hier;
  LogJointFn joint;
  HierLogJointFn hier_joint;
  bool hierarchical = false;
};

/// Builds the bound ingredients of `model` for the binary batch x (B x d_x).
ModelBatch model_batch(const MixtureVae& model, const ParamBinding& params, const Tensor& x);

/// MISELBO (mixture denominator) or the ensemble bound of the model at x.
BoundEstimate model_bound(const MixtureVae& model, const ParamBinding& params, const Tensor& x, std::size_t L,
                          Rng& rng, Denominator denominator = Denominator::mixture);

/// L = 1 MISELBO of the hierarchical flow/VampPrior model at x.
BoundEstimate miselbo_composite(const MixtureVae& model, const ParamBinding& params, const Tensor& x, Rng& rng);

/// -mean over rows of the chosen log p(x) estimator. Datapoint i uses the
/// stream seeded with config.seed + i. Single mode uses component 0 only,
/// repeated config.repetitions times.
NllEstimate estimate_nll(const MixtureVae& model, const Tensor& data, const NllConfig& config);

/// nll / (d_x log 2).
double bits_per_dim(double nll_nats, std::size_t d_x);

}  // namespace mixvi

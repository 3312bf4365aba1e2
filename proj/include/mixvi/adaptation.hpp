#pragma once

// Learning loops: gradient VI on plane targets, deterministic-mixture
// population Monte Carlo, and Mixture VAE training.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mixvi/densities.hpp"
#include "mixvi/flows.hpp"
#include "mixvi/objectives.hpp"
#include "mixvi/parameters.hpp"

namespace mixvi {

class Rng;
class MixtureVae;
struct Dataset;

// ---- plane VI ------------------------------------------------------------------

enum class Vi2DMode { mixture, ensemble, iwvi, iaf };

Vi2DMode parse_vi2d_mode(const std::string& name);
std::string to_string(Vi2DMode mode);

struct Vi2DConfig {
  Vi2DMode mode = Vi2DMode::mixture;
  std::size_t S = 30;
  std::size_t L = 1;
  std::size_t steps = 2000;
  double lr = 0.1;
  /// Every component starts at mean (0, 0) with this log-variance per axis.
  double init_log_var = -5.0;
  /// Draws per component per step (each an independent L-sample replicate).
  std::size_t batch = 16;
  /// IAF: number of transforms and MADE hidden width (two layers).
  std::size_t flow_steps = 30;
  std::size_t made_hidden = 10;
  std::uint64_t seed = 1;
  /// Trace rows are kept every `trace_every` steps (and at the last step).
  std::size_t trace_every = 10;

  /// iwvi and iaf use one component; ensembles use L = 1.
  void validate() const;
  /// Defaults of each mode: mixture/ensemble S = 30, L = 1; iwvi S = 1, L = 30; iaf S = 1, L = 1.
  static Vi2DConfig defaults(Vi2DMode mode);
};

struct TraceRow {
  std::size_t step;
  std::size_t component;
  double mean_x, mean_y;
  double log_var_x, log_var_y;
};

/// Fraction of components assigned to each target mode (nearest mode by mean).
struct ModeSplit {
  std::vector<double> fraction;
  std::vector<std::size_t> assignment;
};

ModeSplit mode_split(std::span<const DiagGaussian> components, const Target2D& target);

struct Fit2DResult {
  /// Component (or IAF base) Gaussians after the last step.
  std::vector<DiagGaussian> components;
  std::vector<double> loss;  ///< objective value per step
  std::vector<TraceRow> trace;
  std::size_t cross_evaluations = 0;
  /// IAF only: the fitted flow and its parameters.
  std::shared_ptr<ParameterStore> store;
  std::shared_ptr<FlowStack> flow;
};

/// Adam on the importance-weighted KL from the origin. Mixtures share one
/// mixture-denominator objective; ensembles give each component its own.
/// Throws TrainingError naming the step on a non-finite loss.
Fit2DResult fit_2d(const Vi2DConfig& config, const Target2D& target);

/// n draws from a fitted approximation (uniform over components, or
/// through the IAF).
Tensor sample_fit(const Fit2DResult& fit, std::size_t n, Rng& rng);

// ---- DM-PMC ----------------------------------------------------------------------

enum class Weighting {
  deterministic_mixture,  ///< p / ((1/S) sum_j q_j)
  per_proposal,           ///< p / q_s for a draw from q_s
};

struct ParticleSystem {
  Tensor locations;  ///< S x 2 proposal means
  double sigma = 0.3;
  Tensor samples;    ///< (S*K) x 2, proposal s owns rows s*K .. s*K+K-1
  std::vector<double> log_weights;
  double ess = 0.0;

  std::size_t proposals() const noexcept { return locations.rows(); }
  /// S locations uniform on [-half_width, half_width]^2.
  static ParticleSystem uniform(std::size_t S, double half_width, double sigma, Rng& rng);
};

/// One sampling and weighting pass at fixed proposals.
struct WeightedSample {
  Tensor samples;
  std::vector<double> log_weights;
  std::vector<double> mean;  ///< self-normalised target mean
  double z = 0.0;            ///< mean unnormalised weight
  double ess = 0.0;
};

/// K draws per proposal of `ps`, weighted by `weighting`. Throws
/// DegenerateWeightsError when every weight is zero.
WeightedSample importance_pass(const ParticleSystem& ps, const Target2D& target, std::size_t K, Rng& rng,
                               Weighting weighting = Weighting::deterministic_mixture);

struct DmpmcConfig {
  std::size_t K = 20;
  std::size_t iterations = 200;
};

struct DmpmcIteration {
  std::vector<double> mean;
  double z = 0.0;
  double ess = 0.0;
};

struct DmpmcResult {
  ParticleSystem particles;  ///< after the last resampling
  std::vector<DmpmcIteration> iterations;
  /// Averages of the per-iteration estimates with their standard errors.
  std::vector<double> mean;
  std::vector<double> mean_se;
  double z = 0.0;
  double z_se = 0.0;
};

/// Sample, weight with the full mixture denominator, and resample S new
/// locations from all S*K draws by multinomial resampling, `iterations`
/// times. ContractError for fewer than two proposals.
DmpmcResult dmpmc_iterate(ParticleSystem ps, const Target2D& target, const DmpmcConfig& config, Rng& rng);

/// Per-proposal versus mixture weighting on shared draws at fixed proposals.
struct WeightingComparison {
  std::vector<double> mixture_weight_variance;  ///< per repetition
  std::vector<double> naive_weight_variance;
  std::vector<double> mixture_z;
  std::vector<double> naive_z;
};

WeightingComparison compare_weightings(const ParticleSystem& ps, const Target2D& target, std::size_t K,
                                       std::size_t repetitions, Rng& rng);

/// Paired estimate of Var(Z_naive) - Var(Z_mixture) around the known
/// normalising constant, with its standard error over repetitions.
struct VarianceGap {
  double gap = 0.0;
  double se = 0.0;
};

VarianceGap z_variance_gap(const WeightingComparison& cmp, double true_z);

// ---- Mixture VAE training ------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 150;
  std::size_t batch_size = 100;
  double lr = 1e-3;
  std::size_t warmup_epochs = 100;
  std::size_t patience = 20;
  std::uint64_t seed = 1;
  /// Samples per component in the training and validation bounds.
  std::size_t L = 1;
  /// mixture: Mixture VAE; own: Ensemble VAE (independent component bounds).
  Denominator denominator = Denominator::mixture;
  double min_improvement = 1e-6;
};

struct EpochRecord {
  std::size_t epoch = 0;  ///< 1-based
  double beta = 0.0;
  double train_objective = 0.0;
  double val_miselbo = 0.0;
  double wall_seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  bool stopped_early = false;
};

/// Per-epoch observer, called after validation with the current parameters.
using EpochCallback = std::function<void(const EpochRecord&, const MixtureVae&)>;

/// Adam on the warm-up objective over dynamically binarised batches.
/// Validation is the L-sample MISELBO on a fixed binarisation of `val`; the
/// best parameters are restored at the end. Deterministic given the seed.
TrainReport train_vae(MixtureVae& model, const Dataset& train, const Dataset& val, const TrainConfig& config,
                      const EpochCallback& on_epoch = {});

/// Mean MISELBO (nats) over `data`, evaluated in batches without gradients.
double evaluate_bound(const MixtureVae& model, const Tensor& binary_data, std::size_t L, std::uint64_t seed,
                      std::size_t batch_size = 100);

/// CSV with header epoch,beta,train_objective,val_miselbo[,wall_seconds].
std::string epoch_csv(const TrainReport& report, bool with_wall_seconds = true);

}  // namespace mixvi

#pragma once

// Diversity and representation diagnostics.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mixvi/densities.hpp"
#include "mixvi/tensor.hpp"

namespace mixvi {

class Rng;
class MixtureVae;
struct Dataset;

struct JsdEstimate {
  double raw = 0.0;
  double clamped = 0.0;  ///< raw clipped to [0, log S]
};

/// Monte Carlo Jensen-Shannon divergence of a uniform mixture, as the mean over
/// components of log q_s(z) - log q_mix(z) with n draws z ~ q_s each.
JsdEstimate jsd_mc(std::span<const DiagGaussian> bank, std::size_t n_samples, Rng& rng);

/// Counts of (pred, truth) label pairs; labels are remapped to 0..k-1.
struct ContingencyTable {
  std::vector<std::vector<std::size_t>> counts;
  std::vector<std::size_t> row_sums;  ///< per predicted cluster
  std::vector<std::size_t> col_sums;  ///< per true class
  std::size_t total = 0;

  static ContingencyTable build(std::span<const int> pred, std::span<const int> truth);
};

/// Adjusted Rand index; ContractError on empty or unequal inputs. Two
/// single-cluster labelings score 1.
double ari(std::span<const int> pred, std::span<const int> truth);

struct NmiResult {
  double value = 0.0;
  /// Set when a labeling is constant; value is then 0.
  bool degenerate = false;
};

/// Mutual information normalised by sqrt(H(pred) H(truth)).
NmiResult nmi(std::span<const int> pred, std::span<const int> truth);

struct KMeansConfig {
  std::size_t restarts = 10;
  std::size_t max_iterations = 300;
};

struct KMeansResult {
  std::vector<int> labels;
  Tensor centroids;  ///< k x d
  double inertia = 0.0;
};

/// Lloyd iterations from k-means++ seeds; the restart with the lowest
/// inertia is returned. ContractError when k is 0 or exceeds the row count.
KMeansResult kmeans(const Tensor& X, std::size_t k, Rng& rng, const KMeansConfig& config = {});

/// One feature row and class label per datapoint.
struct LatentFeatures {
  Tensor features;
  std::vector<int> labels;
};

/// Concatenation over components of (mean_s, log_var_s) of the top latent:
/// S * 2 * d_z values per datapoint.
LatentFeatures mixture_features(const MixtureVae& model, const Dataset& data);

/// `n_draws` reparameterised samples from component 0 for every datapoint,
/// concatenated. ContractError unless n_draws * d_z == expected_length.
LatentFeatures baseline_features_by_sampling(const MixtureVae& model, const Dataset& data, std::size_t n_draws,
                                             std::size_t expected_length, Rng& rng);

struct ProbeConfig {
  double l2 = 1e-4;
  double tolerance = 1e-6;
  std::size_t max_iterations = 5000;
};

struct ProbeResult {
  double accuracy = 0.0;
  std::size_t iterations = 0;
  /// Test contains a class never seen in training; those points count as errors.
  bool unseen_test_classes = false;
};

/// Softmax regression on standardised features, trained by full-batch
/// gradient descent until the relative loss change drops below the
/// tolerance; returns test accuracy.
ProbeResult linear_probe(const LatentFeatures& train, const LatentFeatures& test, const ProbeConfig& config = {});

struct MetricRecord {
  std::string metric;
  std::size_t S = 1;
  std::string mode;
  double value = 0.0;
  double stderr_ = 0.0;
  std::size_t n = 0;
};

/// JSON array of {metric, S, mode, value, stderr, n}.
std::string metrics_json(std::span<const MetricRecord> records);

}  // namespace mixvi

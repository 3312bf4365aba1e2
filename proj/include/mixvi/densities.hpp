#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mixvi/autodiff.hpp"
#include "mixvi/tensor.hpp"

namespace mixvi {

inline constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

/// Diagonal Gaussian with mean and log-variance vectors of equal length.
struct DiagGaussian {
  std::vector<double> mean;
  std::vector<double> log_var;

  DiagGaussian() = default;
  DiagGaussian(std::vector<double> m, std::vector<double> lv);
  static DiagGaussian standard(std::size_t dim);
  std::size_t dim() const noexcept { return mean.size(); }
  double entropy() const;
};

/// Tape-side counterpart: rows of means and log-variances.
struct GaussianVars {
  Var mean;
  Var log_var;
};

double log_sum_exp(std::span<const double> values);
double log_mean_exp(std::span<const double> values);

double gaussian_log_prob(std::span<const double> z, const DiagGaussian& g);
/// z = mean + exp(log_var / 2) * eps.
std::vector<double> gaussian_rsample(const DiagGaussian& g, std::span<const double> eps);
/// Differentiable reparameterised draw; eps has the shape of the broadcast result.
Var gaussian_rsample(const GaussianVars& g, const Tensor& eps);

/// Equally weighted mixture of diagonal Gaussians on a common space.
class UniformMixture {
 public:
  explicit UniformMixture(std::vector<DiagGaussian> components);
  std::size_t size() const noexcept { return components_.size(); }
  std::size_t dim() const noexcept { return components_.front().dim(); }
  const DiagGaussian& operator[](std::size_t i) const { return components_[i]; }
  const std::vector<DiagGaussian>& components() const noexcept { return components_; }

 private:
  std::vector<DiagGaussian> components_;
};

/// log((1/S) sum_j exp(log q_j(z))), log-sum-exp stabilised.
double mixture_log_prob(std::span<const double> z, const UniformMixture& m);
/// Same reduction applied to precomputed component log densities.
double mixture_log_prob_from_components(std::span<const double> component_log_probs);

/// Binary x against logits, numerically stable.
double bernoulli_log_prob(std::span<const double> x, std::span<const double> logits);

/// Analytic densities on the plane used by the two-dimensional experiments.
///
///  * bimodal: 0.8 N((1,1), 0.1 I) + 0.2 N((-1,-1), 0.1 I), normalised.
///  * ring: Gaussian shell -(|z| - 2)^2 / (2 * 0.2^2), unnormalised with peak
///    value 0 on the circle |z| = 2. Self-normalised estimators and VI
///    objectives only need it up to a constant.
///  * gaussian: single isotropic Gaussian, normalised.
///
/// `log_scale` adds a constant to every log density (multiplies the target
/// by exp(log_scale)).
class Target2D {
 public:
  enum class Kind { ring, bimodal, gaussian };

  static Target2D bimodal();
  static Target2D ring(double radius = 2.0, double width = 0.2);
  static Target2D gaussian(double mean_x, double mean_y, double variance);

  Kind kind() const noexcept { return kind_; }
  bool normalized() const noexcept { return kind_ != Kind::ring && log_scale_ == 0.0; }
  double radius() const noexcept { return radius_; }
  double width() const noexcept { return width_; }
  double log_scale() const noexcept { return log_scale_; }
  Target2D scaled(double log_factor) const;

  /// Mode centres and weights (bimodal: two, gaussian: one, ring: none).
  const std::vector<std::vector<double>>& mode_means() const noexcept { return mode_means_; }
  const std::vector<double>& mode_weights() const noexcept { return mode_weights_; }
  double mode_variance() const noexcept { return mode_variance_; }

  double log_density(double x, double y) const;
  double log_density(std::span<const double> z) const;
  /// Rows of z (n x 2) -> n x 1.
  Var log_density(Var z) const;

 private:
  Target2D() = default;
  Kind kind_ = Kind::bimodal;
  std::vector<std::vector<double>> mode_means_;
  std::vector<double> mode_weights_;
  double mode_variance_ = 0.1;
  double radius_ = 2.0;
  double width_ = 0.2;
  double log_scale_ = 0.0;
};

}  // namespace mixvi

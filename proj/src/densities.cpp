#include "mixvi/densities.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mixvi/errors.hpp"

namespace mixvi {

DiagGaussian::DiagGaussian(std::vector<double> m, std::vector<double> lv) : mean(std::move(m)), log_var(std::move(lv)) {
  if (mean.size() != log_var.size()) throw DimensionError("DiagGaussian: mean and log_var lengths differ");
  for (double v : log_var) {
    if (!std::isfinite(v)) throw NumericalError("DiagGaussian: non-finite log variance");
  }
}

DiagGaussian DiagGaussian::standard(std::size_t dim) {
  return DiagGaussian(std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0));
}

double DiagGaussian::entropy() const {
  double h = 0.0;
  for (double lv : log_var) h += 0.5 * (kLogTwoPi + 1.0 + lv);
  return h;
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw ContractError("log_sum_exp of empty range");
  const double m = *std::max_element(values.begin(), values.end());
  if (m == -std::numeric_limits<double>::infinity()) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

double log_mean_exp(std::span<const double> values) {
  return log_sum_exp(values) - std::log(static_cast<double>(values.size()));
}

double gaussian_log_prob(std::span<const double> z, const DiagGaussian& g) {
  if (z.size() != g.dim()) throw DimensionError("gaussian_log_prob: dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double d = z[i] - g.mean[i];
    acc += kLogTwoPi + g.log_var[i] + d * d * std::exp(-g.log_var[i]);
  }
  return -0.5 * acc;
}

std::vector<double> gaussian_rsample(const DiagGaussian& g, std::span<const double> eps) {
  if (eps.size() != g.dim()) throw DimensionError("gaussian_rsample: dimension mismatch");
  std::vector<double> z(g.dim());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = g.mean[i] + std::exp(0.5 * g.log_var[i]) * eps[i];
  return z;
}

Var gaussian_rsample(const GaussianVars& g, const Tensor& eps) {
  Tape& tape = g.mean.tape();
  const Var noise = tape.constant(eps);
  const Var sd = exp(scale(g.log_var, 0.5));
  return add(g.mean, mul(sd, noise));
}

UniformMixture::UniformMixture(std::vector<DiagGaussian> components) : components_(std::move(components)) {
  if (components_.empty()) throw ContractError("UniformMixture: needs at least one component");
  for (const auto& c : components_) {
    if (c.dim() != components_.front().dim()) throw DimensionError("UniformMixture: component dims differ");
  }
}

double mixture_log_prob_from_components(std::span<const double> component_log_probs) {
  if (component_log_probs.empty()) throw ContractError("mixture_log_prob: empty mixture");
  return log_mean_exp(component_log_probs);
}

double mixture_log_prob(std::span<const double> z, const UniformMixture& m) {
  std::vector<double> lp;
  lp.reserve(m.size());
  for (const auto& c : m.components()) lp.push_back(gaussian_log_prob(z, c));
  return mixture_log_prob_from_components(lp);
}

double bernoulli_log_prob(std::span<const double> x, std::span<const double> logits) {
  if (x.size() != logits.size()) throw DimensionError("bernoulli_log_prob: dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] != 0.0 && x[i] != 1.0) throw ContractError("bernoulli_log_prob: x must be binary");
    const double l = logits[i];
    const double softplus = std::max(l, 0.0) + std::log1p(std::exp(-std::abs(l)));
    acc += x[i] * l - softplus;
  }
  return acc;
}

// ---- Target2D -------------------------------------------------------------

Target2D Target2D::bimodal() {
  Target2D t;
  t.kind_ = Kind::bimodal;
  t.mode_means_ = {{1.0, 1.0}, {-1.0, -1.0}};
  t.mode_weights_ = {0.8, 0.2};
  t.mode_variance_ = 0.1;
  return t;
}

Target2D Target2D::ring(double radius, double width) {
  if (!(radius > 0.0) || !(width > 0.0)) throw ContractError("ring target needs positive radius and width");
  Target2D t;
  t.kind_ = Kind::ring;
  t.radius_ = radius;
  t.width_ = width;
  return t;
}

Target2D Target2D::gaussian(double mean_x, double mean_y, double variance) {
  if (!(variance > 0.0)) throw ContractError("gaussian target needs positive variance");
  Target2D t;
  t.kind_ = Kind::gaussian;
  t.mode_means_ = {{mean_x, mean_y}};
  t.mode_weights_ = {1.0};
  t.mode_variance_ = variance;
  return t;
}

Target2D Target2D::scaled(double log_factor) const {
  Target2D t = *this;
  t.log_scale_ += log_factor;
  return t;
}

double Target2D::log_density(double x, double y) const {
  if (kind_ == Kind::ring) {
    const double d = std::hypot(x, y) - radius_;
    return log_scale_ - d * d / (2.0 * width_ * width_);
  }
  std::vector<double> terms;
  terms.reserve(mode_means_.size());
  const double lv = std::log(mode_variance_);
  for (std::size_t k = 0; k < mode_means_.size(); ++k) {
    const double dx = x - mode_means_[k][0];
    const double dy = y - mode_means_[k][1];
    terms.push_back(std::log(mode_weights_[k]) - kLogTwoPi - lv - 0.5 * (dx * dx + dy * dy) / mode_variance_);
  }
  return log_scale_ + log_sum_exp(terms);
}

double Target2D::log_density(std::span<const double> z) const {
  if (z.size() != 2) throw DimensionError("Target2D: expects two-dimensional points");
  return log_density(z[0], z[1]);
}

Var Target2D::log_density(Var z) const {
  if (z.cols() != 2) throw DimensionError("Target2D: expects n x 2 rows");
  Tape& tape = z.tape();
  if (kind_ == Kind::ring) {
    const Var norm = sqrt(sum_axis(square(z), 1));
    const Var dev = add_scalar(norm, -radius_);
    return add_scalar(scale(square(dev), -1.0 / (2.0 * width_ * width_)), log_scale_);
  }
  std::vector<Var> cols;
  const Var lv = tape.constant(Tensor::vector({std::log(mode_variance_), std::log(mode_variance_)}));
  for (std::size_t k = 0; k < mode_means_.size(); ++k) {
    const Var mu = tape.constant(Tensor::vector(mode_means_[k]));
    cols.push_back(add_scalar(gaussian_log_prob_rows(z, mu, lv), std::log(mode_weights_[k])));
  }
  const Var stacked = concat_cols(cols);
  return add_scalar(logsumexp(stacked, 1), log_scale_);
}

}  // namespace mixvi

#include "mixvi/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>

#include "mixvi/autodiff.hpp"
#include "mixvi/data.hpp"
#include "mixvi/errors.hpp"
#include "mixvi/models.hpp"
#include "mixvi/rng.hpp"

namespace mixvi {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> view(const Tensor& t) { return {t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())}; }

std::vector<int> relabel(std::span<const int> labels, std::size_t* count) {
  std::map<int, int> ids;
  std::vector<int> out;
  out.reserve(labels.size());
  for (int l : labels) out.push_back(ids.try_emplace(l, static_cast<int>(ids.size())).first->second);
  *count = ids.size();
  return out;
}

double choose2(double n) { return n * (n - 1) / 2.0; }

void check_pair(std::span<const int> pred, std::span<const int> truth, const char* who) {
  if (pred.empty()) throw ContractError(std::string(who) + ": empty labeling");
  if (pred.size() != truth.size()) throw ContractError(std::string(who) + ": labelings differ in length");
}

constexpr std::size_t kFeatureChunk = 500;

}  // namespace

JsdEstimate jsd_mc(std::span<const DiagGaussian> bank, std::size_t n_samples, Rng& rng) {
  if (bank.empty() || n_samples == 0) throw ContractError("jsd_mc: need at least one component and one sample");
  const std::size_t S = bank.size();
  if (S == 1) return {};
  const UniformMixture mix(std::vector<DiagGaussian>(bank.begin(), bank.end()));
  double log_ratio = 0.0;
  for (const DiagGaussian& q : bank) {
    const Tensor eps = rng.normal_matrix(n_samples, q.mean.size());
    for (std::size_t i = 0; i < n_samples; ++i) {
      const std::vector<double> z =
          gaussian_rsample(q, eps.values().subspan(i * q.mean.size(), q.mean.size()));
      log_ratio += gaussian_log_prob(z, q) - mixture_log_prob(z, mix);
    }
  }
  JsdEstimate e;
  e.raw = log_ratio / static_cast<double>(S * n_samples);
  e.clamped = std::clamp(e.raw, 0.0, std::log(static_cast<double>(S)));
  return e;
}

ContingencyTable ContingencyTable::build(std::span<const int> pred, std::span<const int> truth) {
  check_pair(pred, truth, "contingency table");
  std::size_t rows = 0, cols = 0;
  const std::vector<int> p = relabel(pred, &rows), t = relabel(truth, &cols);
  ContingencyTable c;
  c.counts.assign(rows, std::vector<std::size_t>(cols, 0));
  c.row_sums.assign(rows, 0);
  c.col_sums.assign(cols, 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    ++c.counts[p[i]][t[i]];
    ++c.row_sums[p[i]];
    ++c.col_sums[t[i]];
  }
  c.total = p.size();
  return c;
}

double ari(std::span<const int> pred, std::span<const int> truth) {
  const ContingencyTable c = ContingencyTable::build(pred, truth);
  double index = 0.0, a = 0.0, b = 0.0;
  for (const auto& row : c.counts) {
    for (std::size_t n : row) index += choose2(static_cast<double>(n));
  }
  for (std::size_t n : c.row_sums) a += choose2(static_cast<double>(n));
  for (std::size_t n : c.col_sums) b += choose2(static_cast<double>(n));
  const double expected = a * b / choose2(static_cast<double>(c.total));
  const double max_index = 0.5 * (a + b);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

NmiResult nmi(std::span<const int> pred, std::span<const int> truth) {
  const ContingencyTable c = ContingencyTable::build(pred, truth);
  const double n = static_cast<double>(c.total);
  auto entropy = [n](const std::vector<std::size_t>& sums) {
    double h = 0.0;
    for (std::size_t k : sums) {
      if (k > 0) h -= (k / n) * std::log(k / n);
    }
    return h;
  };
  const double hp = entropy(c.row_sums), ht = entropy(c.col_sums);
  if (hp <= 0.0 || ht <= 0.0) return {0.0, true};
  double mi = 0.0;
  for (std::size_t i = 0; i < c.counts.size(); ++i) {
    for (std::size_t j = 0; j < c.counts[i].size(); ++j) {
      const double nij = static_cast<double>(c.counts[i][j]);
      if (nij > 0) mi += (nij / n) * std::log(n * nij / (static_cast<double>(c.row_sums[i]) * c.col_sums[j]));
    }
  }
  return {std::clamp(mi / std::sqrt(hp * ht), 0.0, 1.0), false};
}

KMeansResult kmeans(const Tensor& X, std::size_t k, Rng& rng, const KMeansConfig& config) {
  if (X.rank() != 2 || X.rows() == 0) throw ContractError("kmeans: need a non-empty matrix");
  const std::size_t n = X.rows(), d = X.cols();
  if (k == 0 || k > n) throw ContractError("kmeans: k must be in [1, n]");
  const auto x = view(X);
  const Eigen::VectorXd norms = x.rowwise().squaredNorm();

  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t restart = 0; restart < std::max<std::size_t>(config.restarts, 1); ++restart) {
    // k-means++ seeding.
    RowMatrix centres(k, d);
    centres.row(0) = x.row(static_cast<Eigen::Index>(rng.index(n)));
    Eigen::VectorXd dist = (x.rowwise() - centres.row(0)).rowwise().squaredNorm();
    for (std::size_t c = 1; c < k; ++c) {
      const double total = dist.sum();
      std::size_t pick = rng.index(n);
      if (total > 0.0) {
        double u = rng.uniform() * total;
        for (pick = 0; pick + 1 < n; ++pick) {
          u -= dist[static_cast<Eigen::Index>(pick)];
          if (u < 0.0) break;
        }
      }
      centres.row(static_cast<Eigen::Index>(c)) = x.row(static_cast<Eigen::Index>(pick));
      dist = dist.cwiseMin((x.rowwise() - centres.row(static_cast<Eigen::Index>(c))).rowwise().squaredNorm());
    }

    std::vector<int> labels(n, -1);
    double inertia = 0.0;
    for (std::size_t it = 0; it < config.max_iterations; ++it) {
      const RowMatrix cross = x * centres.transpose();
      const Eigen::VectorXd cnorm = centres.rowwise().squaredNorm();
      bool changed = false;
      inertia = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        Eigen::Index arg = 0;
        const auto ii = static_cast<Eigen::Index>(i);
        (cnorm.transpose() - 2.0 * cross.row(ii)).minCoeff(&arg);
        inertia += std::max(0.0, norms[ii] - 2.0 * cross(ii, arg) + cnorm[arg]);
        if (labels[i] != static_cast<int>(arg)) {
          labels[i] = static_cast<int>(arg);
          changed = true;
        }
      }
      if (!changed) break;
      RowMatrix sums = RowMatrix::Zero(k, d);
      std::vector<std::size_t> counts(k, 0);
      for (std::size_t i = 0; i < n; ++i) {
        sums.row(labels[i]) += x.row(static_cast<Eigen::Index>(i));
        ++counts[labels[i]];
      }
      for (std::size_t c = 0; c < k; ++c) {
        // An emptied cluster keeps its previous centre.
        if (counts[c] > 0) centres.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / counts[c];
      }
    }
    if (inertia < best.inertia) {
      best.inertia = inertia;
      best.labels = labels;
      best.centroids = Tensor::matrix(k, d);
      std::copy_n(centres.data(), k * d, best.centroids.data());
    }
  }
  return best;
}

LatentFeatures mixture_features(const MixtureVae& model, const Dataset& data) {
  const std::size_t S = model.components(), n = data.size();
  const std::size_t dz = model.config().hierarchical ? model.config().latent_top : model.config().latent;
  LatentFeatures out{Tensor::matrix(n, S * 2 * dz), data.labels};
  for (std::size_t start = 0; start < n; start += kFeatureChunk) {
    const std::size_t end = std::min(n, start + kFeatureChunk);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Tape t;
    const ParamBinding params(t, model.store(), false);
    const Var x = t.constant(gather_rows(data.images, idx));
    for (std::size_t s = 0; s < S; ++s) {
      const EncoderOutput e = model.encode(params, s, x);
      const Tensor& mu = e.q.mean.value();
      const Tensor& lv = e.q.log_var.value();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t j = 0; j < dz; ++j) {
          out.features(start + r, s * 2 * dz + j) = mu(r, j);
          out.features(start + r, s * 2 * dz + dz + j) = lv(r, j);
        }
      }
    }
  }
  return out;
}

LatentFeatures baseline_features_by_sampling(const MixtureVae& model, const Dataset& data, std::size_t n_draws,
                                             std::size_t expected_length, Rng& rng) {
  const std::size_t dz = model.config().hierarchical ? model.config().latent_top : model.config().latent;
  if (n_draws * dz != expected_length) {
    throw ContractError("baseline features: " + std::to_string(n_draws) + " draws of width " + std::to_string(dz) +
                        " do not give length " + std::to_string(expected_length));
  }
  const std::size_t n = data.size();
  LatentFeatures out{Tensor::matrix(n, expected_length), data.labels};
  for (std::size_t start = 0; start < n; start += kFeatureChunk) {
    const std::size_t end = std::min(n, start + kFeatureChunk);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Tape t;
    const ParamBinding params(t, model.store(), false);
    const EncoderOutput e = model.encode(params, 0, t.constant(gather_rows(data.images, idx)));
    const Tensor& mu = e.q.mean.value();
    const Tensor& lv = e.q.log_var.value();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const Tensor eps = rng.normal_matrix(n_draws, dz);
      for (std::size_t k = 0; k < n_draws; ++k) {
        for (std::size_t j = 0; j < dz; ++j) {
          out.features(start + r, k * dz + j) = mu(r, j) + std::exp(0.5 * lv(r, j)) * eps(k, j);
        }
      }
    }
  }
  return out;
}

ProbeResult linear_probe(const LatentFeatures& train, const LatentFeatures& test, const ProbeConfig& config) {
  if (train.features.rows() != train.labels.size() || test.features.rows() != test.labels.size()) {
    throw ContractError("linear_probe: features and labels differ in length");
  }
  if (train.features.cols() != test.features.cols()) throw DimensionError("linear_probe: feature widths differ");
  std::map<int, int> classes;
  for (int l : train.labels) classes.try_emplace(l, 0);
  if (classes.size() < 2) throw ContractError("linear_probe: need at least two training classes");
  int next = 0;
  for (auto& [label, id] : classes) id = next++;

  const std::size_t n = train.features.rows(), d = train.features.cols(), C = classes.size();
  // Standardise with training statistics; constant columns are centred only.
  const auto xr = view(train.features);
  const Eigen::RowVectorXd mu = xr.colwise().mean();
  Eigen::RowVectorXd sd = ((xr.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(n)).sqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j) {
    if (!(sd[j] > 1e-12)) sd[j] = 1.0;
  }
  auto standardise = [&](const Tensor& f) {
    Eigen::MatrixXd z(f.rows(), d + 1);
    z.leftCols(d) = (view(f).rowwise() - mu).array().rowwise() / sd.array();
    z.col(d).setOnes();
    return z;
  };
  const Eigen::MatrixXd X = standardise(train.features);
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(n, C);
  for (std::size_t i = 0; i < n; ++i) Y(i, classes.at(train.labels[i])) = 1.0;

  // Step 1 / L with L bounding the Hessian of the mean softmax loss.
  const Eigen::MatrixXd gram = X.transpose() * X / static_cast<double>(n);
  const double lipschitz = 0.5 * Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram, Eigen::EigenvaluesOnly)
                                     .eigenvalues()
                                     .maxCoeff() +
                           config.l2;
  const double step = 1.0 / lipschitz;

  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(d + 1, C);
  auto loss_and_probs = [&](Eigen::MatrixXd& P) {
    P = X * W;
    P.colwise() -= P.rowwise().maxCoeff();
    P = P.array().exp();
    const Eigen::VectorXd z = P.rowwise().sum();
    P.array().colwise() /= z.array();
    const double nll = -(Y.array() * P.array().max(1e-300).log()).sum() / static_cast<double>(n);
    return nll + 0.5 * config.l2 * W.topRows(d).squaredNorm();
  };
  ProbeResult result;
  Eigen::MatrixXd P;
  double loss = loss_and_probs(P);
  for (result.iterations = 0; result.iterations < config.max_iterations; ++result.iterations) {
    Eigen::MatrixXd grad = X.transpose() * (P - Y) / static_cast<double>(n);
    grad.topRows(d) += config.l2 * W.topRows(d);
    W -= step * grad;
    const double next_loss = loss_and_probs(P);
    if (!std::isfinite(next_loss)) throw NumericalError("linear_probe: non-finite loss");
    const bool done = std::abs(loss - next_loss) <= config.tolerance * std::max(1.0, std::abs(loss));
    loss = next_loss;
    if (done) {
      ++result.iterations;
      break;
    }
  }

  const Eigen::MatrixXd scores = standardise(test.features) * W;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.labels.size(); ++i) {
    const auto it = classes.find(test.labels[i]);
    if (it == classes.end()) {
      result.unseen_test_classes = true;
      continue;
    }
    Eigen::Index arg = 0;
    scores.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
    correct += arg == it->second;
  }
  result.accuracy = test.labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test.labels.size());
  return result;
}

std::string metrics_json(std::span<const MetricRecord> records) {
  nlohmann::json out = nlohmann::json::array();
  for (const MetricRecord& r : records) {
    out.push_back({{"metric", r.metric}, {"S", r.S}, {"mode", r.mode}, {"value", r.value}, {"stderr", r.stderr_},
                   {"n", r.n}});
  }
  return out.dump(2);
}

}  // namespace mixvi

#include "mixvi/adaptation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "mixvi/adam.hpp"
#include "mixvi/data.hpp"
#include "mixvi/errors.hpp"
#include "mixvi/models.hpp"
#include "mixvi/rng.hpp"

namespace mixvi {

// ---- plane VI ------------------------------------------------------------------

Vi2DMode parse_vi2d_mode(const std::string& name) {
  if (name == "mixture") return Vi2DMode::mixture;
  if (name == "ensemble") return Vi2DMode::ensemble;
  if (name == "iwvi") return Vi2DMode::iwvi;
  if (name == "iaf") return Vi2DMode::iaf;
  throw ConfigError("unknown plane VI mode '" + name + "' (mixture, ensemble, iwvi, iaf)");
}

std::string to_string(Vi2DMode mode) {
  switch (mode) {
    case Vi2DMode::mixture: return "mixture";
    case Vi2DMode::ensemble: return "ensemble";
    case Vi2DMode::iwvi: return "iwvi";
    case Vi2DMode::iaf: return "iaf";
  }
  return "?";
}

void Vi2DConfig::validate() const {
  if (S == 0 || L == 0 || batch == 0) throw ConfigError("S, L and batch must be positive");
  if ((mode == Vi2DMode::iwvi || mode == Vi2DMode::iaf) && S != 1) {
    throw ConfigError(to_string(mode) + " fits a single approximation (S = 1)");
  }
  if (mode == Vi2DMode::ensemble && L != 1) throw ConfigError("ensemble members are trained with L = 1");
  if (mode == Vi2DMode::iaf && (flow_steps == 0 || made_hidden == 0)) throw ConfigError("iaf needs flow steps");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (trace_every == 0) throw ConfigError("trace_every must be positive");
}

Vi2DConfig Vi2DConfig::defaults(Vi2DMode mode) {
  Vi2DConfig c;
  c.mode = mode;
  if (mode == Vi2DMode::iwvi) {
    c.S = 1;
    c.L = 30;
  } else if (mode == Vi2DMode::iaf) {
    c.S = 1;
  }
  return c;
}

ModeSplit mode_split(std::span<const DiagGaussian> components, const Target2D& target) {
  const auto& modes = target.mode_means();
  if (modes.empty()) throw ContractError("mode_split: target has no discrete modes");
  ModeSplit split;
  std::vector<std::size_t> counts(modes.size(), 0);
  for (const DiagGaussian& q : components) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < modes.size(); ++k) {
      const double d = std::hypot(q.mean[0] - modes[k][0], q.mean[1] - modes[k][1]);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    split.assignment.push_back(best);
    ++counts[best];
  }
  for (std::size_t c : counts) split.fraction.push_back(static_cast<double>(c) / static_cast<double>(components.size()));
  return split;
}

Fit2DResult fit_2d(const Vi2DConfig& config, const Target2D& target) {
  config.validate();
  Rng rng(config.seed);
  auto store = std::make_shared<ParameterStore>();
  std::vector<std::pair<std::size_t, std::size_t>> handles;
  for (std::size_t s = 0; s < config.S; ++s) {
    handles.emplace_back(store->add("q" + std::to_string(s) + ".mean", Tensor::matrix(1, 2)),
                         store->add("q" + std::to_string(s) + ".log_var", Tensor::matrix(1, 2, config.init_log_var)));
  }
  std::shared_ptr<FlowStack> flow;
  if (config.mode == Vi2DMode::iaf) {
    flow = std::make_shared<FlowStack>(*store, "flow", config.flow_steps,
                                       MadeConfig{2, {config.made_hidden, config.made_hidden}, 0}, rng);
  }
  const Denominator den = config.mode == Vi2DMode::ensemble ? Denominator::own : Denominator::mixture;
  const auto log_target = [&target](Var z) { return target.log_density(z); };

  Fit2DResult result;
  auto record_trace = [&](std::size_t step) {
    for (std::size_t s = 0; s < config.S; ++s) {
      const Tensor& m = store->value(handles[s].first);
      const Tensor& lv = store->value(handles[s].second);
      result.trace.push_back({step, s, m[0], m[1], lv[0], lv[1]});
    }
  };
  record_trace(0);

  Adam adam({.lr = config.lr});
  for (std::size_t step = 1; step <= config.steps; ++step) {
    Tape tape;
    const ParamBinding params(tape, *store);
    std::vector<Component> q;
    for (const auto& [m, lv] : handles) {
      Component c;
      c.base = {params[m], params[lv]};
      c.flow = flow.get();
      c.params = &params;
      q.push_back(std::move(c));
    }
    double value = 0.0;
    try {
      const Var loss =
          iw_kl_objective(q, log_target, config.L, config.batch, rng, den, &result.cross_evaluations);
      value = loss.item();
      tape.backward(loss);
      adam.step(*store, params.gradients());
    } catch (const TrainingError&) {
      throw;
    } catch (const NumericalError& e) {
      throw TrainingError(std::string("fit_2d diverged: ") + e.what(), "step " + std::to_string(step));
    }
    if (!std::isfinite(value)) throw TrainingError("fit_2d: non-finite loss", "step " + std::to_string(step));
    result.loss.push_back(value);
    if (step % config.trace_every == 0 || step == config.steps) record_trace(step);
  }
  for (const auto& [m, lv] : handles) {
    const Tensor& mv = store->value(m);
    const Tensor& lvv = store->value(lv);
    result.components.emplace_back(std::vector<double>(mv.values().begin(), mv.values().end()),
                                   std::vector<double>(lvv.values().begin(), lvv.values().end()));
  }
  result.store = store;
  result.flow = flow;
  return result;
}

Tensor sample_fit(const Fit2DResult& fit, std::size_t n, Rng& rng) {
  if (fit.components.empty()) throw ContractError("sample_fit: empty fit");
  Tensor out = Tensor::matrix(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    const DiagGaussian& q = fit.components[rng.index(fit.components.size())];
    const std::vector<double> eps{rng.normal(), rng.normal()};
    const std::vector<double> z = gaussian_rsample(q, eps);
    out(i, 0) = z[0];
    out(i, 1) = z[1];
  }
  if (fit.flow) return fit.flow->forward_values(*fit.store, out);
  return out;
}

// ---- DM-PMC ----------------------------------------------------------------------

namespace {

constexpr double kLogTwoPiPlane = 1.8378770664093453;  // log(2 pi)

double iso_log_normal(double x, double y, double mx, double my, double sigma) {
  const double dx = x - mx, dy = y - my;
  return -kLogTwoPiPlane - 2.0 * std::log(sigma) - 0.5 * (dx * dx + dy * dy) / (sigma * sigma);
}

std::vector<double> normalize_log(const std::vector<double>& lw) {
  const double mx = *std::max_element(lw.begin(), lw.end());
  if (!std::isfinite(mx)) throw DegenerateWeightsError("every importance weight is zero");
  std::vector<double> w(lw.size());
  double total = 0.0;
  for (std::size_t i = 0; i < lw.size(); ++i) total += (w[i] = std::exp(lw[i] - mx));
  for (double& v : w) v /= total;
  return w;
}

template <typename F>
std::pair<double, double> mean_and_se(const std::vector<DmpmcIteration>& its, F get) {
  const double n = static_cast<double>(its.size());
  double m = 0.0;
  for (const auto& it : its) m += get(it) / n;
  double ss = 0.0;
  for (const auto& it : its) ss += (get(it) - m) * (get(it) - m);
  return {m, its.size() > 1 ? std::sqrt(ss / (n - 1) / n) : 0.0};
}

}  // namespace

ParticleSystem ParticleSystem::uniform(std::size_t S, double half_width, double sigma, Rng& rng) {
  if (S == 0) throw ContractError("ParticleSystem: need at least one proposal");
  if (!(sigma > 0.0)) throw ContractError("ParticleSystem: sigma must be positive");
  ParticleSystem ps;
  ps.sigma = sigma;
  ps.locations = Tensor::matrix(S, 2);
  for (double& v : ps.locations.values()) v = rng.uniform(-half_width, half_width);
  return ps;
}

WeightedSample importance_pass(const ParticleSystem& ps, const Target2D& target, std::size_t K, Rng& rng,
                               Weighting weighting) {
  const std::size_t S = ps.proposals();
  if (S == 0 || K == 0) throw ContractError("importance_pass: need proposals and draws");
  WeightedSample out;
  out.samples = Tensor::matrix(S * K, 2);
  out.log_weights.resize(S * K);
  const double log_s = std::log(static_cast<double>(S));
  std::vector<double> comp(S);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t r = s * K + k;
      const double x = ps.locations(s, 0) + ps.sigma * rng.normal();
      const double y = ps.locations(s, 1) + ps.sigma * rng.normal();
      out.samples(r, 0) = x;
      out.samples(r, 1) = y;
      double log_den = 0.0;
      if (weighting == Weighting::per_proposal) {
        log_den = iso_log_normal(x, y, ps.locations(s, 0), ps.locations(s, 1), ps.sigma);
      } else {
        for (std::size_t j = 0; j < S; ++j) {
          comp[j] = iso_log_normal(x, y, ps.locations(j, 0), ps.locations(j, 1), ps.sigma);
        }
        log_den = log_sum_exp(comp) - log_s;
      }
      out.log_weights[r] = target.log_density(x, y) - log_den;
    }
  }
  const std::vector<double> w = normalize_log(out.log_weights);
  out.mean.assign(2, 0.0);
  double sq = 0.0;
  for (std::size_t r = 0; r < w.size(); ++r) {
    out.mean[0] += w[r] * out.samples(r, 0);
    out.mean[1] += w[r] * out.samples(r, 1);
    sq += w[r] * w[r];
  }
  out.ess = 1.0 / sq;
  out.z = std::exp(log_mean_exp(out.log_weights));
  return out;
}

DmpmcResult dmpmc_iterate(ParticleSystem ps, const Target2D& target, const DmpmcConfig& config, Rng& rng) {
  const std::size_t S = ps.proposals();
  if (S < 2) throw ContractError("dmpmc_iterate needs at least two proposals");
  if (config.K == 0 || config.iterations == 0) throw ContractError("dmpmc_iterate: K and iterations must be positive");
  DmpmcResult result;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    WeightedSample pass = importance_pass(ps, target, config.K, rng);
    result.iterations.push_back({pass.mean, pass.z, pass.ess});

    // Global multinomial resampling of S new locations from all S*K draws.
    const std::vector<double> w = normalize_log(pass.log_weights);
    std::vector<double> cdf(w.size());
    std::partial_sum(w.begin(), w.end(), cdf.begin());
    Tensor next = Tensor::matrix(S, 2);
    for (std::size_t s = 0; s < S; ++s) {
      const double u = rng.uniform() * cdf.back();
      const std::size_t r = std::min<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin(), w.size() - 1);
      next(s, 0) = pass.samples(r, 0);
      next(s, 1) = pass.samples(r, 1);
    }
    ps.samples = std::move(pass.samples);
    ps.log_weights = std::move(pass.log_weights);
    ps.ess = pass.ess;
    ps.locations = std::move(next);
  }
  result.mean.resize(2);
  result.mean_se.resize(2);
  for (std::size_t k = 0; k < 2; ++k) {
    std::tie(result.mean[k], result.mean_se[k]) =
        mean_and_se(result.iterations, [k](const DmpmcIteration& i) { return i.mean[k]; });
  }
  std::tie(result.z, result.z_se) = mean_and_se(result.iterations, [](const DmpmcIteration& i) { return i.z; });
  result.particles = std::move(ps);
  return result;
}

WeightingComparison compare_weightings(const ParticleSystem& ps, const Target2D& target, std::size_t K,
                                       std::size_t repetitions, Rng& rng) {
  WeightingComparison out;
  auto variance = [](const std::vector<double>& lw) {
    const double n = static_cast<double>(lw.size());
    double m = 0.0;
    for (double v : lw) m += std::exp(v) / n;
    double ss = 0.0;
    for (double v : lw) ss += (std::exp(v) - m) * (std::exp(v) - m);
    return ss / (n - 1);
  };
  for (std::size_t r = 0; r < repetitions; ++r) {
    // Both weightings score the same draws: replay the stream.
    const std::uint64_t seed = rng.engine()();
    Rng a(seed), b(seed);
    const WeightedSample dm = importance_pass(ps, target, K, a, Weighting::deterministic_mixture);
    const WeightedSample naive = importance_pass(ps, target, K, b, Weighting::per_proposal);
    out.mixture_weight_variance.push_back(variance(dm.log_weights));
    out.naive_weight_variance.push_back(variance(naive.log_weights));
    out.mixture_z.push_back(dm.z);
    out.naive_z.push_back(naive.z);
  }
  return out;
}

VarianceGap z_variance_gap(const WeightingComparison& cmp, double true_z) {
  const std::size_t n = cmp.naive_z.size();
  if (n < 2 || cmp.mixture_z.size() != n) throw ContractError("z_variance_gap needs two or more paired repetitions");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = (cmp.naive_z[i] - true_z) * (cmp.naive_z[i] - true_z) - (cmp.mixture_z[i] - true_z) * (cmp.mixture_z[i] - true_z);
  }
  const double m = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - m) * (v - m);
  return {m, std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n))};
}

// ---- Mixture VAE training ------------------------------------------------------------

double evaluate_bound(const MixtureVae& model, const Tensor& binary_data, std::size_t L, std::uint64_t seed,
                      std::size_t batch_size) {
  if (binary_data.rows() == 0) throw ContractError("evaluate_bound: empty data");
  Rng rng(seed);
  double total = 0.0;
  for (std::size_t start = 0; start < binary_data.rows(); start += batch_size) {
    const std::size_t stop = std::min(binary_data.rows(), start + batch_size);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    Tape tape;
    const ParamBinding params(tape, model.store(), false);
    const BoundEstimate b = model_bound(model, params, gather_rows(binary_data, idx), L, rng);
    total += b.value * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(binary_data.rows());
}

TrainReport train_vae(MixtureVae& model, const Dataset& train, const Dataset& val, const TrainConfig& config,
                      const EpochCallback& on_epoch) {
  if (config.batch_size == 0 || config.L == 0) throw ConfigError("batch size and L must be positive");
  if (!(config.lr > 0.0)) throw ConfigError("lr must be positive");
  TrainReport report;
  if (config.epochs == 0) return report;
  if (train.size() == 0 || val.size() == 0) throw ContractError("train_vae: empty train or validation split");

  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), 0);
  const BatchIterator batches(all, std::min(config.batch_size, train.size()), config.seed);
  Rng rng(config.seed);
  Rng val_rng(config.seed ^ 0x5bd1e995u);
  const Tensor val_binary = binarize_dynamic(val.images, val_rng);
  const std::uint64_t val_seed = config.seed + 1;

  ParameterStore& store = model.store();
  Adam adam({.lr = config.lr});
  const WarmupSchedule warmup{config.warmup_epochs};
  std::vector<Tensor> best;
  std::size_t since_best = 0;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const double beta = warmup.beta(epoch);
    double objective_sum = 0.0;
    std::size_t b = 0;
    for (const std::vector<std::size_t>& idx : batches.epoch(epoch - 1)) {
      const std::string where = "epoch " + std::to_string(epoch) + " batch " + std::to_string(b++);
      try {
        const Tensor x = binarize_dynamic(gather_rows(train.images, idx), rng);
        Tape tape;
        const ParamBinding params(tape, store);
        const BoundEstimate bound = model_bound(model, params, x, config.L, rng, config.denominator);
        const Var objective = config.L == 1 ? beta_objective(bound.recon, bound.prior_term, beta) : bound.objective;
        const double value = objective.item();
        if (!std::isfinite(value)) throw TrainingError("non-finite training objective", where);
        tape.backward(neg(objective));
        adam.step(store, params.gradients());
        objective_sum += value * static_cast<double>(idx.size());
      } catch (const TrainingError&) {
        throw;
      } catch (const NumericalError& e) {
        throw TrainingError(std::string("training diverged: ") + e.what(), where);
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.beta = beta;
    rec.train_objective = objective_sum / static_cast<double>(train.size());
    rec.val_miselbo = evaluate_bound(model, val_binary, config.L, val_seed, config.batch_size);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(rec);

    if (best.empty() || rec.val_miselbo > report.best_val + config.min_improvement) {
      report.best_val = rec.val_miselbo;
      report.best_epoch = epoch;
      best.clear();
      for (const auto& e : store.entries()) best.push_back(e.value);
      since_best = 0;
    } else {
      ++since_best;
    }
    if (on_epoch) on_epoch(rec, model);
    if (since_best >= config.patience) {
      report.stopped_early = epoch < config.epochs;
      break;
    }
  }
  for (std::size_t i = 0; i < best.size(); ++i) store.value(i) = best[i];
  return report;
}

std::string epoch_csv(const TrainReport& report, bool with_wall_seconds) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,beta,train_objective,val_miselbo" << (with_wall_seconds ? ",wall_seconds\n" : "\n");
  for (const EpochRecord& r : report.epochs) {
    os << r.epoch << ',' << r.beta << ',' << r.train_objective << ',' << r.val_miselbo;
    if (with_wall_seconds) os << ',' << r.wall_seconds;
    os << '\n';
  }
  return os.str();
}

}  // namespace mixvi

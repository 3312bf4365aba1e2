#include "mixvi/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mixvi/errors.hpp"
#include "mixvi/models.hpp"
#include "mixvi/rng.hpp"

namespace mixvi {

namespace {

// Repeats the rows of v so that it has n rows (block order).
Var expand(Var v, std::size_t n) {
  if (v.rows() == n) return v;
  if (v.rows() == 0 || n % v.rows() != 0) throw DimensionError("cannot repeat rows to match the sample count");
  return tile_rows(v, n / v.rows());
}

struct Draw {
  Var base;     // base-space sample, n x d
  Var flowed;   // after the component's flow (same as base without one)
};

Draw draw(const Component& c, std::size_t n, Rng& rng) {
  const std::size_t d = c.base.mean.cols();
  if (c.base.log_var.cols() != d) throw DimensionError("component mean and log_var widths differ");
  const Var mean = expand(c.base.mean, n);
  const Var lv = expand(c.base.log_var, n);
  const Var z0 = gaussian_rsample(GaussianVars{mean, lv}, rng.normal_matrix(n, d));
  if (c.flow == nullptr || c.flow->steps() == 0) return {z0, z0};
  if (c.params == nullptr) throw ContractError("flowed component needs its parameter binding");
  std::optional<Var> ctx;
  if (c.context) ctx = expand(*c.context, n);
  return {z0, c.flow->forward(*c.params, z0, ctx).z};
}

// log q_j at the flowed image of base sample z0 (n x 1).
Var component_log_q(const Component& c, Var z0) {
  const std::size_t n = z0.rows();
  if (z0.cols() != c.base.mean.cols()) throw DimensionError("components must share the latent width");
  const GaussianVars base{expand(c.base.mean, n), expand(c.base.log_var, n)};
  if (c.flow == nullptr || c.flow->steps() == 0) return gaussian_log_prob_rows(z0, base.mean, base.log_var);
  std::optional<Var> ctx;
  if (c.context) ctx = expand(*c.context, n);
  return flow_extended_log_q(*c.params, z0, base, c.flow, ctx);
}

Var log_mixture(std::vector<Var> terms) {
  if (terms.size() == 1) return terms.front();
  const double log_s = std::log(static_cast<double>(terms.size()));
  return add_scalar(logsumexp(concat_cols(terms), 1), -log_s);
}

// Accumulates per-term log weights into the bound.
struct Accumulator {
  std::size_t L, B;
  std::vector<Var> terms;   // 1 x B per component
  std::vector<Var> recons;  // (L*B) x 1, L = 1 only
  std::vector<Var> priors;

  void push(const LogJoint& j, Var log_den) {
    const Var lw = sub(add(j.log_likelihood, j.log_prior), log_den);
    Var t = logsumexp(reshape(lw, Shape{L, B}), 0);
    if (L > 1) t = add_scalar(t, -std::log(static_cast<double>(L)));
    terms.push_back(t);
    if (L == 1) {
      recons.push_back(j.log_likelihood);
      priors.push_back(sub(j.log_prior, log_den));
    }
  }

  BoundEstimate finish(std::size_t cross) const {
    const std::size_t S = terms.size();
    auto average = [&](const std::vector<Var>& v) {
      Var acc = v.front();
      for (std::size_t i = 1; i < v.size(); ++i) acc = add(acc, v[i]);
      return S > 1 ? scale(acc, 1.0 / static_cast<double>(S)) : acc;
    };
    BoundEstimate r;
    const Var per = average(terms);
    r.objective = mean(per);
    r.value = r.objective.item();
    const auto pv = per.value().values();
    r.per_point.assign(pv.begin(), pv.end());
    if (L == 1) {
      r.recon = mean(average(recons));
      r.prior_term = mean(average(priors));
    }
    r.S = S;
    r.L = L;
    r.differentiable = per.tape().requires_grad(per);
    r.cross_evaluations = cross;
    return r;
  }
};

std::size_t batch_rows(const GaussianVars& g) { return g.mean.rows(); }

}  // namespace

BoundEstimate miselbo(std::span<const Component> bank, const LogJointFn& joint, std::size_t L, Rng& rng,
                      Denominator denominator) {
  if (bank.empty()) throw ContractError("miselbo needs at least one component");
  if (L == 0) throw ContractError("L must be at least 1");
  const std::size_t B = batch_rows(bank.front().base);
  for (const Component& c : bank) {
    if (batch_rows(c.base) != B || c.base.mean.cols() != bank.front().base.mean.cols()) {
      throw DimensionError("miselbo components must share batch size and latent width");
    }
  }
  const std::size_t n = L * B;
  Accumulator acc{L, B, {}, {}, {}};
  std::size_t cross = 0;
  for (std::size_t s = 0; s < bank.size(); ++s) {
    const Draw d = draw(bank[s], n, rng);
    Var log_den;
    if (denominator == Denominator::own) {
      log_den = component_log_q(bank[s], d.base);
    } else {
      std::vector<Var> q;
      for (std::size_t j = 0; j < bank.size(); ++j) {
        q.push_back(component_log_q(bank[j], d.base));
        if (j != s) ++cross;
      }
      log_den = log_mixture(std::move(q));
    }
    acc.push(joint(d.flowed, L), log_den);
  }
  return acc.finish(cross);
}

BoundEstimate iwelbo(const Component& q, const LogJointFn& joint, std::size_t L, Rng& rng) {
  return miselbo(std::span<const Component>(&q, 1), joint, L, rng);
}

BoundEstimate elbo(const Component& q, const LogJointFn& joint, Rng& rng) { return iwelbo(q, joint, 1, rng); }

BoundEstimate miselbo_hierarchical(std::span<const HierComponent> bank, const HierLogJointFn& joint, std::size_t L,
                                   Rng& rng, Denominator denominator) {
  if (bank.empty()) throw ContractError("miselbo_hierarchical needs at least one component");
  if (L == 0) throw ContractError("L must be at least 1");
  const std::size_t B = batch_rows(bank.front().top);
  const std::size_t n = L * B;
  Accumulator acc{L, B, {}, {}, {}};
  std::size_t cross = 0;
  for (std::size_t s = 0; s < bank.size(); ++s) {
    const HierComponent& hs = bank[s];
    if (batch_rows(hs.top) != B) throw DimensionError("hierarchical components must share the batch size");
    const Var z2 = draw(Component{hs.top, nullptr, std::nullopt, nullptr}, n, rng).base;
    const Component lower_s = hs.lower(z2);
    const Draw z1 = draw(lower_s, n, rng);

    auto chain = [&](std::size_t j) {
      const GaussianVars& top = bank[j].top;
      const Var lq2 = gaussian_log_prob_rows(z2, expand(top.mean, n), expand(top.log_var, n));
      const Component lower_j = j == s ? lower_s : bank[j].lower(z2);
      return add(lq2, component_log_q(lower_j, z1.base));
    };
    Var log_den;
    if (denominator == Denominator::own) {
      log_den = chain(s);
    } else {
      std::vector<Var> q;
      for (std::size_t j = 0; j < bank.size(); ++j) {
        q.push_back(chain(j));
        if (j != s) ++cross;
      }
      log_den = log_mixture(std::move(q));
    }
    acc.push(joint(z1.flowed, z2, L), log_den);
  }
  return acc.finish(cross);
}

double beta_objective(double recon, double prior_term, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("beta must lie in [0, 1]");
  return recon + beta * prior_term;
}

Var beta_objective(Var recon, Var prior_term, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("beta must lie in [0, 1]");
  if (beta == 1.0) return add(recon, prior_term);
  return add(recon, scale(prior_term, beta));
}

double WarmupSchedule::beta(std::size_t epoch) const {
  if (epochs_to_one == 0) return 1.0;
  return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(epochs_to_one));
}

// ---- importance weights -------------------------------------------------------

ImportanceWeightSet ImportanceWeightSet::mixture(std::vector<double> log_numerators, const Tensor& log_components,
                                                 std::span<const double> pi) {
  const std::size_t n = log_numerators.size();
  if (log_components.rows() != n) throw DimensionError("weight set: numerator and component rows differ");
  const std::size_t J = log_components.cols();
  if (J == 0) throw ContractError("weight set needs at least one proposal");
  std::vector<double> log_pi(J, -std::log(static_cast<double>(J)));
  if (!pi.empty()) {
    if (pi.size() != J) throw DimensionError("mixture weights length mismatch");
    const double total = std::accumulate(pi.begin(), pi.end(), 0.0);
    if (!(std::abs(total - 1.0) < 1e-9)) throw ContractError("mixture weights must sum to 1");
    for (std::size_t j = 0; j < J; ++j) {
      if (!(pi[j] > 0.0)) throw ContractError("mixture weights must be positive");
      log_pi[j] = std::log(pi[j]);
    }
  }
  ImportanceWeightSet w;
  w.log_numerators = std::move(log_numerators);
  w.log_denominators.resize(n);
  std::vector<double> row(J);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < J; ++j) row[j] = log_pi[j] + log_components(i, j);
    w.log_denominators[i] = log_sum_exp(row);
  }
  return w;
}

ImportanceWeightSet ImportanceWeightSet::single(std::vector<double> log_numerators, std::vector<double> log_proposal) {
  if (log_numerators.size() != log_proposal.size()) throw DimensionError("weight set: length mismatch");
  return ImportanceWeightSet{std::move(log_numerators), std::move(log_proposal)};
}

std::vector<double> ImportanceWeightSet::log_weights() const {
  std::vector<double> lw(log_numerators.size());
  for (std::size_t i = 0; i < lw.size(); ++i) lw[i] = log_numerators[i] - log_denominators[i];
  return lw;
}

std::vector<double> ImportanceWeightSet::normalized() const {
  std::vector<double> lw = log_weights();
  if (lw.empty()) throw ContractError("empty weight set");
  const double m = *std::max_element(lw.begin(), lw.end());
  if (!std::isfinite(m)) throw DegenerateWeightsError("all importance weights are zero or non-finite");
  double total = 0.0;
  for (double& v : lw) total += (v = std::exp(v - m));
  for (double& v : lw) v /= total;
  return lw;
}

double ImportanceWeightSet::log_mean_weight() const { return log_mean_exp(log_weights()); }

double ImportanceWeightSet::ess() const {
  double sq = 0.0;
  for (double w : normalized()) sq += w * w;
  return 1.0 / sq;
}

// ---- 2D objective -------------------------------------------------------------

Var iw_kl_objective(std::span<const Component> q, const std::function<Var(Var)>& log_target, std::size_t L,
                    std::size_t batch, Rng& rng, Denominator denominator, std::size_t* cross_evaluations) {
  if (q.empty()) throw ContractError("iw_kl_objective needs at least one component");
  if (L == 0 || batch == 0) throw ContractError("L and batch must be at least 1");
  const std::size_t n = L * batch;
  const std::size_t S = q.size();
  bool plain = denominator == Denominator::mixture && S > 1;
  for (const Component& c : q) {
    if (c.base.mean.rows() != 1) throw DimensionError("plane components are single rows");
    plain = plain && (c.flow == nullptr || c.flow->steps() == 0);
  }
  // All-Gaussian mixtures score every sample against every component at once.
  std::optional<Var> means, log_vars;
  if (plain) {
    std::vector<Var> m, lv;
    for (const Component& c : q) {
      m.push_back(c.base.mean);
      lv.push_back(c.base.log_var);
    }
    means = concat_rows(m);
    log_vars = concat_rows(lv);
  }
  std::vector<Var> terms;
  std::size_t cross = 0;
  for (std::size_t s = 0; s < S; ++s) {
    const Draw d = draw(q[s], n, rng);
    Var log_den;
    if (denominator == Denominator::own) {
      log_den = component_log_q(q[s], d.base);
    } else if (plain) {
      log_den = add_scalar(logsumexp(pairwise_gaussian_log_prob(d.base, *means, *log_vars), 1),
                           -std::log(static_cast<double>(S)));
      cross += S - 1;
    } else {
      std::vector<Var> dens;
      for (std::size_t j = 0; j < S; ++j) {
        dens.push_back(component_log_q(q[j], d.base));
        if (j != s) ++cross;
      }
      log_den = log_mixture(std::move(dens));
    }
    const Var lw = sub(log_target(d.flowed), log_den);
    Var t = logsumexp(reshape(lw, Shape{L, batch}), 0);
    if (L > 1) t = add_scalar(t, -std::log(static_cast<double>(L)));
    terms.push_back(t);
  }
  if (cross_evaluations) *cross_evaluations += cross;
  Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return neg(scale(mean(acc), 1.0 / static_cast<double>(S)));
}

// ---- models -------------------------------------------------------------------

namespace {

Tensor tile_tensor(const Tensor& x, std::size_t times) {
  if (times == 1) return x;
  Tensor out = Tensor::matrix(x.rows() * times, x.cols());
  const auto src = x.values();
  auto dst = out.values();
  for (std::size_t t = 0; t < times; ++t) std::copy(src.begin(), src.end(), dst.begin() + t * src.size());
  return out;
}

}  // namespace

ModelBatch model_batch(const MixtureVae& model, const ParamBinding& params, const Tensor& x) {
  if (x.cols() != model.config().data_dim) throw DimensionError("batch width does not match the model");
  Tape& tape = params.tape();
  const Var xv = tape.constant(x);
  ModelBatch mb;
  mb.hierarchical = model.config().hierarchical;
  auto bern = [x](Var logits, std::size_t tiles) {
    return bernoulli_log_prob_rows(logits, tile_tensor(x, tiles));
  };
  if (!mb.hierarchical) {
    for (std::size_t s = 0; s < model.components(); ++s) {
      const EncoderOutput e = model.encode(params, s, xv);
      mb.flat.push_back(Component{e.q, model.flow(s), e.context, &params});
    }
    mb.joint = [&model, &params, bern](Var z, std::size_t tiles) {
      return LogJoint{bern(model.decode(params, z), tiles), model.log_prior_top(params, z)};
    };
  } else {
    for (std::size_t s = 0; s < model.components(); ++s) {
      const EncoderOutput e = model.encode(params, s, xv);
      mb.hier.push_back(HierComponent{e.q, [&model, &params, xv, s](Var z2) {
                                        const LowerOutput lo = model.encode_lower(params, s, xv, z2);
                                        return Component{lo.q, model.flow(s), lo.context, &params};
                                      }});
    }
    mb.hier_joint = [&model, &params, bern](Var z1, Var z2, std::size_t tiles) {
      const Var lp = add(model.log_prior_lower(params, z1, z2), model.log_prior_top(params, z2));
      return LogJoint{bern(model.decode(params, z1, z2), tiles), lp};
    };
  }
  return mb;
}

BoundEstimate model_bound(const MixtureVae& model, const ParamBinding& params, const Tensor& x, std::size_t L,
                          Rng& rng, Denominator denominator) {
  const ModelBatch mb = model_batch(model, params, x);
  if (mb.hierarchical) return miselbo_hierarchical(mb.hier, mb.hier_joint, L, rng, denominator);
  return miselbo(mb.flat, mb.joint, L, rng, denominator);
}

BoundEstimate miselbo_composite(const MixtureVae& model, const ParamBinding& params, const Tensor& x, Rng& rng) {
  if (!model.config().hierarchical) throw ContractError("composite bound needs a hierarchical model");
  return model_bound(model, params, x, 1, rng);
}

NllEstimate estimate_nll(const MixtureVae& model, const Tensor& data, const NllConfig& config) {
  if (config.L == 0) throw ContractError("L must be at least 1");
  if (data.rows() == 0) throw ContractError("estimate_nll needs at least one datapoint");
  const VaeConfig& mc = model.config();
  const std::size_t S = config.mode == NllMode::mixture ? model.components() : config.repetitions;
  if (S == 0) throw ContractError("repetitions must be at least 1");
  const std::size_t latent = mc.latent + (mc.hierarchical ? mc.latent_top : 0);
  const std::size_t chunk = std::max<std::size_t>(1, config.chunk);
  if (S * config.L * latent * chunk > config.max_samples) {
    throw BudgetError("NLL estimate needs " + std::to_string(S * config.L * latent * chunk) +
                      " sampled values per chunk, above the configured cap " + std::to_string(config.max_samples));
  }
  NllEstimate out;
  out.per_point.reserve(data.rows());
  for (std::size_t start = 0; start < data.rows(); start += chunk) {
    const std::size_t stop = std::min(data.rows(), start + chunk);
    Tensor x = Tensor::matrix(stop - start, data.cols());
    for (std::size_t r = start; r < stop; ++r) {
      std::copy_n(data.values().begin() + r * data.cols(), data.cols(), x.values().begin() + (r - start) * data.cols());
    }
    Tape tape;
    const ParamBinding params(tape, model.store(), false);
    Rng rng(config.seed + start);
    ModelBatch mb = model_batch(model, params, x);
    BoundEstimate b;
    if (config.mode == NllMode::mixture) {
      b = mb.hierarchical ? miselbo_hierarchical(mb.hier, mb.hier_joint, config.L, rng)
                          : miselbo(mb.flat, mb.joint, config.L, rng);
    } else if (mb.hierarchical) {
      const std::vector<HierComponent> rep(S, mb.hier.front());
      b = miselbo_hierarchical(rep, mb.hier_joint, config.L, rng, Denominator::own);
    } else {
      const std::vector<Component> rep(S, mb.flat.front());
      b = miselbo(rep, mb.joint, config.L, rng, Denominator::own);
    }
    for (double v : b.per_point) out.per_point.push_back(-v);
  }
  const double n = static_cast<double>(out.per_point.size());
  out.nll = std::accumulate(out.per_point.begin(), out.per_point.end(), 0.0) / n;
  double var = 0.0;
  for (double v : out.per_point) var += (v - out.nll) * (v - out.nll);
  out.standard_error = out.per_point.size() > 1 ? std::sqrt(var / (n - 1) / n) : 0.0;
  return out;
}

double bits_per_dim(double nll_nats, std::size_t d_x) {
  if (d_x == 0) throw ContractError("bits_per_dim needs d_x > 0");
  return nll_nats / (static_cast<double>(d_x) * std::log(2.0));
}

}  // namespace mixvi

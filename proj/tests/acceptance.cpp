// Acceptance suite: one PASS/FAIL line per criterion. Optional arguments
// select criteria by number, e.g. `acceptance 1 2 7`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "mixvi/adaptation.hpp"
#include "mixvi/data.hpp"
#include "mixvi/flows.hpp"
#include "mixvi/metrics.hpp"
#include "mixvi/models.hpp"
#include "mixvi/objectives.hpp"
#include "mixvi/rng.hpp"
#include "test_support.hpp"

using namespace mixvi;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (detail.tellp() > 0) detail << "; ";
    detail << (ok ? "" : "FAILED ") << what;
  }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct Stats {
  double mean, se;
};

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

Stats stats(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / (n - 1) / n) : 0.0};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size();
  return k % 2 ? v[k / 2] : 0.5 * (v[k / 2 - 1] + v[k / 2]);
}

// ---- shared fixtures ------------------------------------------------------------------

// 1D linear-Gaussian model: p(z) = N(0, 1), p(x|z) = N(z, 1), x = 0.
const double kLogPx = -0.5 * std::log(4 * std::numbers::pi);
const double kElboStdQ = -0.5 * std::log(2 * std::numbers::pi) - 0.5;

Component gaussian(Var mean, Var log_var) {
  Component c;
  c.base = {mean, log_var};
  return c;
}

Component constant_component(Tape& t, double mean, double var, std::size_t B) {
  return gaussian(t.constant(Tensor::matrix(B, 1, mean)), t.constant(Tensor::matrix(B, 1, std::log(var))));
}

LogJointFn linear_gaussian(Tape& t) {
  const Var x = t.constant(Tensor::vector({0.0}));
  const Var zero = t.constant(Tensor::vector({0.0}));
  return [x, zero](Var z, std::size_t) {
    return LogJoint{gaussian_log_prob_rows(z, x, zero), gaussian_log_prob_rows(z, zero, zero)};
  };
}

VaeConfig tiny(std::size_t S) {
  VaeConfig c;
  c.data_dim = 5;
  c.hidden = 10;
  c.latent = 2;
  c.latent_top = 2;
  c.flow_hidden = 10;
  c.components = S;
  return c;
}

Tensor random_binary(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x = Tensor::matrix(rows, cols);
  for (double& v : x.values()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  return x;
}

void randomize(ParameterStore& store, Rng& rng, const std::string& prefix = "", double bound = 0.5) {
  for (auto& e : store.entries()) {
    if (e.name.rfind(prefix, 0) != 0) continue;
    for (double& v : e.value.values()) v = rng.uniform(-bound, bound);
  }
}

constexpr std::size_t kReps = 10'000;

// ---- desk-scale models --------------------------------------------------------------

constexpr std::size_t kDeskEpochs = 50;
constexpr std::size_t kDeskWarmup = 10;
constexpr std::uint64_t kTestBinarizeSeed = 0x7e57;
constexpr std::uint64_t kNllSeed = 7;

class Desk {
 public:
  const Dataset& train() { return load().train; }
  const Dataset& test() { return load().test; }
  const Tensor& test_binary() { return load().test_binary; }

  const MixtureVae& model(std::size_t S, std::uint64_t seed, Denominator den = Denominator::mixture) {
    const auto key = std::make_tuple(S, seed, den == Denominator::mixture);
    auto it = models_.find(key);
    if (it != models_.end()) return it->second;
    const Data& d = load();
    VaeConfig c;
    c.data_dim = d.train.dim();
    c.components = S;
    c.seed = seed;
    MixtureVae m(c);
    TrainConfig tc;
    tc.epochs = kDeskEpochs;
    tc.warmup_epochs = kDeskWarmup;
    tc.lr = 1e-3;
    tc.batch_size = 100;
    tc.patience = 20;
    tc.seed = seed;
    tc.denominator = den;
    const auto t0 = Clock::now();
    const TrainReport r = train_vae(m, d.train, d.val, tc);
    std::printf("  trained %s S=%zu seed=%llu: best epoch %zu, val MISELBO %.3f, %.0f s\n",
                den == Denominator::mixture ? "mixture" : "ensemble", S, static_cast<unsigned long long>(seed),
                r.best_epoch, r.best_val, std::chrono::duration<double>(Clock::now() - t0).count());
    std::fflush(stdout);
    return models_.emplace(key, std::move(m)).first->second;
  }

  double nll(std::size_t S, std::uint64_t seed) {
    const auto key = std::make_pair(S, seed);
    auto it = nll_.find(key);
    if (it != nll_.end()) return it->second;
    NllConfig nc;
    nc.L = 100;
    nc.seed = kNllSeed;
    const NllEstimate e = estimate_nll(model(S, seed), test_binary(), nc);
    std::printf("  NLL S=%zu seed=%llu: %.3f (se %.3f, %zu points)\n", S, static_cast<unsigned long long>(seed), e.nll,
                e.standard_error, e.per_point.size());
    std::fflush(stdout);
    return nll_.emplace(key, e.nll).first->second;
  }

 private:
  struct Data {
    Dataset train, val, test;
    Tensor test_binary;
  };

  const Data& load() {
    if (!data_) {
      const Dataset all = load_idx_directory(MIXVI_DATA_DIR);
      const Split s = make_split(all.size(), SplitSpec{0.8, 0.1, 0.1, 0});
      Data d{all.subset(s.train), all.subset(s.val), all.subset(s.test), {}};
      Rng rng(kTestBinarizeSeed);
      d.test_binary = binarize_dynamic(d.test.images, rng);
      data_ = std::move(d);
    }
    return *data_;
  }

  std::optional<Data> data_;
  std::map<std::tuple<std::size_t, std::uint64_t, bool>, MixtureVae> models_;
  std::map<std::pair<std::size_t, std::uint64_t>, double> nll_;
};

Desk& desk() {
  static Desk d;
  return d;
}

// ---- criteria ------------------------------------------------------------------------

Outcome reductions() {
  Outcome o;
  {
    Tape t;
    const Component q = constant_component(t, 0.2, 0.8, 200);
    Rng a(5), b(5);
    const BoundEstimate e = elbo(q, linear_gaussian(t), a);
    const BoundEstimate i = iwelbo(q, linear_gaussian(t), 1, b);
    o.check(e.per_point == i.per_point && e.value == i.value, "iwelbo(L=1) == elbo bit-exact");
  }
  bool mis_ok = true;
  for (std::size_t L : {1u, 5u, 50u}) {
    Tape t;
    const Component q = constant_component(t, -0.3, 1.4, 100);
    Rng a(6 + L), b(6 + L);
    const BoundEstimate i = iwelbo(q, linear_gaussian(t), L, a);
    const BoundEstimate m = miselbo(std::span(&q, 1), linear_gaussian(t), L, b);
    mis_ok = mis_ok && i.per_point == m.per_point && i.value == m.value;
  }
  {
    // The same identities on a model's encoder bank.
    const MixtureVae model(tiny(1));
    const Tensor x = random_binary(4, 5, 3);
    Tape t;
    const ParamBinding p(t, model.store(), false);
    const ModelBatch mb = model_batch(model, p, x);
    Rng a(9), b(9), c(10), d(10);
    mis_ok = mis_ok && iwelbo(mb.flat[0], mb.joint, 7, a).per_point == miselbo(mb.flat, mb.joint, 7, b).per_point;
    o.check(elbo(mb.flat[0], mb.joint, c).per_point == iwelbo(mb.flat[0], mb.joint, 1, d).per_point,
            "model iwelbo(L=1) == elbo bit-exact");
  }
  o.check(mis_ok, "miselbo(S=1, L) == iwelbo(L) bit-exact for L in {1, 5, 50} and on a model");
  {
    VaeConfig c = tiny(1);
    c.hierarchical = true;
    c.pseudo_inputs = 2;
    const MixtureVae model = build_composite(c);
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const Tensor x = random_binary(3, 5, seed);
      Tape t;
      const ParamBinding p(t, model.store(), false);
      Rng a(seed), b(seed);
      const double composite = miselbo_composite(model, p, x, a).value;
      const ModelBatch mb = model_batch(model, p, x);
      worst = std::max(worst, std::abs(composite - miselbo_hierarchical(mb.hier, mb.hier_joint, 1, b).value));
    }
    o.check(worst <= 1e-12, "composite(S=1, T=0) vs hierarchical max diff " + sci(worst));
  }
  return o;
}

Outcome bound_ordering() {
  Outcome o;
  o.check(std::abs(kElboStdQ - -1.4189) < 5e-5 && std::abs(kLogPx - -1.2655) < 5e-5,
          "closed forms ELBO " + fmt(kElboStdQ) + ", log p(x) " + fmt(kLogPx));
  Tape t;
  Rng rng(13);
  const Component q = constant_component(t, 0.0, 1.0, kReps);
  const Stats e = stats(elbo(q, linear_gaussian(t), rng).per_point);
  const Stats iw = stats(iwelbo(q, linear_gaussian(t), 10, rng).per_point);
  o.check(std::abs(e.mean - kElboStdQ) < 3 * e.se, "MC ELBO " + fmt(e.mean) + " +- " + fmt(e.se) + " matches closed form");
  o.check(iw.mean - kElboStdQ >= 3 * iw.se, "IWELBO(10) " + fmt(iw.mean) + " above ELBO by " +
                                                 fmt((iw.mean - kElboStdQ) / iw.se, 1) + " SE");
  o.check(iw.mean - e.mean >= 3 * std::hypot(iw.se, e.se), "IWELBO(10) above MC ELBO by " +
                                                                fmt((iw.mean - e.mean) / std::hypot(iw.se, e.se), 1) + " SE");
  o.check(kLogPx - iw.mean >= 3 * iw.se, "log p(x) above IWELBO(10) by " + fmt((kLogPx - iw.mean) / iw.se, 1) + " SE");
  return o;
}

Outcome miselbo_tightness() {
  Outcome o;
  Tape t;
  Rng rng(15);
  const Component a = constant_component(t, -1.0, 0.5, kReps), b = constant_component(t, 1.0, 0.5, kReps);
  const std::vector<Component> bank{a, b};
  const std::vector<double> mis = miselbo(bank, linear_gaussian(t), 1, rng).per_point;
  const std::vector<double> ea = elbo(a, linear_gaussian(t), rng).per_point;
  const std::vector<double> eb = elbo(b, linear_gaussian(t), rng).per_point;
  std::vector<double> gap(kReps);
  for (std::size_t i = 0; i < kReps; ++i) gap[i] = mis[i] - 0.5 * (ea[i] + eb[i]);
  const Stats g = stats(gap);
  o.check(g.mean >= 3 * g.se, "MISELBO - mean ELBO = " + fmt(g.mean) + " (" + fmt(g.mean / g.se, 1) + " SE)");
  return o;
}

Outcome gradients() {
  Outcome o;
  auto run = [&](const std::string& name, MixtureVae& model, const testutil::StoreFn& fn) {
    const testutil::GradCheck g = testutil::check_store_gradients(fn, model.store());
    o.check(g.ok(), name + " worst abs " + sci(g.worst_abs) + " over " + std::to_string(g.checked));
  };
  const Tensor x = random_binary(3, 5, 1);
  {
    MixtureVae m(tiny(1));
    run("elbo", m, [&](const ParamBinding& p) {
      Rng rng(2);
      return model_bound(m, p, x, 1, rng).objective;
    });
  }
  {
    MixtureVae m(tiny(1));
    run("iwelbo L=4", m, [&](const ParamBinding& p) {
      Rng rng(3);
      return model_bound(m, p, x, 4, rng).objective;
    });
  }
  {
    MixtureVae m(tiny(2));
    run("miselbo S=2 L=3", m, [&](const ParamBinding& p) {
      Rng rng(4);
      return model_bound(m, p, x, 3, rng).objective;
    });
    run("ensemble bound", m, [&](const ParamBinding& p) {
      Rng rng(5);
      return model_bound(m, p, x, 1, rng, Denominator::own).objective;
    });
  }
  {
    VaeConfig c = tiny(2);
    c.pseudo_inputs = 3;
    MixtureVae m(c);
    run("beta objective + VampPrior", m, [&](const ParamBinding& p) {
      Rng rng(6);
      const BoundEstimate b = model_bound(m, p, x, 1, rng);
      return beta_objective(b.recon, b.prior_term, 0.3);
    });
  }
  {
    VaeConfig c = tiny(2);
    c.hierarchical = true;
    MixtureVae m(c);
    run("hierarchical miselbo", m, [&](const ParamBinding& p) {
      Rng rng(7);
      return model_bound(m, p, x, 2, rng).objective;
    });
  }
  {
    VaeConfig c = tiny(2);
    c.flow_steps = 2;
    MixtureVae m(c);
    Rng init(8);
    randomize(m.store(), init, "flow.");
    run("flow miselbo", m, [&](const ParamBinding& p) {
      Rng rng(8);
      return model_bound(m, p, x, 2, rng).objective;
    });
  }
  {
    VaeConfig c = tiny(2);
    c.hierarchical = true;
    c.flow_steps = 1;
    c.pseudo_inputs = 2;
    MixtureVae m = build_composite(c);
    Rng init(9);
    randomize(m.store(), init, "flow.");
    run("composite miselbo", m, [&](const ParamBinding& p) {
      Rng rng(9);
      return miselbo_composite(m, p, x, rng).objective;
    });
  }
  {
    ParameterStore store;
    Rng init(3);
    for (std::size_t s = 0; s < 3; ++s) {
      store.add("m" + std::to_string(s), testutil::random_tensor(Shape{1, 2}, init, -1, 1));
      store.add("v" + std::to_string(s), testutil::random_tensor(Shape{1, 2}, init, -0.5, 0.5));
    }
    const Target2D target = Target2D::bimodal();
    for (const auto& [name, den, S, L] : {std::tuple{"2D mixture D_L", Denominator::mixture, 3u, 2u},
                                          std::tuple{"2D ensemble D_L", Denominator::own, 3u, 1u},
                                          std::tuple{"2D IWVI D_L", Denominator::mixture, 1u, 5u}}) {
      const testutil::GradCheck g = testutil::check_store_gradients(
          [&](const ParamBinding& p) {
            std::vector<Component> q;
            for (std::size_t s = 0; s < S; ++s) q.push_back(gaussian(p[2 * s], p[2 * s + 1]));
            Rng rng(10);
            return iw_kl_objective(q, [&](Var z) { return target.log_density(z); }, L, 4, rng, den);
          },
          store);
      o.check(g.ok(), std::string(name) + " worst abs " + sci(g.worst_abs));
    }
  }
  return o;
}

Outcome flows() {
  Outcome o;
  double worst_trip = 0.0;
  for (const std::size_t d : {2u, 5u}) {
    ParameterStore store;
    Rng rng(3 + d);
    const FlowStack stack(store, "f", 3, MadeConfig{d, {10, 10}}, rng);
    randomize(store, rng);
    const Tensor z = rng.normal_matrix(200, d);
    const Tensor fb = stack.inverse(store, stack.forward_values(store, z));
    const Tensor bf = stack.forward_values(store, stack.inverse(store, z));
    for (std::size_t i = 0; i < z.size(); ++i) {
      worst_trip = std::max({worst_trip, std::abs(fb[i] - z[i]), std::abs(bf[i] - z[i])});
    }
  }
  o.check(worst_trip < 1e-8, "round trip max error " + sci(worst_trip));

  double worst_det = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const std::size_t d = 3;
    ParameterStore store;
    Rng rng(seed);
    const FlowStack stack(store, "f", 2, MadeConfig{d, {10, 10}}, rng);
    randomize(store, rng);
    for (int trial = 0; trial < 10; ++trial) {
      Tensor z = Tensor::matrix(1, d);
      for (double& v : z.values()) v = rng.uniform(-2, 2);
      std::vector<double> ld;
      stack.forward_values(store, z, &ld);
      // Central-difference Jacobian and its log|det| by Gaussian elimination.
      const double h = 1e-6;
      std::vector<std::vector<double>> J(d, std::vector<double>(d));
      for (std::size_t j = 0; j < d; ++j) {
        Tensor plus = z, minus = z;
        plus[j] += h;
        minus[j] -= h;
        const Tensor fp = stack.forward_values(store, plus), fm = stack.forward_values(store, minus);
        for (std::size_t i = 0; i < d; ++i) J[i][j] = (fp[i] - fm[i]) / (2 * h);
      }
      double log_det = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        std::size_t piv = k;
        for (std::size_t r = k + 1; r < d; ++r) {
          if (std::abs(J[r][k]) > std::abs(J[piv][k])) piv = r;
        }
        std::swap(J[k], J[piv]);
        log_det += std::log(std::abs(J[k][k]));
        for (std::size_t r = k + 1; r < d; ++r) {
          const double f = J[r][k] / J[k][k];
          for (std::size_t c = k; c < d; ++c) J[r][c] -= f * J[k][c];
        }
      }
      worst_det = std::max(worst_det, std::abs(log_det - ld[0]));
    }
  }
  o.check(worst_det < 1e-5, "log-det vs numerical Jacobian max error " + sci(worst_det));

  std::size_t leaks = 0, unreachable = 0;
  for (const bool reversed : {false, true}) {
    ParameterStore store;
    Rng rng(5);
    const std::size_t d = 5;
    const MadeNet made(store, "m", MadeConfig{d, {12, 12}}, reversed, rng);
    randomize(store, rng);
    std::vector<std::size_t> position(d);
    for (std::size_t k = 0; k < d; ++k) position[made.order()[k]] = k;
    const Tensor x = rng.normal_matrix(1, d);
    for (std::size_t out = 0; out < 2 * d; ++out) {
      Tape tape;
      const ParamBinding params(tape, store, false);
      const Var in = tape.leaf(x);
      const MadeNet::Output mo = made.forward(params, in);
      const std::size_t i = out % d;
      tape.backward(slice_cols(out < d ? mo.shift : mo.pre_scale, i, i + 1));
      const Tensor g = tape.grad(in);
      double reach = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        if (position[j] >= position[i] && g[j] != 0.0) ++leaks;
        if (position[j] < position[i]) reach += std::abs(g[j]);
      }
      if (position[i] > 0 && reach == 0.0) ++unreachable;
    }
  }
  o.check(leaks == 0 && unreachable == 0, "MADE: " + std::to_string(leaks) + " non-causal dependencies, " +
                                              std::to_string(unreachable) + " outputs cut off from earlier inputs");
  return o;
}

Outcome cooperation_2d() {
  Outcome o;
  const Target2D target = Target2D::bimodal();
  int mixture_in_band = 0, mixture_both = 0, ensemble_light = 0;
  std::ostringstream mix_f, ens_f;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Vi2DConfig c = Vi2DConfig::defaults(Vi2DMode::mixture);
    c.seed = seed;
    const double heavy = mode_split(fit_2d(c, target).components, target).fraction[0];
    mixture_in_band += heavy >= 0.7 && heavy <= 0.9;
    mixture_both += heavy <= 0.95 && heavy >= 0.05;
    c.mode = Vi2DMode::ensemble;
    const double ens_heavy = mode_split(fit_2d(c, target).components, target).fraction[0];
    ensemble_light += 1.0 - ens_heavy < 0.05;
    mix_f << (seed > 1 ? "," : "") << fmt(heavy, 3);
    ens_f << (seed > 1 ? "," : "") << fmt(ens_heavy, 3);
  }
  o.check(mixture_in_band >= 4, "mixture heavy fraction in [0.7, 0.9] in " + std::to_string(mixture_in_band) +
                                    "/5 seeds (" + mix_f.str() + ")");
  o.check(mixture_both == 5, "both modes >= 5% of mixture mass in " + std::to_string(mixture_both) + "/5 seeds");
  o.check(ensemble_light >= 3, "ensemble light mode < 5% in " + std::to_string(ensemble_light) + "/5 seeds (heavy " +
                                   ens_f.str() + ")");
  return o;
}

Outcome dmpmc() {
  Outcome o;
  const Target2D target = Target2D::bimodal();
  Rng rng(1);
  const DmpmcResult r = dmpmc_iterate(ParticleSystem::uniform(50, 4.0, 0.3, rng), target, {20, 200}, rng);
  const double zx = (r.mean[0] - 0.6) / r.mean_se[0], zy = (r.mean[1] - 0.6) / r.mean_se[1];
  o.check(std::abs(zx) < 3 && std::abs(zy) < 3, "posterior mean (" + fmt(r.mean[0]) + ", " + fmt(r.mean[1]) +
                                                    "), " + fmt(zx, 2) + " / " + fmt(zy, 2) + " SE from 0.6");

  bool same_locations = true;
  double worst_mean = 0.0, worst_z = 0.0;
  for (const double log_c : {-30.0, -2.0, 3.7, 25.0}) {
    Rng i1(4), i2(4);
    const ParticleSystem p1 = ParticleSystem::uniform(50, 4.0, 0.3, i1), p2 = ParticleSystem::uniform(50, 4.0, 0.3, i2);
    Rng a(5), b(5);
    const DmpmcResult base = dmpmc_iterate(p1, target, {20, 30}, a);
    const DmpmcResult scaled = dmpmc_iterate(p2, target.scaled(log_c), {20, 30}, b);
    same_locations = same_locations && base.particles.locations == scaled.particles.locations;
    for (std::size_t k = 0; k < 2; ++k) worst_mean = std::max(worst_mean, std::abs(base.mean[k] - scaled.mean[k]));
    worst_z = std::max(worst_z, std::abs(scaled.z / base.z / std::exp(log_c) - 1.0));
  }
  o.check(same_locations, "scaled targets resample identical particle populations");
  o.check(worst_mean <= 1e-12 && worst_z <= 1e-12,
          "scaled-target mean diff " + sci(worst_mean) + ", relative Z/c diff " + sci(worst_z));

  const WeightingComparison cmp = compare_weightings(r.particles, target, 20, 50, rng);
  const VarianceGap gap = z_variance_gap(cmp, 1.0);
  o.check(gap.gap > 3 * gap.se, "Var(Z naive) - Var(Z DM) = " + fmt(gap.gap, 6) + " (" + fmt(gap.gap / gap.se, 1) +
                                    " SE) over 50 reps");
  return o;
}

Outcome monotonicity() {
  Outcome o;
  std::vector<double> med;
  std::ostringstream line;
  for (std::size_t S = 1; S <= 4; ++S) {
    std::vector<double> v;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) v.push_back(desk().nll(S, seed));
    med.push_back(median(v));
    line << (S > 1 ? ", " : "") << "S=" << S << ": " << fmt(med.back(), 3);
  }
  o.check(true, "median test NLL " + line.str());
  for (std::size_t S = 1; S < 4; ++S) {
    o.check(med[S] <= med[S - 1] + 0.2, "NLL(" + std::to_string(S + 1) + ") - NLL(" + std::to_string(S) +
                                            ") = " + fmt(med[S] - med[S - 1], 3));
  }
  return o;
}

double mean_jsd(const MixtureVae& m, const Tensor& x, std::size_t points) {
  Rng rng(11);
  double total = 0.0;
  for (std::size_t i = 0; i < points; ++i) {
    std::vector<DiagGaussian> bank;
    for (std::size_t s = 0; s < m.components(); ++s) bank.push_back(m.encode(s, x.values().subspan(i * x.cols(), x.cols())));
    total += jsd_mc(bank, 100, rng).clamped;
  }
  return total / static_cast<double>(points);
}

Outcome jsd() {
  Outcome o;
  {
    Rng rng(1);
    bool bounds = true;
    for (std::size_t S = 2; S <= 5; ++S) {
      std::vector<double> raw;
      bool clamped_ok = true;
      for (int rep = 0; rep < 20; ++rep) {
        std::vector<DiagGaussian> bank;
        for (std::size_t s = 0; s < S; ++s) {
          bank.push_back(DiagGaussian({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)},
                                      {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}));
        }
        const JsdEstimate e = jsd_mc(bank, 500, rng);
        raw.push_back(e.raw);
        clamped_ok = clamped_ok && e.clamped >= 0.0 && e.clamped <= std::log(static_cast<double>(S));
      }
      const Stats s = stats(raw);
      bounds = bounds && clamped_ok && s.mean > -3 * s.se && s.mean < std::log(static_cast<double>(S)) + 3 * s.se;
    }
    o.check(bounds, "clamped in [0, log S], raw within 3 SE of the band, S = 2..5");
  }
  {
    Rng rng(2);
    const std::vector<DiagGaussian> same(4, DiagGaussian({0.3, -1.0}, {0.2, -0.4}));
    const double v = jsd_mc(same, 2000, rng).raw;
    o.check(std::abs(v) <= 1e-3, "identical components " + fmt(v, 6));
    const std::vector<DiagGaussian> apart{DiagGaussian({-100.0}, {0.0}), DiagGaussian({100.0}, {0.0})};
    const double w = jsd_mc(apart, 2000, rng).raw;
    o.check(std::abs(w - std::log(2.0)) <= 1e-2, "separated components " + fmt(w, 6) + " vs log 2");
  }
  int wins = 0;
  std::ostringstream line;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const double mix = mean_jsd(desk().model(2, seed), desk().test_binary(), 500);
    const double ens = mean_jsd(desk().model(2, seed, Denominator::own), desk().test_binary(), 500);
    wins += mix > ens;
    line << (seed > 1 ? ", " : "") << fmt(mix, 4) << " vs " << fmt(ens, 4);
  }
  o.check(wins >= 2, "trained S=2 mixture JSD > ensemble JSD in " + std::to_string(wins) + "/3 seeds (" + line.str() + ")");
  return o;
}

Outcome metrics_exactness() {
  Outcome o;
  const std::vector<int> a{0, 0, 1, 1}, b{0, 1, 0, 1};
  o.check(std::abs(ari(a, b) - -0.5) <= 1e-12, "ARI([0,0,1,1],[0,1,0,1]) = " + fmt(ari(a, b), 15));
  o.check(std::abs(nmi(a, b).value) <= 1e-12, "NMI = " + fmt(nmi(a, b).value, 15));
  const std::vector<int> y{0, 1, 1, 2, 2, 2, 0, 3};
  std::vector<int> relabeled;
  for (int v : y) relabeled.push_back(7 - v);
  o.check(std::abs(ari(y, y) - 1.0) <= 1e-12 && std::abs(nmi(y, y).value - 1.0) <= 1e-12 &&
              std::abs(ari(relabeled, y) - 1.0) <= 1e-12 && std::abs(nmi(relabeled, y).value - 1.0) <= 1e-12,
          "identity and relabeling give ARI = NMI = 1");
  std::ostringstream counts;
  bool ok = true;
  for (const auto& [S, expected] : {std::pair<std::size_t, std::size_t>{1, 349'200}, {2, 698'400}, {3, 1'047'600}}) {
    VaeConfig c;
    c.components = S;
    const std::size_t n = MixtureVae(c).count_parameters().encoder_params;
    ok = ok && n == expected;
    counts << (S > 1 ? " / " : "") << n;
  }
  o.check(ok, "encoder weight counts " + counts.str());
  return o;
}

Outcome representation() {
  Outcome o;
  Desk& d = desk();
  int wins = 0;
  std::ostringstream line;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const MixtureVae& mix = d.model(4, seed);
    const MixtureVae& vanilla = d.model(1, seed);
    const std::size_t length = 4 * 2 * mix.config().latent;
    const ProbeResult pm = linear_probe(mixture_features(mix, d.train()), mixture_features(mix, d.test()));
    Rng rng(seed);
    const std::size_t draws = length / vanilla.config().latent;
    const LatentFeatures tr = baseline_features_by_sampling(vanilla, d.train(), draws, length, rng);
    const LatentFeatures te = baseline_features_by_sampling(vanilla, d.test(), draws, length, rng);
    const ProbeResult pv = linear_probe(tr, te);
    wins += pm.accuracy >= pv.accuracy;
    line << (seed > 1 ? ", " : "") << fmt(pm.accuracy, 3) << " vs " << fmt(pv.accuracy, 3);
    std::printf("  probe seed=%llu: mixture %.4f (%zu it), vanilla %.4f (%zu it)\n", static_cast<unsigned long long>(seed),
                pm.accuracy, pm.iterations, pv.accuracy, pv.iterations);
    std::fflush(stdout);
  }
  o.check(wins >= 3, "S=4 mixture probe >= vanilla probe in " + std::to_string(wins) + "/5 seeds (" + line.str() + ")");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"reduction identities", reductions},
      {"closed-form bound ordering", bound_ordering},
      {"MISELBO tightness", miselbo_tightness},
      {"gradient correctness", gradients},
      {"flow correctness", flows},
      {"2D cooperation", cooperation_2d},
      {"DM-PMC", dmpmc},
      {"NLL monotonicity in S", monotonicity},
      {"JSD", jsd},
      {"metrics exactness", metrics_exactness},
      {"representation trend", representation},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));

  int failures = 0;
  std::vector<std::string> summary;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    char head[160];
    std::snprintf(head, sizeof head, "%s criterion %zu (%s) [%.1f s]: ", o.pass ? "PASS" : "FAIL", i + 1,
                  criteria[i].first.c_str(), secs);
    summary.push_back(head + o.detail.str());
    std::printf("%s\n", summary.back().c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  std::printf("\n");
  for (const std::string& s : summary) std::printf("%s\n", s.c_str());
  return failures == 0 ? 0 : 1;
}

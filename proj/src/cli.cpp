#include "mixvi/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mixvi/adaptation.hpp"
#include "mixvi/data.hpp"
#include "mixvi/errors.hpp"
#include "mixvi/models.hpp"
#include "mixvi/objectives.hpp"
#include "mixvi/rng.hpp"

#ifndef MIXVI_VERSION
#define MIXVI_VERSION "unknown"
#endif

namespace mixvi::cli {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kTestBinarizeSalt = 0x2545f4914f6cdd1dULL;
constexpr std::uint64_t kJsdSalt = 0x9e3779b97f4a7c15ULL;

std::vector<KeySpec> concat(std::initializer_list<std::vector<KeySpec>> parts) {
  std::vector<KeySpec> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<KeySpec> common_keys(const std::string& sub) {
  return {{"seed", "1", "base random seed"}, {"out", "runs/" + sub, "output directory"}};
}

const std::vector<KeySpec> kDataKeys{
    {"data", "data/mnist10k", "directory with IDX image and label files"},
    {"max_images", "0", "read at most this many images (0 = all)"},
    {"split_train", "0.8", "training fraction"},
    {"split_val", "0.1", "validation fraction"},
    {"split_test", "0.1", "test fraction"},
    {"split_seed", "0", "seed of the split permutation and of the fixed test binarisation"},
};

const std::vector<KeySpec> kModelKeys{
    {"S", "1", "mixture components"},
    {"hidden", "300", "hidden units per MLP layer"},
    {"hidden_layers", "2", "hidden layers per MLP"},
    {"latent", "40", "latent width (lower level for hierarchies)"},
    {"latent_top", "40", "upper latent width of the hierarchy"},
    {"hierarchical", "0", "two-level latent hierarchy"},
    {"flow_steps", "0", "IAF transforms per component"},
    {"flow_hidden", "80", "MADE hidden width"},
    {"pseudo_inputs", "0", "VampPrior pseudo-inputs (0 = standard normal prior)"},
};

const std::vector<KeySpec> kTrainKeys{
    {"epochs", "50", "maximum epochs"},
    {"batch", "100", "mini-batch size"},
    {"lr", "0.001", "Adam learning rate"},
    {"warmup", "10", "epochs of linear KL warm-up"},
    {"patience", "20", "early-stopping look-ahead in epochs"},
    {"L_train", "1", "samples per component in the training and validation bounds"},
    {"objective", "mixture", "mixture (shared denominator) or ensemble (own denominators)"},
    {"min_improvement", "1e-6", "validation gain that resets the patience counter"},
};

const std::vector<KeySpec> kNllKeys{
    {"L", "100", "importance samples per component for the NLL"},
    {"n_test", "0", "evaluate the first n test points (0 = all)"},
    {"chunk", "1", "datapoints per NLL evaluation block"},
};

const std::map<std::string, std::vector<KeySpec>>& schemas() {
  static const std::map<std::string, std::vector<KeySpec>> s{
      {"twod", concat({common_keys("twod"),
                       {{"mode", "mixture", "mixture | ensemble | iwvi | iaf"},
                        {"target", "bimodal", "bimodal | ring"},
                        {"S", "auto", "components (auto: 30 for mixture/ensemble, 1 otherwise)"},
                        {"L", "auto", "samples per component (auto: 30 for iwvi, 1 otherwise)"},
                        {"steps", "2000", "Adam steps"},
                        {"lr", "0.1", "Adam learning rate"},
                        {"init_log_var", "-5", "initial per-axis log-variance"},
                        {"batch", "16", "independent draws per component per step"},
                        {"flow_steps", "30", "IAF transforms"},
                        {"made_hidden", "10", "MADE hidden width (two layers)"},
                        {"trace_every", "10", "trace interval in steps"},
                        {"samples", "2000", "points in the sampled cloud"}}})},
      {"train", concat({common_keys("train"), kDataKeys, kModelKeys, kTrainKeys})},
      {"eval", concat({common_keys("eval"), kDataKeys,
                       {{"checkpoint", "", "model checkpoint to evaluate"}},
                       kNllKeys,
                       {{"nll_mode", "mixture", "mixture | single (component 0 only)"},
                        {"repetitions", "1", "single mode: repetitions of the one-component estimator"},
                        {"jsd_points", "500", "test points averaged in the JSD"},
                        {"jsd_samples", "100", "draws per component per point in the JSD"}}})},
      {"sweep-s", concat({common_keys("sweep-s"), kDataKeys,
                          {{"S_list", "1,2,3,4", "comma-separated component counts"},
                           {"replicates", "1", "seeds seed .. seed+replicates-1 per S"}},
                          std::vector<KeySpec>(kModelKeys.begin() + 1, kModelKeys.end()), kTrainKeys, kNllKeys})},
      {"probe", concat({common_keys("probe"), kDataKeys,
                        {{"mixture_checkpoint", "", "checkpoint of the mixture model"},
                         {"baseline_checkpoint", "", "checkpoint of the baseline model"},
                         {"probe_train", "0", "training points for the probe (0 = whole train split)"},
                         {"probe_test", "0", "test points for the probe and clustering (0 = whole test split)"},
                         {"kmeans_k", "10", "clusters"},
                         {"kmeans_restarts", "10", "k-means++ restarts"},
                         {"l2", "1e-4", "probe L2 penalty"},
                         {"probe_iterations", "5000", "maximum probe gradient steps"}}})},
      {"dmpmc", concat({common_keys("dmpmc"),
                        {{"target", "bimodal", "bimodal | ring"},
                         {"S", "50", "proposals"},
                         {"K", "20", "draws per proposal per iteration"},
                         {"sigma", "0.3", "proposal standard deviation"},
                         {"iterations", "200", "adaptation iterations"},
                         {"half_width", "4", "initial locations uniform on [-h, h]^2"},
                         {"reps", "50", "repetitions of the weighting comparison"}}})},
  };
  return s;
}

// ---- value parsing ------------------------------------------------------------

template <class T>
T parse_unsigned(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
  return out;
}

// ---- output helpers -----------------------------------------------------------

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  os << text;
  os.flush();
  if (!os) throw IoError("cannot write " + path.string());
}

std::ostringstream csv_stream() {
  std::ostringstream os;
  os.precision(17);
  return os;
}

std::filesystem::path prepare(const RunConfig& c) {
  const std::filesystem::path out = c.text("out");
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
  write_text(out / "config.txt", c.resolved());
  return out;
}

RunReport start_report(const RunConfig& c) {
  RunReport r;
  r.subcommand = c.subcommand();
  r.config_hash = c.hash();
  r.version = version();
  r.seed = c.u64("seed");
  return r;
}

void finish(const RunConfig& c, RunReport& r, Clock::time_point t0) {
  r.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  write_text(std::filesystem::path(c.text("out")) / "report.json", r.json());
}

MetricRecord metric(std::string name, double value, double se = 0.0, std::size_t n = 0, std::size_t S = 1,
                    std::string mode = "") {
  return MetricRecord{std::move(name), S, std::move(mode), value, se, n};
}

std::pair<double, double> mean_and_se(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double m = 0.0;
  for (double x : v) m += x / n;
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / (n - 1) / n)};
}

// ---- data and models ------------------------------------------------------------

struct Splits {
  Dataset train, val, test;
};

Splits load_splits(const RunConfig& c) {
  const Dataset all = load_idx_directory(c.text("data"), c.count("max_images"));
  const Split s =
      make_split(all.size(), SplitSpec{c.real("split_train"), c.real("split_val"), c.real("split_test"), c.u64("split_seed")});
  return {all.subset(s.train), all.subset(s.val), all.subset(s.test)};
}

Tensor fixed_test_binarization(const RunConfig& c, const Tensor& images) {
  Rng rng(c.u64("split_seed") ^ kTestBinarizeSalt);
  return binarize_dynamic(images, rng);
}

Dataset head_or_all(const Dataset& d, std::size_t n) { return n == 0 || n >= d.size() ? d : d.head(n); }

VaeConfig model_config(const RunConfig& c, std::size_t data_dim, std::size_t S, std::uint64_t seed) {
  VaeConfig m;
  m.data_dim = data_dim;
  m.hidden = c.count("hidden");
  m.hidden_layers = c.count("hidden_layers");
  m.latent = c.count("latent");
  m.latent_top = c.count("latent_top");
  m.components = S;
  m.hierarchical = c.flag("hierarchical");
  m.flow_steps = c.count("flow_steps");
  m.flow_hidden = c.count("flow_hidden");
  m.pseudo_inputs = c.count("pseudo_inputs");
  m.seed = seed;
  m.validate();
  return m;
}

Denominator parse_objective(const std::string& v) {
  if (v == "mixture") return Denominator::mixture;
  if (v == "ensemble") return Denominator::own;
  throw ConfigError("objective must be mixture or ensemble, got '" + v + "'");
}

TrainConfig train_config(const RunConfig& c, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = c.count("epochs");
  t.batch_size = c.count("batch");
  t.lr = c.real("lr");
  t.warmup_epochs = c.count("warmup");
  t.patience = c.count("patience");
  t.seed = seed;
  t.L = c.count("L_train");
  t.denominator = parse_objective(c.text("objective"));
  t.min_improvement = c.real("min_improvement");
  return t;
}

struct Trained {
  MixtureVae model;
  TrainReport report;
};

Trained train_into(const RunConfig& c, const Splits& d, std::size_t S, std::uint64_t seed,
                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Trained t{MixtureVae(model_config(c, d.train.dim(), S, seed)), {}};
  t.report = train_vae(t.model, d.train, d.val, train_config(c, seed));
  save_checkpoint(t.model, (dir / "model.ckpt").string());
  write_text(dir / "epochs.csv", epoch_csv(t.report, false));
  std::ostringstream timing = csv_stream();
  timing << "epoch,wall_seconds\n";
  for (const EpochRecord& e : t.report.epochs) timing << e.epoch << ',' << e.wall_seconds << '\n';
  write_text(dir / "timing.csv", timing.str());
  return t;
}

NllEstimate test_nll(const RunConfig& c, const MixtureVae& m, const Tensor& binary, NllMode mode,
                     std::size_t repetitions, std::uint64_t seed) {
  NllConfig n;
  n.L = c.count("L");
  n.mode = mode;
  n.repetitions = repetitions;
  n.seed = seed;
  n.chunk = c.count("chunk");
  return estimate_nll(m, binary, n);
}

MixtureVae load_model(const std::string& path) {
  MixtureVae m(read_checkpoint_config(path));
  load_checkpoint(m, path);
  return m;
}

void require_checkpoint(const RunConfig& c, const std::string& key) {
  const std::string& p = c.get(key);
  if (p.empty()) throw ConfigError(key + " is required");
  if (!std::filesystem::exists(p)) throw ConfigError(key + ": no checkpoint at " + p);
}

std::size_t top_latent(const VaeConfig& v) { return v.hierarchical ? v.latent_top : v.latent; }

// ---- 2D helpers -------------------------------------------------------------

Target2D parse_target(const std::string& v) {
  if (v == "bimodal") return Target2D::bimodal();
  if (v == "ring") return Target2D::ring();
  throw ConfigError("target must be bimodal or ring, got '" + v + "'");
}

double normalizing_constant(const Target2D& t) {
  if (t.kind() != Target2D::Kind::ring) return std::exp(t.log_scale());
  // Radially symmetric: 2 pi int r p(r, 0) dr, midpoint rule.
  const double h = t.width() / 400.0, end = t.radius() + 12.0 * t.width();
  double z = 0.0;
  for (double r = 0.5 * h; r < end; r += h) z += r * std::exp(t.log_density(r, 0.0)) * h;
  return 2.0 * std::numbers::pi * z;
}

std::size_t heaviest_mode(const Target2D& t) {
  const auto& w = t.mode_weights();
  return static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
}

std::size_t nearest_mode(const Target2D& t, double x, double y) {
  std::size_t best = 0;
  double best_d = 0.0;
  for (std::size_t m = 0; m < t.mode_means().size(); ++m) {
    const double d = std::hypot(x - t.mode_means()[m][0], y - t.mode_means()[m][1]);
    if (m == 0 || d < best_d) best = m, best_d = d;
  }
  return best;
}

}  // namespace

const char* version() { return MIXVI_VERSION; }

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"twod", "train", "eval", "sweep-s", "probe", "dmpmc"};
  return names;
}

const std::vector<KeySpec>& schema(const std::string& subcommand) {
  const auto it = schemas().find(subcommand);
  if (it == schemas().end()) throw ConfigError("unknown subcommand '" + subcommand + "'");
  return it->second;
}

std::string csv_help(const std::string& subcommand) {
  static const std::map<std::string, std::string> help{
      {"twod",
       "trace.csv: step,component,mean_x,mean_y,log_var_x,log_var_y\n"
       "loss.csv: step,loss\n"
       "components.csv: component,mean_x,mean_y,log_var_x,log_var_y,mode\n"
       "cloud.csv: x,y\n"
       "modes.csv (bimodal): mode,mean_x,mean_y,weight,component_fraction,sample_fraction\n"},
      {"train", "epochs.csv: epoch,beta,train_objective,val_miselbo\ntiming.csv: epoch,wall_seconds\n"},
      {"eval", "nll.csv: index,nll\njsd.csv: index,jsd_raw,jsd_clamped\n"},
      {"sweep-s",
       "sweep.csv: S,seed,nll,nll_se,bpd,best_epoch,best_val,epochs_run\n"
       "sweep_median.csv: S,median_nll,replicates\n"
       "S<S>_seed<seed>/epochs.csv and timing.csv as for train\n"},
      {"probe", "probe.csv: model,S,features,feature_length,accuracy,ari,nmi,nmi_degenerate,unseen_test_classes\n"},
      {"dmpmc",
       "iterations.csv: iteration,mean_x,mean_y,z,ess\n"
       "particles.csv: proposal,x,y\n"
       "weighting.csv: rep,z_mixture,z_naive,weight_var_mixture,weight_var_naive\n"},
  };
  schema(subcommand);
  return help.at(subcommand);
}

// ---- RunConfig ------------------------------------------------------------------

RunConfig::RunConfig(std::string subcommand) : subcommand_(std::move(subcommand)), schema_(&schema(subcommand_)) {
  for (const KeySpec& k : *schema_) values_.push_back(k.default_value);
}

std::size_t RunConfig::position(const std::string& key) const {
  for (std::size_t i = 0; i < schema_->size(); ++i) {
    if ((*schema_)[i].key == key) return i;
  }
  throw ConfigError("unknown key '" + key + "' for " + subcommand_);
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (value.find('\n') != std::string::npos) throw ConfigError(key + ": value contains a newline");
  values_[position(key)] = value;
}

void RunConfig::assign(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("expected key=value, got '" + assignment + "'");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::string line;
  while (std::getline(is, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    assign(line);
  }
}

const std::string& RunConfig::get(const std::string& key) const { return values_[position(key)]; }

std::size_t RunConfig::count(const std::string& key) const { return parse_unsigned<std::size_t>(key, get(key)); }

std::uint64_t RunConfig::u64(const std::string& key) const { return parse_unsigned<std::uint64_t>(key, get(key)); }

double RunConfig::real(const std::string& key) const {
  const std::string& v = get(key);
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (v.empty() || used != v.size() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  }
  return out;
}

bool RunConfig::flag(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError(key + ": expected 0/1/true/false, got '" + v + "'");
}

std::vector<std::size_t> RunConfig::count_list(const std::string& key) const {
  std::vector<std::size_t> out;
  std::istringstream is(get(key));
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(parse_unsigned<std::size_t>(key, item));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::string RunConfig::resolved() const {
  std::string s = "# mixvi " + subcommand_ + "\n";
  for (std::size_t i = 0; i < schema_->size(); ++i) s += (*schema_)[i].key + "=" + values_[i] + "\n";
  return s;
}

std::string RunConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : resolved()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- RunReport --------------------------------------------------------------------

const MetricRecord& RunReport::find(const std::string& metric, std::size_t S) const {
  for (const MetricRecord& m : metrics) {
    if (m.metric == metric && (S == 0 || m.S == S)) return m;
  }
  throw ContractError("report has no metric " + metric);
}

std::string RunReport::json() const {
  nlohmann::ordered_json j;
  j["subcommand"] = subcommand;
  j["version"] = version;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["metrics"] = nlohmann::json::parse(metrics_json(metrics));
  j["wall_seconds"] = wall_seconds;
  return j.dump(2) + "\n";
}

// ---- subcommands --------------------------------------------------------------------

RunReport cmd_twod(const RunConfig& c) {
  const auto t0 = Clock::now();
  const std::filesystem::path out = prepare(c);
  RunReport report = start_report(c);

  Vi2DConfig v = Vi2DConfig::defaults(parse_vi2d_mode(c.text("mode")));
  if (c.text("S") != "auto") v.S = c.count("S");
  if (c.text("L") != "auto") v.L = c.count("L");
  v.steps = c.count("steps");
  v.lr = c.real("lr");
  v.init_log_var = c.real("init_log_var");
  v.batch = c.count("batch");
  v.flow_steps = c.count("flow_steps");
  v.made_hidden = c.count("made_hidden");
  v.trace_every = c.count("trace_every");
  v.seed = c.u64("seed");
  const Target2D target = parse_target(c.text("target"));
  const Fit2DResult fit = fit_2d(v, target);

  std::ostringstream trace = csv_stream(), loss = csv_stream(), comps = csv_stream(), cloud = csv_stream();
  trace << "step,component,mean_x,mean_y,log_var_x,log_var_y\n";
  for (const TraceRow& r : fit.trace) {
    trace << r.step << ',' << r.component << ',' << r.mean_x << ',' << r.mean_y << ',' << r.log_var_x << ','
          << r.log_var_y << '\n';
  }
  loss << "step,loss\n";
  for (std::size_t i = 0; i < fit.loss.size(); ++i) loss << i + 1 << ',' << fit.loss[i] << '\n';

  const bool modal = target.kind() == Target2D::Kind::bimodal;
  comps << "component,mean_x,mean_y,log_var_x,log_var_y,mode\n";
  for (std::size_t s = 0; s < fit.components.size(); ++s) {
    const DiagGaussian& q = fit.components[s];
    comps << s << ',' << q.mean[0] << ',' << q.mean[1] << ',' << q.log_var[0] << ',' << q.log_var[1] << ',';
    if (modal) comps << nearest_mode(target, q.mean[0], q.mean[1]);
    comps << '\n';
  }

  Rng rng(c.u64("seed") ^ kJsdSalt);
  const std::size_t n = c.count("samples");
  const Tensor z = sample_fit(fit, n, rng);
  cloud << "x,y\n";
  for (std::size_t i = 0; i < n; ++i) cloud << z(i, 0) << ',' << z(i, 1) << '\n';

  write_text(out / "trace.csv", trace.str());
  write_text(out / "loss.csv", loss.str());
  write_text(out / "components.csv", comps.str());
  write_text(out / "cloud.csv", cloud.str());

  const std::size_t S = fit.components.size();
  report.metrics.push_back(metric("final_loss", fit.loss.empty() ? 0.0 : fit.loss.back(), 0.0, 0, S, c.text("mode")));
  report.metrics.push_back(metric("cross_evaluations", static_cast<double>(fit.cross_evaluations), 0.0, 0, S, c.text("mode")));
  if (modal) {
    const ModeSplit split = mode_split(fit.components, target);
    std::vector<double> sample_fraction(target.mode_means().size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) sample_fraction[nearest_mode(target, z(i, 0), z(i, 1))] += 1.0 / n;
    std::ostringstream modes = csv_stream();
    modes << "mode,mean_x,mean_y,weight,component_fraction,sample_fraction\n";
    for (std::size_t m = 0; m < split.fraction.size(); ++m) {
      modes << m << ',' << target.mode_means()[m][0] << ',' << target.mode_means()[m][1] << ','
            << target.mode_weights()[m] << ',' << split.fraction[m] << ',' << sample_fraction[m] << '\n';
    }
    write_text(out / "modes.csv", modes.str());
    const std::size_t heavy = heaviest_mode(target);
    report.metrics.push_back(metric("heavy_fraction", split.fraction[heavy], 0.0, S, S, c.text("mode")));
    report.metrics.push_back(metric("light_fraction", 1.0 - split.fraction[heavy], 0.0, S, S, c.text("mode")));
    report.metrics.push_back(metric("sample_heavy_fraction", sample_fraction[heavy], 0.0, n, S, c.text("mode")));
  } else {
    double worst = 0.0;
    std::size_t inside = 0;
    for (const DiagGaussian& q : fit.components) {
      const double dev = std::abs(std::hypot(q.mean[0], q.mean[1]) - target.radius()) / target.width();
      worst = std::max(worst, dev);
      inside += dev < 3.0;
    }
    report.metrics.push_back(metric("max_radius_deviation", worst, 0.0, S, S, c.text("mode")));
    report.metrics.push_back(metric("components_in_band", static_cast<double>(inside) / S, 0.0, S, S, c.text("mode")));
  }
  finish(c, report, t0);
  return report;
}

RunReport cmd_train(const RunConfig& c) {
  const auto t0 = Clock::now();
  const std::filesystem::path out = prepare(c);
  RunReport report = start_report(c);
  const Splits d = load_splits(c);
  const std::size_t S = c.count("S");
  const Trained t = train_into(c, d, S, c.u64("seed"), out);
  const std::string mode = c.text("objective");
  report.metrics.push_back(metric("best_val_miselbo", t.report.best_val, 0.0, d.val.size(), S, mode));
  report.metrics.push_back(metric("best_epoch", static_cast<double>(t.report.best_epoch), 0.0, 0, S, mode));
  report.metrics.push_back(metric("epochs_run", static_cast<double>(t.report.epochs.size()), 0.0, 0, S, mode));
  report.metrics.push_back(metric("stopped_early", t.report.stopped_early ? 1.0 : 0.0, 0.0, 0, S, mode));
  if (!t.report.epochs.empty()) {
    report.metrics.push_back(metric("final_train_objective", t.report.epochs.back().train_objective, 0.0,
                                    d.train.size(), S, mode));
  }
  const ParameterCounts pc = t.model.count_parameters();
  report.metrics.push_back(metric("encoder_params", static_cast<double>(pc.encoder_params), 0.0, 0, S, mode));
  report.metrics.push_back(metric("total_params", static_cast<double>(pc.total_params), 0.0, 0, S, mode));
  finish(c, report, t0);
  return report;
}

RunReport cmd_eval(const RunConfig& c) {
  const auto t0 = Clock::now();
  require_checkpoint(c, "checkpoint");
  const std::filesystem::path out = prepare(c);
  RunReport report = start_report(c);
  const MixtureVae m = load_model(c.text("checkpoint"));
  const Splits d = load_splits(c);
  if (m.config().data_dim != d.test.dim()) {
    throw VersionError("checkpoint expects " + std::to_string(m.config().data_dim) + " inputs, data has " +
                       std::to_string(d.test.dim()));
  }
  const Tensor binary = fixed_test_binarization(c, d.test.images);
  const Dataset test{binary, d.test.labels};
  const Dataset nll_set = head_or_all(test, c.count("n_test"));

  const std::string mode_name = c.text("nll_mode");
  NllMode mode;
  if (mode_name == "mixture") {
    mode = NllMode::mixture;
  } else if (mode_name == "single") {
    mode = NllMode::single;
  } else {
    throw ConfigError("nll_mode must be mixture or single, got '" + mode_name + "'");
  }
  const std::size_t S = m.components();
  const NllEstimate nll = test_nll(c, m, nll_set.images, mode, c.count("repetitions"), c.u64("seed"));
  std::ostringstream nll_csv = csv_stream();
  nll_csv << "index,nll\n";
  for (std::size_t i = 0; i < nll.per_point.size(); ++i) nll_csv << i << ',' << nll.per_point[i] << '\n';
  write_text(out / "nll.csv", nll_csv.str());
  report.metrics.push_back(metric("nll", nll.nll, nll.standard_error, nll_set.size(), S, mode_name));
  report.metrics.push_back(metric("bpd", bits_per_dim(nll.nll, m.config().data_dim),
                                  bits_per_dim(nll.standard_error, m.config().data_dim), nll_set.size(), S, mode_name));

  const Dataset jsd_set = head_or_all(test, c.count("jsd_points"));
  Rng rng(c.u64("seed") ^ kJsdSalt);
  std::vector<double> raw, clamped;
  std::ostringstream jsd_csv = csv_stream();
  jsd_csv << "index,jsd_raw,jsd_clamped\n";
  for (std::size_t i = 0; i < jsd_set.size(); ++i) {
    std::vector<DiagGaussian> bank;
    for (std::size_t s = 0; s < S; ++s) bank.push_back(m.encode(s, jsd_set.images.values().subspan(i * jsd_set.dim(), jsd_set.dim())));
    const JsdEstimate e = jsd_mc(bank, c.count("jsd_samples"), rng);
    raw.push_back(e.raw);
    clamped.push_back(e.clamped);
    jsd_csv << i << ',' << e.raw << ',' << e.clamped << '\n';
  }
  write_text(out / "jsd.csv", jsd_csv.str());
  const auto [jm, jse] = mean_and_se(clamped);
  const auto [rm, rse] = mean_and_se(raw);
  report.metrics.push_back(metric("jsd", jm, jse, jsd_set.size(), S, mode_name));
  report.metrics.push_back(metric("jsd_raw", rm, rse, jsd_set.size(), S, mode_name));
  finish(c, report, t0);
  return report;
}

RunReport cmd_sweep_s(const RunConfig& c) {
  const auto t0 = Clock::now();
  const std::filesystem::path out = prepare(c);
  RunReport report = start_report(c);
  const Splits d = load_splits(c);
  const Tensor binary = fixed_test_binarization(c, d.test.images);
  const Tensor test = head_or_all(Dataset{binary, d.test.labels}, c.count("n_test")).images;
  const std::size_t replicates = c.count("replicates");
  if (replicates == 0) throw ConfigError("replicates must be positive");

  std::ostringstream rows = csv_stream(), medians = csv_stream();
  rows << "S,seed,nll,nll_se,bpd,best_epoch,best_val,epochs_run\n";
  medians << "S,median_nll,replicates\n";
  for (const std::size_t S : c.count_list("S_list")) {
    std::vector<double> nlls;
    for (std::size_t r = 0; r < replicates; ++r) {
      const std::uint64_t seed = c.u64("seed") + r;
      const auto dir = out / ("S" + std::to_string(S) + "_seed" + std::to_string(seed));
      const Trained t = train_into(c, d, S, seed, dir);
      const NllEstimate nll = test_nll(c, t.model, test, NllMode::mixture, 1, seed);
      nlls.push_back(nll.nll);
      rows << S << ',' << seed << ',' << nll.nll << ',' << nll.standard_error << ','
           << bits_per_dim(nll.nll, d.test.dim()) << ',' << t.report.best_epoch << ',' << t.report.best_val << ','
           << t.report.epochs.size() << '\n';
      report.metrics.push_back(metric("nll", nll.nll, nll.standard_error, test.rows(), S, "seed=" + std::to_string(seed)));
    }
    std::vector<double> sorted = nlls;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t k = sorted.size();
    const double median = k % 2 ? sorted[k / 2] : 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]);
    medians << S << ',' << median << ',' << k << '\n';
    report.metrics.push_back(metric("median_nll", median, 0.0, k, S, "median"));
  }
  write_text(out / "sweep.csv", rows.str());
  write_text(out / "sweep_median.csv", medians.str());
  finish(c, report, t0);
  return report;
}

RunReport cmd_probe(const RunConfig& c) {
  const auto t0 = Clock::now();
  require_checkpoint(c, "mixture_checkpoint");
  require_checkpoint(c, "baseline_checkpoint");
  const std::filesystem::path out = prepare(c);
  RunReport report = start_report(c);
  const MixtureVae mix = load_model(c.text("mixture_checkpoint"));
  const MixtureVae base = load_model(c.text("baseline_checkpoint"));
  const Splits d = load_splits(c);
  for (const MixtureVae* m : {&mix, &base}) {
    if (m->config().data_dim != d.train.dim()) throw VersionError("checkpoint input width does not match the data");
  }
  const Dataset train = head_or_all(d.train, c.count("probe_train"));
  const Dataset test = head_or_all(d.test, c.count("probe_test"));

  ProbeConfig pc;
  pc.l2 = c.real("l2");
  pc.max_iterations = c.count("probe_iterations");
  KMeansConfig kc;
  kc.restarts = c.count("kmeans_restarts");

  std::ostringstream csv = csv_stream();
  csv << "model,S,features,feature_length,accuracy,ari,nmi,nmi_degenerate,unseen_test_classes\n";
  const std::size_t length = mix.components() * 2 * top_latent(mix.config());
  Rng rng(c.u64("seed"));
  for (const auto& [name, m] : {std::pair<std::string, const MixtureVae*>{"mixture", &mix}, {"baseline", &base}}) {
    LatentFeatures f_train, f_test;
    std::string kind;
    if (m->components() * 2 * top_latent(m->config()) == length) {
      f_train = mixture_features(*m, train);
      f_test = mixture_features(*m, test);
      kind = "parameters";
    } else {
      const std::size_t dz = top_latent(m->config());
      if (length % dz != 0) throw ContractError("baseline latent width does not divide the mixture feature length");
      f_train = baseline_features_by_sampling(*m, train, length / dz, length, rng);
      f_test = baseline_features_by_sampling(*m, test, length / dz, length, rng);
      kind = "samples";
    }
    const ProbeResult probe = linear_probe(f_train, f_test, pc);
    Rng krng(c.u64("seed"));
    const KMeansResult km = kmeans(f_test.features, c.count("kmeans_k"), krng, kc);
    const double a = ari(km.labels, f_test.labels);
    const NmiResult n = nmi(km.labels, f_test.labels);
    csv << name << ',' << m->components() << ',' << kind << ',' << length << ',' << probe.accuracy << ',' << a << ','
        << n.value << ',' << n.degenerate << ',' << probe.unseen_test_classes << '\n';
    report.metrics.push_back(metric("probe_accuracy", probe.accuracy, 0.0, test.size(), m->components(), name));
    report.metrics.push_back(metric("ari", a, 0.0, test.size(), m->components(), name));
    report.metrics.push_back(metric("nmi", n.value, 0.0, test.size(), m->components(), name));
  }
  write_text(out / "probe.csv", csv.str());
  finish(c, report, t0);
  return report;
}

RunReport cmd_dmpmc(const RunConfig& c) {
  const auto t0 = Clock::now();
  const std::filesystem::path out = prepare(c);
  RunReport report = start_report(c);
  const Target2D target = parse_target(c.text("target"));
  const std::size_t S = c.count("S"), K = c.count("K"), T = c.count("iterations");
  if (S == 0 || K == 0 || T == 0) throw ConfigError("S, K and iterations must be positive");
  Rng rng(c.u64("seed"));
  const ParticleSystem initial = ParticleSystem::uniform(S, c.real("half_width"), c.real("sigma"), rng);

  DmpmcResult r;
  if (S >= 2) {
    r = dmpmc_iterate(initial, target, DmpmcConfig{K, T}, rng);
  } else {
    // One proposal: repeated self-normalised IS at the fixed location.
    r.particles = initial;
    std::vector<double> mx, my, zs;
    for (std::size_t i = 0; i < T; ++i) {
      const WeightedSample w = importance_pass(initial, target, K, rng);
      r.iterations.push_back({w.mean, w.z, w.ess});
      mx.push_back(w.mean[0]);
      my.push_back(w.mean[1]);
      zs.push_back(w.z);
    }
    const auto [ax, sx] = mean_and_se(mx);
    const auto [ay, sy] = mean_and_se(my);
    const auto [az, sz] = mean_and_se(zs);
    r.mean = {ax, ay};
    r.mean_se = {sx, sy};
    r.z = az;
    r.z_se = sz;
  }
  const WeightingComparison cmp = compare_weightings(r.particles, target, K, c.count("reps"), rng);
  const VarianceGap gap = z_variance_gap(cmp, normalizing_constant(target));

  std::ostringstream its = csv_stream(), parts = csv_stream(), weights = csv_stream();
  its << "iteration,mean_x,mean_y,z,ess\n";
  for (std::size_t i = 0; i < r.iterations.size(); ++i) {
    const DmpmcIteration& it = r.iterations[i];
    its << i + 1 << ',' << it.mean[0] << ',' << it.mean[1] << ',' << it.z << ',' << it.ess << '\n';
  }
  parts << "proposal,x,y\n";
  for (std::size_t s = 0; s < r.particles.proposals(); ++s) {
    parts << s << ',' << r.particles.locations(s, 0) << ',' << r.particles.locations(s, 1) << '\n';
  }
  weights << "rep,z_mixture,z_naive,weight_var_mixture,weight_var_naive\n";
  for (std::size_t i = 0; i < cmp.mixture_z.size(); ++i) {
    weights << i << ',' << cmp.mixture_z[i] << ',' << cmp.naive_z[i] << ',' << cmp.mixture_weight_variance[i] << ','
            << cmp.naive_weight_variance[i] << '\n';
  }
  write_text(out / "iterations.csv", its.str());
  write_text(out / "particles.csv", parts.str());
  write_text(out / "weighting.csv", weights.str());

  const std::string t = c.text("target");
  report.metrics.push_back(metric("mean_x", r.mean[0], r.mean_se[0], T, S, t));
  report.metrics.push_back(metric("mean_y", r.mean[1], r.mean_se[1], T, S, t));
  report.metrics.push_back(metric("z", r.z, r.z_se, T, S, t));
  report.metrics.push_back(metric("true_z", normalizing_constant(target), 0.0, 0, S, t));
  report.metrics.push_back(metric("z_variance_gap", gap.gap, gap.se, cmp.mixture_z.size(), S, t));
  const auto [wm, wse] = mean_and_se(cmp.mixture_weight_variance);
  const auto [wn, wnse] = mean_and_se(cmp.naive_weight_variance);
  report.metrics.push_back(metric("weight_variance_mixture", wm, wse, cmp.mixture_z.size(), S, t));
  report.metrics.push_back(metric("weight_variance_naive", wn, wnse, cmp.mixture_z.size(), S, t));
  if (!r.iterations.empty()) report.metrics.push_back(metric("final_ess", r.iterations.back().ess, 0.0, S * K, S, t));
  finish(c, report, t0);
  return report;
}

RunReport run(const RunConfig& config) {
  const std::string& s = config.subcommand();
  if (s == "twod") return cmd_twod(config);
  if (s == "train") return cmd_train(config);
  if (s == "eval") return cmd_eval(config);
  if (s == "sweep-s") return cmd_sweep_s(config);
  if (s == "probe") return cmd_probe(config);
  if (s == "dmpmc") return cmd_dmpmc(config);
  throw ConfigError("unknown subcommand '" + s + "'");
}

int exit_code(const std::exception& e) noexcept {
  if (dynamic_cast<const ContractError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e)) return 3;
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  return 1;
}

}  // namespace mixvi::cli

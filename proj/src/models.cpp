#include "mixvi/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "mixvi/errors.hpp"
#include "mixvi/rng.hpp"

namespace mixvi {

// ---- Mlp --------------------------------------------------------------------

Mlp::Mlp(ParameterStore& store, const std::string& prefix, std::size_t in, const std::vector<std::size_t>& hidden,
         std::size_t out, Rng& rng, bool zero_init)
    : in_(in), out_(out) {
  std::size_t prev = in;
  std::vector<std::size_t> widths = hidden;
  widths.push_back(out);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const std::string name = prefix + ".l" + std::to_string(l);
    const std::size_t w = widths[l];
    if (zero_init) {
      weights_.push_back(store.add(name + ".w", Tensor::matrix(prev, w)));
    } else {
      weights_.push_back(store.add_uniform(name + ".w", Shape{prev, w}, 1.0 / std::sqrt(double(prev)), rng));
    }
    biases_.push_back(store.add(name + ".b", Tensor::vector(std::vector<double>(w, 0.0))));
    prev = w;
  }
}

Var Mlp::forward(const ParamBinding& params, Var x, Var* last_hidden) const {
  if (x.cols() != in_) throw DimensionError("Mlp: input width " + std::to_string(x.cols()) + ", expected " +
                                            std::to_string(in_));
  Var h = x;
  const std::size_t n = weights_.size();
  for (std::size_t l = 0; l + 1 < n; ++l) h = tanh(add(matmul(h, params[weights_[l]]), params[biases_[l]]));
  if (last_hidden) *last_hidden = h;
  return add(matmul(h, params[weights_[n - 1]]), params[biases_[n - 1]]);
}

Tensor Mlp::forward_values(const ParameterStore& store, const Tensor& x) const {
  Tape tape;
  const ParamBinding params(tape, store, false);
  return forward(params, tape.constant(x)).value();
}

std::size_t Mlp::weight_count(const ParameterStore& store) const {
  std::size_t n = 0;
  for (auto h : weights_) n += store.value(h).size();
  return n;
}

std::size_t Mlp::bias_count(const ParameterStore& store) const {
  std::size_t n = 0;
  for (auto h : biases_) n += store.value(h).size();
  return n;
}

GaussianVars gaussian_head(Var out, std::size_t dim) {
  if (out.cols() != 2 * dim) throw DimensionError("gaussian_head: expected width 2d");
  return GaussianVars{slice_cols(out, 0, dim), clamp(slice_cols(out, dim, 2 * dim), kMinLogVar, kMaxLogVar)};
}

// ---- VaeConfig ----------------------------------------------------------------

void VaeConfig::validate() const {
  if (data_dim == 0 || hidden == 0 || latent == 0) throw ConfigError("model dimensions must be positive");
  if (hidden_layers == 0) throw ConfigError("encoders need at least one hidden layer");
  if (components == 0) throw ConfigError("components must be at least 1");
  if (hierarchical && latent_top == 0) throw ConfigError("latent_top must be positive for a hierarchy");
  if (flow_steps > 0 && flow_hidden == 0) throw ConfigError("flow_hidden must be positive");
  if (!shared_prior) throw ConfigError("priors are shared across components; per-component priors are unsupported");
}

std::string VaeConfig::describe() const {
  std::ostringstream os;
  os << "data_dim=" << data_dim << " hidden=" << hidden << " hidden_layers=" << hidden_layers
     << " latent=" << latent << " latent_top=" << latent_top << " components=" << components
     << " hierarchical=" << (hierarchical ? 1 : 0) << " flow_steps=" << flow_steps << " flow_hidden=" << flow_hidden
     << " pseudo_inputs=" << pseudo_inputs << " shared_prior=" << (shared_prior ? 1 : 0) << " seed=" << seed;
  return os.str();
}

VaeConfig VaeConfig::parse(const std::string& description) {
  std::map<std::string, std::uint64_t> kv;
  std::istringstream is(description);
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("model description token without '=': " + tok);
    try {
      kv[tok.substr(0, eq)] = std::stoull(tok.substr(eq + 1));
    } catch (const std::exception&) {
      throw FormatError("bad model description value: " + tok);
    }
  }
  VaeConfig c;
  auto take = [&](const char* key, auto& field) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("model description lacks ") + key);
    field = static_cast<std::remove_reference_t<decltype(field)>>(it->second);
    kv.erase(it);
  };
  take("data_dim", c.data_dim);
  take("hidden", c.hidden);
  take("hidden_layers", c.hidden_layers);
  take("latent", c.latent);
  take("latent_top", c.latent_top);
  take("components", c.components);
  take("hierarchical", c.hierarchical);
  take("flow_steps", c.flow_steps);
  take("flow_hidden", c.flow_hidden);
  take("pseudo_inputs", c.pseudo_inputs);
  take("shared_prior", c.shared_prior);
  take("seed", c.seed);
  if (!kv.empty()) throw FormatError("unknown model description key " + kv.begin()->first);
  return c;
}

// ---- MixtureVae ------------------------------------------------------------------

MixtureVae::MixtureVae(VaeConfig config) : config_(std::move(config)) {
  config_.validate();
  const VaeConfig& c = config_;
  const std::vector<std::size_t> hidden(c.hidden_layers, c.hidden);
  // Stream 0 initialises the shared modules, stream s + 1 component s.
  for (std::size_t s = 0; s < c.components; ++s) {
    Rng rng(derive_seed(c.seed, s + 1));
    const std::string p = "enc." + std::to_string(s);
    if (c.hierarchical) {
      top_.emplace_back(store_, p + ".top", c.data_dim, hidden, 2 * c.latent_top, rng);
      lower_.emplace_back(store_, p + ".low", c.data_dim + c.latent_top, hidden, 2 * c.latent, rng);
    } else {
      top_.emplace_back(store_, p, c.data_dim, hidden, 2 * c.latent, rng);
    }
    if (c.flow_steps > 0) {
      MadeConfig mc{c.latent, {c.flow_hidden, c.flow_hidden}, c.hidden};
      flows_.push_back(std::make_unique<FlowStack>(store_, "flow." + std::to_string(s), c.flow_steps, mc, rng, s));
    }
  }
  Rng rng(derive_seed(c.seed, 0));
  const std::size_t dec_in = c.hierarchical ? c.latent + c.latent_top : c.latent;
  decoder_ = Mlp(store_, "dec", dec_in, hidden, c.data_dim, rng);
  if (c.hierarchical) prior1_ = Mlp(store_, "prior1", c.latent_top, {c.hidden}, 2 * c.latent, rng);
  if (c.pseudo_inputs > 0) {
    // Small weights keep the initial pseudo-inputs near 0.5.
    vamp_w_ = store_.add_uniform("vamp.gen.w", Shape{c.pseudo_inputs, c.data_dim}, 0.1, rng);
    vamp_b_ = store_.add("vamp.gen.b", Tensor::vector(std::vector<double>(c.data_dim, 0.0)));
  }
}

void MixtureVae::check_component(std::size_t s) const {
  if (s >= config_.components) {
    throw ContractError("component index " + std::to_string(s) + " out of range for S=" +
                        std::to_string(config_.components));
  }
}

const Mlp& MixtureVae::top_net(std::size_t s) const {
  check_component(s);
  return top_[s];
}

const FlowStack* MixtureVae::flow(std::size_t s) const {
  check_component(s);
  return flows_.empty() ? nullptr : flows_[s].get();
}

DiagGaussian MixtureVae::encode(std::size_t s, std::span<const double> x) const {
  if (x.size() != config_.data_dim) throw DimensionError("encode: data width mismatch");
  const Mlp& net = top_net(s);
  const Tensor out = net.forward_values(store_, Tensor(Shape{1, x.size()}, std::vector<double>(x.begin(), x.end())));
  const std::size_t d = net.out_dim() / 2;
  DiagGaussian g;
  g.mean.resize(d);
  g.log_var.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    g.mean[i] = out[i];
    g.log_var[i] = std::clamp(out[d + i], kMinLogVar, kMaxLogVar);
  }
  return g;
}

EncoderOutput MixtureVae::encode(const ParamBinding& params, std::size_t s, Var x) const {
  const Mlp& net = top_net(s);
  Var h;
  const Var out = net.forward(params, x, &h);
  EncoderOutput r{gaussian_head(out, net.out_dim() / 2), std::nullopt};
  if (!config_.hierarchical && has_flows()) r.context = h;
  return r;
}

LowerOutput MixtureVae::encode_lower(const ParamBinding& params, std::size_t s, Var x, Var z2) const {
  check_component(s);
  if (!config_.hierarchical) throw ContractError("encode_lower needs a hierarchical model");
  if (z2.rows() % x.rows() != 0) throw DimensionError("encode_lower: z2 rows must be a multiple of x rows");
  const Var xt = z2.rows() == x.rows() ? x : tile_rows(x, z2.rows() / x.rows());
  Var h;
  const Var out = lower_[s].forward(params, concat_cols(std::vector<Var>{xt, z2}), &h);
  LowerOutput r{gaussian_head(out, config_.latent), std::nullopt};
  if (has_flows()) r.context = h;
  return r;
}

Var MixtureVae::decode(const ParamBinding& params, Var z, std::optional<Var> z2) const {
  if (config_.hierarchical) {
    if (!z2) throw ContractError("hierarchical decoder needs z2");
    return decoder_.forward(params, concat_cols(std::vector<Var>{z, *z2}));
  }
  return decoder_.forward(params, z);
}

Var MixtureVae::log_prior_top(const ParamBinding& params, Var z) const {
  if (config_.pseudo_inputs > 0) return vampprior_log_prob(params, z);
  Tape& t = params.tape();
  const std::size_t d = z.cols();
  const Tensor zeros = Tensor::vector(std::vector<double>(d, 0.0));
  return gaussian_log_prob_rows(z, t.constant(zeros), t.constant(zeros));
}

Var MixtureVae::log_prior_lower(const ParamBinding& params, Var z1, Var z2) const {
  if (!config_.hierarchical) throw ContractError("log_prior_lower needs a hierarchical model");
  const GaussianVars p = gaussian_head(prior1_.forward(params, z2), config_.latent);
  return gaussian_log_prob_rows(z1, p.mean, p.log_var);
}

Var MixtureVae::pseudo_inputs(const ParamBinding& params) const {
  if (!vamp_w_) throw ContractError("model has no pseudo-inputs (K=0)");
  // The one-hot identity input selects row k of the generator weights.
  return clamp(sigmoid(add(params[*vamp_w_], params[*vamp_b_])), 1e-6, 1.0 - 1e-6);
}

Var vampprior_mixture_log_prob(Var z, std::span<const GaussianVars> encoded) {
  if (encoded.empty()) throw ContractError("VampPrior needs at least one encoder");
  std::vector<Var> means, log_vars;
  std::size_t total = 0;
  for (const GaussianVars& g : encoded) {
    if (g.mean.rows() == 0) throw ContractError("VampPrior needs K >= 1");
    means.push_back(g.mean);
    log_vars.push_back(g.log_var);
    total += g.mean.rows();
  }
  const Var m = means.size() == 1 ? means[0] : concat_rows(means);
  const Var lv = log_vars.size() == 1 ? log_vars[0] : concat_rows(log_vars);
  return add_scalar(logsumexp(pairwise_gaussian_log_prob(z, m, lv), 1), -std::log(double(total)));
}

Var MixtureVae::vampprior_log_prob(const ParamBinding& params, Var z) const {
  const Var u = pseudo_inputs(params);
  std::vector<GaussianVars> enc;
  for (std::size_t s = 0; s < config_.components; ++s) enc.push_back(encode(params, s, u).q);
  return vampprior_mixture_log_prob(z, enc);
}

double MixtureVae::vampprior_log_prob(std::span<const double> z) const {
  Tape tape;
  const ParamBinding params(tape, store_, false);
  return vampprior_log_prob(params, tape.constant(Tensor(Shape{1, z.size()}, std::vector<double>(z.begin(), z.end()))))
      .item();
}

ParameterCounts MixtureVae::count_parameters() const {
  ParameterCounts c;
  for (const Mlp& m : top_) {
    c.encoder_params += m.weight_count(store_);
    c.encoder_biases += m.bias_count(store_);
  }
  for (const Mlp& m : lower_) {
    c.encoder_params += m.weight_count(store_);
    c.encoder_biases += m.bias_count(store_);
  }
  c.encoder_scalars = store_.scalar_count("enc.") + store_.scalar_count("flow.");
  c.decoder_params = store_.scalar_count("dec.");
  c.prior_params = store_.scalar_count("prior1.") + store_.scalar_count("vamp.");
  c.total_params = store_.scalar_count();
  return c;
}

MixtureVae build_composite(VaeConfig config) {
  if (!config.hierarchical) throw ConfigError("composite model is hierarchical");
  if (config.pseudo_inputs == 0) throw ConfigError("composite model needs a VampPrior (K >= 1)");
  if (!config.shared_prior) throw ConfigError("composite model shares one VampPrior across all components");
  return MixtureVae(std::move(config));
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr char kMagic[] = "MIXVI1";

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& path) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw IoError("truncated checkpoint " + path);
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

std::string get_string(std::istream& is, const std::string& path, std::size_t limit) {
  const auto n = get<std::uint32_t>(is, path);
  if (n > limit) throw FormatError("implausible string length in checkpoint " + path);
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw IoError("truncated checkpoint " + path);
  return s;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_header(std::istream& is, const std::string& path) {
  char magic[sizeof(kMagic) - 1];
  if (!is.read(magic, sizeof(magic))) throw IoError("truncated checkpoint " + path);
  if (std::string(magic, sizeof(magic)) != kMagic) throw VersionError("not a MIXVI1 checkpoint: " + path);
  return get_string(is, path, 1 << 16);
}

bool same_architecture(VaeConfig a, VaeConfig b) {
  a.seed = b.seed = 0;
  return a == b;
}

}  // namespace

void save_checkpoint(const MixtureVae& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof(kMagic) - 1);
  put_string(os, model.config().describe());
  const auto& entries = model.store().entries();
  put<std::uint64_t>(os, entries.size());
  for (const auto& e : entries) {
    put_string(os, e.name);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.shape().size()));
    for (std::size_t d : e.value.shape()) put<std::uint64_t>(os, d);
    for (double v : e.value.values()) put<double>(os, v);
  }
  os.flush();
  if (!os) throw IoError("failed writing checkpoint " + path);
}

VaeConfig read_checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  return VaeConfig::parse(read_header(is, path));
}

void load_checkpoint(MixtureVae& model, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  const VaeConfig stored = VaeConfig::parse(read_header(is, path));
  if (!same_architecture(stored, model.config())) {
    throw VersionError("checkpoint model (" + stored.describe() + ") does not match (" + model.config().describe() +
                       ")");
  }
  ParameterStore& store = model.store();
  const auto count = get<std::uint64_t>(is, path);
  if (count != store.size()) throw VersionError("checkpoint parameter count mismatch in " + path);
  std::vector<Tensor> loaded;
  loaded.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string name = get_string(is, path, 1 << 12);
    if (name != store[i].name) throw VersionError("checkpoint parameter " + name + " where " + store[i].name + " expected");
    const auto rank = get<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(is, path);
    if (shape != store[i].value.shape()) throw VersionError("checkpoint shape mismatch for " + name);
    Tensor t(shape);
    for (double& v : t.values()) v = get<double>(is, path);
    loaded.push_back(std::move(t));
  }
  for (std::size_t i = 0; i < count; ++i) store.value(i) = std::move(loaded[i]);
}

}  // namespace mixvi

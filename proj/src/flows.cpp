#include "mixvi/flows.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mixvi/errors.hpp"
#include "mixvi/rng.hpp"

namespace mixvi {

namespace {

// Same arithmetic as the tape's log_sigmoid, so a zero pre-scale gives a log
// scale of exactly 0.
double log_sigmoid_value(double x) { return -(std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x)))); }

const double kLogSigmoidBias = log_sigmoid_value(kFlowScaleBias);

Var masked(const ParamBinding& params, std::size_t handle, const Tensor& mask) {
  return mul(params[handle], params.tape().constant(mask));
}

}  // namespace

double flow_scale(double pre_scale) { return std::exp(log_sigmoid_value(pre_scale + kFlowScaleBias) - kLogSigmoidBias); }

MadeNet::MadeNet(ParameterStore& store, std::string prefix, MadeConfig config, bool reversed, Rng& rng)
    : config_(std::move(config)) {
  const std::size_t d = config_.dim;
  if (d == 0) throw ContractError("MadeNet: dimension must be positive");
  order_.resize(d);
  std::iota(order_.begin(), order_.end(), 0);
  if (reversed) std::reverse(order_.begin(), order_.end());
  std::vector<std::size_t> in_degree(d);
  for (std::size_t k = 0; k < d; ++k) in_degree[order_[k]] = k + 1;

  std::vector<std::size_t> prev_degree = in_degree;
  std::size_t prev_width = d;
  for (std::size_t l = 0; l < config_.hidden.size(); ++l) {
    const std::size_t width = config_.hidden[l];
    std::vector<std::size_t> degree(width);
    for (std::size_t h = 0; h < width; ++h) degree[h] = d > 1 ? 1 + h % (d - 1) : 0;
    Tensor mask = Tensor::matrix(prev_width, width);
    for (std::size_t i = 0; i < prev_width; ++i) {
      for (std::size_t h = 0; h < width; ++h) mask(i, h) = degree[h] >= prev_degree[i] ? 1.0 : 0.0;
    }
    const std::string name = prefix + ".h" + std::to_string(l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(prev_width));
    Layer layer{store.add_uniform(name + ".w", Shape{prev_width, width}, bound, rng),
                store.add(name + ".b", Tensor::vector(std::vector<double>(width, 0.0))), std::nullopt,
                std::move(mask)};
    if (config_.context_dim > 0) {
      const double cb = 1.0 / std::sqrt(static_cast<double>(config_.context_dim));
      layer.context_weight = store.add_uniform(name + ".c", Shape{config_.context_dim, width}, cb, rng);
    }
    hidden_.push_back(std::move(layer));
    prev_degree = std::move(degree);
    prev_width = width;
  }
  // Output columns [0, d) are shifts, [d, 2d) pre-scales.
  out_mask_ = Tensor::matrix(prev_width, 2 * d);
  for (std::size_t h = 0; h < prev_width; ++h) {
    for (std::size_t i = 0; i < d; ++i) {
      const double m = in_degree[i] > prev_degree[h] ? 1.0 : 0.0;
      out_mask_(h, i) = m;
      out_mask_(h, d + i) = m;
    }
  }
  out_w_ = store.add(prefix + ".out.w", Tensor::matrix(prev_width, 2 * d));
  out_b_ = store.add(prefix + ".out.b", Tensor::vector(std::vector<double>(2 * d, 0.0)));
}

MadeNet::Output MadeNet::forward(const ParamBinding& params, Var z, std::optional<Var> context) const {
  if (z.cols() != config_.dim) throw DimensionError("MadeNet: input width mismatch");
  if (context.has_value() != (config_.context_dim > 0)) {
    throw ContractError("MadeNet: context presence does not match configuration");
  }
  Var h = z;
  for (const Layer& layer : hidden_) {
    Var pre = add(matmul(h, masked(params, layer.weight, layer.mask)), params[layer.bias]);
    if (layer.context_weight) pre = add(pre, matmul(*context, params[*layer.context_weight]));
    h = tanh(pre);
  }
  const Var out = add(matmul(h, masked(params, out_w_, out_mask_)), params[out_b_]);
  const std::size_t d = config_.dim;
  return Output{slice_cols(out, 0, d), slice_cols(out, d, 2 * d)};
}

FlowStack::FlowStack(ParameterStore& store, const std::string& prefix, std::size_t steps, MadeConfig config,
                     Rng& rng, std::size_t owner)
    : config_(std::move(config)), owner_(owner) {
  transforms_.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    transforms_.emplace_back(store, prefix + ".t" + std::to_string(t), config_, t % 2 == 1, rng);
  }
}

FlowStack::Result FlowStack::forward(const ParamBinding& params, Var z0, std::optional<Var> context) const {
  Tape& tape = params.tape();
  Var z = z0;
  Var log_det = tape.constant(Tensor::matrix(z0.rows(), 1));
  for (const MadeNet& made : transforms_) {
    const MadeNet::Output o = made.forward(params, z, context);
    const Var shifted = add_scalar(o.pre_scale, kFlowScaleBias);
    const Var log_scale = add_scalar(log_sigmoid(shifted), -kLogSigmoidBias);
    z = add(o.shift, mul(exp(log_scale), z));
    log_det = add(log_det, sum_axis(log_scale, 1));
  }
  return Result{z, log_det};
}

Tensor FlowStack::forward_values(const ParameterStore& store, const Tensor& z0, std::vector<double>* log_det,
                                 const Tensor* context) const {
  Tape tape;
  const ParamBinding params(tape, store, false);
  std::optional<Var> ctx;
  if (context) ctx = tape.constant(*context);
  const Result r = forward(params, tape.constant(z0), ctx);
  if (log_det) {
    const auto v = r.log_det.value().values();
    log_det->assign(v.begin(), v.end());
  }
  return r.z.value();
}

Tensor FlowStack::inverse(const ParameterStore& store, const Tensor& zT, const Tensor* context) const {
  const std::size_t d = config_.dim;
  if (zT.cols() != d) throw DimensionError("FlowStack::inverse: width mismatch");
  const std::size_t n = zT.rows();
  Tensor target = zT.reshaped(Shape{n, d});
  for (std::size_t t = transforms_.size(); t-- > 0;) {
    const MadeNet& made = transforms_[t];
    Tensor z = Tensor::matrix(n, d);
    for (std::size_t k = 0; k < d; ++k) {
      Tape tape;
      const ParamBinding params(tape, store, false);
      std::optional<Var> ctx;
      if (context) ctx = tape.constant(*context);
      const MadeNet::Output o = made.forward(params, tape.constant(z), ctx);
      const std::size_t i = made.order()[k];
      for (std::size_t r = 0; r < n; ++r) {
        const double s = flow_scale(o.pre_scale.value()(r, i));
        if (!(s > 0.0) || !std::isfinite(s)) throw NumericalError("FlowStack::inverse: degenerate scale");
        z(r, i) = (target(r, i) - o.shift.value()(r, i)) / s;
      }
    }
    target = std::move(z);
  }
  // The sequential solve is exact for a strictly autoregressive map; a large
  // residual means the masks or parameters are broken.
  const Tensor back = forward_values(store, target, nullptr, context);
  double worst = 0.0;
  for (std::size_t i = 0; i < back.size(); ++i) {
    worst = std::max(worst, std::abs(back[i] - zT[i]) / (1.0 + std::abs(zT[i])));
  }
  if (!(worst < 1e-6)) throw NumericalError("FlowStack::inverse: inversion did not converge");
  return target;
}

Var flow_extended_log_q(const ParamBinding& params, Var z_s, const GaussianVars& base_j, const FlowStack* stack_j,
                        std::optional<Var> context_j) {
  const Var base = gaussian_log_prob_rows(z_s, base_j.mean, base_j.log_var);
  if (stack_j == nullptr || stack_j->steps() == 0) return base;
  if (z_s.cols() != stack_j->dim()) throw DimensionError("flow_extended_log_q: dimension mismatch");
  const FlowStack::Result r = stack_j->forward(params, z_s, context_j);
  return sub(base, r.log_det);
}

}  // namespace mixvi

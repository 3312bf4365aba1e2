#include "mixvi/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "mixvi/errors.hpp"

namespace mixvi {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MutMap as_matrix(Tensor& t) {
  return MutMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

bool is_row(const Tensor& t) { return t.rank() == 1 || (t.rank() == 2 && t.rows() == 1); }

Shape matrix_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

void require_same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
}

// ---- binary elementwise with restricted broadcasting ----------------------

enum class Layout { same, a_scalar, b_scalar, a_row, b_row };

Layout layout_of(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Layout::same;
  if (b.size() == 1) return Layout::b_scalar;
  if (a.size() == 1) return Layout::a_scalar;
  if (is_row(b) && b.cols() == a.cols() && a.rank() == 2) return Layout::b_row;
  if (is_row(a) && a.cols() == b.cols() && b.rank() == 2) return Layout::a_row;
  if (a.size() == b.size() && is_row(a) && is_row(b)) return Layout::same;
  throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(a.shape()) + " with " +
                       to_string(b.shape()));
}

struct IndexMap {
  Layout layout;
  std::size_t cols;
  std::size_t a(std::size_t i) const {
    switch (layout) {
      case Layout::a_scalar: return 0;
      case Layout::a_row: return i % cols;
      default: return i;
    }
  }
  std::size_t b(std::size_t i) const {
    switch (layout) {
      case Layout::b_scalar: return 0;
      case Layout::b_row: return i % cols;
      default: return i;
    }
  }
};

template <class F, class DA, class DB>
Var binary(Var a, Var b, const char* op, F f, DA dfa, DB dfb) {
  require_same_tape(a, b, op);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Layout layout = layout_of(av, bv, op);
  const bool b_bigger = layout == Layout::a_scalar || layout == Layout::a_row;
  Tensor out(b_bigger ? bv.shape() : av.shape());
  const IndexMap map{layout, out.cols()};
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[map.a(i)], bv[map.b(i)]);
  const std::size_t ia = a.index();
  const std::size_t ib = b.index();
  return a.tape().record(
      std::move(out), {a, b},
      [ia, ib, map, dfa, dfb](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        const Tensor& x = t.value(ia);
        const Tensor& y = t.value(ib);
        const Tensor& o = t.value(self);
        if (t.requires_grad(ia)) {
          Tensor& ga = t.grad_buffer(ia);
          for (std::size_t i = 0; i < g.size(); ++i) {
            ga[map.a(i)] += g[i] * dfa(x[map.a(i)], y[map.b(i)], o[i]);
          }
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad_buffer(ib);
          for (std::size_t i = 0; i < g.size(); ++i) {
            gb[map.b(i)] += g[i] * dfb(x[map.a(i)], y[map.b(i)], o[i]);
          }
        }
      },
      op);
}

template <class F, class DF>
Var unary(Var a, const char* op, F f, DF df) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {a},
      [ia, df](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        const Tensor& x = t.value(ia);
        const Tensor& o = t.value(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], o[i]);
      },
      op);
}

}  // namespace

// ---- Var / Tape -----------------------------------------------------------

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(index_);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericalError("non-finite value supplied as tape input");
  nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, Backward backward, const char* op) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward), op);
}

Var Tape::record(Tensor value, std::span<const Var> parents, Backward backward, const char* op) {
  if (!value.all_finite()) throw NumericalError(std::string("non-finite result in ") + op);
  bool needs = false;
  for (const Var& p : parents) {
    if (&p.tape() != this) throw ContractError(std::string(op) + ": parent from another tape");
    needs = needs || nodes_[p.index()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Tensor(), needs, needs ? std::move(backward) : nullptr});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t i) {
  Node& n = nodes_[i];
  if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.index()];
  if (n.grad.size() != n.value.size()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  if (backward_done_) throw ContractError("backward: tape already differentiated");
  backward_done_ = true;
  if (!nodes_[loss.index()].requires_grad) return;
  grad_buffer(loss.index())[0] = 1.0;
  for (std::size_t i = loss.index() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() != n.value.size()) continue;
    ++backward_visits_;
    if (n.backward) n.backward(*this, i);
  }
}

// ---- elementwise ----------------------------------------------------------

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  for (double v : b.value().values()) {
    if (v == 0.0) throw DomainError("div: division by zero");
  }
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Var neg(Var a) {
  return unary(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(Var a, double c) {
  return unary(a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var exp(Var a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double o) { return o; });
}

Var log(Var a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(Var a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double o) { return 1.0 - o * o; });
}

Var sigmoid(Var a) {
  return unary(a, "sigmoid", stable_sigmoid, [](double, double o) { return o * (1.0 - o); });
}

Var softplus(Var a) {
  return unary(a, "softplus", stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Var log_sigmoid(Var a) {
  return unary(
      a, "log_sigmoid", [](double x) { return -stable_softplus(-x); },
      [](double x, double) { return stable_sigmoid(-x); });
}

Var square(Var a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt(Var a) {
  for (double v : a.value().values()) {
    if (v < 0.0) throw DomainError("sqrt of negative value " + std::to_string(v));
  }
  return unary(
      a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double o) { return o > 0.0 ? 0.5 / o : 0.0; });
}

Var clamp(Var a, double lo, double hi) {
  if (!(lo < hi)) throw ContractError("clamp: empty interval");
  return unary(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---- linear algebra and reductions ----------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows() || av.rank() == 0 || bv.rank() != 2) {
    throw DimensionError("matmul: " + to_string(av.shape()) + " x " + to_string(bv.shape()));
  }
  Tensor out = Tensor::matrix(av.rows(), bv.cols());
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  const std::size_t ia = a.index();
  const std::size_t ib = b.index();
  return a.tape().record(
      std::move(out), {a, b},
      [ia, ib](Tape& t, std::size_t self) {
        const auto g = as_matrix(t.upstream(self));
        if (t.requires_grad(ia)) {
          Tensor& ga = t.grad_buffer(ia);
          as_matrix(ga).noalias() += g * as_matrix(t.value(ib)).transpose();
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad_buffer(ib);
          as_matrix(gb).noalias() += as_matrix(t.value(ia)).transpose() * g;
        }
      },
      "matmul");
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  const std::size_t ia = a.index();
  return a.tape().record(
      Tensor::scalar(total), {a},
      [ia](Tape& t, std::size_t self) {
        const double g = t.upstream(self)[0];
        for (double& v : t.grad_buffer(ia).values()) v += g;
      },
      "sum");
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_axis(Var a, int axis) {
  const Tensor& av = a.value();
  const std::size_t r = av.rows();
  const std::size_t c = av.cols();
  if (axis != 0 && axis != 1) throw ContractError("sum_axis: axis must be 0 or 1");
  Tensor out = axis == 1 ? Tensor::matrix(r, 1) : Tensor::matrix(1, c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[axis == 1 ? i : j] += av[i * c + j];
  }
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {a},
      [ia, r, c, axis](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[axis == 1 ? i : j];
        }
      },
      "sum_axis");
}

Var logsumexp(Var a, int axis) {
  const Tensor& av = a.value();
  const std::size_t r = av.rows();
  const std::size_t c = av.cols();
  if (axis != 0 && axis != 1) throw ContractError("logsumexp: axis must be 0 or 1");
  const std::size_t outer = axis == 1 ? r : c;
  const std::size_t inner = axis == 1 ? c : r;
  auto at = [&](std::size_t o, std::size_t k) { return axis == 1 ? o * c + k : k * c + o; };
  if (inner == 0) throw DimensionError("logsumexp over empty axis");
  Tensor out = axis == 1 ? Tensor::matrix(r, 1) : Tensor::matrix(1, c);
  for (std::size_t o = 0; o < outer; ++o) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < inner; ++k) m = std::max(m, av[at(o, k)]);
    double s = 0.0;
    for (std::size_t k = 0; k < inner; ++k) s += std::exp(av[at(o, k)] - m);
    out[o] = m + std::log(s);
  }
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {a},
      [ia, r, c, axis, outer, inner](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        const Tensor& x = t.value(ia);
        const Tensor& o = t.value(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t p = 0; p < outer; ++p) {
          for (std::size_t k = 0; k < inner; ++k) {
            const std::size_t idx = axis == 1 ? p * c + k : k * c + p;
            ga[idx] += g[p] * std::exp(x[idx] - o[p]);
          }
        }
        (void)r;
      },
      "logsumexp");
}

// ---- shape manipulation ---------------------------------------------------

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {a},
      [ia](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      },
      "reshape");
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const Var& p : parts) {
    if (p.rows() != r) throw DimensionError("concat_cols: row counts differ");
    c += p.cols();
  }
  Tensor out = Tensor::matrix(r, c);
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> ids;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t pc = v.cols();
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(v.data() + i * pc, pc, out.data() + i * c + off);
    }
    offsets.push_back(off);
    ids.push_back(p.index());
    off += pc;
  }
  return parts[0].tape().record(
      std::move(out), parts,
      [ids, offsets, r, c](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          Tensor& gp = t.grad_buffer(ids[k]);
          const std::size_t pc = gp.cols();
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * c + offsets[k] + j];
          }
        }
      },
      "concat_cols");
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column counts differ");
    r += p.rows();
  }
  std::vector<double> data;
  data.reserve(r * c);
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    const auto v = p.value().values();
    data.insert(data.end(), v.begin(), v.end());
    ids.push_back(p.index());
  }
  return parts[0].tape().record(
      Tensor(matrix_shape(r, c), std::move(data)), parts,
      [ids](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        std::size_t off = 0;
        for (std::size_t id : ids) {
          const std::size_t n = t.value(id).size();
          if (t.requires_grad(id)) {
            Tensor& gp = t.grad_buffer(id);
            for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
          }
          off += n;
        }
      },
      "concat_rows");
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  const std::size_t r = av.rows();
  const std::size_t c = av.cols();
  if (begin >= end || end > c) throw DimensionError("slice_cols: bad range");
  const std::size_t w = end - begin;
  Tensor out = Tensor::matrix(r, w);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(av.data() + i * c + begin, w, out.data() + i * w);
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {a},
      [ia, r, c, w, begin](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < w; ++j) ga[i * c + begin + j] += g[i * w + j];
        }
      },
      "slice_cols");
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  const std::size_t c = av.cols();
  if (begin >= end || end > av.rows()) throw DimensionError("slice_rows: bad range");
  Tensor out(matrix_shape(end - begin, c),
             std::vector<double>(av.data() + begin * c, av.data() + end * c));
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {a},
      [ia, begin, c](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[begin * c + i] += g[i];
      },
      "slice_rows");
}

Var tile_rows(Var a, std::size_t times) {
  if (times == 0) throw ContractError("tile_rows: times must be positive");
  const Tensor& av = a.value();
  if (times == 1) return a;
  const std::size_t n = av.size();
  std::vector<double> data;
  data.reserve(n * times);
  for (std::size_t k = 0; k < times; ++k) data.insert(data.end(), av.values().begin(), av.values().end());
  const std::size_t ia = a.index();
  return a.tape().record(
      Tensor(matrix_shape(av.rows() * times, av.cols()), std::move(data)), {a},
      [ia, n, times](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t k = 0; k < times; ++k) {
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[k * n + i];
        }
      },
      "tile_rows");
}

// ---- fused densities ------------------------------------------------------

Var gaussian_log_prob_rows(Var z, Var mean, Var log_var) {
  require_same_tape(z, mean, "gaussian_log_prob_rows");
  require_same_tape(z, log_var, "gaussian_log_prob_rows");
  const Tensor& zv = z.value();
  const Tensor& mv = mean.value();
  const Tensor& lv = log_var.value();
  const std::size_t r = zv.rows();
  const std::size_t d = zv.cols();
  auto check = [&](const Tensor& p, const char* what) {
    if (p.cols() != d || (p.rows() != r && p.rows() != 1)) {
      throw DimensionError(std::string("gaussian_log_prob_rows: ") + what + " shape " + to_string(p.shape()) +
                           " vs z " + to_string(zv.shape()));
    }
  };
  check(mv, "mean");
  check(lv, "log_var");
  const bool mean_row = mv.rows() == 1 && r != 1;
  const bool lv_row = lv.rows() == 1 && r != 1;
  Tensor out = Tensor::matrix(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double m = mv[(mean_row ? 0 : i) * d + j];
      const double l = lv[(lv_row ? 0 : i) * d + j];
      const double diff = zv[i * d + j] - m;
      acc += kLog2Pi + l + diff * diff * std::exp(-l);
    }
    out[i] = -0.5 * acc;
  }
  const std::size_t iz = z.index();
  const std::size_t im = mean.index();
  const std::size_t il = log_var.index();
  return z.tape().record(
      std::move(out), {z, mean, log_var},
      [iz, im, il, r, d, mean_row, lv_row](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        const Tensor& zv = t.value(iz);
        const Tensor& mv = t.value(im);
        const Tensor& lv = t.value(il);
        Tensor* gz = t.requires_grad(iz) ? &t.grad_buffer(iz) : nullptr;
        Tensor* gm = t.requires_grad(im) ? &t.grad_buffer(im) : nullptr;
        Tensor* gl = t.requires_grad(il) ? &t.grad_buffer(il) : nullptr;
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t mi = (mean_row ? 0 : i) * d + j;
            const std::size_t li = (lv_row ? 0 : i) * d + j;
            const double prec = std::exp(-lv[li]);
            const double diff = zv[i * d + j] - mv[mi];
            if (gz) (*gz)[i * d + j] -= g[i] * diff * prec;
            if (gm) (*gm)[mi] += g[i] * diff * prec;
            if (gl) (*gl)[li] += g[i] * 0.5 * (diff * diff * prec - 1.0);
          }
        }
      },
      "gaussian_log_prob_rows");
}

Var bernoulli_log_prob_rows(Var logits, const Tensor& targets) {
  const Tensor& lv = logits.value();
  const std::size_t r = lv.rows();
  const std::size_t d = lv.cols();
  if (targets.cols() != d || (targets.rows() != r && targets.rows() != 1)) {
    throw DimensionError("bernoulli_log_prob_rows: targets " + to_string(targets.shape()) + " vs logits " +
                         to_string(lv.shape()));
  }
  for (double x : targets.values()) {
    if (x != 0.0 && x != 1.0) throw ContractError("bernoulli_log_prob_rows: targets must be binary");
  }
  const bool row = targets.rows() == 1 && r != 1;
  Tensor out = Tensor::matrix(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    double acc = 0.0;
    const double* x = targets.data() + (row ? 0 : i * d);
    for (std::size_t j = 0; j < d; ++j) {
      const double l = lv[i * d + j];
      acc += x[j] * l - stable_softplus(l);
    }
    out[i] = acc;
  }
  const std::size_t il = logits.index();
  return logits.tape().record(
      std::move(out), {logits},
      [il, targets, r, d, row](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        const Tensor& lv = t.value(il);
        Tensor& gl = t.grad_buffer(il);
        for (std::size_t i = 0; i < r; ++i) {
          const double* x = targets.data() + (row ? 0 : i * d);
          for (std::size_t j = 0; j < d; ++j) gl[i * d + j] += g[i] * (x[j] - stable_sigmoid(lv[i * d + j]));
        }
      },
      "bernoulli_log_prob_rows");
}

Var pairwise_gaussian_log_prob(Var z, Var means, Var log_vars) {
  require_same_tape(z, means, "pairwise_gaussian_log_prob");
  require_same_tape(z, log_vars, "pairwise_gaussian_log_prob");
  const Tensor& zv = z.value();
  const Tensor& mv = means.value();
  const Tensor& lv = log_vars.value();
  const std::size_t n = zv.rows();
  const std::size_t d = zv.cols();
  const std::size_t m = mv.rows();
  if (mv.cols() != d || lv.rows() != m || lv.cols() != d) {
    throw DimensionError("pairwise_gaussian_log_prob: z " + to_string(zv.shape()) + ", means " +
                         to_string(mv.shape()) + ", log_vars " + to_string(lv.shape()));
  }
  std::vector<double> prec(m * d);
  std::vector<double> norm(m, 0.0);
  for (std::size_t k = 0; k < m; ++k) {
    for (std::size_t j = 0; j < d; ++j) {
      prec[k * d + j] = std::exp(-lv[k * d + j]);
      norm[k] += kLog2Pi + lv[k * d + j];
    }
  }
  Tensor out = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < m; ++k) {
      double acc = norm[k];
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = zv[i * d + j] - mv[k * d + j];
        acc += diff * diff * prec[k * d + j];
      }
      out[i * m + k] = -0.5 * acc;
    }
  }
  const std::size_t iz = z.index();
  const std::size_t im = means.index();
  const std::size_t il = log_vars.index();
  return z.tape().record(
      std::move(out), {z, means, log_vars},
      [iz, im, il, n, m, d, prec = std::move(prec)](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        const Tensor& zv = t.value(iz);
        const Tensor& mv = t.value(im);
        Tensor* gz = t.requires_grad(iz) ? &t.grad_buffer(iz) : nullptr;
        Tensor* gm = t.requires_grad(im) ? &t.grad_buffer(im) : nullptr;
        Tensor* gl = t.requires_grad(il) ? &t.grad_buffer(il) : nullptr;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t k = 0; k < m; ++k) {
            const double w = g[i * m + k];
            if (w == 0.0) continue;
            for (std::size_t j = 0; j < d; ++j) {
              const double p = prec[k * d + j];
              const double diff = zv[i * d + j] - mv[k * d + j];
              if (gz) (*gz)[i * d + j] -= w * diff * p;
              if (gm) (*gm)[k * d + j] += w * diff * p;
              if (gl) (*gl)[k * d + j] += w * 0.5 * (diff * diff * p - 1.0);
            }
          }
        }
      },
      "pairwise_gaussian_log_prob");
}

}  // namespace mixvi

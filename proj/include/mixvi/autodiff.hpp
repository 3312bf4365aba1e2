#pragma once

// Define-by-run reverse-mode differentiation over Tensor values.
//
// Every op appends one node to the Tape it was called on. A node records its
// parents (always earlier nodes) and a closure that pushes the node's adjoint
// into the parents' adjoint buffers, so a single reverse sweep over creation
// order is a valid topological traversal.
//
// Broadcasting for elementwise binary ops is limited to:
//   * identical shapes,
//   * either operand holding a single element (scalar broadcast),
//   * either operand being a row (rank 1 of length c, or 1 x c) combined with
//     an r x c matrix (trailing-dimension broadcast).
// The result takes the shape of the larger operand.

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "mixvi/tensor.hpp"

namespace mixvi {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its Tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t index() const noexcept { return index_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Input that gradients are taken with respect to (when requires_grad).
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an op result. `backward` is dropped when no parent needs a
  /// gradient. Throws NumericalError if `value` holds a non-finite entry.
  Var record(Tensor value, std::initializer_list<Var> parents, Backward backward, const char* op);
  Var record(Tensor value, std::span<const Var> parents, Backward backward, const char* op);

  const Tensor& value(std::size_t i) const { return nodes_[i].value; }
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }
  bool requires_grad(Var v) const { return nodes_[v.index()].requires_grad; }

  /// Adjoint buffer of node i, zero-initialised on first access.
  Tensor& grad_buffer(std::size_t i);
  /// Adjoint after backward(); zeros when the node was not reached.
  Tensor grad(Var v) const;
  /// Adjoint of node `self` inside a backward closure.
  const Tensor& upstream(std::size_t self) const { return nodes_[self].grad; }

  /// Reverse sweep from a single-element loss. Throws ContractError for a
  /// non-scalar loss or if called twice on the same tape.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t backward_visits() const noexcept { return backward_visits_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };
  // A deque keeps value() references valid while further ops are recorded.
  std::deque<Node> nodes_;
  std::size_t backward_visits_ = 0;
  bool backward_done_ = false;
};

// ---- elementwise ----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var exp(Var a);
/// Throws DomainError for any non-positive entry.
Var log(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var log_sigmoid(Var a);
Var square(Var a);
/// Throws DomainError for any negative entry.
Var sqrt(Var a);
/// Gradient is zero where the input lies outside [lo, hi].
Var clamp(Var a, double lo, double hi);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator-(Var a, double c) { return add_scalar(a, -c); }

// ---- linear algebra and reductions ----------------------------------------

/// (r x k) * (k x c) -> r x c.
Var matmul(Var a, Var b);
/// Sum of all entries -> scalar.
Var sum(Var a);
Var mean(Var a);
/// axis 1: r x c -> r x 1; axis 0: r x c -> 1 x c.
Var sum_axis(Var a, int axis);
/// Stabilised log(sum(exp(.))) over an axis, same output shapes as sum_axis.
Var logsumexp(Var a, int axis);

// ---- shape manipulation ---------------------------------------------------

Var reshape(Var a, Shape shape);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
/// Stacks `times` copies of a vertically (block order, not interleaved).
Var tile_rows(Var a, std::size_t times);

// ---- fused densities ------------------------------------------------------

/// Per-row diagonal-Gaussian log density: z is r x d; mean and log_var are
/// r x d or a single row broadcast over r. Returns r x 1.
Var gaussian_log_prob_rows(Var z, Var mean, Var log_var);

/// Per-row Bernoulli log likelihood sum_i x_i log s(l_i) + (1-x_i) log(1-s(l_i)).
/// `targets` must be binary with the shape of logits or a single row.
Var bernoulli_log_prob_rows(Var logits, const Tensor& targets);

/// Log density of every row of z (n x d) under every component
/// m (means/log_vars m x d). Returns n x m.
Var pairwise_gaussian_log_prob(Var z, Var means, Var log_vars);

}  // namespace mixvi

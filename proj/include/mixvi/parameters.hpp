#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mixvi/autodiff.hpp"
#include "mixvi/tensor.hpp"

namespace mixvi {

class Rng;

/// Ordered collection of named parameter tensors owned by a model.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  /// Returns the handle (position) of the new parameter. Names must be unique.
  std::size_t add(std::string name, Tensor value);
  std::size_t add_uniform(std::string name, Shape shape, double bound, Rng& rng);

  std::size_t size() const noexcept { return entries_.size(); }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  Tensor& value(std::size_t i) { return entries_[i].value; }
  const Tensor& value(std::size_t i) const { return entries_[i].value; }
  std::size_t find(const std::string& name) const;
  bool contains(const std::string& name) const;

  /// Total scalar count over all entries, or over entries whose name starts
  /// with `prefix`.
  std::size_t scalar_count() const;
  std::size_t scalar_count(const std::string& prefix) const;

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

 private:
  std::vector<Entry> entries_;
};

/// The parameters of one store placed on a tape for one forward/backward pass.
class ParamBinding {
 public:
  ParamBinding(Tape& tape, const ParameterStore& store, bool requires_grad = true);

  Tape& tape() const noexcept { return *tape_; }
  Var operator[](std::size_t handle) const { return vars_[handle]; }
  /// Gradients of every parameter after tape().backward(), in store order.
  std::vector<Tensor> gradients() const;

 private:
  Tape* tape_;
  std::vector<Var> vars_;
};

}  // namespace mixvi

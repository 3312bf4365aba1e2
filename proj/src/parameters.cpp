#include "mixvi/parameters.hpp"

#include "mixvi/errors.hpp"
#include "mixvi/rng.hpp"

namespace mixvi {

std::size_t ParameterStore::add(std::string name, Tensor value) {
  if (contains(name)) throw ContractError("duplicate parameter name " + name);
  entries_.push_back(Entry{std::move(name), std::move(value)});
  return entries_.size() - 1;
}

std::size_t ParameterStore::add_uniform(std::string name, Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return add(std::move(name), std::move(t));
}

std::size_t ParameterStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  throw ContractError("unknown parameter " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

std::size_t ParameterStore::scalar_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.name.compare(0, prefix.size(), prefix) == 0) n += e.value.size();
  }
  return n;
}

ParamBinding::ParamBinding(Tape& tape, const ParameterStore& store, bool requires_grad) : tape_(&tape) {
  vars_.reserve(store.size());
  for (const auto& e : store.entries()) vars_.push_back(tape.leaf(e.value, requires_grad));
}

std::vector<Tensor> ParamBinding::gradients() const {
  std::vector<Tensor> grads;
  grads.reserve(vars_.size());
  for (const Var& v : vars_) grads.push_back(tape_->grad(v));
  return grads;
}

}  // namespace mixvi

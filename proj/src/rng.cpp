#include "mixvi/rng.hpp"

namespace mixvi {

Tensor Rng::normal_matrix(std::size_t rows, std::size_t cols) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = normal();
  return t;
}

}  // namespace mixvi

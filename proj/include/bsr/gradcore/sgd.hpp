#pragma once

#include <span>
#include <vector>

#include "bsr/gradcore/tensor.hpp"

namespace bsr {

struct OptimizerState {
  double learning_rate = 1e-2;
  double momentum = 0.9;
  // One buffer per parameter, created on the first step.
  std::vector<Tensor> velocity;
};

// Heavy-ball SGD: v <- momentum * v + g; theta <- theta - lr * v. Gradients
// are zeroed afterwards. If any gradient is non-finite the whole step is
// rejected with a NumericError naming the parameter, and nothing changes.
void sgd_update(std::span<GradPair* const> params, OptimizerState& state);

// Rescales all gradients together so their global L2 norm is at most
// max_norm (no-op when max_norm <= 0). Returns the norm before clipping.
double clip_grad_norm(std::span<GradPair* const> params, double max_norm);

}  // namespace bsr

#include "bsr/gradcore/sgd.hpp"

#include <cmath>

#include "bsr/errors.hpp"

namespace bsr {

void sgd_update(std::span<GradPair* const> params, OptimizerState& state) {
  for (const GradPair* p : params) {
    if (!p->grad.all_finite()) {
      throw NumericError("sgd_update: non-finite gradient in parameter '" + p->name + "'");
    }
  }
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (const GradPair* p : params) state.velocity.emplace_back(p->value.shape());
  }
  if (state.velocity.size() != params.size()) {
    throw ShapeError("sgd_update: optimizer state tracks " + std::to_string(state.velocity.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    GradPair& p = *params[i];
    Tensor& v = state.velocity[i];
    if (v.shape() != p.value.shape()) {
      throw ShapeError("sgd_update: velocity shape mismatch for '" + p.name + "'");
    }
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = state.momentum * v[j] + p.grad[j];
      p.value[j] -= state.learning_rate * v[j];
    }
    p.grad.set_zero();
  }
}

double clip_grad_norm(std::span<GradPair* const> params, double max_norm) {
  double sq = 0.0;
  for (const GradPair* p : params) {
    for (double g : p->grad.storage()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (GradPair* p : params) p->grad *= scale;
  }
  return norm;
}

}  // namespace bsr

#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "bsr/gradcore/tensor.hpp"

namespace bsr {

using ForwardFn = std::function<Tensor(const std::vector<Tensor>& inputs)>;
// Returns one gradient per input given the upstream gradient of the output.
using BackwardFn = std::function<std::vector<Tensor>(const std::vector<Tensor>& inputs, const Tensor& grad_output)>;

struct GradCheckReport {
  std::vector<double> max_rel_error;  // per input
  double worst = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-3;
  // Entries whose analytic and numeric magnitudes are both below this are
  // compared absolutely.
  double magnitude_floor = 1e-6;
  // The scalar probe is sum(weights * output); all-ones when absent.
  std::optional<Tensor> output_weights;
};

// Compares analytic gradients against central differences of the scalar
// probe over every entry of every input.
GradCheckReport finite_diff_check(const ForwardFn& forward, const BackwardFn& backward,
                                  const std::vector<Tensor>& inputs, const GradCheckOptions& options = {});

}  // namespace bsr

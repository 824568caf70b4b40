#include "bsr/gradcore/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "bsr/errors.hpp"

namespace bsr {
namespace {

double probe(const Tensor& out, const std::optional<Tensor>& weights) {
  if (!weights) return out.sum();
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += (*weights)[i] * out[i];
  return s;
}

}  // namespace

GradCheckReport finite_diff_check(const ForwardFn& forward, const BackwardFn& backward,
                                  const std::vector<Tensor>& inputs, const GradCheckOptions& options) {
  const Tensor out = forward(inputs);
  if (options.output_weights && options.output_weights->shape() != out.shape()) {
    throw ShapeError("finite_diff_check: output weights shape " + shape_str(options.output_weights->shape()) +
                     " does not match output " + shape_str(out.shape()));
  }
  const Tensor upstream = options.output_weights ? *options.output_weights : Tensor(out.shape(), 1.0);
  const std::vector<Tensor> analytic = backward(inputs, upstream);
  if (analytic.size() != inputs.size()) {
    throw ShapeError("finite_diff_check: backward returned wrong number of gradients");
  }

  GradCheckReport report;
  std::vector<Tensor> probe_inputs = inputs;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    if (analytic[a].shape() != inputs[a].shape()) {
      throw ShapeError("finite_diff_check: gradient shape mismatch for input " + std::to_string(a));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs[a].size(); ++i) {
      const double orig = inputs[a][i];
      probe_inputs[a][i] = orig + options.step;
      const double up = probe(forward(probe_inputs), options.output_weights);
      probe_inputs[a][i] = orig - options.step;
      const double down = probe(forward(probe_inputs), options.output_weights);
      probe_inputs[a][i] = orig;
      const double numeric = (up - down) / (2.0 * options.step);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[a][i]), options.magnitude_floor});
      const double err = std::abs(numeric - analytic[a][i]) / denom;
      worst = std::max(worst, std::isfinite(err) ? err : INFINITY);
    }
    report.max_rel_error.push_back(worst);
    report.worst = std::max(report.worst, worst);
  }
  report.passed = report.worst <= options.tolerance;
  return report;
}

}  // namespace bsr

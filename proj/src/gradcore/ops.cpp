#include "bsr/gradcore/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "bsr/errors.hpp"

namespace bsr::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void check_conv_shapes(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  require_chw(input, "conv2d input");
  if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3) || kernel.dim(2) % 2 == 0) {
    throw ShapeError("conv2d: kernel must be Cout x Cin x k x k with odd k, got " + shape_str(kernel.shape()));
  }
  if (kernel.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(0)) + " channels but kernel expects " +
                     std::to_string(kernel.dim(1)));
  }
  if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(kernel.dim(0)) + " output channels");
  }
}

// Patch matrix for output rows [y0, y1): rows are (c, ky, kx), columns are
// the output pixels of that band.
void im2col(const Tensor& input, std::size_t k, std::size_t y0, std::size_t y1, std::vector<double>& col) {
  const std::size_t channels = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t band = (y1 - y0) * w;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  col.resize(channels * k * k * band);
  const double* src = input.data();
  double* dst = col.data();
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = src + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(w, static_cast<std::ptrdiff_t>(w) - dx);
        for (std::size_t y = y0; y < y1; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          double* row = dst + (y - y0) * w;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(row, row + w, 0.0);
            continue;
          }
          const double* srow = plane + sy * w;
          std::fill(row, row + x_lo, 0.0);
          std::copy(srow + x_lo + dx, srow + x_hi + dx, row + x_lo);
          std::fill(row + x_hi, row + w, 0.0);
        }
        dst += band;
      }
    }
  }
}

// Adjoint of im2col for one band: scatters patch gradients into `out`.
void col2im_add(const std::vector<double>& col, std::size_t k, std::size_t y0, std::size_t y1, Tensor& out) {
  const std::size_t channels = out.dim(0), h = out.dim(1), w = out.dim(2);
  const std::size_t band = (y1 - y0) * w;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const double* src = col.data();
  double* dst = out.data();
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = dst + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(w, static_cast<std::ptrdiff_t>(w) - dx);
        for (std::size_t y = y0; y < y1; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          const double* row = src + (y - y0) * w;
          double* drow = plane + sy * w;
          for (std::ptrdiff_t x = x_lo; x < x_hi; ++x) drow[x + dx] += row[x];
        }
        src += band;
      }
    }
  }
}

// Output rows per band; keeps the patch matrix cache-resident.
std::size_t band_rows(std::size_t w) {
  constexpr std::size_t kBandPixels = 128;
  return std::max<std::size_t>(1, kBandPixels / std::max<std::size_t>(1, w));
}

thread_local std::vector<double> col_scratch;
thread_local std::vector<double> dcol_scratch;

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  check_conv_shapes(input, kernel, bias);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  const std::size_t h = input.dim(1), w = input.dim(2), hw = h * w;
  const std::size_t patch = kernel.dim(1) * k * k;

  Tensor out({cout, h, w});
  MapMat y(out.data(), cout, hw);
  ConstMapMat wmat(kernel.data(), cout, patch);
  if (k == 1) {
    y.noalias() = wmat * ConstMapMat(input.data(), patch, hw);
  } else {
    const std::size_t rows = band_rows(w);
    for (std::size_t y0 = 0; y0 < h; y0 += rows) {
      const std::size_t y1 = std::min(h, y0 + rows);
      const auto cols = static_cast<Eigen::Index>((y1 - y0) * w);
      im2col(input, k, y0, y1, col_scratch);
      y.middleCols(static_cast<Eigen::Index>(y0 * w), cols).noalias() =
          wmat * ConstMapMat(col_scratch.data(), patch, cols);
    }
  }
  for (std::size_t o = 0; o < cout; ++o) y.row(o).array() += bias[o];
  return out;
}

void conv2d_backward_into(const Tensor& input, const Tensor& kernel, const Tensor& grad_output,
                          Tensor* grad_input, Tensor& grad_kernel, Tensor& grad_bias) {
  check_conv_shapes(input, kernel, grad_bias);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  const std::size_t h = input.dim(1), w = input.dim(2), hw = h * w;
  const std::size_t patch = kernel.dim(1) * k * k;
  if (grad_output.shape() != Shape{cout, h, w}) {
    throw ShapeError("conv2d_backward: grad_output shape " + shape_str(grad_output.shape()));
  }
  if (grad_kernel.shape() != kernel.shape()) {
    throw ShapeError("conv2d_backward: grad_kernel shape " + shape_str(grad_kernel.shape()));
  }

  ConstMapMat dy(grad_output.data(), cout, hw);
  ConstMapMat wmat(kernel.data(), cout, patch);
  MapMat dw(grad_kernel.data(), cout, patch);
  // A plain loop keeps the summation order independent of buffer alignment;
  // Eigen's vectorised reduction does not, which breaks run-to-run equality.
  for (std::size_t c = 0; c < cout; ++c) {
    const double* row = grad_output.data() + c * hw;
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += row[i];
    grad_bias[c] += acc;
  }

  if (k == 1) {
    dw.noalias() += dy * ConstMapMat(input.data(), patch, hw).transpose();
    if (grad_input) {
      *grad_input = Tensor(input.shape());
      MapMat(grad_input->data(), patch, hw).noalias() = wmat.transpose() * dy;
    }
    return;
  }

  if (grad_input) *grad_input = Tensor(input.shape());
  const std::size_t rows = band_rows(w);
  for (std::size_t y0 = 0; y0 < h; y0 += rows) {
    const std::size_t y1 = std::min(h, y0 + rows);
    const auto cols = static_cast<Eigen::Index>((y1 - y0) * w);
    const auto dy_band = dy.middleCols(static_cast<Eigen::Index>(y0 * w), cols);
    im2col(input, k, y0, y1, col_scratch);
    dw.noalias() += dy_band * ConstMapMat(col_scratch.data(), patch, cols).transpose();
    if (grad_input) {
      dcol_scratch.resize(patch * static_cast<std::size_t>(cols));
      MapMat(dcol_scratch.data(), patch, cols).noalias() = wmat.transpose() * dy_band;
      col2im_add(dcol_scratch, k, y0, y1, *grad_input);
    }
  }
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_output) {
  Conv2dGrads grads;
  grads.kernel = Tensor(kernel.shape());
  grads.bias = Tensor({kernel.dim(0)});
  conv2d_backward_into(input, kernel, grad_output, &grads.input, grads.kernel, grads.bias);
  return grads;
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_output) {
  if (input.shape() != grad_output.shape()) {
    throw ShapeError("relu_backward: shape mismatch " + shape_str(input.shape()) + " vs " +
                     shape_str(grad_output.shape()));
  }
  Tensor grad(input.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = input[i] > 0.0 ? grad_output[i] : 0.0;
  return grad;
}

PoolResult maxpool2(const Tensor& input) {
  require_chw(input, "maxpool2");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2: spatial size must be even, got " + shape_str(input.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  PoolResult res{Tensor({c, oh, ow}), std::vector<std::uint32_t>(c * oh * ow)};
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        const std::size_t base = (ch * h + 2 * y) * w + 2 * x;
        const std::size_t cells[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cells[0];
        for (std::size_t i = 1; i < 4; ++i) {
          if (input[cells[i]] > input[best]) best = cells[i];
        }
        res.output[o] = input[best];
        res.argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return res;
}

Tensor maxpool2_backward(const Tensor& grad_output, const std::vector<std::uint32_t>& argmax,
                         const Shape& input_shape) {
  if (argmax.size() != grad_output.size()) {
    throw ShapeError("maxpool2_backward: argmax/grad size mismatch");
  }
  Tensor grad(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) grad[argmax[i]] += grad_output[i];
  return grad;
}

Tensor upsample2(const Tensor& input) {
  require_chw(input, "upsample2");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t x = 0; x < 2 * w; ++x) out.at(ch, y, x) = input.at(ch, y / 2, x / 2);
    }
  }
  return out;
}

Tensor upsample2_backward(const Tensor& grad_output) {
  require_chw(grad_output, "upsample2_backward");
  const std::size_t c = grad_output.dim(0), h = grad_output.dim(1), w = grad_output.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("upsample2_backward: gradient spatial size must be even");
  }
  Tensor grad({c, h / 2, w / 2});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) grad.at(ch, y / 2, x / 2) += grad_output.at(ch, y, x);
    }
  }
  return grad;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_chw(a, "concat_channels");
  require_chw(b, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw ShapeError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.storage().begin(), a.storage().end(), out.storage().begin());
  std::copy(b.storage().begin(), b.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& grad_output, std::size_t channels_a) {
  require_chw(grad_output, "split_channels");
  if (channels_a > grad_output.dim(0)) {
    throw ShapeError("split_channels: split point beyond channel count");
  }
  const std::size_t h = grad_output.dim(1), w = grad_output.dim(2);
  Tensor a({channels_a, h, w});
  Tensor b({grad_output.dim(0) - channels_a, h, w});
  const auto mid = grad_output.storage().begin() + static_cast<std::ptrdiff_t>(a.size());
  std::copy(grad_output.storage().begin(), mid, a.storage().begin());
  std::copy(mid, grad_output.storage().end(), b.storage().begin());
  return {std::move(a), std::move(b)};
}

Tensor softmax_c(const Tensor& logits) {
  require_chw(logits, "softmax_c");
  const std::size_t c = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  if (c == 0) throw ShapeError("softmax_c: need at least one channel");
  Tensor out(logits.shape());
  for (std::size_t p = 0; p < hw; ++p) {
    double mx = logits[p];
    for (std::size_t ch = 1; ch < c; ++ch) mx = std::max(mx, logits[ch * hw + p]);
    double denom = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double e = std::exp(logits[ch * hw + p] - mx);
      out[ch * hw + p] = e;
      denom += e;
    }
    for (std::size_t ch = 0; ch < c; ++ch) out[ch * hw + p] /= denom;
  }
  return out;
}

Tensor softmax_c_backward(const Tensor& probs, const Tensor& grad_output) {
  require_chw(probs, "softmax_c_backward");
  if (probs.shape() != grad_output.shape()) {
    throw ShapeError("softmax_c_backward: shape mismatch");
  }
  const std::size_t c = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
  Tensor grad(probs.shape());
  for (std::size_t p = 0; p < hw; ++p) {
    double dot = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) dot += probs[ch * hw + p] * grad_output[ch * hw + p];
    for (std::size_t ch = 0; ch < c; ++ch) {
      grad[ch * hw + p] = probs[ch * hw + p] * (grad_output[ch * hw + p] - dot);
    }
  }
  return grad;
}

}  // namespace bsr::ops

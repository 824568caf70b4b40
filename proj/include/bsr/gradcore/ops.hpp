#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "bsr/gradcore/tensor.hpp"

// Forward and backward rules for the fixed layer set of the segmentation
// network. All spatial tensors are single samples laid out C x H x W; a batch
// is handled by looping over samples.
namespace bsr::ops {

// Stride-1 cross-correlation with zero "same" padding. kernel is
// Cout x Cin x k x k with k odd, bias has Cout entries.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias);

struct Conv2dGrads {
  Tensor input;
  Tensor kernel;
  Tensor bias;
};

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_output);

// Accumulating form used by the network: adds into grad_kernel/grad_bias and,
// when grad_input is non-null, overwrites it with the input gradient.
void conv2d_backward_into(const Tensor& input, const Tensor& kernel, const Tensor& grad_output,
                          Tensor* grad_input, Tensor& grad_kernel, Tensor& grad_bias);

Tensor relu(const Tensor& input);
// `input` may be either the relu input or its output; both give the same mask.
Tensor relu_backward(const Tensor& input, const Tensor& grad_output);

struct PoolResult {
  Tensor output;
  std::vector<std::uint32_t> argmax;  // flat input index per output cell
};

// 2x2 non-overlapping max pooling. Ties resolve to the first cell in
// row-major order of the window.
PoolResult maxpool2(const Tensor& input);
Tensor maxpool2_backward(const Tensor& grad_output, const std::vector<std::uint32_t>& argmax,
                         const Shape& input_shape);

// Nearest-neighbour 2x upsampling.
Tensor upsample2(const Tensor& input);
Tensor upsample2_backward(const Tensor& grad_output);

Tensor concat_channels(const Tensor& a, const Tensor& b);
// Splits a gradient of concat_channels(a, b) back into (grad_a, grad_b).
std::pair<Tensor, Tensor> split_channels(const Tensor& grad_output, std::size_t channels_a);

// Per-pixel softmax over the channel axis.
Tensor softmax_c(const Tensor& logits);
Tensor softmax_c_backward(const Tensor& probs, const Tensor& grad_output);

}  // namespace bsr::ops

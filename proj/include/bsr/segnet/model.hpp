#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "bsr/gradcore/tensor.hpp"

namespace bsr::segnet {

// U-Net-lite layout: `levels` resolution levels with base_channels * 2^l
// channels, two 3x3 conv+ReLU blocks per level, one shared encoder and one or
// two decoders. scs_classes == 0 means the network has no subclass head.
struct ArchSpec {
  std::size_t levels = 3;
  std::size_t base_channels = 16;
  std::size_t input_channels = 1;
  std::size_t mos_classes = 5;
  std::size_t scs_classes = 0;

  bool has_scs() const noexcept { return scs_classes > 0; }
  std::size_t channels(std::size_t level) const noexcept { return base_channels << level; }
  // Height and width must be multiples of this.
  std::size_t spatial_multiple() const noexcept { return std::size_t{1} << (levels - 1); }
  void validate() const;
};

struct ConvParam {
  GradPair weight;
  GradPair bias;
};

struct DecoderParams {
  std::vector<ConvParam> up;      // 1x1 channel-halving conv before each upsample
  std::vector<ConvParam> blocks;  // two 3x3 convs per decoder stage
  ConvParam out;                  // final 1x1 classifier
};

struct ModelParams {
  ArchSpec arch;
  std::vector<ConvParam> encoder;
  DecoderParams decoder_mos;
  std::optional<DecoderParams> decoder_scs;

  std::vector<GradPair*> parameters();
  std::vector<const GradPair*> parameters() const;
  void zero_grad();
};

// He-normal weights (variance 2 / fan_in), zero biases. Every parameter draws
// from its own stream keyed by (seed, parameter name), so adding or removing
// the subclass decoder leaves the other weights bit-identical.
ModelParams init_params(const ArchSpec& arch, std::uint64_t seed);

// Additive Gaussian input noise clamped to [-noise_clip, noise_clip].
struct Perturbation {
  double noise_sigma = 0.1;
  double noise_clip = 0.2;
  std::uint64_t seed = 0;

  Tensor apply(const Tensor& image) const;
};

enum class Heads { mos, scs, both };

struct PredictionMaps {
  Tensor mos;  // (K+1) x H x W, empty when not requested
  Tensor scs;  // (K_sub+1) x H x W, empty when not requested
};

struct EncoderTape {
  std::vector<Tensor> conv_a_in;
  std::vector<Tensor> conv_a_out;
  std::vector<Tensor> conv_b_out;  // skip activations; the last is the bottleneck
  std::vector<std::vector<std::uint32_t>> pool_argmax;
};

struct DecoderTape {
  std::vector<Tensor> up_in;
  std::vector<Tensor> cat;
  std::vector<Tensor> conv_a_out;
  std::vector<Tensor> conv_b_out;
  Tensor features;
  Tensor probs;
};

// Activations retained by a training forward pass for the backward pass.
struct ForwardTape {
  EncoderTape encoder;
  std::optional<DecoderTape> mos;
  std::optional<DecoderTape> scs;
};

// image is 1 x H x W. Both requested heads consume one shared encoder pass.
PredictionMaps forward(const ModelParams& params, const Tensor& image, Heads heads,
                       const Perturbation* perturb = nullptr);
PredictionMaps forward(const ModelParams& params, const Tensor& image, Heads heads, const Perturbation* perturb,
                       ForwardTape& tape);

// Accumulates parameter gradients given dL/dprobs for each head that was run.
// A null gradient means that head does not contribute to the loss.
void backward(ModelParams& params, const ForwardTape& tape, const Tensor* grad_mos, const Tensor* grad_scs);

// Per-pixel activations feeding the MoS classifier, as an (H*W) x C matrix
// stored row-major in a Tensor of shape {H*W, C}.
Tensor extract_features(const ModelParams& params, const Tensor& image);

struct TeacherState {
  ModelParams params;
  double decay = 0.99;
};

// Teacher starts as an exact copy of the student with cleared gradients.
TeacherState make_teacher(const ModelParams& student, double decay);

// theta' <- decay * theta' + (1 - decay) * theta over every parameter.
void ema_update(TeacherState& teacher, const ModelParams& student);

}  // namespace bsr::segnet

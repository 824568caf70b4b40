#include "bsr/segnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "bsr/errors.hpp"
#include "bsr/gradcore/ops.hpp"
#include "bsr/seeding.hpp"

namespace bsr::segnet {
namespace {

ConvParam make_conv(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k) {
  return ConvParam{GradPair(name + ".w", Tensor({cout, cin, k, k})), GradPair(name + ".b", Tensor({cout}))};
}

DecoderParams make_decoder(const ArchSpec& arch, const std::string& prefix, std::size_t classes) {
  DecoderParams dec;
  for (std::size_t j = 0; j + 1 < arch.levels; ++j) {
    const std::size_t level = arch.levels - 2 - j;
    const std::size_t c = arch.channels(level);
    const std::string stage = prefix + ".dec" + std::to_string(level);
    dec.up.push_back(make_conv(stage + ".up", c, arch.channels(level + 1), 1));
    dec.blocks.push_back(make_conv(stage + ".a", c, 2 * c, 3));
    dec.blocks.push_back(make_conv(stage + ".b", c, c, 3));
  }
  dec.out = make_conv(prefix + ".out", classes, arch.base_channels, 1);
  return dec;
}

void collect(DecoderParams& dec, std::vector<GradPair*>& out) {
  for (std::size_t j = 0; j < dec.up.size(); ++j) {
    out.push_back(&dec.up[j].weight);
    out.push_back(&dec.up[j].bias);
    for (std::size_t b = 2 * j; b < 2 * j + 2; ++b) {
      out.push_back(&dec.blocks[b].weight);
      out.push_back(&dec.blocks[b].bias);
    }
  }
  out.push_back(&dec.out.weight);
  out.push_back(&dec.out.bias);
}

Tensor conv(const Tensor& x, const ConvParam& p) { return ops::conv2d(x, p.weight.value, p.bias.value); }

Tensor conv_relu(const Tensor& x, const ConvParam& p) {
  Tensor y = conv(x, p);
  for (double& v : y.storage()) v = v > 0.0 ? v : 0.0;
  return y;
}

void check_input(const ModelParams& params, const Tensor& image) {
  require_chw(image, "segnet forward");
  if (image.dim(0) != params.arch.input_channels) {
    throw ShapeError("segnet forward: expected " + std::to_string(params.arch.input_channels) +
                     " input channel(s), got " + std::to_string(image.dim(0)));
  }
  const std::size_t m = params.arch.spatial_multiple();
  if (image.dim(1) % m != 0 || image.dim(2) % m != 0) {
    throw ShapeError("segnet forward: spatial size " + shape_str(image.shape()) + " is not divisible by " +
                     std::to_string(m));
  }
}

void run_encoder(const ModelParams& params, const Tensor& image, EncoderTape& tape) {
  const std::size_t levels = params.arch.levels;
  tape = EncoderTape{};
  Tensor h = image;
  for (std::size_t l = 0; l < levels; ++l) {
    if (l > 0) {
      ops::PoolResult pooled = ops::maxpool2(tape.conv_b_out[l - 1]);
      h = std::move(pooled.output);
      tape.pool_argmax.push_back(std::move(pooled.argmax));
    }
    Tensor a = conv_relu(h, params.encoder[2 * l]);
    Tensor b = conv_relu(a, params.encoder[2 * l + 1]);
    tape.conv_a_in.push_back(std::move(h));
    tape.conv_a_out.push_back(std::move(a));
    tape.conv_b_out.push_back(std::move(b));
  }
}

void run_decoder(const ArchSpec& arch, const DecoderParams& dec, const EncoderTape& enc, DecoderTape& tape) {
  tape = DecoderTape{};
  Tensor h = enc.conv_b_out.back();
  for (std::size_t j = 0; j + 1 < arch.levels; ++j) {
    const std::size_t level = arch.levels - 2 - j;
    // A 1x1 conv commutes with nearest upsampling, so it runs at low resolution.
    Tensor up = ops::upsample2(conv(h, dec.up[j]));
    Tensor cat = ops::concat_channels(enc.conv_b_out[level], up);
    Tensor a = conv_relu(cat, dec.blocks[2 * j]);
    Tensor b = conv_relu(a, dec.blocks[2 * j + 1]);
    tape.up_in.push_back(std::move(h));
    tape.cat.push_back(std::move(cat));
    tape.conv_a_out.push_back(std::move(a));
    h = b;
    tape.conv_b_out.push_back(std::move(b));
  }
  tape.features = std::move(h);
  tape.probs = ops::softmax_c(conv(tape.features, dec.out));
}

// Adds the decoder's contribution to the gradients of the encoder skips.
void backprop_decoder(const ArchSpec& arch, DecoderParams& dec, const DecoderTape& tape, const Tensor& grad_probs,
                      std::vector<Tensor>& grad_skip) {
  if (grad_probs.shape() != tape.probs.shape()) {
    throw ShapeError("segnet backward: head gradient shape " + shape_str(grad_probs.shape()) + " does not match " +
                     shape_str(tape.probs.shape()));
  }
  const Tensor grad_logits = ops::softmax_c_backward(tape.probs, grad_probs);
  Tensor grad_h;
  ops::conv2d_backward_into(tape.features, dec.out.weight.value, grad_logits, &grad_h, dec.out.weight.grad,
                            dec.out.bias.grad);
  for (std::size_t jj = arch.levels - 1; jj-- > 0;) {
    const std::size_t level = arch.levels - 2 - jj;
    Tensor g = ops::relu_backward(tape.conv_b_out[jj], grad_h);
    Tensor grad_a;
    ConvParam& pb = dec.blocks[2 * jj + 1];
    ops::conv2d_backward_into(tape.conv_a_out[jj], pb.weight.value, g, &grad_a, pb.weight.grad, pb.bias.grad);
    g = ops::relu_backward(tape.conv_a_out[jj], grad_a);
    Tensor grad_cat;
    ConvParam& pa = dec.blocks[2 * jj];
    ops::conv2d_backward_into(tape.cat[jj], pa.weight.value, g, &grad_cat, pa.weight.grad, pa.bias.grad);
    auto [grad_skip_l, grad_up] = ops::split_channels(grad_cat, arch.channels(level));
    grad_skip[level] += grad_skip_l;
    const Tensor grad_low = ops::upsample2_backward(grad_up);
    ConvParam& pu = dec.up[jj];
    ops::conv2d_backward_into(tape.up_in[jj], pu.weight.value, grad_low, &grad_h, pu.weight.grad, pu.bias.grad);
  }
  grad_skip[arch.levels - 1] += grad_h;
}

void backprop_encoder(ModelParams& params, const EncoderTape& tape, std::vector<Tensor>& grad_skip) {
  for (std::size_t l = params.arch.levels; l-- > 0;) {
    Tensor g = ops::relu_backward(tape.conv_b_out[l], grad_skip[l]);
    Tensor grad_a;
    ConvParam& pb = params.encoder[2 * l + 1];
    ops::conv2d_backward_into(tape.conv_a_out[l], pb.weight.value, g, &grad_a, pb.weight.grad, pb.bias.grad);
    g = ops::relu_backward(tape.conv_a_out[l], grad_a);
    ConvParam& pa = params.encoder[2 * l];
    if (l == 0) {
      ops::conv2d_backward_into(tape.conv_a_in[l], pa.weight.value, g, nullptr, pa.weight.grad, pa.bias.grad);
    } else {
      Tensor grad_in;
      ops::conv2d_backward_into(tape.conv_a_in[l], pa.weight.value, g, &grad_in, pa.weight.grad, pa.bias.grad);
      grad_skip[l - 1] += ops::maxpool2_backward(grad_in, tape.pool_argmax[l - 1], tape.conv_b_out[l - 1].shape());
    }
  }
}

void ema_tensor(Tensor& teacher, const Tensor& student, double decay, const std::string& name) {
  if (teacher.shape() != student.shape()) {
    throw ShapeError("ema_update: shape mismatch for '" + name + "': teacher " + shape_str(teacher.shape()) +
                     " vs student " + shape_str(student.shape()));
  }
  const double keep = 1.0 - decay;
  for (std::size_t i = 0; i < teacher.size(); ++i) teacher[i] = decay * teacher[i] + keep * student[i];
}

}  // namespace

void ArchSpec::validate() const {
  if (levels < 2) throw ShapeError("ArchSpec: levels must be >= 2");
  if (base_channels == 0) throw ShapeError("ArchSpec: base_channels must be positive");
  if (input_channels == 0) throw ShapeError("ArchSpec: input_channels must be positive");
  if (mos_classes < 2) throw ShapeError("ArchSpec: mos_classes must be >= 2");
  if (has_scs() && scs_classes < mos_classes) {
    throw ShapeError("ArchSpec: scs_classes (" + std::to_string(scs_classes) + ") must be >= mos_classes (" +
                     std::to_string(mos_classes) + ")");
  }
}

std::vector<GradPair*> ModelParams::parameters() {
  std::vector<GradPair*> out;
  for (ConvParam& c : encoder) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  }
  collect(decoder_mos, out);
  if (decoder_scs) collect(*decoder_scs, out);
  return out;
}

std::vector<const GradPair*> ModelParams::parameters() const {
  auto mut = const_cast<ModelParams*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

void ModelParams::zero_grad() {
  for (GradPair* p : parameters()) p->grad.set_zero();
}

ModelParams init_params(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  ModelParams params;
  params.arch = arch;
  std::size_t in = arch.input_channels;
  for (std::size_t l = 0; l < arch.levels; ++l) {
    const std::size_t c = arch.channels(l);
    params.encoder.push_back(make_conv("enc" + std::to_string(l) + ".a", c, in, 3));
    params.encoder.push_back(make_conv("enc" + std::to_string(l) + ".b", c, c, 3));
    in = c;
  }
  params.decoder_mos = make_decoder(arch, "mos", arch.mos_classes);
  if (arch.has_scs()) params.decoder_scs = make_decoder(arch, "scs", arch.scs_classes);

  for (GradPair* p : params.parameters()) {
    if (p->value.rank() != 4) continue;  // biases stay zero
    const Shape& s = p->value.shape();
    const double fan_in = static_cast<double>(s[1] * s[2] * s[3]);
    std::mt19937_64 rng(derive_seed(seed, {fnv1a(p->name)}));
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (double& v : p->value.storage()) v = dist(rng);
  }
  return params;
}

Tensor Perturbation::apply(const Tensor& image) const {
  Tensor out = image;
  if (noise_sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, noise_sigma);
  for (double& v : out.storage()) v += std::clamp(dist(rng), -noise_clip, noise_clip);
  return out;
}

PredictionMaps forward(const ModelParams& params, const Tensor& image, Heads heads, const Perturbation* perturb,
                       ForwardTape& tape) {
  check_input(params, image);
  const bool want_mos = heads != Heads::scs;
  const bool want_scs = heads != Heads::mos;
  if (want_scs && !params.decoder_scs) {
    throw ShapeError("segnet forward: subclass head requested but the model has no subclass decoder");
  }
  run_encoder(params, perturb ? perturb->apply(image) : image, tape.encoder);
  PredictionMaps maps;
  tape.mos.reset();
  tape.scs.reset();
  if (want_mos) {
    tape.mos.emplace();
    run_decoder(params.arch, params.decoder_mos, tape.encoder, *tape.mos);
    maps.mos = tape.mos->probs;
  }
  if (want_scs) {
    tape.scs.emplace();
    run_decoder(params.arch, *params.decoder_scs, tape.encoder, *tape.scs);
    maps.scs = tape.scs->probs;
  }
  return maps;
}

PredictionMaps forward(const ModelParams& params, const Tensor& image, Heads heads, const Perturbation* perturb) {
  ForwardTape tape;
  return forward(params, image, heads, perturb, tape);
}

void backward(ModelParams& params, const ForwardTape& tape, const Tensor* grad_mos, const Tensor* grad_scs) {
  if (!grad_mos && !grad_scs) return;
  std::vector<Tensor> grad_skip;
  for (const Tensor& s : tape.encoder.conv_b_out) grad_skip.emplace_back(s.shape());
  if (grad_mos) {
    if (!tape.mos) throw ShapeError("segnet backward: no MoS activations recorded");
    backprop_decoder(params.arch, params.decoder_mos, *tape.mos, *grad_mos, grad_skip);
  }
  if (grad_scs) {
    if (!tape.scs || !params.decoder_scs) throw ShapeError("segnet backward: no subclass activations recorded");
    backprop_decoder(params.arch, *params.decoder_scs, *tape.scs, *grad_scs, grad_skip);
  }
  backprop_encoder(params, tape.encoder, grad_skip);
}

Tensor extract_features(const ModelParams& params, const Tensor& image) {
  check_input(params, image);
  EncoderTape enc;
  run_encoder(params, image, enc);
  DecoderTape dec;
  run_decoder(params.arch, params.decoder_mos, enc, dec);
  const Tensor& f = dec.features;
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
  Tensor rows({hw, c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) rows[p * c + ch] = f[ch * hw + p];
  }
  return rows;
}

TeacherState make_teacher(const ModelParams& student, double decay) {
  TeacherState t{student, decay};
  t.params.zero_grad();
  return t;
}

void ema_update(TeacherState& teacher, const ModelParams& student) {
  auto tp = teacher.params.parameters();
  auto sp = student.parameters();
  if (tp.size() != sp.size()) {
    throw ShapeError("ema_update: teacher has " + std::to_string(tp.size()) + " parameters, student has " +
                     std::to_string(sp.size()));
  }
  for (std::size_t i = 0; i < tp.size(); ++i) ema_tensor(tp[i]->value, sp[i]->value, teacher.decay, tp[i]->name);
}

}  // namespace bsr::segnet

#include "bsr/objectives/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "bsr/errors.hpp"

namespace bsr::objectives {
namespace {

void check_pair(const Tensor& probs, const Tensor& target, const char* who) {
  require_chw(probs, who);
  if (probs.shape() != target.shape()) {
    throw ShapeError(std::string(who) + ": prediction " + shape_str(probs.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
}

}  // namespace

Tensor one_hot(const LabelMap& labels, std::size_t channels) {
  Tensor t({channels, labels.height, labels.width});
  const std::size_t hw = labels.size();
  for (std::size_t p = 0; p < hw; ++p) {
    const std::size_t c = labels.labels[p];
    if (c >= channels) {
      throw std::out_of_range("label " + std::to_string(c) + " outside 0.." + std::to_string(channels - 1));
    }
    t[c * hw + p] = 1.0;
  }
  return t;
}

namespace {

Tensor hard_target(const Tensor& probs, const LabelMap& target, const char* who) {
  require_chw(probs, who);
  if (target.height != probs.dim(1) || target.width != probs.dim(2)) {
    throw ShapeError(std::string(who) + ": label map " + std::to_string(target.height) + "x" +
                     std::to_string(target.width) + " does not match prediction " + shape_str(probs.shape()));
  }
  return one_hot(target, probs.dim(0));
}

}  // namespace

LossValue ce_loss(const Tensor& probs, const Tensor& soft_target) {
  check_pair(probs, soft_target, "ce_loss");
  const std::size_t hw = probs.dim(1) * probs.dim(2);
  const double inv = 1.0 / static_cast<double>(hw);
  LossValue out{0.0, Tensor(probs.shape())};
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double t = soft_target[i];
    if (t == 0.0) continue;
    const double p = probs[i];
    if (p > kProbClamp) {
      out.value -= t * std::log(p);
      out.grad[i] = -t / p * inv;
    } else {
      out.value -= t * std::log(kProbClamp);
    }
  }
  out.value *= inv;
  return out;
}

LossValue ce_loss(const Tensor& probs, const LabelMap& target) {
  return ce_loss(probs, hard_target(probs, target, "ce_loss"));
}

LossValue dice_loss(const Tensor& probs, const Tensor& soft_target) {
  check_pair(probs, soft_target, "dice_loss");
  const std::size_t channels = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
  LossValue out{1.0, Tensor(probs.shape())};
  const double inv_c = 1.0 / static_cast<double>(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    double inter = 0.0, sum_p = 0.0, sum_g = 0.0;
    for (std::size_t p = 0; p < hw; ++p) {
      const double pv = probs[c * hw + p], gv = soft_target[c * hw + p];
      inter += pv * gv;
      sum_p += pv;
      sum_g += gv;
    }
    const double num = 2.0 * inter + kDiceSmooth;
    const double den = sum_p + sum_g + kDiceSmooth;
    out.value -= inv_c * num / den;
    // d(num/den)/dp_i = (2 g_i den - num) / den^2
    for (std::size_t p = 0; p < hw; ++p) {
      const double gv = soft_target[c * hw + p];
      out.grad[c * hw + p] = -inv_c * (2.0 * gv * den - num) / (den * den);
    }
  }
  return out;
}

LossValue dice_loss(const Tensor& probs, const LabelMap& target) {
  return dice_loss(probs, hard_target(probs, target, "dice_loss"));
}

LossValue seg_loss(const Tensor& probs, const Tensor& soft_target) {
  LossValue ce = ce_loss(probs, soft_target);
  LossValue dice = dice_loss(probs, soft_target);
  ce.value += dice.value;
  ce.grad += dice.grad;
  return ce;
}

LossValue seg_loss(const Tensor& probs, const LabelMap& target) {
  return seg_loss(probs, hard_target(probs, target, "seg_loss"));
}

LossValue mse_loss(const Tensor& student, const Tensor& teacher) {
  if (student.shape() != teacher.shape()) {
    throw ShapeError("mse_loss: student " + shape_str(student.shape()) + " vs teacher " + shape_str(teacher.shape()));
  }
  const double inv = 1.0 / static_cast<double>(student.size());
  LossValue out{0.0, Tensor(student.shape())};
  for (std::size_t i = 0; i < student.size(); ++i) {
    const double d = student[i] - teacher[i];
    out.value += d * d;
    out.grad[i] = 2.0 * d * inv;
  }
  out.value *= inv;
  return out;
}

HeadLoss sup_loss(const segnet::PredictionMaps& student, const LabelMap& y_l, const LabelMap* y_lsub, double alpha) {
  LossValue mos = seg_loss(student.mos, y_l);
  HeadLoss out{mos.value, std::move(mos.grad), {}};
  if (student.scs.empty()) return out;
  if (!y_lsub) throw std::invalid_argument("sup_loss: subclass labels are required for the subclass head");
  LossValue scs = seg_loss(student.scs, *y_lsub);
  out.value += alpha * scs.value;
  scs.grad *= alpha;
  out.grad_scs = std::move(scs.grad);
  return out;
}

HeadLoss model_consistency(const segnet::PredictionMaps& student, const segnet::PredictionMaps& teacher) {
  LossValue mos = mse_loss(student.mos, teacher.mos);
  HeadLoss out{mos.value, std::move(mos.grad), {}};
  if (student.scs.empty()) return out;
  LossValue scs = mse_loss(student.scs, teacher.scs);
  out.value += scs.value;
  out.grad_scs = std::move(scs.grad);
  return out;
}

LossValue task_consistency(const Tensor& teacher_scs, const Tensor& student_mos, const balclust::SubclassMap& map,
                           balclust::MapMode mode) {
  require_chw(student_mos, "task_consistency");
  if (student_mos.dim(0) != map.num_classes() + 1) {
    throw ShapeError("task_consistency: student has " + std::to_string(student_mos.dim(0)) +
                     " classes but the subclass map covers " + std::to_string(map.num_classes() + 1));
  }
  const Tensor target = balclust::map_to_parent(teacher_scs, map, mode);
  return seg_loss(student_mos, target);
}

void LossWeights::validate() const {
  if (alpha < 0 || beta1 < 0 || beta2_final < 0) throw std::invalid_argument("LossWeights: weights must be >= 0");
  if (warmup_fraction < 0 || warmup_fraction > 1) {
    throw std::invalid_argument("LossWeights: warmup_fraction must lie in [0, 1]");
  }
  if (total_iters == 0) throw std::invalid_argument("LossWeights: total_iters must be positive");
}

double LossWeights::active_beta2(std::size_t iteration) const {
  return static_cast<double>(iteration) < warmup_fraction * static_cast<double>(total_iters) ? 0.0 : beta2_final;
}

LossBreakdown total_loss(double sup, double con_model, double con_task, const LossWeights& weights,
                         std::size_t iteration) {
  LossBreakdown b;
  b.sup = sup;
  b.con_model = con_model;
  b.con_task = con_task;
  b.beta1 = weights.beta1;
  b.active_beta2 = weights.active_beta2(iteration);
  b.total = sup + weights.beta1 * con_model + b.active_beta2 * con_task;
  return b;
}

}  // namespace bsr::objectives

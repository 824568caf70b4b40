#pragma once

#include <cstddef>

#include "bsr/balclust/subclass.hpp"
#include "bsr/gradcore/tensor.hpp"
#include "bsr/label_map.hpp"
#include "bsr/segnet/model.hpp"

// Loss terms of the two-task mean-teacher objective. Every loss returns its
// value together with the gradient with respect to the student probability
// maps it consumes; teacher inputs are treated as constants.
namespace bsr::objectives {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDiceSmooth = 1e-5;

struct LossValue {
  double value = 0.0;
  Tensor grad;
};

// Converts a hard label map into a C x H x W one-hot tensor.
Tensor one_hot(const LabelMap& labels, std::size_t channels);

// Mean over pixels of -sum_c t_c log(max(p_c, 1e-7)).
LossValue ce_loss(const Tensor& probs, const LabelMap& target);
LossValue ce_loss(const Tensor& probs, const Tensor& soft_target);

// 1 - mean over all channels of (2 sum p g + s) / (sum p + sum g + s).
LossValue dice_loss(const Tensor& probs, const LabelMap& target);
LossValue dice_loss(const Tensor& probs, const Tensor& soft_target);

// CE + Dice with unit weights.
LossValue seg_loss(const Tensor& probs, const LabelMap& target);
LossValue seg_loss(const Tensor& probs, const Tensor& soft_target);

// Mean squared error over all entries; gradient is w.r.t. `student`.
LossValue mse_loss(const Tensor& student, const Tensor& teacher);

struct HeadLoss {
  double value = 0.0;
  Tensor grad_mos;
  Tensor grad_scs;  // empty when the subclass head is not involved
};

// seg(y_L, mos) + alpha * seg(y_Lsub, scs). When the predictions carry no
// subclass map only the first term applies; if they do, y_Lsub is required.
HeadLoss sup_loss(const segnet::PredictionMaps& student, const LabelMap& y_l, const LabelMap* y_lsub, double alpha);

// MSE(mos_s, mos_t) + MSE(scs_s, scs_t); the subclass term is skipped when
// the student has no subclass prediction.
HeadLoss model_consistency(const segnet::PredictionMaps& student, const segnet::PredictionMaps& teacher);

// CE + Dice between the parent-mapped teacher subclass prediction and the
// student MoS prediction. Gradient is w.r.t. student_mos only.
LossValue task_consistency(const Tensor& teacher_scs, const Tensor& student_mos, const balclust::SubclassMap& map,
                           balclust::MapMode mode = balclust::MapMode::soft_sum);

struct LossWeights {
  double alpha = 0.1;
  double beta1 = 0.1;
  double beta2_final = 0.5;
  double warmup_fraction = 0.25;
  std::size_t total_iters = 2000;

  void validate() const;
  // Zero before warmup_fraction * total_iters, beta2_final from then on.
  double active_beta2(std::size_t iteration) const;
};

struct LossBreakdown {
  double sup = 0.0;
  double con_model = 0.0;
  double con_task = 0.0;
  double total = 0.0;
  double beta1 = 0.0;
  double active_beta2 = 0.0;
};

LossBreakdown total_loss(double sup, double con_model, double con_task, const LossWeights& weights,
                         std::size_t iteration);

}  // namespace bsr::objectives

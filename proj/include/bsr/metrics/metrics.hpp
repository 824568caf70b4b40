#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bsr/gradcore/tensor.hpp"
#include "bsr/label_map.hpp"
#include "bsr/segnet/model.hpp"

namespace bsr::metrics {

struct ClassScore {
  double dice = 0.0;
  double ji = 0.0;
};

struct EvalReport {
  std::vector<ClassScore> per_class;  // foreground classes 1..K at index c-1
  double mean_dice = 0.0;
  double mean_ji = 0.0;
  std::size_t n_images = 0;
};

enum class Averaging { micro, macro };

// Dice = 2|P&G|/(|P|+|G|), JI = |P&G|/|P or G|. A class absent from both
// prediction and ground truth scores 1. micro pools counts over all images
// before scoring; macro scores each image and averages.
EvalReport overlap_metrics(std::span<const LabelMap> pred, std::span<const LabelMap> gt, std::size_t num_classes,
                           Averaging averaging = Averaging::micro);

// Per-pixel argmax over channels.
LabelMap argmax_labels(const Tensor& probs);

// Predicts with the MoS head (no perturbation) and scores against gt.
EvalReport evaluate_model(const segnet::ModelParams& params, std::span<const Tensor> images,
                          std::span<const LabelMap> gt, std::size_t num_classes,
                          Averaging averaging = Averaging::micro);

// "class,dice,ji" rows for classes 1..K.
std::string report_csv(const EvalReport& report);

}  // namespace bsr::metrics

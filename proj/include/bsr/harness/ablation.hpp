#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bsr/harness/config.hpp"
#include "bsr/synthdata/scene.hpp"

namespace bsr::harness {

struct ArmResult {
  Arm arm = Arm::A;
  bool ok = true;
  std::string error;
  std::vector<std::vector<double>> dice_per_seed;  // [seed][class-1]
  std::vector<double> small_dice_per_seed;         // mean over the smallest classes
  double seconds = 0.0;

  std::vector<double> mean_class_dice() const;
  double mean_dice() const;
  double mean_small_dice() const;
};

struct AblationResult {
  std::vector<ArmResult> arms;
  std::vector<std::size_t> smallest_classes;
  std::vector<double> balanced_ratio_per_seed;
  std::vector<double> plain_ratio_per_seed;
};

// Replicate r uses init/train/cluster seeds offset by r; the data split is
// shared. Phase I and clustering run once per replicate and feed every arm.
// A failing arm is recorded and the remaining arms still run.
AblationResult ablate(const RunConfig& cfg, const synthdata::DatasetSplit& split,
                      const std::function<void(const std::string&)>& progress = {});

// The `count` foreground classes with the fewest ground-truth pixels.
std::vector<std::size_t> smallest_classes(const std::vector<synthdata::LabeledSample>& samples,
                                          std::size_t num_classes, std::size_t count);

// Header plus one row per arm: per-class Dice, mean Dice and the
// smallest-class mean, in percent.
std::string ablation_table(const AblationResult& result, std::size_t num_classes);

}  // namespace bsr::harness

#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "bsr/gradcore/tensor.hpp"
#include "bsr/label_map.hpp"

namespace bsr::synthdata {

struct FractionRange {
  double lo = 0.0;
  double hi = 1.0;
  bool contains(double f) const noexcept { return f >= lo && f <= hi; }
};

// Recipe for an imbalanced 2D scene: class 1 is a large ellipse, class 2 a
// ring, classes 3..K small disks. Later classes are painted over earlier ones.
struct SceneSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 4;  // K, foreground only
  // Intensity mean per class id 0..K.
  std::vector<double> class_means = {0.15, 0.45, 0.70, 0.85, 0.60};
  double pixel_noise = 0.05;
  double gradient_amplitude = 0.1;
  FractionRange ellipse_fraction{0.30, 0.40};
  FractionRange ring_fraction{0.06, 0.10};
  FractionRange disk_fraction{0.005, 0.015};
  int max_attempts = 100;

  FractionRange fraction_for(std::size_t cls) const;
  void validate() const;
};

struct Sample {
  Tensor image;  // 1 x H x W, values in [0, 1]
  LabelMap labels;
};

// Deterministic in (spec, sample_seed). Throws std::runtime_error when no
// layout satisfying every fraction range is found within max_attempts.
Sample generate_sample(const SceneSpec& spec, std::uint64_t sample_seed);

struct LabeledSample {
  std::uint32_t id = 0;
  Tensor image;
  LabelMap labels;
};

struct UnlabeledSample {
  std::uint32_t id = 0;
  Tensor image;
};

// What training code sees. Unlabeled samples carry images only.
struct DatasetSplit {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;
  std::vector<LabeledSample> labeled;
  std::vector<UnlabeledSample> unlabeled;
  std::vector<LabeledSample> test;
};

// Hidden ground truth of the unlabeled pool, kept apart from DatasetSplit.
struct OracleLabels {
  std::map<std::uint32_t, LabelMap> labels;
};

struct GeneratedDataset {
  DatasetSplit split;
  OracleLabels oracle;
};

// n + m + n_test independent samples with ids 0..total-1; membership is a
// seeded permutation of the ids.
GeneratedDataset build_split(const SceneSpec& spec, std::size_t n, std::size_t m, std::size_t n_test,
                             std::uint64_t seed);

std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint32_t id);

}  // namespace bsr::synthdata

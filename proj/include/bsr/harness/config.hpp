#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "bsr/balclust/subclass.hpp"
#include "bsr/metrics/metrics.hpp"
#include "bsr/objectives/losses.hpp"
#include "bsr/segnet/model.hpp"
#include "bsr/synthdata/scene.hpp"

namespace bsr::harness {

enum class Arm { A, B, C, D, E };

Arm parse_arm(const std::string& text);
char arm_letter(Arm arm);

// Everything a run needs. Loaded from flat `key = value` text; every key
// has a default and unknown keys are rejected.
struct RunConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path run_dir = "run";

  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 4;
  std::size_t n = 4;
  std::size_t m = 36;
  std::size_t n_test = 10;

  std::uint64_t data_seed = 1;
  std::uint64_t init_seed = 2;
  std::uint64_t train_seed = 3;
  std::uint64_t cluster_seed = 4;

  std::size_t phase1_iters = 500;
  std::size_t total_iters = 2000;
  std::size_t batch_size = 16;
  double learning_rate = 1e-2;
  double momentum = 0.9;
  double ema_decay = 0.99;
  // Global gradient-norm limit per step; 0 turns clipping off.
  double grad_clip = 5.0;

  double alpha = 0.1;
  double beta1 = 0.1;
  double beta2 = 0.5;
  double warmup_fraction = 0.25;

  std::size_t levels = 3;
  std::size_t base_channels = 16;

  double noise_sigma = 0.1;
  double noise_clip = 0.2;

  Arm arm = Arm::E;
  balclust::MapMode map_mode = balclust::MapMode::soft_sum;

  std::size_t max_points_per_class = 20000;
  std::size_t cluster_max_iters = 50;
  bool split_background = false;

  bool warm_start = true;
  bool consistency_on_labeled = false;
  // Runs arm C-E with the subclass head excluded from every loss term.
  bool scs_detached = false;
  std::size_t eval_every = 0;
  bool eval_student = false;
  metrics::Averaging averaging = metrics::Averaging::micro;

  std::size_t ablation_seeds = 3;
  std::string ablation_arms = "ABCDE";

  void set(const std::string& key, const std::string& value);
  void validate() const;
  std::string to_text() const;

  synthdata::SceneSpec scene() const;
  objectives::LossWeights loss_weights() const;
  segnet::ArchSpec arch(std::size_t scs_classes) const;
  std::size_t labeled_per_batch() const { return batch_size / 2; }
  std::size_t unlabeled_per_batch() const { return batch_size - batch_size / 2; }
};

RunConfig parse_config(const std::string& text, const std::string& source = "config");
RunConfig load_config(const std::filesystem::path& path);

}  // namespace bsr::harness

#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bsr/balclust/subclass.hpp"
#include "bsr/harness/config.hpp"
#include "bsr/metrics/metrics.hpp"
#include "bsr/objectives/losses.hpp"
#include "bsr/segnet/model.hpp"
#include "bsr/synthdata/scene.hpp"

namespace bsr::harness {

struct EvalSnapshot {
  std::size_t iteration = 0;
  metrics::EvalReport report;
};

struct TrainLog {
  std::vector<objectives::LossBreakdown> records;  // one per iteration, in order
  std::vector<EvalSnapshot> snapshots;
  double wall_seconds = 0.0;
  std::string config_echo;
};

std::string log_csv(const TrainLog& log);

// Draws indices from 0..size-1 in seeded permutations, reshuffling at the
// start of every pass.
class CyclingSampler {
 public:
  CyclingSampler(std::size_t size, std::uint64_t seed);
  std::size_t next();

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_;
  std::mt19937_64 rng_;
};

struct Phase1Result {
  segnet::ModelParams backbone;
  std::vector<double> seg_loss;  // per iteration
};

// Supervised single-decoder training on the labeled split.
Phase1Result phase1_train(const RunConfig& cfg, const synthdata::DatasetSplit& split);

// Balanced (or plain, for arm D) subclass generation from a trained backbone.
// Throws unless parent_of(y_Lsub) reproduces y_L on every labeled image.
balclust::SubclassResult phase1_cluster(const RunConfig& cfg, const synthdata::DatasetSplit& split,
                                        const segnet::ModelParams& backbone, bool balanced);

struct Phase2Result {
  segnet::ModelParams student;
  segnet::TeacherState teacher;
  TrainLog log;
};

// Mean-teacher training for one ablation arm. `subclasses` is required for
// arms C-E; `backbone` seeds the student's encoder and MoS decoder when
// cfg.warm_start is set.
Phase2Result phase2_train(const RunConfig& cfg, const synthdata::DatasetSplit& split,
                          const balclust::SubclassResult* subclasses, const segnet::ModelParams* backbone);

metrics::EvalReport evaluate_split(const RunConfig& cfg, const segnet::ModelParams& params,
                                   const std::vector<synthdata::LabeledSample>& samples);

// Files under the run directory.
std::filesystem::path backbone_path(const RunConfig& cfg);
std::filesystem::path subclass_dir(const RunConfig& cfg, bool balanced);
std::filesystem::path phase2_dir(const RunConfig& cfg, Arm arm);

void save_backbone(const RunConfig& cfg, const segnet::ModelParams& backbone);
segnet::ModelParams load_backbone(const RunConfig& cfg);
void save_subclasses(const std::filesystem::path& dir, const synthdata::DatasetSplit& split,
                     const balclust::SubclassResult& result);
balclust::SubclassResult load_subclasses(const std::filesystem::path& dir, const synthdata::DatasetSplit& split);

void save_phase2(const std::filesystem::path& dir, const Phase2Result& result);
// Loads the student or teacher MoS path from a phase-2 (or backbone) checkpoint.
segnet::ModelParams load_eval_params(const RunConfig& cfg, const std::filesystem::path& checkpoint, bool student);

// Writes metrics.csv and summary.json into dir.
void write_report(const std::filesystem::path& dir, const metrics::EvalReport& report, const RunConfig& cfg,
                  const std::string& what);

}  // namespace bsr::harness

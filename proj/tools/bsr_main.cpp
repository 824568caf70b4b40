// Command-line driver: dataset generation, Phase I, clustering, Phase II,
// evaluation and the ablation runner.
#include <CLI11.hpp>
#include <iostream>
#include <json.hpp>

#include "bsr/binary_io.hpp"
#include "bsr/errors.hpp"
#include "bsr/harness/ablation.hpp"
#include "bsr/harness/config.hpp"
#include "bsr/harness/pipeline.hpp"
#include "bsr/synthdata/dataset_io.hpp"

namespace {

using namespace bsr;
using namespace bsr::harness;

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

RunConfig make_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void log_line(const std::string& s) { std::cerr << "[bsr] " << s << "\n"; }

void echo_config(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.run_dir);
  binio::write_text_atomic(cfg.run_dir / "config.txt", cfg.to_text());
}

int cmd_gen_data(const RunConfig& cfg) {
  const auto data = synthdata::build_split(cfg.scene(), cfg.n, cfg.m, cfg.n_test, cfg.data_seed);
  synthdata::save_dataset(cfg.data_dir, data);
  log_line("wrote " + std::to_string(cfg.n + cfg.m + cfg.n_test) + " samples to " + cfg.data_dir.string());
  return 0;
}

int cmd_phase1(const RunConfig& cfg) {
  echo_config(cfg);
  const auto split = synthdata::load_split(cfg.data_dir);
  const Phase1Result res = phase1_train(cfg, split);
  save_backbone(cfg, res.backbone);
  std::string log = "iteration,seg_loss\n";
  for (std::size_t i = 0; i < res.seg_loss.size(); ++i) log += std::to_string(i) + "," + std::to_string(res.seg_loss[i]) + "\n";
  binio::write_text_atomic(cfg.run_dir / "phase1" / "log.csv", log);
  log_line("backbone written to " + backbone_path(cfg).string());
  return 0;
}

int cmd_cluster(const RunConfig& cfg) {
  const auto split = synthdata::load_split(cfg.data_dir);
  const auto backbone = load_backbone(cfg);
  for (bool balanced : {true, false}) {
    const auto res = phase1_cluster(cfg, split, backbone, balanced);
    for (const auto& w : res.warnings) log_line("warning: " + w);
    save_subclasses(subclass_dir(cfg, balanced), split, res);
    log_line(std::string(balanced ? "balanced" : "plain") + " subclasses: K_sub=" + std::to_string(res.map.k_sub()) +
             ", max/min foreground population ratio " + std::to_string(balclust::foreground_balance_ratio(res)));
  }
  return 0;
}

int cmd_phase2(RunConfig cfg, const std::string& arm) {
  if (!arm.empty()) cfg.arm = parse_arm(arm);
  echo_config(cfg);
  const auto split = synthdata::load_split(cfg.data_dir);
  std::optional<balclust::SubclassResult> sub;
  if (cfg.arm == Arm::C || cfg.arm == Arm::D || cfg.arm == Arm::E) {
    sub = load_subclasses(subclass_dir(cfg, cfg.arm != Arm::D), split);
  }
  std::optional<segnet::ModelParams> backbone;
  if (cfg.warm_start) backbone = load_backbone(cfg);
  const Phase2Result res = phase2_train(cfg, split, sub ? &*sub : nullptr, backbone ? &*backbone : nullptr);
  const auto dir = phase2_dir(cfg, cfg.arm);
  save_phase2(dir, res);
  const auto report = evaluate_split(cfg, cfg.eval_student ? res.student : res.teacher.params, split.test);
  write_report(dir, report, cfg, cfg.eval_student ? "student" : "teacher");
  log_line(std::string("arm ") + arm_letter(cfg.arm) + ": mean Dice " + std::to_string(report.mean_dice) + " in " +
           std::to_string(res.log.wall_seconds) + " s; outputs in " + dir.string());
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, bool student) {
  const auto split = synthdata::load_split(cfg.data_dir);
  const auto params = load_eval_params(cfg, checkpoint, student || cfg.eval_student);
  const auto report = evaluate_split(cfg, params, split.test);
  const auto dir = std::filesystem::path(checkpoint).parent_path() / "eval";
  write_report(dir, report, cfg, student || cfg.eval_student ? "student" : "teacher");
  std::cout << metrics::report_csv(report);
  std::cout << "mean_dice," << report.mean_dice << "\nmean_ji," << report.mean_ji << "\n";
  return 0;
}

int cmd_ablate(const RunConfig& cfg) {
  echo_config(cfg);
  const auto split = synthdata::load_split(cfg.data_dir);
  const AblationResult res = ablate(cfg, split, log_line);
  const std::string table = ablation_table(res, cfg.num_classes);
  const auto dir = cfg.run_dir / "ablation";
  std::filesystem::create_directories(dir);
  binio::write_text_atomic(dir / "ablation.csv", table);
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& a : res.arms) {
    arms.push_back({{"arm", std::string(1, arm_letter(a.arm))},
                    {"ok", a.ok},
                    {"error", a.error},
                    {"mean_dice", a.mean_dice()},
                    {"small_mean_dice", a.mean_small_dice()},
                    {"small_dice_per_seed", a.small_dice_per_seed},
                    {"seconds", a.seconds}});
  }
  const nlohmann::json summary{{"smallest_classes", res.smallest_classes},
                               {"balanced_ratio_per_seed", res.balanced_ratio_per_seed},
                               {"plain_ratio_per_seed", res.plain_ratio_per_seed},
                               {"arms", arms}};
  binio::write_text_atomic(dir / "summary.json", summary.dump(1) + "\n");
  std::cout << table;
  bool all_ok = true;
  for (const auto& a : res.arms) all_ok = all_ok && a.ok;
  return all_ok ? 0 : kRuntimeError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Balanced subclass regularization for semi-supervised segmentation"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "key = value config file");
  app.add_option("--set", overrides, "override a config key (key=value), repeatable");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* p1 = app.add_subcommand("phase1", "train the Phase-I backbone");
  auto* cl = app.add_subcommand("cluster", "generate balanced and plain subclass labels");
  auto* p2 = app.add_subcommand("phase2", "mean-teacher training for one ablation arm");
  std::string arm;
  p2->add_option("--arm", arm, "ablation arm A-E (default: config)");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  std::string checkpoint;
  bool student = false;
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_flag("--student", student, "evaluate the student instead of the teacher");
  auto* ab = app.add_subcommand("ablate", "run arms A-E over several seeds");
  for (auto* sub : {gen, p1, cl, p2, ev, ab}) {
    sub->add_option("--config", config_path, "key = value config file");
    sub->add_option("--set", overrides, "override a config key (key=value), repeatable");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  RunConfig cfg;
  try {
    cfg = make_config(config_path, overrides);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsageError;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(cfg);
    if (p1->parsed()) return cmd_phase1(cfg);
    if (cl->parsed()) return cmd_cluster(cfg);
    if (p2->parsed()) return cmd_phase2(cfg, arm);
    if (ev->parsed()) return cmd_eval(cfg, checkpoint, student);
    if (ab->parsed()) return cmd_ablate(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}

#include "bsr/harness/ablation.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>
#include <optional>

#include "bsr/balclust/census.hpp"
#include "bsr/harness/pipeline.hpp"

namespace bsr::harness {
namespace {

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::vector<double> ArmResult::mean_class_dice() const {
  if (dice_per_seed.empty()) return {};
  std::vector<double> out(dice_per_seed.front().size(), 0.0);
  for (const auto& seed : dice_per_seed) {
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += seed[c] / static_cast<double>(dice_per_seed.size());
  }
  return out;
}

double ArmResult::mean_dice() const { return mean(mean_class_dice()); }

double ArmResult::mean_small_dice() const { return mean(small_dice_per_seed); }

std::vector<std::size_t> smallest_classes(const std::vector<synthdata::LabeledSample>& samples,
                                          std::size_t num_classes, std::size_t count) {
  std::vector<LabelMap> labels;
  for (const auto& s : samples) labels.push_back(s.labels);
  const auto cen = balclust::census(labels, num_classes);
  std::vector<std::size_t> classes(num_classes);
  std::iota(classes.begin(), classes.end(), std::size_t{1});
  std::stable_sort(classes.begin(), classes.end(),
                   [&](std::size_t a, std::size_t b) { return cen.pixel_count[a] < cen.pixel_count[b]; });
  classes.resize(std::min(count, classes.size()));
  std::sort(classes.begin(), classes.end());
  return classes;
}

AblationResult ablate(const RunConfig& cfg, const synthdata::DatasetSplit& split,
                      const std::function<void(const std::string&)>& progress) {
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  AblationResult out;
  out.smallest_classes = smallest_classes(split.test, cfg.num_classes, 2);
  for (char letter : cfg.ablation_arms) {
    ArmResult a;
    a.arm = parse_arm(std::string(1, letter));
    out.arms.push_back(a);
  }

  const bool need_balanced = cfg.ablation_arms.find_first_of("CE") != std::string::npos;
  const bool need_plain = cfg.ablation_arms.find('D') != std::string::npos;

  for (std::size_t r = 0; r < cfg.ablation_seeds; ++r) {
    RunConfig rc = cfg;
    rc.init_seed = cfg.init_seed + r;
    rc.train_seed = cfg.train_seed + r;
    rc.cluster_seed = cfg.cluster_seed + r;
    say("replicate " + std::to_string(r) + ": phase 1");
    const Phase1Result p1 = phase1_train(rc, split);
    std::optional<balclust::SubclassResult> balanced, plain;
    if (need_balanced) {
      balanced = phase1_cluster(rc, split, p1.backbone, true);
      out.balanced_ratio_per_seed.push_back(balclust::foreground_balance_ratio(*balanced));
    }
    if (need_plain) {
      plain = phase1_cluster(rc, split, p1.backbone, false);
      out.plain_ratio_per_seed.push_back(balclust::foreground_balance_ratio(*plain));
    }

    for (ArmResult& arm : out.arms) {
      if (!arm.ok) continue;
      rc.arm = arm.arm;
      say("replicate " + std::to_string(r) + ": arm " + std::string(1, arm_letter(arm.arm)));
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const balclust::SubclassResult* sub = arm.arm == Arm::D ? &*plain
                                              : (arm.arm == Arm::C || arm.arm == Arm::E) ? &*balanced
                                                                                          : nullptr;
        const Phase2Result p2 = phase2_train(rc, split, sub, &p1.backbone);
        const auto& eval_params = cfg.eval_student ? p2.student : p2.teacher.params;
        const metrics::EvalReport rep = evaluate_split(rc, eval_params, split.test);
        std::vector<double> dice;
        for (const auto& s : rep.per_class) dice.push_back(s.dice);
        double small = 0.0;
        for (std::size_t c : out.smallest_classes) small += dice[c - 1] / static_cast<double>(out.smallest_classes.size());
        arm.dice_per_seed.push_back(std::move(dice));
        arm.small_dice_per_seed.push_back(small);
      } catch (const std::exception& e) {
        arm.ok = false;
        arm.error = e.what();
        say(std::string("arm ") + arm_letter(arm.arm) + " failed: " + e.what());
      }
      arm.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  }
  return out;
}

std::string ablation_table(const AblationResult& result, std::size_t num_classes) {
  std::string out = "arm";
  for (std::size_t c = 1; c <= num_classes; ++c) out += ",dice_c" + std::to_string(c);
  out += ",mean_dice,small_mean_dice,status\n";
  char buf[64];
  for (const ArmResult& arm : result.arms) {
    out += std::string(1, arm_letter(arm.arm));
    const auto per_class = arm.mean_class_dice();
    for (std::size_t c = 0; c < num_classes; ++c) {
      std::snprintf(buf, sizeof buf, ",%.2f", arm.ok && c < per_class.size() ? 100.0 * per_class[c] : 0.0);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, ",%.2f,%.2f,", arm.ok ? 100.0 * arm.mean_dice() : 0.0,
                  arm.ok ? 100.0 * arm.mean_small_dice() : 0.0);
    out += buf;
    out += arm.ok ? "ok" : "failed";
    out += "\n";
  }
  return out;
}

}  // namespace bsr::harness

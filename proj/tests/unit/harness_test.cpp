#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "bsr/binary_io.hpp"
#include "bsr/errors.hpp"
#include "bsr/harness/ablation.hpp"
#include "bsr/harness/pipeline.hpp"
#include "bsr/synthdata/dataset_io.hpp"

namespace h = bsr::harness;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("bsr_harness_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

h::RunConfig tiny_config(const fs::path& root) {
  h::RunConfig c;
  c.data_dir = root / "data";
  c.run_dir = root / "run";
  c.n = 2;
  c.m = 4;
  c.n_test = 2;
  c.levels = 2;
  c.base_channels = 4;
  c.batch_size = 4;
  c.phase1_iters = 6;
  c.total_iters = 8;
  c.max_points_per_class = 400;
  return c;
}

bsr::synthdata::DatasetSplit make_split(const h::RunConfig& c) {
  return bsr::synthdata::build_split(c.scene(), c.n, c.m, c.n_test, c.data_seed).split;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(Config, ParsesKeysCommentsAndRejectsUnknown) {
  const auto c = h::parse_config("# demo\nk = 3\nalpha=0.25  # trailing\narm = D\nmap_mode = hard-argmax\n");
  EXPECT_EQ(c.num_classes, 3u);
  EXPECT_EQ(c.alpha, 0.25);
  EXPECT_EQ(c.arm, h::Arm::D);
  EXPECT_EQ(c.map_mode, bsr::balclust::MapMode::hard_argmax);
  EXPECT_EQ(h::parse_config("").total_iters, 2000u);

  try {
    h::parse_config("k = 4\nbogus = 1\n", "my.cfg");
    FAIL();
  } catch (const bsr::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("my.cfg:2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
  EXPECT_THROW(h::parse_config("height = 30"), bsr::ConfigError);
  EXPECT_THROW(h::parse_config("alpha = x"), bsr::ConfigError);
  EXPECT_THROW(h::parse_config("arm = F"), bsr::ConfigError);
  EXPECT_THROW(h::parse_config("just words"), bsr::ConfigError);
  EXPECT_THROW(h::load_config("/nonexistent/cfg"), bsr::ConfigError);

  // The echo parses back to the same configuration.
  h::RunConfig c2 = c;
  c2.beta2 = 0.125;
  EXPECT_EQ(h::parse_config(c2.to_text()).to_text(), c2.to_text());
}

TEST(Config, BatchHalves) {
  h::RunConfig c;
  EXPECT_EQ(c.labeled_per_batch() + c.unlabeled_per_batch(), c.batch_size);
  c.batch_size = 5;
  EXPECT_EQ(c.labeled_per_batch() + c.unlabeled_per_batch(), 5u);
}

TEST(Sampler, VisitsEveryIndexOncePerPass) {
  h::CyclingSampler s(7, 11), t(7, 11);
  std::vector<std::size_t> first;
  for (int pass = 0; pass < 3; ++pass) {
    std::set<std::size_t> seen;
    for (int i = 0; i < 7; ++i) {
      const auto v = s.next();
      EXPECT_EQ(v, t.next());
      seen.insert(v);
      if (pass == 0) first.push_back(v);
    }
    EXPECT_EQ(seen.size(), 7u);
  }
}

class Pipeline : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fresh_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    cfg_ = tiny_config(root_);
    split_ = make_split(cfg_);
  }
  fs::path root_;
  h::RunConfig cfg_;
  bsr::synthdata::DatasetSplit split_;
};

TEST_F(Pipeline, Phase1ReducesLossAndClusteringIsLossless) {
  cfg_.phase1_iters = 40;
  const auto p1 = h::phase1_train(cfg_, split_);
  ASSERT_EQ(p1.seg_loss.size(), 40u);
  EXPECT_LT(p1.seg_loss.back(), p1.seg_loss.front());
  const auto sub = h::phase1_cluster(cfg_, split_, p1.backbone, true);
  ASSERT_EQ(sub.labels.size(), 2u);
  std::size_t total_k = 0;
  for (std::size_t c = 1; c <= cfg_.num_classes; ++c) total_k += sub.map.counts[c];
  EXPECT_EQ(sub.map.k_sub(), total_k);
  const auto again = h::phase1_cluster(cfg_, split_, p1.backbone, true);
  EXPECT_EQ(again.labels, sub.labels);

  bsr::synthdata::DatasetSplit empty = split_;
  empty.labeled.clear();
  EXPECT_THROW(h::phase1_train(cfg_, empty), std::invalid_argument);
}

TEST_F(Pipeline, ArmAHasNoConsistencyAndEHasWarmup) {
  cfg_.arm = h::Arm::A;
  const auto a = h::phase2_train(cfg_, split_, nullptr, nullptr);
  ASSERT_EQ(a.log.records.size(), cfg_.total_iters);
  for (const auto& r : a.log.records) {
    EXPECT_EQ(r.con_model, 0.0);
    EXPECT_EQ(r.con_task, 0.0);
    EXPECT_EQ(r.total, r.sup);
  }

  const auto p1 = h::phase1_train(cfg_, split_);
  const auto sub = h::phase1_cluster(cfg_, split_, p1.backbone, true);
  cfg_.arm = h::Arm::E;
  const auto e = h::phase2_train(cfg_, split_, &sub, &p1.backbone);
  for (std::size_t i = 0; i < e.log.records.size(); ++i) {
    EXPECT_EQ(e.log.records[i].active_beta2, i < 2 ? 0.0 : 0.5) << i;
    EXPECT_GT(e.log.records[i].con_task, 0.0);
  }
  // The teacher never receives gradients.
  for (const auto* p : e.teacher.params.parameters()) {
    for (double g : p->grad.storage()) ASSERT_EQ(g, 0.0) << p->name;
  }
  EXPECT_THROW(h::phase2_train(cfg_, split_, nullptr, &p1.backbone), std::invalid_argument);
}

TEST_F(Pipeline, ArmEReducesToArmB) {
  const auto p1 = h::phase1_train(cfg_, split_);
  const auto sub = h::phase1_cluster(cfg_, split_, p1.backbone, true);
  h::RunConfig b = cfg_, e = cfg_;
  b.arm = h::Arm::B;
  e.arm = h::Arm::E;
  e.alpha = 0.0;
  e.beta2 = 0.0;
  e.scs_detached = true;
  const auto rb = h::phase2_train(b, split_, nullptr, &p1.backbone);
  const auto re = h::phase2_train(e, split_, &sub, &p1.backbone);
  ASSERT_EQ(rb.log.records.size(), re.log.records.size());
  for (std::size_t i = 0; i < rb.log.records.size(); ++i) {
    EXPECT_EQ(rb.log.records[i].sup, re.log.records[i].sup) << i;
    EXPECT_EQ(rb.log.records[i].con_model, re.log.records[i].con_model) << i;
    EXPECT_EQ(rb.log.records[i].total, re.log.records[i].total) << i;
  }
}

TEST_F(Pipeline, DeterministicReportsAndCheckpointRoundTrip) {
  cfg_.arm = h::Arm::B;
  const auto r1 = h::phase2_train(cfg_, split_, nullptr, nullptr);
  const auto r2 = h::phase2_train(cfg_, split_, nullptr, nullptr);
  EXPECT_EQ(h::log_csv(r1.log), h::log_csv(r2.log));

  const auto d1 = root_ / "one", d2 = root_ / "two";
  h::write_report(d1, h::evaluate_split(cfg_, r1.teacher.params, split_.test), cfg_, "teacher");
  h::write_report(d2, h::evaluate_split(cfg_, r2.teacher.params, split_.test), cfg_, "teacher");
  EXPECT_EQ(slurp(d1 / "metrics.csv"), slurp(d2 / "metrics.csv"));
  EXPECT_FALSE(slurp(d1 / "metrics.csv").empty());

  const auto ckdir = root_ / "ck";
  h::save_phase2(ckdir, r1);
  const auto teacher = h::load_eval_params(cfg_, ckdir / "checkpoint.bsrn", false);
  const auto student = h::load_eval_params(cfg_, ckdir / "checkpoint.bsrn", true);
  const auto before = h::evaluate_split(cfg_, r1.teacher.params, split_.test);
  const auto after = h::evaluate_split(cfg_, teacher, split_.test);
  EXPECT_EQ(bsr::metrics::report_csv(before), bsr::metrics::report_csv(after));
  EXPECT_EQ(bsr::metrics::report_csv(h::evaluate_split(cfg_, r1.student, split_.test)),
            bsr::metrics::report_csv(h::evaluate_split(cfg_, student, split_.test)));
  EXPECT_THROW(h::load_eval_params(cfg_, root_ / "missing.bsrn", false), bsr::IoError);
}

TEST_F(Pipeline, TrainingNeverOpensUnlabeledGroundTruth) {
  bsr::synthdata::save_dataset(cfg_.data_dir, bsr::synthdata::build_split(cfg_.scene(), cfg_.n, cfg_.m,
                                                                          cfg_.n_test, cfg_.data_seed));
  bsr::synthdata::io_audit::clear();
  const auto split = bsr::synthdata::load_split(cfg_.data_dir);
  const auto p1 = h::phase1_train(cfg_, split);
  const auto sub = h::phase1_cluster(cfg_, split, p1.backbone, true);
  h::save_subclasses(h::subclass_dir(cfg_, true), split, sub);
  const auto loaded = h::load_subclasses(h::subclass_dir(cfg_, true), split);
  EXPECT_EQ(loaded.labels, sub.labels);
  h::phase2_train(cfg_, split, &loaded, &p1.backbone);
  const auto opened = bsr::synthdata::io_audit::opened();
  EXPECT_FALSE(opened.empty());
  for (const auto& f : opened) EXPECT_EQ(f.find(".oracle"), std::string::npos) << f;
}

TEST_F(Pipeline, AblationTableHasFiveRows) {
  cfg_.ablation_seeds = 1;
  const auto res = h::ablate(cfg_, split_);
  ASSERT_EQ(res.arms.size(), 5u);
  for (const auto& a : res.arms) EXPECT_TRUE(a.ok) << a.error;
  const std::string table = h::ablation_table(res, cfg_.num_classes);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 6);
  EXPECT_EQ(res.smallest_classes.size(), 2u);
}

#ifdef BSR_CLI
namespace {
int run_cli(const std::string& args) {
  const int status = std::system((std::string(BSR_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}
}  // namespace

TEST(Cli, ExitCodes) {
  const auto root = fresh_dir("cli");
  const std::string sets = " --set data_dir=" + (root / "d").string() + " --set run_dir=" + (root / "r").string();
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("gen-data --config /nonexistent.cfg"), 1);
  EXPECT_EQ(run_cli("gen-data --set nonsense=1"), 1);
  EXPECT_EQ(run_cli("phase2 --arm Q" + sets), 1);
  EXPECT_EQ(run_cli("phase1" + sets), 2);  // no dataset yet
  EXPECT_EQ(run_cli("gen-data --set n=2 --set m=4 --set n_test=2" + sets), 0);
  EXPECT_EQ(run_cli("eval --checkpoint " + (root / "none.bsrn").string() + " --set n=2 --set m=4 --set n_test=2" + sets),
            2);
}
#endif

#include "bsr/harness/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <numeric>

#include "bsr/binary_io.hpp"
#include "bsr/errors.hpp"
#include "bsr/gradcore/sgd.hpp"
#include "bsr/seeding.hpp"
#include "bsr/segnet/checkpoint.hpp"
#include "bsr/synthdata/dataset_io.hpp"

namespace bsr::harness {
namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kTagPhase1Sampler = 0x9151;
constexpr std::uint64_t kTagLabeledSampler = 0x1ab;
constexpr std::uint64_t kTagUnlabeledSampler = 0x0b1ab;
constexpr std::uint64_t kTagStudentNoise = 0x57d;
constexpr std::uint64_t kTagTeacherNoise = 0x7ea;
constexpr std::uint64_t kTagPhase1Noise = 0x9152;

segnet::Perturbation noise(const RunConfig& cfg, std::uint64_t tag, std::size_t iteration, std::size_t slot) {
  return segnet::Perturbation{cfg.noise_sigma, cfg.noise_clip, derive_seed(cfg.train_seed, {tag, iteration, slot})};
}

bool uses_subclasses(const RunConfig& cfg) { return cfg.arm == Arm::C || cfg.arm == Arm::D || cfg.arm == Arm::E; }

void copy_backbone(const segnet::ModelParams& backbone, segnet::ModelParams& student) {
  segnet::NamedTensors t;
  segnet::append_params(t, "backbone", backbone);
  segnet::ModelParams mos_only = student;
  mos_only.decoder_scs.reset();
  segnet::assign_params(t, "backbone", mos_only, "phase-1 backbone");
  student.encoder = std::move(mos_only.encoder);
  student.decoder_mos = std::move(mos_only.decoder_mos);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

CyclingSampler::CyclingSampler(std::size_t size, std::uint64_t seed) : order_(size), pos_(size), rng_(seed) {
  if (size == 0) throw std::invalid_argument("CyclingSampler: empty pool");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
}

std::size_t CyclingSampler::next() {
  if (pos_ == order_.size()) {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  return order_[pos_++];
}

std::string log_csv(const TrainLog& log) {
  std::string out = "iteration,sup,con_model,con_task,total,beta1,active_beta2\n";
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    const auto& r = log.records[i];
    out += std::to_string(i) + "," + fmt_double(r.sup) + "," + fmt_double(r.con_model) + "," +
           fmt_double(r.con_task) + "," + fmt_double(r.total) + "," + fmt_double(r.beta1) + "," +
           fmt_double(r.active_beta2) + "\n";
  }
  return out;
}

Phase1Result phase1_train(const RunConfig& cfg, const synthdata::DatasetSplit& split) {
  if (split.labeled.empty()) throw std::invalid_argument("phase1_train: the labeled set is empty");
  cfg.validate();
  Phase1Result res{segnet::init_params(cfg.arch(0), cfg.init_seed), {}};
  segnet::ModelParams& net = res.backbone;
  OptimizerState opt{cfg.learning_rate, cfg.momentum, {}};
  CyclingSampler sampler(split.labeled.size(), derive_seed(cfg.train_seed, {kTagPhase1Sampler}));
  const std::size_t nl = cfg.labeled_per_batch();
  const double scale = 1.0 / static_cast<double>(nl);
  auto params = net.parameters();
  segnet::ForwardTape tape;

  for (std::size_t it = 0; it < cfg.phase1_iters; ++it) {
    double loss = 0.0;
    for (std::size_t b = 0; b < nl; ++b) {
      const auto& s = split.labeled[sampler.next()];
      // Same input noise as Phase II: a backbone fitted to clean inputs only
      // is too sharp to warm-start the perturbed training without diverging.
      const auto pn = noise(cfg, kTagPhase1Noise, it, b);
      const auto preds = segnet::forward(net, s.image, segnet::Heads::mos, &pn, tape);
      objectives::LossValue l = objectives::seg_loss(preds.mos, s.labels);
      loss += l.value * scale;
      l.grad *= scale;
      segnet::backward(net, tape, &l.grad, nullptr);
    }
    if (!std::isfinite(loss)) {
      throw NumericError("phase1_train: non-finite loss at iteration " + std::to_string(it));
    }
    res.seg_loss.push_back(loss);
    clip_grad_norm(params, cfg.grad_clip);
    sgd_update(params, opt);
  }
  return res;
}

balclust::SubclassResult phase1_cluster(const RunConfig& cfg, const synthdata::DatasetSplit& split,
                                        const segnet::ModelParams& backbone, bool balanced) {
  std::vector<Tensor> images;
  std::vector<LabelMap> labels;
  for (const auto& s : split.labeled) {
    images.push_back(s.image);
    labels.push_back(s.labels);
  }
  balclust::SubclassOptions opt;
  opt.max_points_per_class = cfg.max_points_per_class;
  opt.seed = cfg.cluster_seed;
  opt.max_iters = cfg.cluster_max_iters;
  opt.split_background = cfg.split_background;
  opt.balanced = balanced;
  balclust::SubclassResult res = balclust::generate_subclass_labels(images, labels, backbone, cfg.num_classes, opt);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (balclust::parent_labels(res.labels[i], res.map) != labels[i]) {
      throw std::runtime_error("phase1_cluster: subclass labels of image " + std::to_string(split.labeled[i].id) +
                               " do not map back onto its class labels");
    }
  }
  return res;
}

Phase2Result phase2_train(const RunConfig& cfg, const synthdata::DatasetSplit& split,
                          const balclust::SubclassResult* subclasses, const segnet::ModelParams* backbone) {
  cfg.validate();
  if (split.labeled.empty()) throw std::invalid_argument("phase2_train: the labeled set is empty");
  const bool with_scs = uses_subclasses(cfg);
  if (with_scs && !subclasses) {
    throw std::invalid_argument(std::string("phase2_train: arm ") + arm_letter(cfg.arm) + " needs subclass labels");
  }
  if (with_scs && subclasses->labels.size() != split.labeled.size()) {
    throw std::invalid_argument("phase2_train: subclass labels do not cover the labeled set");
  }
  const bool semi = cfg.arm != Arm::A;
  if (semi && split.unlabeled.empty()) throw std::invalid_argument("phase2_train: the unlabeled set is empty");
  // The subclass head takes part in the losses unless detached.
  const bool scs_active = with_scs && !cfg.scs_detached;
  const bool task_term = scs_active && (cfg.arm == Arm::D || cfg.arm == Arm::E);
  const segnet::Heads student_heads = scs_active ? segnet::Heads::both : segnet::Heads::mos;

  const auto weights = cfg.loss_weights();
  const auto arch = cfg.arch(with_scs ? subclasses->map.k_sub() + 1 : 0);
  Phase2Result res{segnet::init_params(arch, cfg.init_seed), {}, {}};
  if (cfg.warm_start && backbone) copy_backbone(*backbone, res.student);
  res.teacher = segnet::make_teacher(res.student, cfg.ema_decay);
  res.log.config_echo = cfg.to_text();

  OptimizerState opt{cfg.learning_rate, cfg.momentum, {}};
  CyclingSampler labeled(split.labeled.size(), derive_seed(cfg.train_seed, {kTagLabeledSampler}));
  std::optional<CyclingSampler> unlabeled;
  if (semi) unlabeled.emplace(split.unlabeled.size(), derive_seed(cfg.train_seed, {kTagUnlabeledSampler}));

  const std::size_t nl = cfg.labeled_per_batch();
  const std::size_t nu = semi ? cfg.unlabeled_per_batch() : 0;
  const std::size_t n_con = nu + (semi && cfg.consistency_on_labeled ? nl : 0);
  auto params = res.student.parameters();
  segnet::ForwardTape tape;
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t it = 0; it < cfg.total_iters; ++it) {
    const double beta2 = (task_term && cfg.arm != Arm::C) ? weights.active_beta2(it) : 0.0;
    double sup = 0.0, con_model = 0.0, con_task = 0.0;

    // Consistency terms on one input; adds student gradients scaled by 1/n_con.
    auto consistency = [&](const Tensor& image, std::size_t slot, const segnet::PredictionMaps* prior_student,
                           Tensor* extra_mos, Tensor* extra_scs) {
      const double scale = 1.0 / static_cast<double>(n_con);
      const auto pt = noise(cfg, kTagTeacherNoise, it, slot);
      const auto teacher_preds = segnet::forward(res.teacher.params, image, student_heads, &pt);
      segnet::PredictionMaps student_preds;
      if (prior_student) {
        student_preds = *prior_student;
      } else {
        const auto ps = noise(cfg, kTagStudentNoise, it, slot);
        student_preds = segnet::forward(res.student, image, student_heads, &ps, tape);
      }
      objectives::HeadLoss mc = objectives::model_consistency(student_preds, teacher_preds);
      con_model += mc.value * scale;
      Tensor g_mos = std::move(mc.grad_mos);
      g_mos *= weights.beta1 * scale;
      Tensor g_scs;
      if (!mc.grad_scs.empty()) {
        g_scs = std::move(mc.grad_scs);
        g_scs *= weights.beta1 * scale;
      }
      if (task_term) {
        objectives::LossValue tc =
            objectives::task_consistency(teacher_preds.scs, student_preds.mos, subclasses->map, cfg.map_mode);
        con_task += tc.value * scale;
        if (beta2 > 0.0) {
          tc.grad *= beta2 * scale;
          g_mos += tc.grad;
        }
      }
      if (extra_mos) {
        *extra_mos += g_mos;
        if (extra_scs && !g_scs.empty()) *extra_scs += g_scs;
        return;
      }
      segnet::backward(res.student, tape, &g_mos, g_scs.empty() ? nullptr : &g_scs);
    };

    for (std::size_t b = 0; b < nl; ++b) {
      const std::size_t idx = labeled.next();
      const auto& s = split.labeled[idx];
      const auto ps = noise(cfg, kTagStudentNoise, it, b);
      const auto preds = segnet::forward(res.student, s.image, student_heads, &ps, tape);
      const LabelMap* sub = scs_active ? &subclasses->labels[idx] : nullptr;
      objectives::HeadLoss l = objectives::sup_loss(preds, s.labels, sub, weights.alpha);
      const double scale = 1.0 / static_cast<double>(nl);
      sup += l.value * scale;
      l.grad_mos *= scale;
      if (!l.grad_scs.empty()) l.grad_scs *= scale;
      if (semi && cfg.consistency_on_labeled) consistency(s.image, b, &preds, &l.grad_mos, &l.grad_scs);
      segnet::backward(res.student, tape, &l.grad_mos, l.grad_scs.empty() ? nullptr : &l.grad_scs);
    }
    for (std::size_t b = 0; b < nu; ++b) {
      consistency(split.unlabeled[unlabeled->next()].image, nl + b, nullptr, nullptr, nullptr);
    }

    objectives::LossBreakdown rec = objectives::total_loss(sup, con_model, con_task, weights, it);
    rec.active_beta2 = beta2;
    rec.total = sup + weights.beta1 * con_model + beta2 * con_task;
    if (!std::isfinite(rec.total)) {
      throw NumericError(std::string("phase2_train (arm ") + arm_letter(cfg.arm) +
                         "): non-finite loss at iteration " + std::to_string(it));
    }
    res.log.records.push_back(rec);
    clip_grad_norm(params, cfg.grad_clip);
    sgd_update(params, opt);
    segnet::ema_update(res.teacher, res.student);

    if (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) {
      res.log.snapshots.push_back({it + 1, evaluate_split(cfg, res.teacher.params, split.test)});
    }
  }
  res.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

metrics::EvalReport evaluate_split(const RunConfig& cfg, const segnet::ModelParams& params,
                                   const std::vector<synthdata::LabeledSample>& samples) {
  std::vector<Tensor> images;
  std::vector<LabelMap> labels;
  for (const auto& s : samples) {
    images.push_back(s.image);
    labels.push_back(s.labels);
  }
  return metrics::evaluate_model(params, images, labels, cfg.num_classes, cfg.averaging);
}

std::filesystem::path backbone_path(const RunConfig& cfg) { return cfg.run_dir / "phase1" / "backbone.bsrn"; }

std::filesystem::path subclass_dir(const RunConfig& cfg, bool balanced) {
  return cfg.run_dir / (balanced ? "subclass" : "subclass_plain");
}

std::filesystem::path phase2_dir(const RunConfig& cfg, Arm arm) {
  return cfg.run_dir / (std::string("phase2_") + arm_letter(arm));
}

void save_backbone(const RunConfig& cfg, const segnet::ModelParams& backbone) {
  std::filesystem::create_directories(backbone_path(cfg).parent_path());
  segnet::NamedTensors t;
  segnet::append_params(t, "backbone", backbone);
  segnet::save_tensors(backbone_path(cfg), t);
}

segnet::ModelParams load_backbone(const RunConfig& cfg) {
  const auto path = backbone_path(cfg);
  if (!std::filesystem::exists(path)) throw IoError(path.string(), "backbone checkpoint not found (run phase1)");
  segnet::ModelParams p = segnet::init_params(cfg.arch(0), cfg.init_seed);
  segnet::assign_params(segnet::load_tensors(path), "backbone", p, path.string());
  return p;
}

void save_subclasses(const std::filesystem::path& dir, const synthdata::DatasetSplit& split,
                     const balclust::SubclassResult& result) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < split.labeled.size(); ++i) {
    synthdata::save_labels(dir / (std::to_string(split.labeled[i].id) + ".sub"), result.labels[i]);
  }
  balclust::save_subclass_map(dir / "subclass_map.json", result.map);
}

balclust::SubclassResult load_subclasses(const std::filesystem::path& dir, const synthdata::DatasetSplit& split) {
  const auto map_path = dir / "subclass_map.json";
  if (!std::filesystem::exists(map_path)) throw IoError(map_path.string(), "subclass map not found (run cluster)");
  balclust::SubclassResult res;
  res.map = balclust::load_subclass_map(map_path);
  res.subclass_pixels.assign(res.map.k_sub() + 1, 0);
  for (const auto& s : split.labeled) {
    const auto path = dir / (std::to_string(s.id) + ".sub");
    LabelMap l = synthdata::load_labels(path);
    for (std::uint16_t v : l.labels) {
      if (v > res.map.k_sub()) throw IoError(path.string(), "subclass id " + std::to_string(v) + " out of range");
      ++res.subclass_pixels[v];
    }
    if (balclust::parent_labels(l, res.map) != s.labels) {
      throw IoError(path.string(), "subclass labels do not map back onto the class labels");
    }
    res.labels.push_back(std::move(l));
  }
  return res;
}

void save_phase2(const std::filesystem::path& dir, const Phase2Result& result) {
  std::filesystem::create_directories(dir);
  segnet::NamedTensors t;
  segnet::append_params(t, "student", result.student);
  segnet::append_params(t, "teacher", result.teacher.params);
  segnet::save_tensors(dir / "checkpoint.bsrn", t);
  binio::write_text_atomic(dir / "log.csv", log_csv(result.log));
  binio::write_text_atomic(dir / "config.txt", result.log.config_echo);
}

segnet::ModelParams load_eval_params(const RunConfig& cfg, const std::filesystem::path& checkpoint, bool student) {
  if (!std::filesystem::exists(checkpoint)) throw IoError(checkpoint.string(), "checkpoint not found");
  const auto tensors = segnet::load_tensors(checkpoint);
  std::string prefix = student ? "student" : "teacher";
  if (!segnet::has_prefix(tensors, prefix)) {
    if (!segnet::has_prefix(tensors, "backbone")) {
      throw IoError(checkpoint.string(), "no '" + prefix + "' or 'backbone' parameters in checkpoint");
    }
    prefix = "backbone";
  }
  segnet::ModelParams p = segnet::init_params(cfg.arch(0), cfg.init_seed);
  segnet::assign_params(tensors, prefix, p, checkpoint.string());
  return p;
}

void write_report(const std::filesystem::path& dir, const metrics::EvalReport& report, const RunConfig& cfg,
                  const std::string& what) {
  std::filesystem::create_directories(dir);
  binio::write_text_atomic(dir / "metrics.csv", metrics::report_csv(report));
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    per_class.push_back({{"class", c + 1}, {"dice", report.per_class[c].dice}, {"ji", report.per_class[c].ji}});
  }
  const nlohmann::json summary{
      {"evaluated", what},
      {"mean_dice", report.mean_dice},
      {"mean_ji", report.mean_ji},
      {"n_images", report.n_images},
      {"per_class", per_class},
      {"arm", std::string(1, arm_letter(cfg.arm))},
      {"seeds",
       {{"data", cfg.data_seed}, {"init", cfg.init_seed}, {"train", cfg.train_seed}, {"cluster", cfg.cluster_seed}}},
      {"averaging", cfg.averaging == metrics::Averaging::micro ? "micro" : "macro"}};
  binio::write_text_atomic(dir / "summary.json", summary.dump(1) + "\n");
}

}  // namespace bsr::harness

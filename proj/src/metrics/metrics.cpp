#include "bsr/metrics/metrics.hpp"

#include <cstdio>
#include <stdexcept>

#include "bsr/errors.hpp"

namespace bsr::metrics {
namespace {

struct Counts {
  std::uint64_t pred = 0, gt = 0, inter = 0;
};

ClassScore score(const Counts& c) {
  if (c.pred == 0 && c.gt == 0) return {1.0, 1.0};
  const double inter = static_cast<double>(c.inter);
  const double uni = static_cast<double>(c.pred + c.gt - c.inter);
  return {2.0 * inter / static_cast<double>(c.pred + c.gt), inter / uni};
}

void accumulate(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes, std::vector<Counts>& counts) {
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::size_t p = pred.labels[i], g = gt.labels[i];
    if (p > num_classes || g > num_classes) {
      throw std::out_of_range("overlap_metrics: label outside 0.." + std::to_string(num_classes));
    }
    ++counts[p].pred;
    ++counts[g].gt;
    if (p == g) ++counts[p].inter;
  }
}

void finish_means(EvalReport& r) {
  r.mean_dice = r.mean_ji = 0.0;
  for (const ClassScore& s : r.per_class) {
    r.mean_dice += s.dice;
    r.mean_ji += s.ji;
  }
  if (!r.per_class.empty()) {
    r.mean_dice /= static_cast<double>(r.per_class.size());
    r.mean_ji /= static_cast<double>(r.per_class.size());
  }
}

}  // namespace

EvalReport overlap_metrics(std::span<const LabelMap> pred, std::span<const LabelMap> gt, std::size_t num_classes,
                           Averaging averaging) {
  if (pred.size() != gt.size()) throw ShapeError("overlap_metrics: prediction and ground-truth counts differ");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].height != gt[i].height || pred[i].width != gt[i].width) {
      throw ShapeError("overlap_metrics: shape mismatch at image " + std::to_string(i));
    }
  }
  EvalReport r;
  r.n_images = pred.size();
  r.per_class.assign(num_classes, {});
  if (averaging == Averaging::micro) {
    std::vector<Counts> counts(num_classes + 1);
    for (std::size_t i = 0; i < pred.size(); ++i) accumulate(pred[i], gt[i], num_classes, counts);
    for (std::size_t c = 1; c <= num_classes; ++c) r.per_class[c - 1] = score(counts[c]);
  } else {
    for (std::size_t i = 0; i < pred.size(); ++i) {
      std::vector<Counts> counts(num_classes + 1);
      accumulate(pred[i], gt[i], num_classes, counts);
      for (std::size_t c = 1; c <= num_classes; ++c) {
        const ClassScore s = score(counts[c]);
        r.per_class[c - 1].dice += s.dice / static_cast<double>(pred.size());
        r.per_class[c - 1].ji += s.ji / static_cast<double>(pred.size());
      }
    }
  }
  finish_means(r);
  return r;
}

LabelMap argmax_labels(const Tensor& probs) {
  require_chw(probs, "argmax_labels");
  const std::size_t channels = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
  LabelMap out(probs.dim(1), probs.dim(2));
  for (std::size_t p = 0; p < hw; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < channels; ++c) {
      if (probs[c * hw + p] > probs[best * hw + p]) best = c;
    }
    out.labels[p] = static_cast<std::uint16_t>(best);
  }
  return out;
}

EvalReport evaluate_model(const segnet::ModelParams& params, std::span<const Tensor> images,
                          std::span<const LabelMap> gt, std::size_t num_classes, Averaging averaging) {
  std::vector<LabelMap> pred;
  pred.reserve(images.size());
  for (const Tensor& img : images) pred.push_back(argmax_labels(segnet::forward(params, img, segnet::Heads::mos).mos));
  return overlap_metrics(pred, gt, num_classes, averaging);
}

std::string report_csv(const EvalReport& report) {
  std::string out = "class,dice,ji\n";
  char line[96];
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", c + 1, report.per_class[c].dice, report.per_class[c].ji);
    out += line;
  }
  return out;
}

}  // namespace bsr::metrics

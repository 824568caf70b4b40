#include "bsr/synthdata/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "bsr/errors.hpp"
#include "bsr/seeding.hpp"

namespace bsr::synthdata {
namespace {

using std::numbers::pi;

struct Disk {
  double cx, cy, r;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Pixel centres sit at integer + 0.5.
template <class Inside>
void paint(LabelMap& map, std::uint16_t cls, Inside inside) {
  for (std::size_t y = 0; y < map.height; ++y) {
    for (std::size_t x = 0; x < map.width; ++x) {
      if (inside(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) map(y, x) = cls;
    }
  }
}

bool try_layout(const SceneSpec& spec, std::mt19937_64& rng, LabelMap& labels) {
  const double w = static_cast<double>(spec.width), h = static_cast<double>(spec.height);
  const double area = w * h;
  labels = LabelMap(spec.height, spec.width, 0);

  if (spec.num_classes >= 1) {
    const FractionRange fr = spec.ellipse_fraction;
    const double target = uniform(rng, fr.lo + 0.1 * (fr.hi - fr.lo), fr.hi - 0.1 * (fr.hi - fr.lo)) * area;
    const double aspect = uniform(rng, 0.65, 1.0);
    const double a = std::sqrt(target / (pi * aspect)), b = a * aspect;
    const double theta = uniform(rng, 0.0, pi);
    const double cx = uniform(rng, 0.4 * w, 0.6 * w), cy = uniform(rng, 0.4 * h, 0.6 * h);
    const double c = std::cos(theta), s = std::sin(theta);
    paint(labels, 1, [&](double x, double y) {
      const double u = ((x - cx) * c + (y - cy) * s) / a;
      const double v = (-(x - cx) * s + (y - cy) * c) / b;
      return u * u + v * v <= 1.0;
    });
  }

  if (spec.num_classes >= 2) {
    const FractionRange fr = spec.ring_fraction;
    const double target = uniform(rng, fr.lo + 0.1 * (fr.hi - fr.lo), fr.hi - 0.1 * (fr.hi - fr.lo)) * area;
    const double thickness = uniform(rng, 1.5, 2.5);
    const double outer = (target / (pi * thickness) + thickness) / 2.0;
    const double inner = outer - thickness;
    const double cx = uniform(rng, outer, w - outer), cy = uniform(rng, outer, h - outer);
    paint(labels, 2, [&](double x, double y) {
      const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      return d2 <= outer * outer && d2 > inner * inner;
    });
  }

  std::vector<Disk> disks;
  for (std::size_t cls = 3; cls <= spec.num_classes; ++cls) {
    const FractionRange fr = spec.disk_fraction;
    const double target = uniform(rng, fr.lo + 0.15 * (fr.hi - fr.lo), fr.hi - 0.15 * (fr.hi - fr.lo)) * area;
    const double r = std::sqrt(target / pi);
    Disk d{uniform(rng, r + 1.0, w - r - 1.0), uniform(rng, r + 1.0, h - r - 1.0), r};
    for (const Disk& o : disks) {
      if (std::hypot(d.cx - o.cx, d.cy - o.cy) < d.r + o.r + 1.5) return false;
    }
    disks.push_back(d);
    paint(labels, static_cast<std::uint16_t>(cls), [&](double x, double y) {
      return (x - d.cx) * (x - d.cx) + (y - d.cy) * (y - d.cy) <= d.r * d.r;
    });
  }

  std::vector<std::size_t> counts(spec.num_classes + 1, 0);
  for (std::uint16_t l : labels.labels) ++counts[l];
  for (std::size_t cls = 1; cls <= spec.num_classes; ++cls) {
    if (!spec.fraction_for(cls).contains(static_cast<double>(counts[cls]) / area)) return false;
  }
  return true;
}

}  // namespace

FractionRange SceneSpec::fraction_for(std::size_t cls) const {
  if (cls == 1) return ellipse_fraction;
  if (cls == 2) return ring_fraction;
  return disk_fraction;
}

void SceneSpec::validate() const {
  if (height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0) {
    throw ShapeError("SceneSpec: height and width must be positive multiples of 4");
  }
  if (num_classes < 1) throw std::invalid_argument("SceneSpec: need at least one foreground class");
  if (class_means.size() != num_classes + 1) {
    throw std::invalid_argument("SceneSpec: class_means needs " + std::to_string(num_classes + 1) + " entries");
  }
}

Sample generate_sample(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  Sample s;
  bool ok = false;
  for (int attempt = 0; attempt < spec.max_attempts && !ok; ++attempt) ok = try_layout(spec, rng, s.labels);
  if (!ok) {
    throw std::runtime_error("generate_sample: could not place shapes within the fraction bounds at " +
                             std::to_string(spec.height) + "x" + std::to_string(spec.width) + " after " +
                             std::to_string(spec.max_attempts) + " attempts");
  }

  const double phi = uniform(rng, 0.0, 2.0 * pi);
  std::normal_distribution<double> noise(0.0, spec.pixel_noise);
  s.image = Tensor({1, spec.height, spec.width});
  for (std::size_t y = 0; y < spec.height; ++y) {
    for (std::size_t x = 0; x < spec.width; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(spec.width) - 0.5;
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(spec.height) - 0.5;
      const double ramp = spec.gradient_amplitude * (u * std::cos(phi) + v * std::sin(phi));
      const double value = spec.class_means[s.labels(y, x)] + ramp + noise(rng);
      s.image.at(0, y, x) = std::clamp(value, 0.0, 1.0);
    }
  }
  return s;
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint32_t id) { return derive_seed(dataset_seed, {id}); }

GeneratedDataset build_split(const SceneSpec& spec, std::size_t n, std::size_t m, std::size_t n_test,
                             std::uint64_t seed) {
  spec.validate();
  if (n == 0 || m == 0 || n_test == 0) throw std::invalid_argument("build_split: n, m and n_test must be >= 1");
  const std::size_t total = n + m + n_test;
  std::vector<std::uint32_t> ids(total);
  std::iota(ids.begin(), ids.end(), 0u);
  std::mt19937_64 rng(derive_seed(seed, {0x5b117u}));
  std::shuffle(ids.begin(), ids.end(), rng);
  std::sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(ids.begin() + static_cast<std::ptrdiff_t>(n), ids.begin() + static_cast<std::ptrdiff_t>(n + m));
  std::sort(ids.begin() + static_cast<std::ptrdiff_t>(n + m), ids.end());

  GeneratedDataset out;
  DatasetSplit& split = out.split;
  split.height = spec.height;
  split.width = spec.width;
  split.num_classes = spec.num_classes;
  for (std::size_t i = 0; i < total; ++i) {
    const std::uint32_t id = ids[i];
    Sample s = generate_sample(spec, sample_seed(seed, id));
    if (i < n) {
      split.labeled.push_back({id, std::move(s.image), std::move(s.labels)});
    } else if (i < n + m) {
      split.unlabeled.push_back({id, std::move(s.image)});
      out.oracle.labels.emplace(id, std::move(s.labels));
    } else {
      split.test.push_back({id, std::move(s.image), std::move(s.labels)});
    }
  }
  return out;
}

}  // namespace bsr::synthdata

#include "bsr/balclust/subclass.hpp"

#include <algorithm>
#include <json.hpp>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "bsr/balclust/kmeans.hpp"
#include "bsr/binary_io.hpp"
#include "bsr/errors.hpp"
#include "bsr/seeding.hpp"

namespace bsr::balclust {

std::size_t SubclassMap::first_id(std::size_t cls) const {
  return std::accumulate(counts.begin(), counts.begin() + static_cast<std::ptrdiff_t>(cls), std::size_t{0});
}

SubclassMap SubclassMap::from_counts(const std::vector<std::size_t>& counts) {
  SubclassMap m;
  m.counts = counts;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    for (std::size_t j = 0; j < counts[c]; ++j) m.parent_of.push_back(static_cast<std::uint16_t>(c));
  }
  m.validate();
  return m;
}

void SubclassMap::validate() const {
  if (counts.size() < 2) throw std::invalid_argument("SubclassMap: need background plus at least one class");
  if (parent_of.empty() || parent_of[0] != 0) throw std::invalid_argument("SubclassMap: id 0 must map to background");
  std::size_t id = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw std::invalid_argument("SubclassMap: class " + std::to_string(c) + " has no subclass");
    for (std::size_t j = 0; j < counts[c]; ++j, ++id) {
      if (id >= parent_of.size() || parent_of[id] != c) {
        throw std::invalid_argument("SubclassMap: parent_of is not the contiguous layout implied by counts");
      }
    }
  }
  if (id != parent_of.size()) throw std::invalid_argument("SubclassMap: parent_of longer than counts imply");
}

std::string to_json(const SubclassMap& map) {
  nlohmann::json counts = nlohmann::json::object();
  for (std::size_t c = 0; c < map.counts.size(); ++c) counts[std::to_string(c)] = map.counts[c];
  const nlohmann::json j{{"k_sub", map.k_sub()}, {"parent_of", map.parent_of}, {"counts", counts}};
  return j.dump() + "\n";
}

SubclassMap subclass_map_from_json(const std::string& text, const std::string& source) {
  SubclassMap m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.parent_of = j.at("parent_of").get<std::vector<std::uint16_t>>();
    const auto& counts = j.at("counts");
    m.counts.assign(counts.size(), 0);
    for (auto it = counts.begin(); it != counts.end(); ++it) {
      const std::size_t c = std::stoul(it.key());
      if (c >= m.counts.size()) throw std::invalid_argument("class key " + it.key() + " out of range");
      m.counts[c] = it.value().get<std::size_t>();
    }
    m.validate();
    if (j.at("k_sub").get<std::size_t>() != m.k_sub()) throw std::invalid_argument("k_sub disagrees with parent_of");
  } catch (const std::exception& e) {
    throw IoError(source, std::string("invalid subclass map: ") + e.what());
  }
  return m;
}

void save_subclass_map(const std::filesystem::path& path, const SubclassMap& map) {
  binio::write_text_atomic(path, to_json(map));
}

SubclassMap load_subclass_map(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  return subclass_map_from_json(std::string(bytes.begin(), bytes.end()), path.string());
}

MapMode parse_map_mode(const std::string& text) {
  if (text == "soft-sum") return MapMode::soft_sum;
  if (text == "hard-argmax") return MapMode::hard_argmax;
  throw std::invalid_argument("unknown map mode '" + text + "' (expected soft-sum or hard-argmax)");
}

std::string to_string(MapMode mode) { return mode == MapMode::soft_sum ? "soft-sum" : "hard-argmax"; }

Tensor map_to_parent(const Tensor& scs_probs, const SubclassMap& map, MapMode mode) {
  require_chw(scs_probs, "map_to_parent");
  if (scs_probs.dim(0) != map.k_sub() + 1) {
    throw ShapeError("map_to_parent: got " + std::to_string(scs_probs.dim(0)) + " subclass channels, map has " +
                     std::to_string(map.k_sub() + 1));
  }
  const std::size_t hw = scs_probs.dim(1) * scs_probs.dim(2);
  Tensor out({map.num_classes() + 1, scs_probs.dim(1), scs_probs.dim(2)});
  if (mode == MapMode::soft_sum) {
    for (std::size_t s = 0; s < map.parent_of.size(); ++s) {
      const std::size_t parent = map.parent_of[s];
      for (std::size_t p = 0; p < hw; ++p) out[parent * hw + p] += scs_probs[s * hw + p];
    }
  } else {
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      for (std::size_t s = 1; s < map.parent_of.size(); ++s) {
        if (scs_probs[s * hw + p] > scs_probs[best * hw + p]) best = s;
      }
      out[map.parent_of[best] * hw + p] = 1.0;
    }
  }
  return out;
}

LabelMap parent_labels(const LabelMap& sub_labels, const SubclassMap& map) {
  LabelMap out(sub_labels.height, sub_labels.width);
  for (std::size_t i = 0; i < sub_labels.size(); ++i) {
    const std::uint16_t s = sub_labels.labels[i];
    if (s >= map.parent_of.size()) throw std::out_of_range("parent_labels: subclass id " + std::to_string(s));
    out.labels[i] = map.parent_of[s];
  }
  return out;
}

SubclassResult generate_subclass_labels_from_features(std::span<const Tensor> features,
                                                      std::span<const LabelMap> labels, std::size_t num_classes,
                                                      const SubclassOptions& options) {
  if (features.size() != labels.size()) {
    throw std::invalid_argument("generate_subclass_labels: feature and label counts differ");
  }
  const ClassCensus cen = census(labels, num_classes);
  const std::vector<std::size_t> counts = allocate_subclass_counts(cen, {options.split_background});

  SubclassResult res;
  for (std::size_t c = 1; c <= num_classes; ++c) {
    if (cen.pixel_count[c] == 0) {
      res.warnings.push_back("class " + std::to_string(c) +
                             " has no labeled pixels; it keeps one empty subclass");
    }
  }
  res.map = SubclassMap::from_counts(counts);
  for (const LabelMap& l : labels) res.labels.emplace_back(l.height, l.width, 0);

  const std::size_t dims = features.empty() ? 0 : features[0].dim(1);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].rank() != 2 || features[i].dim(0) != labels[i].size() || features[i].dim(1) != dims) {
      throw ShapeError("generate_subclass_labels: features of image " + std::to_string(i) + " have shape " +
                       shape_str(features[i].shape()));
    }
  }

  for (std::size_t c = 0; c <= num_classes; ++c) {
    const std::size_t first = res.map.first_id(c);
    // Pixel locations of this class as (image, flat index).
    std::vector<std::pair<std::uint32_t, std::uint32_t>> where;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      for (std::size_t p = 0; p < labels[i].size(); ++p) {
        if (labels[i].labels[p] == c) where.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(p));
      }
    }
    if (counts[c] == 1 || where.empty()) {
      for (auto [i, p] : where) res.labels[i].labels[p] = static_cast<std::uint16_t>(first);
      continue;
    }

    std::vector<std::size_t> sampled(where.size());
    std::iota(sampled.begin(), sampled.end(), std::size_t{0});
    if (where.size() > options.max_points_per_class) {
      std::mt19937_64 rng(derive_seed(options.seed, {0xfea7u, c}));
      std::shuffle(sampled.begin(), sampled.end(), rng);
      sampled.resize(options.max_points_per_class);
      std::sort(sampled.begin(), sampled.end());
    }
    Tensor pts({sampled.size(), dims});
    for (std::size_t r = 0; r < sampled.size(); ++r) {
      const auto [i, p] = where[sampled[r]];
      std::copy_n(features[i].data() + static_cast<std::size_t>(p) * dims, dims, pts.data() + r * dims);
    }
    const std::size_t k = std::min(counts[c], sampled.size());
    const KMeansOptions kopt{derive_seed(options.seed, {0xc1u, c}), options.max_iters};
    const ClusterResult cr = options.balanced ? balanced_kmeans(pts, k, kopt) : plain_kmeans(pts, k, kopt);

    std::vector<char> in_sample(where.size(), 0);
    for (std::size_t r = 0; r < sampled.size(); ++r) {
      in_sample[sampled[r]] = 1;
      const auto [i, p] = where[sampled[r]];
      res.labels[i].labels[p] = static_cast<std::uint16_t>(first + cr.assignment[r]);
    }
    Tensor one({1, dims});
    for (std::size_t w = 0; w < where.size(); ++w) {
      if (in_sample[w]) continue;
      const auto [i, p] = where[w];
      std::copy_n(features[i].data() + static_cast<std::size_t>(p) * dims, dims, one.data());
      res.labels[i].labels[p] = static_cast<std::uint16_t>(first + nearest_center(one, 0, cr.centers));
    }
  }

  res.subclass_pixels.assign(res.map.k_sub() + 1, 0);
  for (const LabelMap& l : res.labels) {
    for (std::uint16_t s : l.labels) ++res.subclass_pixels[s];
  }
  return res;
}

SubclassResult generate_subclass_labels(std::span<const Tensor> images, std::span<const LabelMap> labels,
                                        const segnet::ModelParams& backbone, std::size_t num_classes,
                                        const SubclassOptions& options) {
  std::vector<Tensor> features;
  features.reserve(images.size());
  for (const Tensor& img : images) features.push_back(segnet::extract_features(backbone, img));
  return generate_subclass_labels_from_features(features, labels, num_classes, options);
}

double foreground_balance_ratio(const SubclassResult& result) {
  std::uint64_t lo = std::numeric_limits<std::uint64_t>::max(), hi = 0;
  for (std::size_t s = 0; s < result.subclass_pixels.size(); ++s) {
    if (result.map.parent_of[s] == 0) continue;
    lo = std::min(lo, result.subclass_pixels[s]);
    hi = std::max(hi, result.subclass_pixels[s]);
  }
  if (hi == 0) return 1.0;
  if (lo == 0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(hi) / static_cast<double>(lo);
}

}  // namespace bsr::balclust

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bsr/balclust/census.hpp"
#include "bsr/gradcore/tensor.hpp"
#include "bsr/label_map.hpp"
#include "bsr/segnet/model.hpp"

namespace bsr::balclust {

// Subclass id -> parent class id. Ids are contiguous: background first, then
// the subclasses of class 1, class 2, ...
struct SubclassMap {
  std::vector<std::uint16_t> parent_of;  // size K_sub + 1
  std::vector<std::size_t> counts;       // k_c for classes 0..K

  std::size_t k_sub() const noexcept { return parent_of.empty() ? 0 : parent_of.size() - 1; }
  std::size_t num_classes() const noexcept { return counts.empty() ? 0 : counts.size() - 1; }
  // First subclass id of class c.
  std::size_t first_id(std::size_t cls) const;

  static SubclassMap from_counts(const std::vector<std::size_t>& counts);
  void validate() const;
  bool operator==(const SubclassMap&) const = default;
};

std::string to_json(const SubclassMap& map);
SubclassMap subclass_map_from_json(const std::string& text, const std::string& source = "subclass map");
void save_subclass_map(const std::filesystem::path& path, const SubclassMap& map);
SubclassMap load_subclass_map(const std::filesystem::path& path);

enum class MapMode { soft_sum, hard_argmax };

MapMode parse_map_mode(const std::string& text);
std::string to_string(MapMode mode);

// Projects subclass probabilities onto parent classes. soft_sum adds the
// probabilities of each class's subclasses; hard_argmax one-hot encodes the
// parent of the most probable subclass.
Tensor map_to_parent(const Tensor& scs_probs, const SubclassMap& map, MapMode mode = MapMode::soft_sum);

// parent_of applied pixelwise.
LabelMap parent_labels(const LabelMap& sub_labels, const SubclassMap& map);

struct SubclassOptions {
  std::size_t max_points_per_class = 20000;
  std::uint64_t seed = 0;
  std::size_t max_iters = 50;
  bool split_background = false;
  // false runs unconstrained k-means with the same per-class counts.
  bool balanced = true;
};

struct SubclassResult {
  std::vector<LabelMap> labels;  // y_Lsub per labeled image
  SubclassMap map;
  std::vector<std::uint64_t> subclass_pixels;  // population per subclass id
  std::vector<std::string> warnings;
};

// Clusters precomputed per-image feature matrices ((H*W) x C each).
SubclassResult generate_subclass_labels_from_features(std::span<const Tensor> features,
                                                      std::span<const LabelMap> labels, std::size_t num_classes,
                                                      const SubclassOptions& options);

// Extracts features with the backbone, then clusters.
SubclassResult generate_subclass_labels(std::span<const Tensor> images, std::span<const LabelMap> labels,
                                        const segnet::ModelParams& backbone, std::size_t num_classes,
                                        const SubclassOptions& options);

// Ratio of the largest to smallest foreground subclass population.
double foreground_balance_ratio(const SubclassResult& result);

}  // namespace bsr::balclust

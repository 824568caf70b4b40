#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bsr/label_map.hpp"

namespace bsr::balclust {

struct ClassCensus {
  std::vector<std::uint64_t> pixel_count;  // classes 0..K
  std::uint64_t total() const noexcept;
};

// Pools pixel counts over all maps. Labels above K are rejected with the
// offending image index.
ClassCensus census(std::span<const LabelMap> labels, std::size_t num_classes);

struct AllocationOptions {
  bool split_background = false;
};

// k_c = max(1, round_half_up(count_c / S)) with S the smallest nonzero
// foreground population. Background gets one subclass unless split.
std::vector<std::size_t> allocate_subclass_counts(const ClassCensus& census, const AllocationOptions& options = {});

}  // namespace bsr::balclust

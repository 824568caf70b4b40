#include "bsr/balclust/census.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace bsr::balclust {
namespace {

std::size_t round_ratio_half_up(std::uint64_t count, std::uint64_t target) {
  return static_cast<std::size_t>((2 * count + target) / (2 * target));
}

}  // namespace

std::uint64_t ClassCensus::total() const noexcept {
  return std::accumulate(pixel_count.begin(), pixel_count.end(), std::uint64_t{0});
}

ClassCensus census(std::span<const LabelMap> labels, std::size_t num_classes) {
  ClassCensus c{std::vector<std::uint64_t>(num_classes + 1, 0)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::uint16_t l : labels[i].labels) {
      if (l > num_classes) {
        throw std::out_of_range("census: image " + std::to_string(i) + " has label " + std::to_string(l) +
                                " outside 0.." + std::to_string(num_classes));
      }
      ++c.pixel_count[l];
    }
  }
  return c;
}

std::vector<std::size_t> allocate_subclass_counts(const ClassCensus& census, const AllocationOptions& options) {
  const auto& counts = census.pixel_count;
  std::uint64_t target = std::numeric_limits<std::uint64_t>::max();
  for (std::size_t c = 1; c < counts.size(); ++c) {
    if (counts[c] > 0) target = std::min(target, counts[c]);
  }
  if (target == std::numeric_limits<std::uint64_t>::max()) {
    throw std::invalid_argument("allocate_subclass_counts: no foreground pixels in the labeled set");
  }
  std::vector<std::size_t> k(counts.size(), 1);
  for (std::size_t c = 1; c < counts.size(); ++c) k[c] = std::max<std::size_t>(1, round_ratio_half_up(counts[c], target));
  if (options.split_background && !counts.empty()) {
    k[0] = std::max<std::size_t>(1, round_ratio_half_up(counts[0], target));
  }
  return k;
}

}  // namespace bsr::balclust

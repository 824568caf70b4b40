#pragma once

#include <cstdint>
#include <vector>

#include "bsr/gradcore/tensor.hpp"

namespace bsr::balclust {

struct ClusterResult {
  std::vector<std::uint32_t> assignment;  // per point
  Tensor centers;                         // k x C
  double within_sse = 0.0;
  // within_sse after every center update, in order.
  std::vector<double> sse_history;
  std::size_t iterations = 0;

  std::vector<std::size_t> sizes() const;
};

struct KMeansOptions {
  std::uint64_t seed = 0;
  std::size_t max_iters = 50;
  // Independent seedings; the run with the lowest within_sse is kept.
  std::size_t restarts = 10;
  // Passes of the pairwise-swap local search that follows the balanced
  // refinement; 0 disables it.
  std::size_t polish_passes = 10;
};

// Capacity-constrained k-means over a p x C point matrix. Every cluster ends
// with floor(p/k) or ceil(p/k) points. Each assignment pass orders points by
// the squared-distance regret between their two nearest open centers
// (largest first) and gives each the nearest center that still has room.
// Once the alternating refinement stops, size-preserving swaps polish the
// partition further.
ClusterResult balanced_kmeans(const Tensor& points, std::size_t k, const KMeansOptions& options = {});

// Unconstrained Lloyd iterations from the same seeding.
ClusterResult plain_kmeans(const Tensor& points, std::size_t k, const KMeansOptions& options = {});

// Squared distances summed over points to their assigned centers.
double sse(const Tensor& points, const Tensor& centers, const std::vector<std::uint32_t>& assignment);

// Index of the nearest row of `centers` to point row `i` (lowest index on ties).
std::uint32_t nearest_center(const Tensor& points, std::size_t i, const Tensor& centers);

}  // namespace bsr::balclust

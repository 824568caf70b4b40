#include "bsr/balclust/kmeans.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "bsr/errors.hpp"
#include "bsr/seeding.hpp"

namespace bsr::balclust {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sq_dist(const double* a, const double* b, std::size_t dims) {
  double s = 0.0;
  for (std::size_t d = 0; d < dims; ++d) {
    const double diff = a[d] - b[d];
    s += diff * diff;
  }
  return s;
}

void check_inputs(const Tensor& points, std::size_t k, const char* who) {
  if (points.rank() != 2) throw ShapeError(std::string(who) + ": points must be a p x C matrix");
  if (k == 0) throw std::invalid_argument(std::string(who) + ": k must be >= 1");
  if (k > points.dim(0)) {
    throw std::invalid_argument(std::string(who) + ": k=" + std::to_string(k) + " exceeds point count " +
                                std::to_string(points.dim(0)));
  }
}

// k-means++ seeding.
Tensor seed_centers(const Tensor& points, std::size_t k, std::uint64_t seed) {
  const std::size_t p = points.dim(0), dims = points.dim(1);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  chosen.push_back(std::uniform_int_distribution<std::size_t>(0, p - 1)(rng));
  std::vector<double> d2(p, kInf);
  while (chosen.size() < k) {
    const double* last = points.data() + chosen.back() * dims;
    double total = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
      d2[i] = std::min(d2[i], sq_dist(points.data() + i * dims, last, dims));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      pick = p - 1;
      for (std::size_t i = 0; i < p; ++i) {
        if (u < d2[i]) {
          pick = i;
          break;
        }
        u -= d2[i];
      }
      // Rounding can land on an already-chosen point; take the farthest one instead.
      if (d2[pick] == 0.0) pick = static_cast<std::size_t>(std::max_element(d2.begin(), d2.end()) - d2.begin());
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, p - 1)(rng);
    }
    chosen.push_back(pick);
  }
  Tensor centers({k, dims});
  for (std::size_t j = 0; j < k; ++j) {
    std::copy_n(points.data() + chosen[j] * dims, dims, centers.data() + j * dims);
  }
  return centers;
}

// Means of assigned points; an empty cluster keeps its previous center.
void update_centers(const Tensor& points, const std::vector<std::uint32_t>& assignment, Tensor& centers) {
  const std::size_t k = centers.dim(0), dims = centers.dim(1);
  Tensor sums({k, dims});
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    const std::uint32_t c = assignment[i];
    ++counts[c];
    for (std::size_t d = 0; d < dims; ++d) sums[c * dims + d] += points[i * dims + d];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    for (std::size_t d = 0; d < dims; ++d) {
      centers[c * dims + d] = sums[c * dims + d] / static_cast<double>(counts[c]);
    }
  }
}

std::vector<double> distance_table(const Tensor& points, const Tensor& centers) {
  const std::size_t p = points.dim(0), k = centers.dim(0), dims = points.dim(1);
  std::vector<double> dist(p * k);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      dist[i * k + j] = sq_dist(points.data() + i * dims, centers.data() + j * dims, dims);
    }
  }
  return dist;
}

std::vector<std::uint32_t> balanced_assign(const Tensor& points, const Tensor& centers) {
  const std::size_t p = points.dim(0), k = centers.dim(0);
  const std::vector<double> dist = distance_table(points, centers);
  const std::size_t floor_cap = p / k;
  const std::size_t extra = p % k;  // clusters allowed to hold floor_cap + 1

  std::vector<std::size_t> size(k, 0);
  std::vector<char> open(k, 1);
  std::size_t at_ceiling = 0;

  auto capacity = [&]() { return at_ceiling < extra ? floor_cap + 1 : floor_cap; };
  auto close_full = [&]() {
    bool changed = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (open[j] && size[j] >= capacity()) {
        open[j] = 0;
        changed = true;
      }
    }
    return changed;
  };

  struct Entry {
    double regret;
    std::uint32_t point;
  };
  auto make_entry = [&](std::uint32_t i) {
    double best = kInf, second = kInf;
    for (std::size_t j = 0; j < k; ++j) {
      if (!open[j]) continue;
      const double d = dist[i * k + j];
      if (d < best) {
        second = best;
        best = d;
      } else if (d < second) {
        second = d;
      }
    }
    return Entry{second - best, i};
  };
  auto by_priority = [](const Entry& a, const Entry& b) {
    return a.regret != b.regret ? a.regret > b.regret : a.point < b.point;
  };

  std::vector<Entry> queue;
  queue.reserve(p);
  for (std::uint32_t i = 0; i < p; ++i) queue.push_back(make_entry(i));
  std::sort(queue.begin(), queue.end(), by_priority);

  std::vector<std::uint32_t> assignment(p, 0);
  for (std::size_t pos = 0; pos < queue.size(); ++pos) {
    const std::uint32_t i = queue[pos].point;
    std::size_t best = k;
    for (std::size_t j = 0; j < k; ++j) {
      if (open[j] && (best == k || dist[i * k + j] < dist[i * k + best])) best = j;
    }
    assignment[i] = static_cast<std::uint32_t>(best);
    ++size[best];
    if (extra > 0 && size[best] == floor_cap + 1) ++at_ceiling;
    if (close_full()) {
      // The set of open centers changed: re-rank the remaining points.
      for (std::size_t q = pos + 1; q < queue.size(); ++q) queue[q] = make_entry(queue[q].point);
      std::sort(queue.begin() + static_cast<std::ptrdiff_t>(pos + 1), queue.end(), by_priority);
    }
  }
  return assignment;
}

std::vector<std::uint32_t> nearest_assign(const Tensor& points, const Tensor& centers) {
  std::vector<std::uint32_t> a(points.dim(0));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = nearest_center(points, i, centers);
  return a;
}

// Size-preserving local search run after the alternating refinement: swaps
// of two points between clusters, and moves from a ceil-sized cluster to a
// floor-sized one, applied while they lower the SSE. With per-cluster sums
// S and sizes n the SSE is const - sum |S|^2 / n, so each candidate costs O(C).
bool swap_polish(const Tensor& points, std::size_t k, std::vector<std::uint32_t>& assignment, std::size_t max_passes) {
  const std::size_t p = points.dim(0), dims = points.dim(1);
  std::vector<double> sums(k * dims, 0.0);
  std::vector<std::size_t> n(k, 0);
  for (std::size_t i = 0; i < p; ++i) {
    ++n[assignment[i]];
    for (std::size_t d = 0; d < dims; ++d) sums[assignment[i] * dims + d] += points[i * dims + d];
  }
  auto norm2 = [dims](const double* v) {
    double s = 0.0;
    for (std::size_t d = 0; d < dims; ++d) s += v[d] * v[d];
    return s;
  };
  std::vector<double> ta(dims), tb(dims);
  // Gain (reduction in SSE) when cluster a becomes S_a + da with size na
  // and b becomes S_b - da with size nb.
  auto gain = [&](std::size_t a, std::size_t b, const double* da, std::size_t na, std::size_t nb) {
    for (std::size_t d = 0; d < dims; ++d) {
      ta[d] = sums[a * dims + d] + da[d];
      tb[d] = sums[b * dims + d] - da[d];
    }
    return norm2(ta.data()) / static_cast<double>(na) + norm2(tb.data()) / static_cast<double>(nb) -
           norm2(&sums[a * dims]) / static_cast<double>(n[a]) - norm2(&sums[b * dims]) / static_cast<double>(n[b]);
  };
  auto apply = [&](std::size_t a, std::size_t b, const double* da) {
    for (std::size_t d = 0; d < dims; ++d) {
      sums[a * dims + d] += da[d];
      sums[b * dims + d] -= da[d];
    }
  };

  bool changed = false;
  std::vector<double> delta(dims);
  for (std::size_t pass = 0; pass < max_passes; ++pass) {
    bool improved = false;
    for (std::size_t i = 0; i < p; ++i) {
      const double* xi = points.data() + i * dims;
      for (std::size_t j = i + 1; j < p; ++j) {
        const std::size_t a = assignment[i], b = assignment[j];
        if (a == b) continue;
        const double* xj = points.data() + j * dims;
        for (std::size_t d = 0; d < dims; ++d) delta[d] = xj[d] - xi[d];
        const double g = gain(a, b, delta.data(), n[a], n[b]);
        if (g > 1e-12 * (1.0 + std::abs(norm2(&sums[a * dims])))) {
          apply(a, b, delta.data());
          std::swap(assignment[i], assignment[j]);
          improved = true;
        }
      }
      // Move i from a larger cluster to a smaller one; sizes stay within one.
      const std::size_t a = assignment[i];
      for (std::size_t b = 0; b < k; ++b) {
        if (b == a || n[a] != n[b] + 1) continue;
        for (std::size_t d = 0; d < dims; ++d) delta[d] = -xi[d];
        if (gain(a, b, delta.data(), n[a] - 1, n[b] + 1) > 1e-12 * (1.0 + std::abs(norm2(&sums[a * dims])))) {
          apply(a, b, delta.data());
          --n[a];
          ++n[b];
          assignment[i] = static_cast<std::uint32_t>(b);
          improved = true;
          break;
        }
      }
    }
    changed = changed || improved;
    if (!improved) break;
  }
  return changed;
}

template <class Assign>
ClusterResult refine_once(const Tensor& points, std::size_t k, const KMeansOptions& options, std::uint64_t seed,
                          Assign assign, bool polish) {
  ClusterResult res;
  res.centers = seed_centers(points, k, seed);
  res.assignment = assign(points, res.centers);
  for (std::size_t it = 0; it < options.max_iters; ++it) {
    update_centers(points, res.assignment, res.centers);
    res.sse_history.push_back(sse(points, res.centers, res.assignment));
    res.iterations = it + 1;
    std::vector<std::uint32_t> next = assign(points, res.centers);
    if (next == res.assignment) break;
    // Keep the objective monotone: a reassignment that does not lower the
    // cost under the current centers ends the refinement.
    if (sse(points, res.centers, next) >= res.sse_history.back()) break;
    res.assignment = std::move(next);
    if (it + 1 == options.max_iters) {
      update_centers(points, res.assignment, res.centers);
      res.sse_history.push_back(sse(points, res.centers, res.assignment));
    }
  }
  if (options.max_iters == 0) update_centers(points, res.assignment, res.centers);
  if (polish && k > 1 && swap_polish(points, k, res.assignment, options.polish_passes)) {
    update_centers(points, res.assignment, res.centers);
    res.sse_history.push_back(sse(points, res.centers, res.assignment));
  }
  res.within_sse = sse(points, res.centers, res.assignment);
  return res;
}

template <class Assign>
ClusterResult refine(const Tensor& points, std::size_t k, const KMeansOptions& options, Assign assign, bool polish) {
  ClusterResult best = refine_once(points, k, options, options.seed, assign, polish);
  for (std::size_t r = 1; r < options.restarts; ++r) {
    ClusterResult next = refine_once(points, k, options, derive_seed(options.seed, {r}), assign, polish);
    if (next.within_sse < best.within_sse) best = std::move(next);
  }
  return best;
}

}  // namespace

std::vector<std::size_t> ClusterResult::sizes() const {
  std::vector<std::size_t> s(centers.empty() ? 0 : centers.dim(0), 0);
  for (std::uint32_t a : assignment) ++s[a];
  return s;
}

double sse(const Tensor& points, const Tensor& centers, const std::vector<std::uint32_t>& assignment) {
  const std::size_t dims = points.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    total += sq_dist(points.data() + i * dims, centers.data() + assignment[i] * dims, dims);
  }
  return total;
}

std::uint32_t nearest_center(const Tensor& points, std::size_t i, const Tensor& centers) {
  const std::size_t dims = points.dim(1);
  std::uint32_t best = 0;
  double best_d = kInf;
  for (std::size_t j = 0; j < centers.dim(0); ++j) {
    const double d = sq_dist(points.data() + i * dims, centers.data() + j * dims, dims);
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(j);
    }
  }
  return best;
}

ClusterResult balanced_kmeans(const Tensor& points, std::size_t k, const KMeansOptions& options) {
  check_inputs(points, k, "balanced_kmeans");
  return refine(points, k, options, balanced_assign, true);
}

ClusterResult plain_kmeans(const Tensor& points, std::size_t k, const KMeansOptions& options) {
  check_inputs(points, k, "plain_kmeans");
  return refine(points, k, options, nearest_assign, false);
}

}  // namespace bsr::balclust

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace bsr {

// Dense per-pixel class ids, row-major.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint16_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint16_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}

  std::size_t size() const noexcept { return labels.size(); }
  std::uint16_t& operator()(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::uint16_t operator()(std::size_t y, std::size_t x) const { return labels[y * width + x]; }

  bool operator==(const LabelMap&) const = default;
};

}  // namespace bsr

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace viewsynth {

/// Continuous position in a feature grid. Cell (r, c) has its center at
/// (r + 0.5, c + 0.5); the grid covers [0, h) x [0, w).
struct GridCoord {
  double row = 0.0;
  double col = 0.0;
};

/// For every cell of a target grid, where that cell lies in a source grid.
struct MappingGrid {
  std::size_t height = 0;  // target grid
  std::size_t width = 0;
  std::size_t source_height = 0;
  std::size_t source_width = 0;
  std::vector<GridCoord> coords;
  std::vector<std::uint8_t> valid;

  MappingGrid() = default;
  MappingGrid(std::size_t h, std::size_t w, std::size_t src_h, std::size_t src_w)
      : height(h), width(w), source_height(src_h), source_width(src_w),
        coords(h * w), valid(h * w, 0) {}

  std::size_t index(std::size_t r, std::size_t c) const { return r * width + c; }
  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : valid) n += v ? 1 : 0;
    return n;
  }

  static MappingGrid identity(std::size_t h, std::size_t w) {
    MappingGrid g(h, w, h, w);
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        g.coords[g.index(r, c)] = {static_cast<double>(r) + 0.5,
                                   static_cast<double>(c) + 0.5};
        g.valid[g.index(r, c)] = 1;
      }
    }
    return g;
  }
};

}  // namespace viewsynth

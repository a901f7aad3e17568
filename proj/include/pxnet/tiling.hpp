#pragma once
#include <optional>
#include <vector>

#include "pxnet/frame.hpp"

namespace pxnet {

struct TilingConfig {
  uint32_t grid_rows = 1;
  uint32_t grid_cols = 1;
  uint32_t halo = 0;
};

// One tile's placement. The stored data always spans core + halo on every side;
// at image borders the halo is filled by edge replication (clamped sampling).
struct TileRect {
  uint32_t tile_row = 0, tile_col = 0;
  uint32_t core_x = 0, core_y = 0;  // parent coords of the core origin
  uint32_t core_w = 0, core_h = 0;
  uint32_t halo = 0;

  uint32_t data_w() const { return core_w + 2 * halo; }
  uint32_t data_h() const { return core_h + 2 * halo; }

  bool local_in_core(uint32_t lx, uint32_t ly) const {
    return lx >= halo && lx < halo + core_w && ly >= halo && ly < halo + core_h;
  }
  // parent pixel sampled for local (lx, ly), clamped at the image edges
  void parent_sample(uint32_t lx, uint32_t ly, uint32_t parent_w, uint32_t parent_h,
                     uint32_t& px, uint32_t& py) const;
};

// row-major grid: index = tile_row * grid_cols + tile_col
std::vector<TileRect> tile_grid(uint32_t width, uint32_t height, const TilingConfig& cfg);

FrameStack extract_tile(const FrameStack& stack, const TileRect& r);
MaskStack extract_tile_masks(const MaskStack& masks, const TileRect& r);

std::vector<FrameStack> split_stack(const FrameStack& stack, const TilingConfig& cfg);
std::vector<MaskStack> split_masks(const MaskStack& masks, const TilingConfig& cfg);

// halos are dropped; cores concatenated. Tiles are row-major; absent entries
// raise MissingTile, inconsistent shapes raise GeometryMismatch.
Frame reassemble_frame(const std::vector<std::optional<Frame>>& tiles, const TilingConfig& cfg);
FrameStack reassemble(const std::vector<std::optional<FrameStack>>& tiles, const TilingConfig& cfg);

}  // namespace pxnet

#include "pxnet/tiling.hpp"

#include <algorithm>
#include <string>

namespace pxnet {

void TileRect::parent_sample(uint32_t lx, uint32_t ly, uint32_t parent_w, uint32_t parent_h,
                             uint32_t& px, uint32_t& py) const {
  int64_t x = int64_t(core_x) + int64_t(lx) - int64_t(halo);
  int64_t y = int64_t(core_y) + int64_t(ly) - int64_t(halo);
  x = std::clamp<int64_t>(x, 0, int64_t(parent_w) - 1);
  y = std::clamp<int64_t>(y, 0, int64_t(parent_h) - 1);
  px = uint32_t(x);
  py = uint32_t(y);
}

std::vector<TileRect> tile_grid(uint32_t width, uint32_t height, const TilingConfig& cfg) {
  require(cfg.grid_rows >= 1 && cfg.grid_cols >= 1, Err::PreconditionViolation,
          "tiling grid must be at least 1x1");
  require(width >= 1 && height >= 1, Err::PreconditionViolation, "geometry must be >= 1x1");
  if (width % cfg.grid_cols != 0 || height % cfg.grid_rows != 0)
    raise(Err::NonDivisibleGeometry,
          std::to_string(width) + "x" + std::to_string(height) + " not divisible by " +
              std::to_string(cfg.grid_cols) + "x" + std::to_string(cfg.grid_rows) + " grid");
  uint32_t core_w = width / cfg.grid_cols;
  uint32_t core_h = height / cfg.grid_rows;
  require(cfg.halo < core_w && cfg.halo < core_h, Err::PreconditionViolation,
          "halo must be smaller than the tile edge");
  std::vector<TileRect> out;
  out.reserve(size_t(cfg.grid_rows) * cfg.grid_cols);
  for (uint32_t r = 0; r < cfg.grid_rows; ++r)
    for (uint32_t c = 0; c < cfg.grid_cols; ++c)
      out.push_back(TileRect{r, c, c * core_w, r * core_h, core_w, core_h, cfg.halo});
  return out;
}

FrameStack extract_tile(const FrameStack& stack, const TileRect& r) {
  FrameStack out;
  out.frames.reserve(stack.epochs());
  uint32_t pw = stack.width(), ph = stack.height();
  for (const Frame& f : stack.frames) {
    Frame t(r.data_w(), r.data_h());
    t.epoch_index = f.epoch_index;
    t.epoch_time = f.epoch_time;
    t.band = f.band;
    t.exposure = f.exposure;
    for (uint32_t ly = 0; ly < t.height; ++ly)
      for (uint32_t lx = 0; lx < t.width; ++lx) {
        uint32_t px, py;
        r.parent_sample(lx, ly, pw, ph, px, py);
        t.at(lx, ly) = f.at(px, py);
      }
    out.frames.push_back(std::move(t));
  }
  return out;
}

MaskStack extract_tile_masks(const MaskStack& masks, const TileRect& r) {
  MaskStack out;
  out.width = r.data_w();
  out.height = r.data_h();
  out.planes.reserve(masks.epochs());
  for (size_t e = 0; e < masks.epochs(); ++e) {
    std::vector<uint8_t> plane(size_t(out.width) * out.height);
    for (uint32_t ly = 0; ly < out.height; ++ly)
      for (uint32_t lx = 0; lx < out.width; ++lx) {
        uint32_t px, py;
        r.parent_sample(lx, ly, masks.width, masks.height, px, py);
        plane[size_t(ly) * out.width + lx] = masks.at(e, px, py);
      }
    out.planes.push_back(std::move(plane));
  }
  return out;
}

std::vector<FrameStack> split_stack(const FrameStack& stack, const TilingConfig& cfg) {
  stack.validate();
  auto rects = tile_grid(stack.width(), stack.height(), cfg);
  std::vector<FrameStack> out;
  out.reserve(rects.size());
  for (const TileRect& r : rects) out.push_back(extract_tile(stack, r));
  return out;
}

std::vector<MaskStack> split_masks(const MaskStack& masks, const TilingConfig& cfg) {
  auto rects = tile_grid(masks.width, masks.height, cfg);
  std::vector<MaskStack> out;
  out.reserve(rects.size());
  for (const TileRect& r : rects) out.push_back(extract_tile_masks(masks, r));
  return out;
}

Frame reassemble_frame(const std::vector<std::optional<Frame>>& tiles, const TilingConfig& cfg) {
  require(tiles.size() == size_t(cfg.grid_rows) * cfg.grid_cols, Err::GeometryMismatch,
          "tile grid size mismatch");
  const Frame* first = nullptr;
  for (uint32_t r = 0; r < cfg.grid_rows; ++r)
    for (uint32_t c = 0; c < cfg.grid_cols; ++c) {
      const auto& t = tiles[size_t(r) * cfg.grid_cols + c];
      if (!t.has_value())
        raise(Err::MissingTile, "(" + std::to_string(r) + "," + std::to_string(c) + ")");
      if (!first) first = &*t;
    }
  uint32_t dw = first->width, dh = first->height;
  require(dw > 2 * cfg.halo && dh > 2 * cfg.halo, Err::GeometryMismatch,
          "tile smaller than its halo");
  uint32_t core_w = dw - 2 * cfg.halo, core_h = dh - 2 * cfg.halo;
  Frame out(core_w * cfg.grid_cols, core_h * cfg.grid_rows);
  out.epoch_index = first->epoch_index;
  out.epoch_time = first->epoch_time;
  out.band = first->band;
  out.exposure = first->exposure;
  for (uint32_t r = 0; r < cfg.grid_rows; ++r)
    for (uint32_t c = 0; c < cfg.grid_cols; ++c) {
      const Frame& t = *tiles[size_t(r) * cfg.grid_cols + c];
      require(t.width == dw && t.height == dh, Err::GeometryMismatch,
              "tiles disagree on geometry");
      for (uint32_t y = 0; y < core_h; ++y)
        for (uint32_t x = 0; x < core_w; ++x)
          out.at(c * core_w + x, r * core_h + y) = t.at(cfg.halo + x, cfg.halo + y);
    }
  return out;
}

FrameStack reassemble(const std::vector<std::optional<FrameStack>>& tiles,
                      const TilingConfig& cfg) {
  require(tiles.size() == size_t(cfg.grid_rows) * cfg.grid_cols, Err::GeometryMismatch,
          "tile grid size mismatch");
  size_t epochs = 0;
  for (const auto& t : tiles)
    if (t.has_value()) {
      epochs = t->epochs();
      break;
    }
  require(epochs > 0, Err::MissingTile, "no tiles present");
  FrameStack out;
  out.frames.reserve(epochs);
  for (size_t e = 0; e < epochs; ++e) {
    std::vector<std::optional<Frame>> layer(tiles.size());
    for (size_t i = 0; i < tiles.size(); ++i) {
      if (!tiles[i].has_value()) continue;
      require(tiles[i]->epochs() == epochs, Err::GeometryMismatch,
              "tiles disagree on epoch count");
      layer[i] = tiles[i]->frames[e];
    }
    out.frames.push_back(reassemble_frame(layer, cfg));
  }
  return out;
}

}  // namespace pxnet

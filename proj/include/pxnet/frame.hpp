#pragma once
#include <cstdint>
#include <vector>

#include "pxnet/error.hpp"

namespace pxnet {

enum class Band : uint8_t { R = 0, B = 1 };

inline const char* band_name(Band b) { return b == Band::R ? "R" : "B"; }

struct Frame {
  uint32_t width = 0;
  uint32_t height = 0;
  uint32_t epoch_index = 0;
  double epoch_time = 0.0;
  Band band = Band::R;
  double exposure = 1.0;
  std::vector<float> data;  // row-major, width*height

  Frame() = default;
  Frame(uint32_t w, uint32_t h, float fill = 0.0f)
      : width(w), height(h), data(size_t(w) * h, fill) {}

  size_t npix() const { return size_t(width) * height; }
  float at(uint32_t x, uint32_t y) const { return data[size_t(y) * width + x]; }
  float& at(uint32_t x, uint32_t y) { return data[size_t(y) * width + x]; }

  bool same_geometry(const Frame& o) const { return width == o.width && height == o.height; }
  void require_finite(const char* context) const;
};

struct FrameStack {
  std::vector<Frame> frames;

  size_t epochs() const { return frames.size(); }
  uint32_t width() const { return frames.empty() ? 0 : frames[0].width; }
  uint32_t height() const { return frames.empty() ? 0 : frames[0].height; }
  Band band() const { return frames.empty() ? Band::R : frames[0].band; }

  // shared geometry/band, strictly increasing epoch_time, at least one frame
  void validate() const;
};

// per-epoch validity planes travelling with a stack; 1 = valid sample
struct MaskStack {
  uint32_t width = 0;
  uint32_t height = 0;
  std::vector<std::vector<uint8_t>> planes;

  static MaskStack all_valid(uint32_t w, uint32_t h, size_t epochs) {
    MaskStack m;
    m.width = w;
    m.height = h;
    m.planes.assign(epochs, std::vector<uint8_t>(size_t(w) * h, 1));
    return m;
  }
  size_t epochs() const { return planes.size(); }
  uint8_t at(size_t e, uint32_t x, uint32_t y) const { return planes[e][size_t(y) * width + x]; }
  void set(size_t e, uint32_t x, uint32_t y, uint8_t v) { planes[e][size_t(y) * width + x] = v; }
};

}  // namespace pxnet

#pragma once
#include <string>
#include <string_view>

#include "pxnet/frame.hpp"

namespace pxnet {

// PXL1 stack format (one band per file):
//   bytes 0-3  magic "PXL1"
//   u32be width, u32be height, u32be epoch_count, u8 band (0=R,1=B), 3 reserved bytes
//   per epoch: f64be epoch_time, f64be exposure, width*height f32be row-major
//
// PXM1 validity-mask sidecar: same header with magic "PXM1"; per epoch one bit
// plane, 1 bit per pixel packed row-major, MSB first within each byte.

std::string encode_stack(const FrameStack& stack);
FrameStack decode_stack(std::string_view bytes, size_t* consumed = nullptr);
void write_stack(const FrameStack& stack, const std::string& path);
FrameStack read_stack(const std::string& path);

std::string encode_masks(const MaskStack& masks, Band band);
MaskStack decode_masks(std::string_view bytes, size_t* consumed = nullptr, Band* band = nullptr);
void write_masks(const MaskStack& masks, Band band, const std::string& path);
MaskStack read_masks(const std::string& path, Band* band = nullptr);

std::string read_file(const std::string& path);                      // IoFailure if unreadable
void write_file(const std::string& path, std::string_view contents); // IoFailure on error

}  // namespace pxnet

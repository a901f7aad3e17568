#include "pxnet/stack_io.hpp"

#include <fstream>

#include "pxnet/util.hpp"

namespace pxnet {

namespace {

constexpr uint32_t kMaxDim = 1u << 20;            // per-axis pixel cap
constexpr uint64_t kMaxTotalBytes = 1ull << 36;   // header-declared payload cap

void check_dims(uint64_t width, uint64_t height, uint64_t epoch_count, uint64_t bytes_per_px) {
  if (width == 0 || height == 0 || epoch_count == 0 || width > kMaxDim || height > kMaxDim ||
      epoch_count > kMaxDim)
    raise(Err::DimensionOverflow, "header dimensions " + std::to_string(width) + "x" +
                                      std::to_string(height) + "x" + std::to_string(epoch_count));
  // bytes_per_px is scaled by 8 so the bit-packed mask case can use 1
  uint64_t per_epoch = width * height * bytes_per_px / 8 + 16;
  if (per_epoch > kMaxTotalBytes / epoch_count)
    raise(Err::DimensionOverflow, "declared payload too large");
}

Band check_band(uint8_t b) {
  if (b > 1) raise(Err::BadMagic, "band byte out of range");
  return Band(b);
}

void put_header(std::string& out, const char* magic, uint32_t w, uint32_t h, uint32_t epochs,
                Band band) {
  out.append(magic, 4);
  put_u32be(out, w);
  put_u32be(out, h);
  put_u32be(out, epochs);
  put_u8(out, uint8_t(band));
  put_u8(out, 0);
  put_u8(out, 0);
  put_u8(out, 0);
}

}  // namespace

std::string encode_stack(const FrameStack& stack) {
  stack.validate();
  check_dims(stack.width(), stack.height(), stack.epochs(), 32);
  std::string out;
  out.reserve(20 + stack.epochs() * (16 + stack.frames[0].npix() * 4));
  put_header(out, "PXL1", stack.width(), stack.height(), uint32_t(stack.epochs()), stack.band());
  for (const Frame& f : stack.frames) {
    put_f64be(out, f.epoch_time);
    put_f64be(out, f.exposure);
    for (float v : f.data) put_f32be(out, v);
  }
  return out;
}

FrameStack decode_stack(std::string_view bytes, size_t* consumed) {
  ByteReader rd(bytes);
  char magic[4];
  rd.bytes(magic, 4);
  if (std::string_view(magic, 4) != "PXL1")
    raise(Err::BadMagic, "expected PXL1, got \"" + std::string(magic, 4) + "\"");
  uint32_t w = rd.u32be(), h = rd.u32be(), epochs = rd.u32be();
  Band band = check_band(rd.u8());
  rd.u8();
  rd.u8();
  rd.u8();
  check_dims(w, h, epochs, 32);
  FrameStack stack;
  stack.frames.reserve(epochs);
  for (uint32_t e = 0; e < epochs; ++e) {
    Frame f(w, h);
    f.epoch_index = e;
    f.band = band;
    f.epoch_time = rd.f64be();
    f.exposure = rd.f64be();
    for (size_t i = 0; i < f.data.size(); ++i) f.data[i] = rd.f32be();
    stack.frames.push_back(std::move(f));
  }
  if (consumed) *consumed = rd.off;
  stack.validate();
  return stack;
}

void write_stack(const FrameStack& stack, const std::string& path) {
  write_file(path, encode_stack(stack));
}

FrameStack read_stack(const std::string& path) { return decode_stack(read_file(path)); }

std::string encode_masks(const MaskStack& masks, Band band) {
  require(masks.epochs() > 0, Err::PreconditionViolation, "mask stack has no planes");
  check_dims(masks.width, masks.height, masks.epochs(), 1);
  std::string out;
  size_t plane_bytes = (size_t(masks.width) * masks.height + 7) / 8;
  out.reserve(20 + masks.epochs() * plane_bytes);
  put_header(out, "PXM1", masks.width, masks.height, uint32_t(masks.epochs()), band);
  for (const auto& plane : masks.planes) {
    require(plane.size() == size_t(masks.width) * masks.height, Err::GeometryMismatch,
            "mask plane size mismatch");
    uint8_t acc = 0;
    int nbits = 0;
    for (uint8_t v : plane) {
      acc = uint8_t((acc << 1) | (v ? 1 : 0));
      if (++nbits == 8) {
        out.push_back(char(acc));
        acc = 0;
        nbits = 0;
      }
    }
    if (nbits > 0) out.push_back(char(acc << (8 - nbits)));
  }
  return out;
}

MaskStack decode_masks(std::string_view bytes, size_t* consumed, Band* band_out) {
  ByteReader rd(bytes);
  char magic[4];
  rd.bytes(magic, 4);
  if (std::string_view(magic, 4) != "PXM1")
    raise(Err::BadMagic, "expected PXM1, got \"" + std::string(magic, 4) + "\"");
  uint32_t w = rd.u32be(), h = rd.u32be(), epochs = rd.u32be();
  Band band = check_band(rd.u8());
  rd.u8();
  rd.u8();
  rd.u8();
  check_dims(w, h, epochs, 1);
  MaskStack masks;
  masks.width = w;
  masks.height = h;
  size_t npix = size_t(w) * h;
  size_t plane_bytes = (npix + 7) / 8;
  std::vector<uint8_t> packed(plane_bytes);
  for (uint32_t e = 0; e < epochs; ++e) {
    rd.bytes(packed.data(), plane_bytes);
    std::vector<uint8_t> plane(npix);
    for (size_t i = 0; i < npix; ++i)
      plane[i] = (packed[i / 8] >> (7 - (i % 8))) & 1;
    masks.planes.push_back(std::move(plane));
  }
  if (consumed) *consumed = rd.off;
  if (band_out) *band_out = band;
  return masks;
}

void write_masks(const MaskStack& masks, Band band, const std::string& path) {
  write_file(path, encode_masks(masks, band));
}

MaskStack read_masks(const std::string& path, Band* band) {
  return decode_masks(read_file(path), nullptr, band);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(Err::IoFailure, "cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) raise(Err::IoFailure, "read error on " + path);
  return data;
}

void write_file(const std::string& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(Err::IoFailure, "cannot create " + path);
  out.write(contents.data(), std::streamsize(contents.size()));
  if (!out) raise(Err::IoFailure, "write error on " + path);
}

}  // namespace pxnet

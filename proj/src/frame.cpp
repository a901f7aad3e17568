#include "pxnet/frame.hpp"

#include <cmath>

namespace pxnet {

void Frame::require_finite(const char* context) const {
  for (float v : data) {
    if (!std::isfinite(v)) raise(Err::NonFiniteInput, std::string(context) + ": non-finite pixel");
  }
}

void FrameStack::validate() const {
  require(!frames.empty(), Err::PreconditionViolation, "stack has no frames");
  const Frame& f0 = frames[0];
  require(f0.width >= 1 && f0.height >= 1, Err::PreconditionViolation, "frame geometry must be >= 1x1");
  double prev = -1e300;
  for (const Frame& f : frames) {
    require(f.width == f0.width && f.height == f0.height, Err::GeometryMismatch,
            "stack frames disagree on geometry");
    require(f.band == f0.band, Err::GeometryMismatch, "stack frames disagree on band");
    require(f.data.size() == f.npix(), Err::GeometryMismatch, "frame data length mismatch");
    require(f.epoch_time > prev, Err::PreconditionViolation,
            "epoch_time must be strictly increasing");
    prev = f.epoch_time;
  }
}

}  // namespace pxnet

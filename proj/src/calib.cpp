#include "pxnet/calib.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pxnet/util.hpp"

namespace pxnet::calib {

CalibratedFrame apply_prereduction(const Frame& raw, const CalibrationSet& cal) {
  if (!raw.same_geometry(cal.bias) || !raw.same_geometry(cal.dark) || !raw.same_geometry(cal.flat))
    raise(Err::GeometryMismatch, "calibration frames do not match the science frame");

  std::vector<double> scratch(cal.flat.data.begin(), cal.flat.data.end());
  double med = median_inplace(scratch);
  if (std::abs(med) <= 1e-12) raise(Err::FlatDivisionByZero, "flat median is zero");

  CalibratedFrame out;
  out.frame = raw;
  out.valid.assign(raw.npix(), 1);
  for (size_t i = 0; i < raw.npix(); ++i) {
    double flat_norm = double(cal.flat.data[i]) / med;
    if (!(flat_norm > 1e-9))
      raise(Err::FlatDivisionByZero, "flat pixel at index " + std::to_string(i));
    if (double(raw.data[i]) >= cal.saturation_level) out.valid[i] = 0;
    out.frame.data[i] = float((double(raw.data[i]) - double(cal.bias.data[i]) -
                               double(cal.dark.data[i]) * raw.exposure) /
                              flat_norm);
  }
  return out;
}

namespace {

// NCC of frame(x+dx, y+dy) against ref(x, y) over the mutually valid overlap.
// Returns false when the overlap is too small or either patch has no variance.
bool ncc_at(const Frame& frame, const std::vector<uint8_t>& fmask, const Frame& ref,
            const std::vector<uint8_t>& rmask, int dx, int dy, double& score) {
  int w = int(frame.width), h = int(frame.height);
  int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
  int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
  if (x0 >= x1 || y0 >= y1) return false;
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  size_t n = 0;
  for (int y = y0; y < y1; ++y) {
    size_t r_row = size_t(y) * w;
    size_t f_row = size_t(y + dy) * w + dx;
    for (int x = x0; x < x1; ++x) {
      if (!rmask[r_row + x] || !fmask[f_row + x]) continue;
      double a = frame.data[f_row + x];
      double b = ref.data[r_row + x];
      sa += a;
      sb += b;
      saa += a * a;
      sbb += b * b;
      sab += a * b;
      ++n;
    }
  }
  if (n < 16) return false;
  double dn = double(n);
  double va = dn * saa - sa * sa;
  double vb = dn * sbb - sb * sb;
  if (va <= 0 || vb <= 0) return false;
  score = (dn * sab - sa * sb) / std::sqrt(va * vb);
  return true;
}

}  // namespace

std::vector<std::pair<int, int>> solve_geometric_alignment(const FrameStack& stack,
                                                           const MaskStack& masks,
                                                           uint32_t reference_epoch,
                                                           int max_shift) {
  stack.validate();
  require(stack.epochs() >= 2, Err::PreconditionViolation,
          "geometric alignment needs at least two epochs");
  require(reference_epoch < stack.epochs(), Err::PreconditionViolation,
          "reference epoch out of range");
  require(max_shift >= 0, Err::PreconditionViolation, "max_shift must be >= 0");
  require(masks.planes.size() == stack.epochs() && masks.width == stack.width() &&
              masks.height == stack.height(),
          Err::GeometryMismatch, "mask stack does not match the frame stack");

  const Frame& ref = stack.frames[reference_epoch];
  const std::vector<uint8_t>& rmask = masks.planes[reference_epoch];

  std::vector<std::pair<int, int>> shifts(stack.epochs());
  const int side = 2 * max_shift + 1;
  std::vector<double> scores(size_t(side) * side);
  constexpr double kUnusable = -2.0;  // below any attainable correlation

  for (uint32_t e = 0; e < stack.epochs(); ++e) {
    const Frame& frame = stack.frames[e];
    const std::vector<uint8_t>& fmask = masks.planes[e];

    int best_dx = 0, best_dy = 0;
    double best = kUnusable;
    for (int dy = -max_shift; dy <= max_shift; ++dy)
      for (int dx = -max_shift; dx <= max_shift; ++dx) {
        double s = kUnusable;
        if (!ncc_at(frame, fmask, ref, rmask, dx, dy, s)) s = kUnusable;
        scores[size_t(dy + max_shift) * side + (dx + max_shift)] = s;
        bool better = s > best;
        if (!better && s == best && s > kUnusable) {
          int a = std::abs(dx) + std::abs(dy), b = std::abs(best_dx) + std::abs(best_dy);
          better = a < b || (a == b && (dy < best_dy || (dy == best_dy && dx < best_dx)));
        }
        if (better) {
          best = s;
          best_dx = dx;
          best_dy = dy;
        }
      }

    if (best == kUnusable)
      raise(Err::AlignmentAmbiguous, "epoch " + std::to_string(e) + ": no correlation structure");

    // flat-peak check: best must beat everything outside its 3x3 neighbourhood
    double second = kUnusable;
    for (int dy = -max_shift; dy <= max_shift; ++dy)
      for (int dx = -max_shift; dx <= max_shift; ++dx) {
        if (std::max(std::abs(dx - best_dx), std::abs(dy - best_dy)) <= 1) continue;
        second = std::max(second, scores[size_t(dy + max_shift) * side + (dx + max_shift)]);
      }
    if (second > kUnusable && best <= second + 1e-9)
      raise(Err::AlignmentAmbiguous, "epoch " + std::to_string(e) + ": flat correlation peak");

    shifts[e] = {best_dx, best_dy};
  }
  return shifts;
}

std::vector<double> solve_photometric_alignment(const FrameStack& aligned,
                                                const MaskStack& masks,
                                                uint32_t reference_epoch) {
  aligned.validate();
  require(reference_epoch < aligned.epochs(), Err::PreconditionViolation,
          "reference epoch out of range");
  require(masks.planes.size() == aligned.epochs() && masks.width == aligned.width() &&
              masks.height == aligned.height(),
          Err::GeometryMismatch, "mask stack does not match the frame stack");

  size_t npix = size_t(aligned.width()) * aligned.height();
  std::vector<uint8_t> common(npix, 1);
  for (const auto& plane : masks.planes)
    for (size_t i = 0; i < npix; ++i)
      if (!plane[i]) common[i] = 0;
  size_t n_common = size_t(std::count(common.begin(), common.end(), uint8_t(1)));
  if (n_common == 0)
    raise(Err::InsufficientOverlap, "no pixel is valid in every epoch");

  std::vector<double> scratch;
  scratch.reserve(n_common);
  std::vector<double> medians(aligned.epochs());
  for (uint32_t e = 0; e < aligned.epochs(); ++e) {
    scratch.clear();
    const Frame& f = aligned.frames[e];
    for (size_t i = 0; i < npix; ++i)
      if (common[i]) scratch.push_back(f.data[i]);
    medians[e] = median_inplace(scratch);
    if (!(medians[e] > 0))
      raise(Err::DegenerateFrame, "epoch " + std::to_string(e) + ": median <= 0");
  }

  std::vector<double> scales(aligned.epochs());
  for (uint32_t e = 0; e < aligned.epochs(); ++e)
    scales[e] = e == reference_epoch ? 1.0 : medians[reference_epoch] / medians[e];
  return scales;
}

void apply_alignment(FrameStack& stack, MaskStack& masks, const AlignmentSolution& sol) {
  stack.validate();
  require(sol.shifts.size() == stack.epochs() && sol.scales.size() == stack.epochs(),
          Err::PreconditionViolation, "alignment solution does not cover every epoch");
  require(masks.planes.size() == stack.epochs() && masks.width == stack.width() &&
              masks.height == stack.height(),
          Err::GeometryMismatch, "mask stack does not match the frame stack");

  int w = int(stack.width()), h = int(stack.height());
  for (uint32_t e = 0; e < stack.epochs(); ++e) {
    auto [dx, dy] = sol.shifts[e];
    double scale = sol.scales[e];
    require(scale > 0, Err::PreconditionViolation, "alignment scale must be > 0");
    if (std::abs(dx) >= w || std::abs(dy) >= h)
      raise(Err::ShiftExceedsFrame,
            "shift (" + std::to_string(dx) + "," + std::to_string(dy) + ")");

    Frame& f = stack.frames[e];
    std::vector<uint8_t>& m = masks.planes[e];
    if (dx != 0 || dy != 0) {
      Frame shifted(f.width, f.height);
      shifted.epoch_index = f.epoch_index;
      shifted.epoch_time = f.epoch_time;
      shifted.band = f.band;
      shifted.exposure = f.exposure;
      std::vector<uint8_t> smask(m.size(), 0);
      for (int y = 0; y < h; ++y) {
        int sy = y + dy;
        if (sy < 0 || sy >= h) continue;
        for (int x = 0; x < w; ++x) {
          int sx = x + dx;
          if (sx < 0 || sx >= w) continue;
          size_t dst = size_t(y) * w + x, src = size_t(sy) * w + sx;
          shifted.data[dst] = f.data[src];
          smask[dst] = m[src];
        }
      }
      f = std::move(shifted);
      m = std::move(smask);
    }
    if (scale != 1.0)
      for (float& v : f.data) v = float(double(v) * scale);
  }
}

CalibResult calibrate_stack(const FrameStack& raw, const CalibrationSet& cal, int max_shift) {
  raw.validate();
  CalibResult out;
  out.stack.frames.reserve(raw.epochs());
  out.masks.width = raw.width();
  out.masks.height = raw.height();
  for (const Frame& f : raw.frames) {
    CalibratedFrame cf = apply_prereduction(f, cal);
    out.stack.frames.push_back(std::move(cf.frame));
    out.masks.planes.push_back(std::move(cf.valid));
  }

  out.solution.reference_epoch = 0;
  if (raw.epochs() == 1) {
    out.solution.shifts = {{0, 0}};
    out.solution.scales = {1.0};
    return out;
  }

  out.solution.shifts = solve_geometric_alignment(out.stack, out.masks, 0, max_shift);
  AlignmentSolution geo;
  geo.reference_epoch = 0;
  geo.shifts = out.solution.shifts;
  geo.scales.assign(raw.epochs(), 1.0);
  apply_alignment(out.stack, out.masks, geo);

  out.solution.scales = solve_photometric_alignment(out.stack, out.masks, 0);
  AlignmentSolution photo;
  photo.reference_epoch = 0;
  photo.shifts.assign(raw.epochs(), {0, 0});
  photo.scales = out.solution.scales;
  apply_alignment(out.stack, out.masks, photo);
  return out;
}

}  // namespace pxnet::calib

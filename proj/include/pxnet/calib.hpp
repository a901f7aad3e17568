#pragma once
#include <utility>
#include <vector>

#include "pxnet/frame.hpp"

namespace pxnet::calib {

struct CalibrationSet {
  Frame bias;
  Frame dark;  // rate per second
  Frame flat;  // gain map, normalised by its median before use
  double saturation_level = 1e30;  // raw ADU; saturated inputs are masked
};

struct CalibratedFrame {
  Frame frame;
  std::vector<uint8_t> valid;  // 1 = valid; saturated raw pixels are 0
};

// out = (raw - bias - dark*exposure) / (flat / median(flat))
CalibratedFrame apply_prereduction(const Frame& raw, const CalibrationSet& cal);

struct AlignmentSolution {
  uint32_t reference_epoch = 0;
  std::vector<std::pair<int, int>> shifts;  // content displacement vs reference
  std::vector<double> scales;
};

// Integer (dx,dy) per epoch maximising normalised cross-correlation with the
// reference over [-max_shift, max_shift]^2; ties by smallest |dx|+|dy|, then dy, then dx.
std::vector<std::pair<int, int>> solve_geometric_alignment(const FrameStack& stack,
                                                           const MaskStack& masks,
                                                           uint32_t reference_epoch,
                                                           int max_shift);

// scale_e = median(reference)/median(frame_e) over the region valid in every epoch
std::vector<double> solve_photometric_alignment(const FrameStack& aligned,
                                                const MaskStack& masks,
                                                uint32_t reference_epoch);

// Translate content by -(dx,dy) (vacated pixels invalid) and multiply by scale.
void apply_alignment(FrameStack& stack, MaskStack& masks, const AlignmentSolution& sol);

struct CalibResult {
  FrameStack stack;
  MaskStack masks;
  AlignmentSolution solution;
};

// prereduction + geometric + photometric alignment against epoch 0
CalibResult calibrate_stack(const FrameStack& raw, const CalibrationSet& cal, int max_shift);

}  // namespace pxnet::calib

#pragma once
#include <cstdint>
#include <vector>

#include "pxnet/frame.hpp"

namespace pxnet::trigger1 {

struct Trigger1Config {
  double n_sigma = 3.0;
  int min_run = 3;
  int proximity_window = 10;  // samples
  double k_obj = 5.0;
  double m_cr = 8.0;
  double n_cr = 2.0;
  double cutoff_sigma_px = 6.0;
  double read_noise_sigma = 0.0;
  double saturation_level = 1e30;  // in calibrated flux units at this stage
};

// High-pass in Fourier space: every component scaled by 1 - exp(-|f|^2/(2 fc^2)),
// fc = 1/(2*pi*cutoff_sigma_px), f in cycles/pixel, DC removed. Equivalent to
// subtracting a Gaussian blur of spatial sigma = cutoff_sigma_px.
Frame fourier_filter(const Frame& frame, double cutoff_sigma_px);

struct ObjectFilterResult {
  FrameStack filtered;               // per-epoch high-pass frames
  std::vector<uint8_t> object_mask;  // 1 = static-object pixel, excluded from curves
};
ObjectFilterResult star_object_filter(const FrameStack& stack, const MaskStack& masks,
                                      double cutoff_sigma_px, double k_obj);

// In-place validity updates: saturated samples, isolated single-epoch spikes.
// Pixels invalid in more than half the epochs are flagged in pixel_excluded.
void cosmic_saturation_filter(const FrameStack& stack, MaskStack& masks,
                              double saturation_level, double m_cr, double n_cr,
                              std::vector<uint8_t>& pixel_excluded);

struct LightCurve {
  uint32_t x = 0, y = 0;  // tile-local data coords until ingest maps to parent frame
  Band band = Band::R;
  std::vector<double> epoch_time;
  std::vector<double> flux;
  std::vector<double> error;
  std::vector<uint8_t> valid;

  size_t n() const { return flux.size(); }
  size_t n_valid() const;
};

// One curve per non-excluded pixel of [x0,x1) x [y0,y1); flux from the stack,
// error = sqrt(read_noise^2 + max(flux, 0)). Pixels with no valid sample are skipped.
std::vector<LightCurve> build_light_curves(const FrameStack& stack, const MaskStack& masks,
                                           const std::vector<uint8_t>& pixel_excluded,
                                           double read_noise_sigma, uint32_t x0, uint32_t y0,
                                           uint32_t x1, uint32_t y1);

struct Peak {
  int start_index = 0;
  int end_index = 0;
  int apex_index = 0;
  double significance = 0.0;  // max (flux - baseline)/sigma inside the run
};

// baseline = median(valid flux), sigma = 1.4826*MAD; a peak is a maximal run of
// >= min_run consecutive valid samples above baseline + n_sigma*sigma.
std::vector<Peak> detect_peaks(const LightCurve& curve, double n_sigma, int min_run);

enum class PeakClass { Single, Double, Multiple };

struct PeakClassification {
  PeakClass klass = PeakClass::Single;
  bool planetary_flag = false;  // Double with a nearby weaker secondary
};
PeakClassification classify_peaks(const std::vector<Peak>& peaks, int proximity_window);

const char* peak_class_name(PeakClass c);

}  // namespace pxnet::trigger1

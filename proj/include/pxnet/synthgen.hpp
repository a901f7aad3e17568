#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pxnet/frame.hpp"

namespace pxnet::synthgen {

struct Star {
  double x = 0, y = 0;       // subpixel position
  double flux = 0;           // total ADU
  double extent_sigma = 0;   // 0 = point source; >> psf_sigma models extended objects
};

struct SkyModel {
  std::vector<Star> stars;
  double psf_sigma = 1.5;
  double sky_background = 0.0;
  // sigma = sqrt(read_noise^2 + max(signal, 0)); read_noise_sigma == 0 renders noiseless
  double read_noise_sigma = 0.0;
};

struct InjectedEvent {
  double x = 0, y = 0;
  double u0 = 0.3;
  double t0 = 0.0;
  double tE = 1.0;
  double source_flux = 0.0;
  std::string truth_id;
};

struct ArtifactModel {
  double bias_level = 0.0;
  double bias_pattern_amp = 0.0;  // smooth spatial pattern on top of bias_level
  double dark_rate = 0.0;         // ADU per second per pixel
  double flat_rms = 0.0;          // pixel-to-pixel gain scatter; flat mean is 1.0
  uint64_t pattern_seed = 1;      // fixes the flat map (and nothing else)
  double cosmic_ray_rate = 0.0;   // expected deposits per frame
  double saturation_level = 1e30; // raw ADU clip
  std::vector<std::pair<int, int>> frame_shifts;  // per-epoch (dx, dy); empty = none
  std::vector<double> photometric_gains;          // per-epoch factor; empty = unity
};

struct TruthEvent {
  std::string truth_id;
  double x = 0, y = 0, u0 = 0, t0 = 0, tE = 0, source_flux = 0;
};

struct TruthCosmic {
  uint32_t x = 0, y = 0;
  uint32_t epoch = 0;
};

struct Geometry {
  uint32_t width = 0, height = 0;
};

struct Campaign {
  FrameStack raw;
  Frame bias, dark, flat;  // master calibration frames (noiseless)
  std::vector<TruthEvent> events;
  std::vector<TruthCosmic> cosmics;
};

// Deterministic for fixed inputs+seed. Per-epoch rendering draws from an
// independent sub-stream derived from (seed, epoch_index).
Campaign render_campaign(const SkyModel& sky, const std::vector<InjectedEvent>& events,
                         const ArtifactModel& art, const std::vector<double>& epochs,
                         uint64_t seed, Geometry geom, Band band = Band::R,
                         double exposure = 1.0);

void make_calibration_frames(const ArtifactModel& art, Geometry geom, Frame& bias,
                             Frame& dark, Frame& flat);

// truth table as JSON-lines: {truth_id, x, y, u0, t0, tE, source_flux}
void write_truth(const std::vector<TruthEvent>& events, const std::string& path);
std::vector<TruthEvent> read_truth(const std::string& path);

// Gaussian PSF helper shared with tests: kernel truncated at 5*sigma and
// normalised to unit sum over the truncated window.
void add_psf(std::vector<double>& img, uint32_t width, uint32_t height, double x, double y,
             double flux, double sigma);

}  // namespace pxnet::synthgen

#include "pxnet/trigger1.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

#include <fftw3.h>

#include "pxnet/util.hpp"

namespace pxnet::trigger1 {

namespace {

struct PlanPair {
  fftw_plan fwd = nullptr;
  fftw_plan inv = nullptr;
};

// FFTW planning is not thread-safe; execution through the new-array interface is.
std::mutex g_plan_mutex;
std::map<std::pair<uint32_t, uint32_t>, PlanPair>& plan_cache() {
  static std::map<std::pair<uint32_t, uint32_t>, PlanPair> cache;
  return cache;
}

PlanPair get_plans(uint32_t w, uint32_t h) {
  std::lock_guard<std::mutex> lock(g_plan_mutex);
  auto& cache = plan_cache();
  auto it = cache.find({w, h});
  if (it != cache.end()) return it->second;

  size_t n_real = size_t(w) * h;
  size_t n_cplx = size_t(h) * (w / 2 + 1);
  double* re = fftw_alloc_real(n_real);
  fftw_complex* cx = fftw_alloc_complex(n_cplx);
  PlanPair p;
  p.fwd = fftw_plan_dft_r2c_2d(int(h), int(w), re, cx, FFTW_ESTIMATE);
  p.inv = fftw_plan_dft_c2r_2d(int(h), int(w), cx, re, FFTW_ESTIMATE);
  fftw_free(re);
  fftw_free(cx);
  require(p.fwd && p.inv, Err::PreconditionViolation, "fftw plan creation failed");
  cache[{w, h}] = p;
  return p;
}

}  // namespace

Frame fourier_filter(const Frame& frame, double cutoff_sigma_px) {
  require(cutoff_sigma_px > 0, Err::PreconditionViolation, "cutoff_sigma_px must be > 0");
  frame.require_finite("fourier_filter input");
  uint32_t w = frame.width, h = frame.height;
  PlanPair plans = get_plans(w, h);

  size_t n_real = size_t(w) * h;
  size_t n_cplx = size_t(h) * (w / 2 + 1);
  double* re = fftw_alloc_real(n_real);
  fftw_complex* cx = fftw_alloc_complex(n_cplx);
  for (size_t i = 0; i < n_real; ++i) re[i] = frame.data[i];
  fftw_execute_dft_r2c(plans.fwd, re, cx);

  double fc = 1.0 / (6.283185307179586 * cutoff_sigma_px);
  double inv2fc2 = 1.0 / (2.0 * fc * fc);
  for (uint32_t ky = 0; ky < h; ++ky) {
    double fy = (ky <= h / 2 ? double(ky) : double(ky) - double(h)) / double(h);
    for (uint32_t kx = 0; kx <= w / 2; ++kx) {
      double fx = double(kx) / double(w);
      size_t i = size_t(ky) * (w / 2 + 1) + kx;
      double gain = (kx == 0 && ky == 0) ? 0.0 : 1.0 - std::exp(-(fx * fx + fy * fy) * inv2fc2);
      cx[i][0] *= gain;
      cx[i][1] *= gain;
    }
  }

  fftw_execute_dft_c2r(plans.inv, cx, re);
  Frame out = frame;
  double norm = 1.0 / double(n_real);
  for (size_t i = 0; i < n_real; ++i) out.data[i] = float(re[i] * norm);
  fftw_free(re);
  fftw_free(cx);
  return out;
}

ObjectFilterResult star_object_filter(const FrameStack& stack, const MaskStack& masks,
                                      double cutoff_sigma_px, double k_obj) {
  stack.validate();
  require(masks.planes.size() == stack.epochs() && masks.width == stack.width() &&
              masks.height == stack.height(),
          Err::GeometryMismatch, "mask stack does not match the frame stack");

  ObjectFilterResult out;
  out.filtered.frames.reserve(stack.epochs());
  size_t npix = size_t(stack.width()) * stack.height();

  std::vector<double> vals;
  vals.reserve(npix);
  std::vector<double> frame_sigmas;
  for (uint32_t e = 0; e < stack.epochs(); ++e) {
    Frame f = fourier_filter(stack.frames[e], cutoff_sigma_px);
    vals.clear();
    const std::vector<uint8_t>& m = masks.planes[e];
    for (size_t i = 0; i < npix; ++i)
      if (m[i]) vals.push_back(f.data[i]);
    if (!vals.empty()) frame_sigmas.push_back(mad_sigma(vals));
    out.filtered.frames.push_back(std::move(f));
  }
  double sigma_frame = frame_sigmas.empty() ? 0.0 : median(frame_sigmas);

  out.object_mask.assign(npix, 0);
  std::vector<double> per_pixel;
  per_pixel.reserve(stack.epochs());
  for (size_t i = 0; i < npix; ++i) {
    per_pixel.clear();
    for (uint32_t e = 0; e < stack.epochs(); ++e)
      if (masks.planes[e][i])
        per_pixel.push_back(std::abs(out.filtered.frames[e].data[i]));
    if (per_pixel.empty()) {
      out.object_mask[i] = 1;  // no photometric information at all
      continue;
    }
    if (median_inplace(per_pixel) > k_obj * sigma_frame) out.object_mask[i] = 1;
  }
  return out;
}

void cosmic_saturation_filter(const FrameStack& stack, MaskStack& masks,
                              double saturation_level, double m_cr, double n_cr,
                              std::vector<uint8_t>& pixel_excluded) {
  stack.validate();
  require(masks.planes.size() == stack.epochs() && masks.width == stack.width() &&
              masks.height == stack.height(),
          Err::GeometryMismatch, "mask stack does not match the frame stack");

  size_t npix = size_t(stack.width()) * stack.height();
  uint32_t n_epochs = stack.epochs();

  for (uint32_t e = 0; e < n_epochs; ++e) {
    const Frame& f = stack.frames[e];
    std::vector<uint8_t>& m = masks.planes[e];
    for (size_t i = 0; i < npix; ++i)
      if (m[i] && double(f.data[i]) >= saturation_level) m[i] = 0;
  }

  pixel_excluded.assign(npix, 0);
  for (size_t i = 0; i < npix; ++i) {
    uint32_t invalid = 0;
    for (uint32_t e = 0; e < n_epochs; ++e)
      if (!masks.planes[e][i]) ++invalid;
    if (invalid * 2 > n_epochs) pixel_excluded[i] = 1;
  }

  // isolated single-epoch spikes: sample far above baseline with both temporal
  // neighbours valid and close to baseline
  std::vector<double> vals;
  vals.reserve(n_epochs);
  for (size_t i = 0; i < npix; ++i) {
    if (pixel_excluded[i]) continue;
    vals.clear();
    for (uint32_t e = 0; e < n_epochs; ++e)
      if (masks.planes[e][i]) vals.push_back(stack.frames[e].data[i]);
    if (vals.size() < 3) continue;
    std::vector<double> copy(vals);
    double base = median_inplace(copy);
    double sigma = mad_sigma(vals);
    if (!(sigma > 0)) continue;
    for (uint32_t e = 1; e + 1 < n_epochs; ++e) {
      if (!masks.planes[e][i] || !masks.planes[e - 1][i] || !masks.planes[e + 1][i]) continue;
      double v = stack.frames[e].data[i];
      double prev = stack.frames[e - 1].data[i];
      double next = stack.frames[e + 1].data[i];
      if (v > base + m_cr * sigma && std::abs(prev - base) <= n_cr * sigma &&
          std::abs(next - base) <= n_cr * sigma)
        masks.planes[e][i] = 0;
    }
  }
}

size_t LightCurve::n_valid() const {
  return size_t(std::count(valid.begin(), valid.end(), uint8_t(1)));
}

std::vector<LightCurve> build_light_curves(const FrameStack& stack, const MaskStack& masks,
                                           const std::vector<uint8_t>& pixel_excluded,
                                           double read_noise_sigma, uint32_t x0, uint32_t y0,
                                           uint32_t x1, uint32_t y1) {
  stack.validate();
  require(x1 <= stack.width() && y1 <= stack.height() && x0 <= x1 && y0 <= y1,
          Err::PreconditionViolation, "curve region exceeds the stack");
  require(masks.planes.size() == stack.epochs() && masks.width == stack.width() &&
              masks.height == stack.height(),
          Err::GeometryMismatch, "mask stack does not match the frame stack");
  size_t npix = size_t(stack.width()) * stack.height();
  require(pixel_excluded.size() == npix, Err::PreconditionViolation,
          "pixel_excluded does not match the stack geometry");

  double rn2 = read_noise_sigma * read_noise_sigma;
  std::vector<LightCurve> out;
  for (uint32_t y = y0; y < y1; ++y)
    for (uint32_t x = x0; x < x1; ++x) {
      size_t p = size_t(y) * stack.width() + x;
      if (pixel_excluded[p]) continue;
      LightCurve c;
      c.x = x;
      c.y = y;
      c.band = stack.band();
      c.epoch_time.reserve(stack.epochs());
      c.flux.reserve(stack.epochs());
      c.error.reserve(stack.epochs());
      c.valid.reserve(stack.epochs());
      size_t nv = 0;
      for (uint32_t e = 0; e < stack.epochs(); ++e) {
        double flux = stack.frames[e].data[p];
        c.epoch_time.push_back(stack.frames[e].epoch_time);
        c.flux.push_back(flux);
        c.error.push_back(std::sqrt(rn2 + std::max(flux, 0.0)));
        uint8_t v = masks.planes[e][p];
        c.valid.push_back(v);
        nv += v;
      }
      if (nv == 0) continue;
      out.push_back(std::move(c));
    }
  return out;
}

std::vector<Peak> detect_peaks(const LightCurve& curve, double n_sigma, int min_run) {
  require(min_run >= 1, Err::PreconditionViolation, "min_run must be >= 1");
  std::vector<double> vals;
  vals.reserve(curve.n());
  for (size_t i = 0; i < curve.n(); ++i)
    if (curve.valid[i]) vals.push_back(curve.flux[i]);
  if (vals.size() < size_t(2 * min_run))
    raise(Err::InsufficientData,
          "curve has " + std::to_string(vals.size()) + " valid samples, needs " +
              std::to_string(2 * min_run));

  std::vector<double> copy(vals);
  double baseline = median_inplace(copy);
  double sigma = mad_sigma(vals);
  double sig_floor = std::max(sigma, 1e-12);  // keeps significance finite on noiseless curves
  double threshold = baseline + n_sigma * sigma;

  std::vector<Peak> peaks;
  size_t i = 0, n = curve.n();
  while (i < n) {
    if (!curve.valid[i] || !(curve.flux[i] > threshold)) {
      ++i;
      continue;
    }
    size_t start = i;
    size_t apex = i;
    while (i < n && curve.valid[i] && curve.flux[i] > threshold) {
      if (curve.flux[i] > curve.flux[apex]) apex = i;
      ++i;
    }
    size_t end = i - 1;
    if (end - start + 1 >= size_t(min_run)) {
      Peak p;
      p.start_index = int(start);
      p.end_index = int(end);
      p.apex_index = int(apex);
      p.significance = (curve.flux[apex] - baseline) / sig_floor;
      peaks.push_back(p);
    }
  }
  return peaks;
}

PeakClassification classify_peaks(const std::vector<Peak>& peaks, int proximity_window) {
  if (peaks.empty()) raise(Err::EmptyPeakList, "no peaks to classify");
  PeakClassification out;
  if (peaks.size() == 1) {
    out.klass = PeakClass::Single;
  } else if (peaks.size() == 2) {
    out.klass = PeakClass::Double;
    int gap = peaks[1].start_index - peaks[0].end_index - 1;
    double lo = std::min(peaks[0].significance, peaks[1].significance);
    double hi = std::max(peaks[0].significance, peaks[1].significance);
    out.planetary_flag = gap <= proximity_window && lo < hi;
  } else {
    out.klass = PeakClass::Multiple;
  }
  return out;
}

const char* peak_class_name(PeakClass c) {
  switch (c) {
    case PeakClass::Single: return "Single";
    case PeakClass::Double: return "Double";
    case PeakClass::Multiple: return "Multiple";
  }
  return "Single";
}

}  // namespace pxnet::trigger1

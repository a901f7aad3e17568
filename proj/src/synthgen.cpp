#include "pxnet/synthgen.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "pxnet/stack_io.hpp"
#include "pxnet/trigger2.hpp"
#include "pxnet/util.hpp"

namespace pxnet::synthgen {

void add_psf(std::vector<double>& img, uint32_t width, uint32_t height, double x, double y,
             double flux, double sigma) {
  // pixel centres sit at integer coordinates; kernel truncated at 5 sigma and
  // normalised over the truncated window so in-frame sources conserve flux
  int radius = int(std::ceil(5.0 * sigma));
  int cx = int(std::lround(x)), cy = int(std::lround(y));
  double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  double wsum = 0.0;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      double ex = cx + dx - x, ey = cy + dy - y;
      wsum += std::exp(-(ex * ex + ey * ey) * inv2s2);
    }
  if (wsum <= 0) return;
  double scale = flux / wsum;
  for (int dy = -radius; dy <= radius; ++dy) {
    int py = cy + dy;
    if (py < 0 || py >= int(height)) continue;
    for (int dx = -radius; dx <= radius; ++dx) {
      int px = cx + dx;
      if (px < 0 || px >= int(width)) continue;
      double ex = px - x, ey = py - y;
      img[size_t(py) * width + px] += scale * std::exp(-(ex * ex + ey * ey) * inv2s2);
    }
  }
}

void make_calibration_frames(const ArtifactModel& art, Geometry geom, Frame& bias, Frame& dark,
                             Frame& flat) {
  require(geom.width >= 1 && geom.height >= 1, Err::PreconditionViolation,
          "calibration frames need a non-empty geometry");
  bias = Frame(geom.width, geom.height);
  dark = Frame(geom.width, geom.height, float(art.dark_rate));
  flat = Frame(geom.width, geom.height, 1.0f);
  double tau = 6.283185307179586;
  for (uint32_t y = 0; y < geom.height; ++y)
    for (uint32_t x = 0; x < geom.width; ++x) {
      double pattern = std::sin(tau * (x + 0.5) / geom.width) * std::cos(tau * (y + 0.5) / geom.height);
      bias.at(x, y) = float(art.bias_level + art.bias_pattern_amp * pattern);
    }
  if (art.flat_rms > 0) {
    Rng rng(art.pattern_seed);
    double sum = 0.0;
    std::vector<double> map(flat.npix());
    for (double& v : map) {
      v = 1.0 + art.flat_rms * rng.gaussian();
      sum += v;
    }
    double mean = sum / double(map.size());
    for (size_t i = 0; i < map.size(); ++i)
      flat.data[i] = float(std::max(map[i] / mean, 0.05));
  }
}

Campaign render_campaign(const SkyModel& sky, const std::vector<InjectedEvent>& events,
                         const ArtifactModel& art, const std::vector<double>& epochs,
                         uint64_t seed, Geometry geom, Band band, double exposure) {
  require(geom.width >= 1 && geom.height >= 1, Err::PreconditionViolation,
          "campaign needs a non-empty geometry");
  if (epochs.empty()) raise(Err::EmptyEpochList, "no epochs given");
  for (size_t i = 1; i < epochs.size(); ++i)
    require(epochs[i] > epochs[i - 1], Err::PreconditionViolation,
            "epochs must be strictly increasing");
  require(sky.psf_sigma > 0, Err::PreconditionViolation, "psf_sigma must be positive");
  for (const Star& s : sky.stars) {
    require(s.flux >= 0, Err::PreconditionViolation, "star flux must be >= 0");
    require(s.x >= 0 && s.x < geom.width && s.y >= 0 && s.y < geom.height,
            Err::PreconditionViolation, "star outside frame bounds");
  }
  for (const InjectedEvent& ev : events) {
    require(ev.u0 > 0 && ev.tE > 0, Err::PreconditionViolation, "event needs u0 > 0, tE > 0");
    if (!(ev.x >= 0 && ev.x < geom.width && ev.y >= 0 && ev.y < geom.height))
      raise(Err::EventOutOfBounds, "event " + ev.truth_id);
  }
  if (!art.frame_shifts.empty())
    require(art.frame_shifts.size() == epochs.size(), Err::PreconditionViolation,
            "frame_shifts must cover every epoch");
  if (!art.photometric_gains.empty())
    require(art.photometric_gains.size() == epochs.size(), Err::PreconditionViolation,
            "photometric_gains must cover every epoch");
  require(art.saturation_level > sky.sky_background, Err::PreconditionViolation,
          "saturation_level must exceed the sky background");

  Campaign camp;
  make_calibration_frames(art, geom, camp.bias, camp.dark, camp.flat);

  size_t npix = size_t(geom.width) * geom.height;
  std::vector<double> img(npix);
  camp.raw.frames.reserve(epochs.size());

  for (size_t e = 0; e < epochs.size(); ++e) {
    double t = epochs[e];
    auto [dx, dy] = art.frame_shifts.empty() ? std::pair<int, int>{0, 0} : art.frame_shifts[e];
    double gain = art.photometric_gains.empty() ? 1.0 : art.photometric_gains[e];
    std::fill(img.begin(), img.end(), 0.0);

    for (const Star& s : sky.stars) {
      double sigma = std::hypot(sky.psf_sigma, s.extent_sigma);
      add_psf(img, geom.width, geom.height, s.x + dx, s.y + dy, s.flux, sigma);
    }
    for (const InjectedEvent& ev : events) {
      double tau = (t - ev.t0) / ev.tE;
      double u = std::sqrt(ev.u0 * ev.u0 + tau * tau);
      // the source star itself is an unresolved part of the static background;
      // only the lensing variation f_source*(A-1) rises above it, which is the
      // same point-lens form the fitter solves for and keeps event pixels out
      // of the static-object mask
      add_psf(img, geom.width, geom.height, ev.x + dx, ev.y + dy,
              ev.source_flux * (trigger2::amplification(u) - 1.0), sky.psf_sigma);
    }

    Frame f(geom.width, geom.height);
    f.epoch_index = uint32_t(e);
    f.epoch_time = t;
    f.band = band;
    f.exposure = exposure;

    Rng rng = Rng::stream(seed, e);
    bool noisy = sky.read_noise_sigma > 0;
    double rn2 = sky.read_noise_sigma * sky.read_noise_sigma;
    for (size_t i = 0; i < npix; ++i) {
      double signal = (img[i] + sky.sky_background) * camp.flat.data[i] * gain +
                      double(camp.dark.data[i]) * exposure;
      double v = signal + double(camp.bias.data[i]);
      if (noisy) v += rng.gaussian() * std::sqrt(rn2 + std::max(signal, 0.0));
      f.data[i] = float(std::min(v, art.saturation_level));
    }

    if (art.cosmic_ray_rate > 0) {
      uint32_t hits = rng.poisson(art.cosmic_ray_rate);
      for (uint32_t k = 0; k < hits; ++k) {
        uint32_t cx = rng.below(geom.width), cy = rng.below(geom.height);
        f.at(cx, cy) = float(std::min(art.saturation_level * 1.5, art.saturation_level));
        camp.cosmics.push_back(TruthCosmic{cx, cy, uint32_t(e)});
      }
    }
    camp.raw.frames.push_back(std::move(f));
  }

  camp.events.reserve(events.size());
  for (const InjectedEvent& ev : events)
    camp.events.push_back(TruthEvent{ev.truth_id, ev.x, ev.y, ev.u0, ev.t0, ev.tE, ev.source_flux});
  return camp;
}

void write_truth(const std::vector<TruthEvent>& events, const std::string& path) {
  std::string out;
  for (const TruthEvent& e : events) {
    nlohmann::json j{{"truth_id", e.truth_id}, {"x", e.x},   {"y", e.y},
                     {"u0", e.u0},             {"t0", e.t0}, {"tE", e.tE},
                     {"source_flux", e.source_flux}};
    out += j.dump();
    out += '\n';
  }
  write_file(path, out);
}

std::vector<TruthEvent> read_truth(const std::string& path) {
  std::string text = read_file(path);
  std::vector<TruthEvent> out;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    out.push_back(TruthEvent{j.at("truth_id").get<std::string>(), j.at("x").get<double>(),
                             j.at("y").get<double>(), j.at("u0").get<double>(),
                             j.at("t0").get<double>(), j.at("tE").get<double>(),
                             j.at("source_flux").get<double>()});
  }
  return out;
}

}  // namespace pxnet::synthgen

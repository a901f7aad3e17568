#pragma once
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "pxnet/tiling.hpp"
#include "pxnet/trigger1.hpp"
#include "pxnet/trigger2.hpp"

namespace pxnet {

// One config drives every stage. Text format: `key = value` lines, '#' comments.
// The science digest (stable FNV-1a of the canonical science keys) is stamped
// into tasks and the catalog so mixed-threshold runs are rejected.
struct RunConfig {
  // geometry / campaign
  uint32_t width = 512, height = 512;
  uint32_t epochs = 50;
  double epoch_spacing_days = 1.0;
  double exposure_s = 1.0;
  uint64_t seed = 1;
  int bands = 1;
  std::string run_id = "run";

  // synthetic field
  uint32_t n_stars = 200;
  int n_events = 10;
  double psf_sigma = 1.5;
  double sky_background = 200.0;
  double read_noise = 5.0;
  double bias_level = 100.0;
  double bias_pattern_amp = 2.0;
  double dark_rate = 0.5;
  double flat_rms = 0.02;
  double cosmic_ray_rate = 0.5;
  double saturation_level = 60000.0;  // raw ADU
  int max_applied_shift = 2;
  double gain_jitter = 0.02;

  // tiling
  uint32_t grid_rows = 4, grid_cols = 4;
  uint32_t halo = 18;

  // calibration
  int max_shift = 4;

  // trigger 1
  double n_sigma = 3.0;
  int min_run = 3;
  int proximity_window = 10;
  double k_obj = 5.0;
  double m_cr = 8.0;
  double n_cr = 2.0;
  double cutoff_sigma_px = 6.0;
  double trigger_saturation = 59000.0;  // calibrated flux units

  // trigger 2
  double max_reduced_chi2 = 2.0;
  double min_delta_chi2 = 25.0;
  double color_threshold = 0.7;

  // distribution
  std::string payload_mode = "inline";  // inline | path
  double heartbeat_interval_s = 2.0;
  double heartbeat_timeout_s = 5.0;
  int retry_budget = 3;
  double idle_abort_s = 0.0;
  double worker_recv_timeout_s = 60.0;
  int threads = 1;

  // alert sinks: "stdout", "file:PATH", "webhook:URL" (semicolon separated)
  std::string alert_sinks = "stdout";
  double alert_min_significance = 0.0;

  void apply_kv(const std::string& key, const std::string& value);  // ConfigError on bad input
  void validate() const;                                            // module invariants
  std::string canonical_science() const;  // canonical serialization of science keys
  std::string digest() const;             // hex FNV-1a64 of canonical_science()
  nlohmann::json snapshot() const;
  std::string to_text() const;            // full config, parseable by parse_file

  TilingConfig tiling() const { return {grid_rows, grid_cols, halo}; }
  trigger1::Trigger1Config trigger1_config() const;
  trigger2::DecisionConfig trigger2_config() const;

  static RunConfig parse_file(const std::string& path);
  static RunConfig parse_text(const std::string& text);
};

}  // namespace pxnet

#include "pxnet/run_config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <variant>

#include "pxnet/error.hpp"
#include "pxnet/util.hpp"

namespace pxnet {
namespace {

using Member = std::variant<uint32_t RunConfig::*, uint64_t RunConfig::*, int RunConfig::*,
                            double RunConfig::*, std::string RunConfig::*>;

struct KeyDef {
  const char* name;
  Member member;
  bool science;  // part of the digest: changes the analysis result of a run
};

// One table drives apply_kv, to_text, snapshot and the science digest so the
// four can never drift apart. Order here is the canonical serialization order.
const KeyDef kKeys[] = {
    {"width", &RunConfig::width, true},
    {"height", &RunConfig::height, true},
    {"epochs", &RunConfig::epochs, false},
    {"epoch_spacing_days", &RunConfig::epoch_spacing_days, false},
    {"exposure_s", &RunConfig::exposure_s, false},
    {"seed", &RunConfig::seed, false},
    {"bands", &RunConfig::bands, false},
    {"run_id", &RunConfig::run_id, false},
    {"n_stars", &RunConfig::n_stars, false},
    {"n_events", &RunConfig::n_events, false},
    {"psf_sigma", &RunConfig::psf_sigma, false},
    {"sky_background", &RunConfig::sky_background, false},
    {"read_noise", &RunConfig::read_noise, true},
    {"bias_level", &RunConfig::bias_level, false},
    {"bias_pattern_amp", &RunConfig::bias_pattern_amp, false},
    {"dark_rate", &RunConfig::dark_rate, false},
    {"flat_rms", &RunConfig::flat_rms, false},
    {"cosmic_ray_rate", &RunConfig::cosmic_ray_rate, false},
    {"saturation_level", &RunConfig::saturation_level, false},
    {"max_applied_shift", &RunConfig::max_applied_shift, false},
    {"gain_jitter", &RunConfig::gain_jitter, false},
    {"grid_rows", &RunConfig::grid_rows, true},
    {"grid_cols", &RunConfig::grid_cols, true},
    {"halo", &RunConfig::halo, true},
    {"max_shift", &RunConfig::max_shift, true},
    {"n_sigma", &RunConfig::n_sigma, true},
    {"min_run", &RunConfig::min_run, true},
    {"proximity_window", &RunConfig::proximity_window, true},
    {"k_obj", &RunConfig::k_obj, true},
    {"m_cr", &RunConfig::m_cr, true},
    {"n_cr", &RunConfig::n_cr, true},
    {"cutoff_sigma_px", &RunConfig::cutoff_sigma_px, true},
    {"trigger_saturation", &RunConfig::trigger_saturation, true},
    {"max_reduced_chi2", &RunConfig::max_reduced_chi2, true},
    {"min_delta_chi2", &RunConfig::min_delta_chi2, true},
    {"color_threshold", &RunConfig::color_threshold, true},
    {"payload_mode", &RunConfig::payload_mode, false},
    {"heartbeat_interval_s", &RunConfig::heartbeat_interval_s, false},
    {"heartbeat_timeout_s", &RunConfig::heartbeat_timeout_s, false},
    {"retry_budget", &RunConfig::retry_budget, false},
    {"idle_abort_s", &RunConfig::idle_abort_s, false},
    {"worker_recv_timeout_s", &RunConfig::worker_recv_timeout_s, false},
    {"threads", &RunConfig::threads, false},
    {"alert_sinks", &RunConfig::alert_sinks, false},
    {"alert_min_significance", &RunConfig::alert_min_significance, false},
};

std::string trim(std::string_view s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  size_t e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* b = value.data();
  const char* e = b + value.size();
  std::from_chars_result r;
  if constexpr (std::is_floating_point_v<T>)
    r = std::from_chars(b, e, out);
  else
    r = std::from_chars(b, e, out);
  if (r.ec != std::errc{} || r.ptr != e)
    raise(Err::ConfigError, "bad value for " + key + ": '" + value + "'");
  return out;
}

std::string fmt_double(double v) {
  if (!std::isfinite(v)) raise(Err::ConfigError, "non-finite config value");
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
  return std::string(buf, r.ptr);
}

std::string fmt_member(const RunConfig& c, const Member& m) {
  return std::visit(
      [&](auto ptr) -> std::string {
        const auto& v = c.*ptr;
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, std::string>)
          return v;
        else if constexpr (std::is_same_v<V, double>)
          return fmt_double(v);
        else
          return std::to_string(v);
      },
      m);
}

}  // namespace

void RunConfig::apply_kv(const std::string& key, const std::string& value) {
  for (const KeyDef& def : kKeys) {
    if (key != def.name) continue;
    std::visit(
        [&](auto ptr) {
          auto& slot = this->*ptr;
          using V = std::decay_t<decltype(slot)>;
          if constexpr (std::is_same_v<V, std::string>)
            slot = value;
          else
            slot = parse_number<V>(key, value);
        },
        def.member);
    return;
  }
  raise(Err::ConfigError, "unknown config key: '" + key + "'");
}

void RunConfig::validate() const {
  auto bad = [](const std::string& what) { raise(Err::ConfigError, what); };

  if (width == 0 || height == 0) bad("width and height must be positive");
  if (epochs == 0) bad("epochs must be positive");
  if (!(epoch_spacing_days > 0)) bad("epoch_spacing_days must be positive");
  if (!(exposure_s > 0)) bad("exposure_s must be positive");
  if (bands != 1 && bands != 2) bad("bands must be 1 or 2");
  if (run_id.empty()) bad("run_id must be non-empty");
  if (run_id.find_first_of(" \t\r\n/") != std::string::npos)
    bad("run_id must not contain whitespace or '/'");

  if (n_events < 0) bad("n_events must be >= 0");
  if (!(psf_sigma > 0)) bad("psf_sigma must be positive");
  if (sky_background < 0) bad("sky_background must be >= 0");
  if (read_noise < 0) bad("read_noise must be >= 0");
  if (dark_rate < 0) bad("dark_rate must be >= 0");
  if (flat_rms < 0) bad("flat_rms must be >= 0");
  if (cosmic_ray_rate < 0) bad("cosmic_ray_rate must be >= 0");
  if (!(saturation_level > sky_background))
    bad("saturation_level must exceed sky_background");
  if (max_applied_shift < 0) bad("max_applied_shift must be >= 0");
  if (gain_jitter < 0) bad("gain_jitter must be >= 0");

  if (grid_rows == 0 || grid_cols == 0) bad("grid must have at least one tile");
  if (width % grid_cols != 0 || height % grid_rows != 0)
    bad("grid must divide the frame geometry evenly");

  if (max_shift < 0) bad("max_shift must be >= 0");

  if (!(n_sigma > 0)) bad("n_sigma must be positive");
  if (min_run < 1) bad("min_run must be >= 1");
  if (proximity_window < 0) bad("proximity_window must be >= 0");
  if (!(k_obj > 0)) bad("k_obj must be positive");
  if (!(m_cr > 0)) bad("m_cr must be positive");
  if (n_cr < 0) bad("n_cr must be >= 0");
  if (!(cutoff_sigma_px > 0)) bad("cutoff_sigma_px must be positive");
  if (!(trigger_saturation > 0)) bad("trigger_saturation must be positive");

  if (!(max_reduced_chi2 > 0)) bad("max_reduced_chi2 must be positive");
  if (min_delta_chi2 < 0) bad("min_delta_chi2 must be >= 0");
  if (color_threshold < -1.0 || color_threshold > 1.0)
    bad("color_threshold must lie in [-1, 1]");

  if (payload_mode != "inline" && payload_mode != "path")
    bad("payload_mode must be 'inline' or 'path'");
  if (!(heartbeat_interval_s > 0)) bad("heartbeat_interval_s must be positive");
  if (!(heartbeat_timeout_s >= heartbeat_interval_s))
    bad("heartbeat_timeout_s must be >= heartbeat_interval_s");
  if (retry_budget < 1) bad("retry_budget must be >= 1");
  if (idle_abort_s < 0) bad("idle_abort_s must be >= 0");
  if (!(worker_recv_timeout_s > 0)) bad("worker_recv_timeout_s must be positive");
  if (threads < 1) bad("threads must be >= 1");

  if (alert_min_significance < 0) bad("alert_min_significance must be >= 0");
  std::stringstream sinks(alert_sinks);
  std::string sink;
  while (std::getline(sinks, sink, ';')) {
    sink = trim(sink);
    if (sink.empty()) continue;
    if (sink == "stdout") continue;
    if (sink.rfind("file:", 0) == 0 && sink.size() > 5) continue;
    if (sink.rfind("webhook:", 0) == 0 && sink.size() > 8) continue;
    bad("bad alert sink '" + sink + "' (stdout | file:PATH | webhook:URL)");
  }
}

std::string RunConfig::canonical_science() const {
  std::string out;
  for (const KeyDef& def : kKeys) {
    if (!def.science) continue;
    out += def.name;
    out += '=';
    out += fmt_member(*this, def.member);
    out += '\n';
  }
  return out;
}

std::string RunConfig::digest() const { return hex64(fnv1a64(canonical_science())); }

nlohmann::json RunConfig::snapshot() const {
  nlohmann::json j = nlohmann::json::object();
  for (const KeyDef& def : kKeys) {
    std::visit(
        [&](auto ptr) {
          const auto& v = this->*ptr;
          j[def.name] = v;
        },
        def.member);
  }
  j["config_digest"] = digest();
  return j;
}

std::string RunConfig::to_text() const {
  std::string out = "# pxnet run configuration\n";
  for (const KeyDef& def : kKeys) {
    out += def.name;
    out += " = ";
    out += fmt_member(*this, def.member);
    out += '\n';
  }
  return out;
}

trigger1::Trigger1Config RunConfig::trigger1_config() const {
  trigger1::Trigger1Config t;
  t.n_sigma = n_sigma;
  t.min_run = min_run;
  t.proximity_window = proximity_window;
  t.k_obj = k_obj;
  t.m_cr = m_cr;
  t.n_cr = n_cr;
  t.cutoff_sigma_px = cutoff_sigma_px;
  t.read_noise_sigma = read_noise;
  t.saturation_level = trigger_saturation;
  return t;
}

trigger2::DecisionConfig RunConfig::trigger2_config() const {
  return {max_reduced_chi2, min_delta_chi2, color_threshold};
}

RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(Err::IoFailure, "cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str());
}

RunConfig RunConfig::parse_text(const std::string& text) {
  RunConfig cfg;
  std::stringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (size_t hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::string stripped = trim(line);
    if (stripped.empty()) continue;
    size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      raise(Err::ConfigError,
            "line " + std::to_string(lineno) + ": expected 'key = value', got '" + stripped + "'");
    cfg.apply_kv(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

}  // namespace pxnet

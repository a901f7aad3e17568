#include "pxnet/dispatch.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <thread>
#include <tuple>

#include <httplib.h>

#include "pxnet/stack_io.hpp"
#include "pxnet/util.hpp"

namespace pxnet::dispatch {

namespace {

[[noreturn]] void bad_record(const std::string& what) {
  raise(Err::IoFailure, "catalog record: " + what);
}

void check_record_keys(const nlohmann::json& j, std::initializer_list<const char*> required,
                       std::initializer_list<const char*> optional = {}) {
  if (!j.is_object()) bad_record("not a JSON object");
  for (const char* k : required)
    if (!j.contains(k)) bad_record(std::string("missing key \"") + k + "\"");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : required)
      if (item.key() == k) known = true;
    for (const char* k : optional)
      if (item.key() == k) known = true;
    if (!known) bad_record("unknown key \"" + item.key() + "\"");
  }
}

}  // namespace

nlohmann::json candidate_to_json(const CandidateRecord& c) {
  nlohmann::json peaks = nlohmann::json::array();
  for (const PeakSummary& p : c.peaks)
    peaks.push_back({{"start", p.start},
                     {"end", p.end},
                     {"apex", p.apex},
                     {"significance", p.significance}});
  nlohmann::json j{{"x", c.x},
                   {"y", c.y},
                   {"band", c.band},
                   {"class", c.klass},
                   {"planetary_flag", c.planetary_flag},
                   {"peaks", peaks},
                   {"fit",
                    {{"u0", c.fit.u0},
                     {"t0", c.fit.t0},
                     {"tE", c.fit.tE},
                     {"f_source", c.fit.f_source},
                     {"f_base", c.fit.f_base},
                     {"chi2", c.fit.chi2},
                     {"dof", c.fit.dof},
                     {"delta_chi2", c.fit.delta_chi2},
                     {"iterations", c.fit.iterations},
                     {"converged", c.fit.converged}}},
                   {"accepted", c.accepted},
                   {"reasons", c.reasons},
                   {"tile_row", c.tile_row},
                   {"tile_col", c.tile_col},
                   {"task_id", c.task_id}};
  if (c.color_correlation) j["color_correlation"] = *c.color_correlation;
  if (c.curve) {
    j["curve"] = {{"epoch_time", c.curve->epoch_time},
                  {"flux", c.curve->flux},
                  {"error", c.curve->error},
                  {"valid", c.curve->valid}};
  }
  return j;
}

CandidateRecord candidate_from_json(const nlohmann::json& j) {
  check_record_keys(j,
                    {"x", "y", "band", "class", "planetary_flag", "peaks", "fit", "accepted",
                     "reasons", "tile_row", "tile_col", "task_id"},
                    {"color_correlation", "curve"});
  CandidateRecord c;
  c.x = j.at("x").get<uint32_t>();
  c.y = j.at("y").get<uint32_t>();
  c.band = j.at("band").get<std::string>();
  c.klass = j.at("class").get<std::string>();
  if (c.klass != "single" && c.klass != "double" && c.klass != "multiple")
    bad_record("class must be single|double|multiple");
  c.planetary_flag = j.at("planetary_flag").get<bool>();
  if (!j.at("peaks").is_array()) bad_record("\"peaks\" must be an array");
  for (const nlohmann::json& p : j.at("peaks")) {
    check_record_keys(p, {"start", "end", "apex", "significance"});
    c.peaks.push_back(PeakSummary{p.at("start").get<int>(), p.at("end").get<int>(),
                                  p.at("apex").get<int>(),
                                  p.at("significance").get<double>()});
  }
  const nlohmann::json& f = j.at("fit");
  check_record_keys(f, {"u0", "t0", "tE", "f_source", "f_base", "chi2", "dof", "delta_chi2",
                        "iterations", "converged"});
  c.fit.u0 = f.at("u0").get<double>();
  c.fit.t0 = f.at("t0").get<double>();
  c.fit.tE = f.at("tE").get<double>();
  c.fit.f_source = f.at("f_source").get<double>();
  c.fit.f_base = f.at("f_base").get<double>();
  c.fit.chi2 = f.at("chi2").get<double>();
  c.fit.dof = f.at("dof").get<int>();
  c.fit.delta_chi2 = f.at("delta_chi2").get<double>();
  c.fit.iterations = f.at("iterations").get<int>();
  c.fit.converged = f.at("converged").get<bool>();
  c.accepted = j.at("accepted").get<bool>();
  for (const nlohmann::json& r : j.at("reasons")) c.reasons.push_back(r.get<std::string>());
  if (j.contains("color_correlation"))
    c.color_correlation = j.at("color_correlation").get<double>();
  if (j.contains("curve")) {
    const nlohmann::json& cv = j.at("curve");
    check_record_keys(cv, {"epoch_time", "flux", "error", "valid"});
    CurveData d;
    d.epoch_time = cv.at("epoch_time").get<std::vector<double>>();
    d.flux = cv.at("flux").get<std::vector<double>>();
    d.error = cv.at("error").get<std::vector<double>>();
    d.valid = cv.at("valid").get<std::vector<uint8_t>>();
    if (d.flux.size() != d.epoch_time.size() || d.error.size() != d.epoch_time.size() ||
        d.valid.size() != d.epoch_time.size())
      bad_record("curve arrays differ in length");
    c.curve = std::move(d);
  }
  c.tile_row = j.at("tile_row").get<uint32_t>();
  c.tile_col = j.at("tile_col").get<uint32_t>();
  c.task_id = j.at("task_id").get<uint64_t>();
  return c;
}

nlohmann::json tile_stats_to_json(const TileStats& s) {
  return {{"tile_row", s.tile_row},
          {"tile_col", s.tile_col},
          {"task_id", s.task_id},
          {"worker_id", s.worker_id},
          {"curves_built", s.curves_built},
          {"peak_curves", s.peak_curves},
          {"peaks_found", s.peaks_found},
          {"fits_attempted", s.fits_attempted},
          {"events_accepted", s.events_accepted},
          {"halo_dropped", s.halo_dropped},
          {"elapsed_s", s.elapsed_s}};
}

TileStats tile_stats_from_json(const nlohmann::json& j) {
  check_record_keys(j, {"tile_row", "tile_col", "task_id", "worker_id", "curves_built",
                        "peak_curves", "peaks_found", "fits_attempted", "events_accepted",
                        "halo_dropped", "elapsed_s"});
  TileStats s;
  s.tile_row = j.at("tile_row").get<uint32_t>();
  s.tile_col = j.at("tile_col").get<uint32_t>();
  s.task_id = j.at("task_id").get<uint64_t>();
  s.worker_id = j.at("worker_id").get<uint64_t>();
  s.curves_built = j.at("curves_built").get<uint64_t>();
  s.peak_curves = j.at("peak_curves").get<uint64_t>();
  s.peaks_found = j.at("peaks_found").get<uint64_t>();
  s.fits_attempted = j.at("fits_attempted").get<uint64_t>();
  s.events_accepted = j.at("events_accepted").get<uint64_t>();
  s.halo_dropped = j.at("halo_dropped").get<uint64_t>();
  s.elapsed_s = j.at("elapsed_s").get<double>();
  return s;
}

void RunCatalog::sort_candidates() {
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const CandidateRecord& a, const CandidateRecord& b) {
                     return std::tie(a.tile_row, a.tile_col, a.y, a.x, a.band) <
                            std::tie(b.tile_row, b.tile_col, b.y, b.x, b.band);
                   });
}

TileStats RunCatalog::totals() const {
  TileStats t;
  for (const TileStats& s : tile_stats) {
    t.curves_built += s.curves_built;
    t.peak_curves += s.peak_curves;
    t.peaks_found += s.peaks_found;
    t.fits_attempted += s.fits_attempted;
    t.events_accepted += s.events_accepted;
    t.halo_dropped += s.halo_dropped;
    t.elapsed_s += s.elapsed_s;
  }
  return t;
}

IngestResult ingest(RunCatalog& cat, const nlohmann::json& candidates, TileStats stats,
                    const TileRect& rect) {
  require(candidates.is_array(), Err::PreconditionViolation, "candidates must be an array");
  IngestResult res;
  for (const nlohmann::json& cj : candidates) {
    CandidateRecord c = candidate_from_json(cj);
    if (c.x >= rect.data_w() || c.y >= rect.data_h())
      raise(Err::CoordinateOutOfTile,
            "local (" + std::to_string(c.x) + "," + std::to_string(c.y) + ") outside tile (" +
                std::to_string(rect.tile_row) + "," + std::to_string(rect.tile_col) + ")");
    if (!rect.local_in_core(c.x, c.y)) {
      ++res.halo_dropped;
      continue;
    }
    c.x = rect.core_x + (c.x - rect.halo);
    c.y = rect.core_y + (c.y - rect.halo);
    c.tile_row = rect.tile_row;
    c.tile_col = rect.tile_col;
    c.task_id = stats.task_id;
    cat.candidates.push_back(std::move(c));
    ++res.added;
  }
  stats.tile_row = rect.tile_row;
  stats.tile_col = rect.tile_col;
  stats.halo_dropped = res.halo_dropped;
  cat.tile_stats.push_back(stats);
  return res;
}

nlohmann::json status_report_json(const StatusReport& r) {
  return {{"type", "status"}, {"stage", r.stage},   {"items_in", r.items_in},
          {"items_out", r.items_out}, {"rejects", r.rejects}, {"wall_s", r.wall_s}};
}

namespace {

StatusReport status_report_from_json(const nlohmann::json& j) {
  check_record_keys(j, {"type", "stage", "items_in", "items_out", "rejects", "wall_s"});
  StatusReport r;
  r.stage = j.at("stage").get<std::string>();
  r.items_in = j.at("items_in").get<uint64_t>();
  r.items_out = j.at("items_out").get<uint64_t>();
  for (const auto& item : j.at("rejects").items())
    r.rejects[item.key()] = item.value().get<uint64_t>();
  r.wall_s = j.at("wall_s").get<double>();
  return r;
}

nlohmann::json alert_record_to_json(const AlertRecord& a) {
  return {{"type", "alert"},     {"sink", a.sink},         {"target", a.target},
          {"status", a.status},  {"attempts", a.attempts}, {"alert", a.alert}};
}

AlertRecord alert_record_from_json(const nlohmann::json& j) {
  check_record_keys(j, {"type", "sink", "target", "status", "attempts", "alert"});
  AlertRecord a;
  a.sink = j.at("sink").get<std::string>();
  a.target = j.at("target").get<std::string>();
  a.status = j.at("status").get<std::string>();
  a.attempts = j.at("attempts").get<int>();
  a.alert = j.at("alert");
  return a;
}

void for_each_line(const std::string& text, const std::function<void(const std::string&)>& fn) {
  size_t pos = 0;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (!line.empty()) fn(line);
  }
}

}  // namespace

void write_catalog(const RunCatalog& cat, const std::string& path) {
  std::string out;
  nlohmann::json meta{{"type", "run_meta"},
                      {"run_id", cat.run_id},
                      {"config_digest", cat.config_digest},
                      {"config_snapshot", cat.config_snapshot},
                      {"raw_input_bytes", cat.raw_input_bytes},
                      {"summary_bytes", cat.summary_bytes}};
  out += meta.dump();
  out += '\n';
  for (const TileStats& s : cat.tile_stats) {
    nlohmann::json j = tile_stats_to_json(s);
    j["type"] = "tile_stats";
    out += j.dump();
    out += '\n';
  }
  for (const CandidateRecord& c : cat.candidates) {
    nlohmann::json j = candidate_to_json(c);
    j["type"] = "candidate";
    out += j.dump();
    out += '\n';
  }
  for (const StatusReport& r : cat.reports) {
    out += status_report_json(r).dump();
    out += '\n';
  }
  for (const AlertRecord& a : cat.alerts) {
    out += alert_record_to_json(a).dump();
    out += '\n';
  }
  write_file(path, out);
}

RunCatalog read_catalog(const std::string& path) {
  RunCatalog cat;
  bool saw_meta = false;
  for_each_line(read_file(path), [&](const std::string& line) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) bad_record("invalid JSON line");
    if (!j.is_object() || !j.contains("type")) bad_record("line without \"type\"");
    std::string type = j.at("type").get<std::string>();
    if (type == "run_meta") {
      check_record_keys(j, {"type", "run_id", "config_digest", "config_snapshot",
                            "raw_input_bytes", "summary_bytes"});
      cat.run_id = j.at("run_id").get<std::string>();
      cat.config_digest = j.at("config_digest").get<std::string>();
      cat.config_snapshot = j.at("config_snapshot");
      cat.raw_input_bytes = j.at("raw_input_bytes").get<uint64_t>();
      cat.summary_bytes = j.at("summary_bytes").get<uint64_t>();
      saw_meta = true;
    } else if (type == "tile_stats") {
      nlohmann::json body = j;
      body.erase("type");
      cat.tile_stats.push_back(tile_stats_from_json(body));
    } else if (type == "candidate") {
      nlohmann::json body = j;
      body.erase("type");
      cat.candidates.push_back(candidate_from_json(body));
    } else if (type == "status") {
      cat.reports.push_back(status_report_from_json(j));
    } else if (type == "alert") {
      cat.alerts.push_back(alert_record_from_json(j));
    } else {
      bad_record("unknown record type \"" + type + "\"");
    }
  });
  if (!saw_meta) bad_record("catalog has no run_meta line");
  return cat;
}

bool near_threshold(const CandidateRecord& c, const SummaryPolicy& pol) {
  auto near = [&](double v, double cut) { return std::abs(v - cut) <= pol.near_fraction * cut; };
  if (c.fit.dof >= 1 && near(c.fit.chi2 / c.fit.dof, pol.max_reduced_chi2)) return true;
  if (near(c.fit.delta_chi2, pol.min_delta_chi2)) return true;
  if (c.color_correlation && near(*c.color_correlation, pol.color_threshold)) return true;
  return false;
}

uint64_t write_summary(RunCatalog& cat, const std::string& path, const SummaryPolicy& pol) {
  std::string out;
  nlohmann::json meta{{"type", "run_meta"},
                      {"run_id", cat.run_id},
                      {"config_digest", cat.config_digest},
                      {"raw_input_bytes", cat.raw_input_bytes}};
  out += meta.dump();
  out += '\n';
  for (const TileStats& s : cat.tile_stats) {
    nlohmann::json j = tile_stats_to_json(s);
    j["type"] = "tile_stats";
    out += j.dump();
    out += '\n';
  }
  for (const CandidateRecord& c : cat.candidates) {
    if (!c.accepted && !near_threshold(c, pol)) continue;
    nlohmann::json j = candidate_to_json(c);
    j["type"] = "candidate";
    out += j.dump();
    out += '\n';
  }
  std::string packed = deflate_raw(out);
  write_file(path, packed);
  cat.summary_bytes = packed.size();
  return packed.size();
}

SummaryContent read_summary(const std::string& path) {
  std::string text = inflate_raw(read_file(path));
  SummaryContent sc;
  for_each_line(text, [&](const std::string& line) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) bad_record("invalid JSON line in summary");
    std::string type = j.at("type").get<std::string>();
    if (type == "run_meta") {
      sc.meta = j;
    } else if (type == "tile_stats") {
      nlohmann::json body = j;
      body.erase("type");
      sc.tile_stats.push_back(tile_stats_from_json(body));
    } else if (type == "candidate") {
      nlohmann::json body = j;
      body.erase("type");
      sc.candidates.push_back(candidate_from_json(body));
    } else {
      bad_record("unknown record type \"" + type + "\" in summary");
    }
  });
  return sc;
}

void append_run_log(const std::string& path, const nlohmann::json& record) {
  std::FILE* f = std::fopen(path.c_str(), "ab");
  if (!f) raise(Err::IoFailure, "open " + path);
  std::string line = record.dump();
  line += '\n';
  size_t n = std::fwrite(line.data(), 1, line.size(), f);
  std::fclose(f);
  if (n != line.size()) raise(Err::IoFailure, "write " + path);
}

namespace {

bool parse_http_url(const std::string& url, std::string& host, int& port, std::string& path) {
  const std::string scheme = "http://";
  if (url.rfind(scheme, 0) != 0) return false;
  std::string rest = url.substr(scheme.size());
  size_t slash = rest.find('/');
  std::string hostport = slash == std::string::npos ? rest : rest.substr(0, slash);
  path = slash == std::string::npos ? "/" : rest.substr(slash);
  size_t colon = hostport.find(':');
  port = 80;
  if (colon != std::string::npos) {
    try {
      port = std::stoi(hostport.substr(colon + 1));
    } catch (...) {
      return false;
    }
    host = hostport.substr(0, colon);
  } else {
    host = hostport;
  }
  return !host.empty() && port > 0 && port <= 65535;
}

}  // namespace

std::vector<AlertRecord> fire_alerts(const std::string& run_id,
                                     const std::vector<CandidateRecord>& newly_accepted,
                                     const std::vector<AlertSink>& sinks,
                                     const AlertOptions& opt) {
  std::vector<AlertRecord> records;
  for (const CandidateRecord& c : newly_accepted) {
    if (!c.accepted) continue;
    double significance = 0.0;
    for (const PeakSummary& p : c.peaks) significance = std::max(significance, p.significance);
    nlohmann::json alert{{"run_id", run_id},
                         {"pixel", nlohmann::json::array({c.x, c.y})},
                         {"t0", c.fit.t0},
                         {"tE", c.fit.tE},
                         {"u0", c.fit.u0},
                         {"significance", significance},
                         {"classification", c.klass}};
    for (const AlertSink& sink : sinks) {
      if (significance < sink.min_significance) continue;
      AlertRecord rec;
      rec.sink = sink.kind;
      rec.target = sink.target;
      rec.alert = alert;
      if (sink.kind == "stdout") {
        std::string line = "ALERT " + alert.dump() + "\n";
        std::fwrite(line.data(), 1, line.size(), stdout);
        std::fflush(stdout);
        rec.status = "delivered";
        rec.attempts = 1;
      } else if (sink.kind == "file") {
        rec.attempts = 1;
        try {
          append_run_log(sink.target, alert);
          rec.status = "delivered";
        } catch (const PxError&) {
          rec.status = "failed";
        }
      } else if (sink.kind == "webhook") {
        std::string host, path;
        int port = 0;
        if (!parse_http_url(sink.target, host, port, path)) {
          rec.status = "failed";
          rec.attempts = 0;
        } else {
          std::string body = alert.dump();
          rec.status = "failed";
          for (int attempt = 1; attempt <= opt.max_attempts; ++attempt) {
            rec.attempts = attempt;
            httplib::Client cli(host, port);
            cli.set_connection_timeout(std::chrono::duration<double>(opt.http_timeout_s));
            cli.set_read_timeout(std::chrono::duration<double>(opt.http_timeout_s));
            cli.set_write_timeout(std::chrono::duration<double>(opt.http_timeout_s));
            httplib::Result res = cli.Post(path, body, "application/json");
            if (res && res->status >= 200 && res->status < 300) {
              rec.status = "delivered";
              break;
            }
            if (attempt < opt.max_attempts) {
              double delay = opt.backoff_initial_s * std::pow(2.0, attempt - 1);
              std::this_thread::sleep_for(std::chrono::duration<double>(delay));
            }
          }
        }
      } else {
        rec.status = "failed";
      }
      records.push_back(std::move(rec));
    }
  }
  return records;
}

std::vector<CandidateRecord> query_catalog(const std::string& path, const Predicate& pred) {
  if (pred.klass && *pred.klass != "single" && *pred.klass != "double" &&
      *pred.klass != "multiple")
    raise(Err::BadPredicate, "class must be single|double|multiple, got \"" + *pred.klass + "\"");
  RunCatalog cat = read_catalog(path);
  cat.sort_candidates();
  std::vector<CandidateRecord> out;
  for (CandidateRecord& c : cat.candidates) {
    if (pred.tile && !(c.tile_row == pred.tile->first && c.tile_col == pred.tile->second))
      continue;
    if (pred.klass && c.klass != *pred.klass) continue;
    if (pred.min_delta_chi2 && !(c.fit.delta_chi2 >= *pred.min_delta_chi2)) continue;
    if (pred.accepted && c.accepted != *pred.accepted) continue;
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace pxnet::dispatch

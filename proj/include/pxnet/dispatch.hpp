#pragma once
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pxnet/tiling.hpp"

namespace pxnet::dispatch {

struct PeakSummary {
  int start = 0, end = 0, apex = 0;
  double significance = 0.0;
};

struct FitSummary {
  double u0 = 0, t0 = 0, tE = 0, f_source = 0, f_base = 0;
  double chi2 = 0;
  int dof = 0;
  double delta_chi2 = 0;
  int iterations = 0;
  bool converged = false;
};

struct CurveData {
  std::vector<double> epoch_time, flux, error;
  std::vector<uint8_t> valid;
};

struct CandidateRecord {
  uint32_t x = 0, y = 0;  // tile-local before ingest, parent-frame after
  std::string band = "R";
  std::string klass = "single";  // single | double | multiple
  bool planetary_flag = false;
  std::vector<PeakSummary> peaks;
  FitSummary fit;
  bool accepted = false;
  std::vector<std::string> reasons;           // failed decision rules
  std::optional<double> color_correlation;    // absent on single-band runs
  std::optional<CurveData> curve;             // accepted / near-threshold only
  uint32_t tile_row = 0, tile_col = 0;
  uint64_t task_id = 0;
};

nlohmann::json candidate_to_json(const CandidateRecord& c);
CandidateRecord candidate_from_json(const nlohmann::json& j);

struct TileStats {
  uint32_t tile_row = 0, tile_col = 0;
  uint64_t task_id = 0;
  uint64_t worker_id = 0;
  uint64_t curves_built = 0;
  uint64_t peak_curves = 0;     // curves with at least one peak
  uint64_t peaks_found = 0;     // total peaks
  uint64_t fits_attempted = 0;
  uint64_t events_accepted = 0;
  uint64_t halo_dropped = 0;
  double elapsed_s = 0.0;
};

nlohmann::json tile_stats_to_json(const TileStats& s);
TileStats tile_stats_from_json(const nlohmann::json& j);

struct StatusReport {
  std::string stage;  // IDAQ, CALIB, TILE, DAP, DAU, MINE
  uint64_t items_in = 0;
  uint64_t items_out = 0;
  std::map<std::string, uint64_t> rejects;
  double wall_s = 0.0;
};

struct AlertRecord {
  std::string sink;    // stdout | file | webhook
  std::string target;
  std::string status;  // delivered | failed
  int attempts = 0;
  nlohmann::json alert;
};

struct RunCatalog {
  std::string run_id;
  std::string config_digest;
  nlohmann::json config_snapshot;
  std::vector<CandidateRecord> candidates;
  std::vector<TileStats> tile_stats;
  std::vector<StatusReport> reports;
  std::vector<AlertRecord> alerts;
  uint64_t raw_input_bytes = 0;
  uint64_t summary_bytes = 0;

  void sort_candidates();  // (tile_row, tile_col, y, x, band)
  TileStats totals() const;
};

struct IngestResult {
  size_t added = 0;
  size_t halo_dropped = 0;
};

// Maps tile-local candidate coordinates to the parent frame through the tile's
// core offsets; halo-region candidates are dropped (owned by the neighbour).
IngestResult ingest(RunCatalog& cat, const nlohmann::json& candidates, TileStats stats,
                    const TileRect& rect);

void write_catalog(const RunCatalog& cat, const std::string& path);  // JSON-lines
RunCatalog read_catalog(const std::string& path);

struct SummaryPolicy {
  double max_reduced_chi2 = 2.0;
  double min_delta_chi2 = 25.0;
  double color_threshold = 0.7;
  double near_fraction = 0.2;  // within 20% of a cut keeps the full curve
};
bool near_threshold(const CandidateRecord& c, const SummaryPolicy& pol);

// accepted + near-threshold candidate records plus per-tile stats, JSON-lines,
// whole file DEFLATE (RFC 1951); returns compressed size and updates cat.summary_bytes.
uint64_t write_summary(RunCatalog& cat, const std::string& path, const SummaryPolicy& pol);

struct SummaryContent {
  nlohmann::json meta;
  std::vector<CandidateRecord> candidates;
  std::vector<TileStats> tile_stats;
};
SummaryContent read_summary(const std::string& path);

void append_run_log(const std::string& path, const nlohmann::json& record);
nlohmann::json status_report_json(const StatusReport& r);

struct AlertSink {
  std::string kind;  // stdout | file | webhook
  std::string target;
  double min_significance = 0.0;
};

struct AlertOptions {
  int max_attempts = 4;       // 1 + 3 retries
  double backoff_initial_s = 0.5;
  double http_timeout_s = 5.0;
};

// One delivery per newly accepted candidate per matching sink; webhook failures
// are retried with exponential backoff and recorded, never fatal.
std::vector<AlertRecord> fire_alerts(const std::string& run_id,
                                     const std::vector<CandidateRecord>& newly_accepted,
                                     const std::vector<AlertSink>& sinks,
                                     const AlertOptions& opt = {});

struct Predicate {
  std::optional<std::pair<uint32_t, uint32_t>> tile;
  std::optional<std::string> klass;
  std::optional<double> min_delta_chi2;
  std::optional<bool> accepted;
};

std::vector<CandidateRecord> query_catalog(const std::string& path, const Predicate& pred);

}  // namespace pxnet::dispatch

#pragma once
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pxnet/calib.hpp"
#include "pxnet/dispatch.hpp"
#include "pxnet/netproto_server.hpp"
#include "pxnet/run_config.hpp"
#include "pxnet/synthgen.hpp"

namespace pxnet::pipeline {

struct BandData {
  FrameStack stack;
  MaskStack masks;
};

// tile bundle: concatenated PXL1 + PXM1 blocks per band, in band order
std::string encode_bundle(const std::map<Band, BandData>& bands);
std::map<Band, BandData> decode_bundle(std::string_view bytes);

struct TileOutput {
  nlohmann::json candidates;  // array, tile-local coordinates, deterministic order
  dispatch::TileStats stats;
};

// Full two-level trigger on one calibrated, aligned tile. Curves are built for
// core pixels only; the halo provides filtering context.
TileOutput process_tile(const std::map<Band, BandData>& bands, const TileRect& rect,
                        const RunConfig& cfg, int threads = 1);

struct PreparedRun {
  std::vector<TileRect> rects;
  std::vector<std::string> bundles;  // per tile, row-major
  uint64_t raw_input_bytes = 0;
  dispatch::RunCatalog catalog;      // run meta + IDAQ/CALIB/TILE reports filled
};

// Reads fixture stacks + calibration frames from in_dir, calibrates, tiles.
PreparedRun prepare_run(const std::string& in_dir, const RunConfig& cfg);

// Writes fixture files for a synthetic campaign into out_dir.
void synthesize_fixture(const RunConfig& cfg, const std::string& out_dir);

// Runs calibration only and writes calibrated stacks + mask sidecars.
void calibrate_fixture(const RunConfig& cfg, const std::string& in_dir,
                       const std::string& out_dir);

// Single-process end-to-end run; identical candidate set to a distributed run.
dispatch::RunCatalog run_local(const RunConfig& cfg, const std::string& in_dir,
                               const std::string& out_dir);

// Master side of a distributed run (blocks until completion or abort).
dispatch::RunCatalog run_serve(const RunConfig& cfg, const std::string& in_dir,
                               const std::string& out_dir, const std::string& host,
                               uint16_t port,
                               const std::function<void(uint16_t)>& on_listen = {});

// Worker side; returns completed task count.
size_t run_work(const RunConfig& cfg, const std::string& host, uint16_t port);

// Shared post-processing: sort, reports, alerts, catalog + summary files.
void finalize_catalog(dispatch::RunCatalog& cat, const RunConfig& cfg,
                      const std::string& out_dir);

}  // namespace pxnet::pipeline

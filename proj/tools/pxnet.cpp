#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "pxnet/error.hpp"
#include "pxnet/pipeline.hpp"

namespace {

using pxnet::RunConfig;

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> sets;                               // raw key=value pairs
  std::vector<std::pair<std::string, std::string>> overrides;  // from named flags
};

// defaults <- config file <- --set pairs <- named flags
RunConfig build_config(const ConfigArgs& a) {
  RunConfig cfg;
  if (!a.config_path.empty()) cfg = RunConfig::parse_file(a.config_path);
  for (const std::string& kv : a.sets) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos)
      pxnet::raise(pxnet::Err::ConfigError, "--set expects key=value, got '" + kv + "'");
    cfg.apply_kv(kv.substr(0, eq), kv.substr(eq + 1));
  }
  for (const auto& [k, v] : a.overrides) cfg.apply_kv(k, v);
  cfg.validate();
  return cfg;
}

void add_config_options(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.config_path, "config file (key = value lines)");
  cmd->add_option("--set", a.sets, "override one config key (key=value, repeatable)");
}

// named flag that forwards into the config by key
CLI::Option* add_kv_flag(CLI::App* cmd, ConfigArgs& a, const std::string& flag,
                         const std::string& key, const std::string& help) {
  return cmd->add_option_function<std::string>(
      flag, [&a, key](const std::string& v) { a.overrides.emplace_back(key, v); }, help);
}

std::pair<std::string, uint16_t> parse_endpoint(const std::string& s) {
  size_t colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size())
    pxnet::raise(pxnet::Err::ConfigError, "endpoint must be HOST:PORT, got '" + s + "'");
  int port = 0;
  try {
    port = std::stoi(s.substr(colon + 1));
  } catch (...) {
    port = -1;
  }
  if (port < 0 || port > 65535)
    pxnet::raise(pxnet::Err::ConfigError, "bad port in endpoint '" + s + "'");
  return {s.substr(0, colon), uint16_t(port)};
}

void print_candidates(const std::vector<pxnet::dispatch::CandidateRecord>& recs, bool json) {
  if (json) {
    for (const auto& c : recs) std::printf("%s\n", pxnet::dispatch::candidate_to_json(c).dump().c_str());
    return;
  }
  if (!recs.empty()) {
    std::printf("%6s %6s %-4s %-8s %12s %10s %8s %12s %5s %s\n", "x", "y", "band", "class",
                "t0", "tE", "u0", "delta_chi2", "tile", "accepted");
    for (const auto& c : recs)
      std::printf("%6u %6u %-4s %-8s %12.4f %10.4f %8.4f %12.2f %2u,%-2u %s\n", c.x, c.y,
                  c.band.c_str(), c.klass.c_str(), c.fit.t0, c.fit.tE, c.fit.u0,
                  c.fit.delta_chi2, c.tile_row, c.tile_col, c.accepted ? "yes" : "no");
  }
  std::printf("%zu candidates\n", recs.size());
}

void print_stage_stats(const std::string& catalog_path, bool json) {
  pxnet::dispatch::RunCatalog cat = pxnet::dispatch::read_catalog(catalog_path);
  pxnet::dispatch::TileStats tot = cat.totals();
  if (json) {
    for (const auto& r : cat.reports)
      std::printf("%s\n", pxnet::dispatch::status_report_json(r).dump().c_str());
    nlohmann::json funnel{{"type", "funnel"},
                          {"tiles", cat.tile_stats.size()},
                          {"curves_built", tot.curves_built},
                          {"peak_curves", tot.peak_curves},
                          {"peaks_found", tot.peaks_found},
                          {"fits_attempted", tot.fits_attempted},
                          {"events_accepted", tot.events_accepted},
                          {"halo_dropped", tot.halo_dropped}};
    std::printf("%s\n", funnel.dump().c_str());
    return;
  }
  std::printf("%-6s %12s %12s %10s  %s\n", "stage", "items_in", "items_out", "wall_s", "rejects");
  for (const auto& r : cat.reports) {
    std::string rejects;
    for (const auto& [k, v] : r.rejects) {
      if (!rejects.empty()) rejects += ", ";
      rejects += k + "=" + std::to_string(v);
    }
    std::printf("%-6s %12llu %12llu %10.3f  %s\n", r.stage.c_str(),
                (unsigned long long)r.items_in, (unsigned long long)r.items_out, r.wall_s,
                rejects.c_str());
  }
  std::printf("funnel over %zu tiles: curves=%llu peak_curves=%llu peaks=%llu fits=%llu "
              "accepted=%llu halo_dropped=%llu\n",
              cat.tile_stats.size(), (unsigned long long)tot.curves_built,
              (unsigned long long)tot.peak_curves, (unsigned long long)tot.peaks_found,
              (unsigned long long)tot.fits_attempted, (unsigned long long)tot.events_accepted,
              (unsigned long long)tot.halo_dropped);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"distributed pixel-lensing trigger pipeline"};
  app.require_subcommand(1);

  ConfigArgs cfg_args;

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic campaign fixture set");
  std::string synth_out;
  synth->add_option("--out", synth_out, "output directory")->required();
  add_config_options(synth, cfg_args);
  add_kv_flag(synth, cfg_args, "--width", "width", "frame width in pixels");
  add_kv_flag(synth, cfg_args, "--height", "height", "frame height in pixels");
  add_kv_flag(synth, cfg_args, "--epochs", "epochs", "epoch count");
  add_kv_flag(synth, cfg_args, "--events", "n_events", "injected events");
  add_kv_flag(synth, cfg_args, "--stars", "n_stars", "field stars");
  add_kv_flag(synth, cfg_args, "--bands", "bands", "bands (1 or 2)");
  add_kv_flag(synth, cfg_args, "--seed", "seed", "campaign seed");

  // calibrate
  auto* calibrate = app.add_subcommand("calibrate", "calibrate a fixture set and write stacks");
  std::string cal_in, cal_out;
  calibrate->add_option("--in", cal_in, "fixture directory")->required();
  calibrate->add_option("--out", cal_out, "output directory")->required();
  add_config_options(calibrate, cfg_args);

  // run-local
  auto* run_local = app.add_subcommand("run-local", "run the full pipeline in one process");
  std::string rl_in, rl_out;
  run_local->add_option("--in", rl_in, "fixture directory")->required();
  run_local->add_option("--out", rl_out, "output directory")->required();
  add_config_options(run_local, cfg_args);
  add_kv_flag(run_local, cfg_args, "--threads", "threads", "worker threads per tile");
  add_kv_flag(run_local, cfg_args, "--seed", "seed", "campaign seed");

  // serve
  auto* serve = app.add_subcommand("serve", "distribute tiles to workers and build the catalog");
  std::string sv_in, sv_out, sv_bind = "127.0.0.1:7700";
  serve->add_option("--in", sv_in, "fixture directory")->required();
  serve->add_option("--out", sv_out, "output directory")->required();
  serve->add_option("--bind", sv_bind, "HOST:PORT to listen on (port 0 picks one)");
  add_config_options(serve, cfg_args);
  add_kv_flag(serve, cfg_args, "--payload-mode", "payload_mode", "inline | path");
  add_kv_flag(serve, cfg_args, "--seed", "seed", "campaign seed");

  // work
  auto* work = app.add_subcommand("work", "process tiles for a server");
  std::string wk_connect;
  work->add_option("--connect", wk_connect, "server HOST:PORT")->required();
  add_config_options(work, cfg_args);
  add_kv_flag(work, cfg_args, "--threads", "threads", "worker threads per tile");

  // report
  auto* report = app.add_subcommand("report", "query a run catalog");
  std::string rp_catalog, rp_class, rp_tile;
  double rp_min_dchi2 = 0;
  bool rp_accepted = false, rp_stage_stats = false, rp_json = false;
  report->add_option("catalog", rp_catalog, "catalog.jsonl path")->required();
  report->add_flag("--accepted", rp_accepted, "accepted candidates only");
  report->add_flag("--stage-stats", rp_stage_stats, "per-stage funnel counters");
  auto* tile_opt = report->add_option("--tile", rp_tile, "restrict to tile ROW,COL");
  auto* dchi2_opt =
      report->add_option("--min-delta-chi2", rp_min_dchi2, "minimum delta chi2 vs constant");
  report->add_option("--class", rp_class, "peak classification filter")
      ->check(CLI::IsMember({"single", "double", "multiple"}));
  report->add_flag("--json", rp_json, "machine-readable JSON lines");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // 2 = usage error; 0 covers --help
  }

  try {
    if (app.got_subcommand(synth)) {
      RunConfig cfg = build_config(cfg_args);
      pxnet::pipeline::synthesize_fixture(cfg, synth_out);
      std::printf("fixture written to %s (%u epochs, %d events, seed %llu)\n", synth_out.c_str(),
                  cfg.epochs, cfg.n_events, (unsigned long long)cfg.seed);
    } else if (app.got_subcommand(calibrate)) {
      RunConfig cfg = build_config(cfg_args);
      pxnet::pipeline::calibrate_fixture(cfg, cal_in, cal_out);
      std::printf("calibrated stacks written to %s\n", cal_out.c_str());
    } else if (app.got_subcommand(run_local)) {
      RunConfig cfg = build_config(cfg_args);
      pxnet::dispatch::RunCatalog cat = pxnet::pipeline::run_local(cfg, rl_in, rl_out);
      uint64_t accepted = 0;
      for (const auto& c : cat.candidates) accepted += c.accepted ? 1 : 0;
      std::printf("run %s complete: %zu candidates, %llu accepted, catalog %s/catalog.jsonl\n",
                  cat.run_id.c_str(), cat.candidates.size(), (unsigned long long)accepted,
                  rl_out.c_str());
    } else if (app.got_subcommand(serve)) {
      RunConfig cfg = build_config(cfg_args);
      auto [host, port] = parse_endpoint(sv_bind);
      auto on_listen = [&](uint16_t actual) {
        std::printf("listening on %s:%u\n", host.c_str(), unsigned(actual));
        std::fflush(stdout);
      };
      pxnet::dispatch::RunCatalog cat =
          pxnet::pipeline::run_serve(cfg, sv_in, sv_out, host, port, on_listen);
      uint64_t accepted = 0;
      for (const auto& c : cat.candidates) accepted += c.accepted ? 1 : 0;
      std::printf("run %s complete: %zu candidates, %llu accepted, catalog %s/catalog.jsonl\n",
                  cat.run_id.c_str(), cat.candidates.size(), (unsigned long long)accepted,
                  sv_out.c_str());
    } else if (app.got_subcommand(work)) {
      RunConfig cfg = build_config(cfg_args);
      auto [host, port] = parse_endpoint(wk_connect);
      size_t done = pxnet::pipeline::run_work(cfg, host, port);
      std::printf("completed %zu tasks\n", done);
    } else if (app.got_subcommand(report)) {
      if (rp_stage_stats) {
        print_stage_stats(rp_catalog, rp_json);
      } else {
        pxnet::dispatch::Predicate pred;
        if (rp_accepted) pred.accepted = true;
        if (!rp_class.empty()) pred.klass = rp_class;
        if (dchi2_opt->count()) pred.min_delta_chi2 = rp_min_dchi2;
        if (tile_opt->count()) {
          size_t comma = rp_tile.find(',');
          if (comma == std::string::npos)
            pxnet::raise(pxnet::Err::BadPredicate, "--tile expects ROW,COL");
          pred.tile = {uint32_t(std::stoul(rp_tile.substr(0, comma))),
                       uint32_t(std::stoul(rp_tile.substr(comma + 1)))};
        }
        print_candidates(pxnet::dispatch::query_catalog(rp_catalog, pred), rp_json);
      }
    }
  } catch (const pxnet::PxError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

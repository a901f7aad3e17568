// End-to-end coverage for the run pipeline: config text + digests, tile
// bundles, fixture synthesis, preparation, per-tile processing, local runs,
// and the distributed master/worker path over loopback.

#include <doctest/doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <future>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "helpers.hpp"
#include "pxnet/dispatch.hpp"
#include "pxnet/pipeline.hpp"
#include "pxnet/run_config.hpp"
#include "pxnet/stack_io.hpp"
#include "pxnet/synthgen.hpp"
#include "pxnet/tiling.hpp"
#include "pxnet/util.hpp"

using namespace pxnet;
namespace fs = std::filesystem;

namespace {

RunConfig small_cfg() {
  RunConfig cfg;
  cfg.width = 64;
  cfg.height = 64;
  cfg.epochs = 16;
  cfg.seed = 11;
  cfg.bands = 2;
  cfg.run_id = "pipe-test";
  cfg.n_stars = 25;
  cfg.n_events = 2;
  cfg.grid_rows = 2;
  cfg.grid_cols = 2;
  cfg.halo = 18;
  cfg.cosmic_ray_rate = 0.2;
  cfg.threads = 1;
  cfg.alert_sinks = "stdout";
  cfg.validate();
  return cfg;
}

// One synthesized campaign shared by the read-only test cases.
struct SharedFixture {
  testutil::TempDir dir{"pxnet-pipe-fix"};
  RunConfig cfg = small_cfg();
  SharedFixture() { pipeline::synthesize_fixture(cfg, dir.str()); }
};

const SharedFixture& fixture() {
  static SharedFixture fx;
  return fx;
}

pipeline::BandData make_band_data(uint64_t seed, uint32_t w, uint32_t h, size_t epochs,
                                  Band band) {
  Rng rng(seed);
  pipeline::BandData bd;
  bd.masks = MaskStack::all_valid(w, h, epochs);
  for (size_t e = 0; e < epochs; ++e) {
    Frame f(w, h);
    f.band = band;
    f.epoch_index = uint32_t(e);
    f.epoch_time = double(e) * 1.25;
    f.exposure = 30.0;
    for (float& v : f.data) v = float(rng.uniform(10.0, 500.0));
    bd.stack.frames.push_back(std::move(f));
    for (int k = 0; k < 5; ++k)
      bd.masks.set(e, uint32_t(rng.below(w)), uint32_t(rng.below(h)), 0);
  }
  return bd;
}

// (band, x, y) triples of the accepted candidates, for set comparison
std::set<std::string> accepted_keys(const dispatch::RunCatalog& cat) {
  std::set<std::string> keys;
  for (const auto& c : cat.candidates)
    if (c.accepted)
      keys.insert(c.band + ":" + std::to_string(c.x) + "," + std::to_string(c.y));
  return keys;
}

bool has_stage(const dispatch::RunCatalog& cat, const std::string& stage) {
  return std::any_of(cat.reports.begin(), cat.reports.end(),
                     [&](const dispatch::StatusReport& r) { return r.stage == stage; });
}

}  // namespace

TEST_CASE("config text round trips through the parser") {
  RunConfig cfg = small_cfg();
  cfg.alert_sinks = "stdout;file:/tmp/alerts.jsonl";
  cfg.payload_mode = "path";
  cfg.threads = 3;
  cfg.n_sigma = 3.5;

  std::string text = cfg.to_text();
  CHECK(text.rfind("# pxnet run configuration\n", 0) == 0);

  RunConfig back = RunConfig::parse_text(text);
  CHECK(back.to_text() == text);
  CHECK(back.digest() == cfg.digest());
  CHECK(back.width == 64);
  CHECK(back.alert_sinks == cfg.alert_sinks);
  CHECK(back.payload_mode == "path");
  CHECK(back.threads == 3);
  CHECK(back.n_sigma == 3.5);

  nlohmann::json snap = cfg.snapshot();
  CHECK(snap.at("config_digest").get<std::string>() == cfg.digest());
  CHECK(snap.at("width").get<uint32_t>() == 64);
  CHECK(snap.at("run_id").get<std::string>() == "pipe-test");
}

TEST_CASE("config parser accepts comments and rejects junk") {
  RunConfig base = small_cfg();
  std::string text = base.to_text();

  SUBCASE("comments and blank lines are ignored") {
    RunConfig cfg = RunConfig::parse_text("# leading comment\n\n" + text + "\n# trailing\n");
    CHECK(cfg.digest() == base.digest());
  }
  SUBCASE("unknown key") {
    CHECK_THROWS_AS(RunConfig::parse_text(text + "wobble = 3\n"), PxError);
  }
  SUBCASE("bad numeric value") {
    CHECK_THROWS_AS(RunConfig::parse_text(text + "width = banana\n"), PxError);
  }
  SUBCASE("line without separator") {
    CHECK_THROWS_AS(RunConfig::parse_text(text + "width\n"), PxError);
  }
}

TEST_CASE("config validation enforces module invariants") {
  auto expect_invalid = [](void (*mutate)(RunConfig&)) {
    RunConfig cfg = small_cfg();
    mutate(cfg);
    CHECK_THROWS_AS(cfg.validate(), PxError);
  };
  expect_invalid([](RunConfig& c) { c.width = 65; });          // grid must divide
  expect_invalid([](RunConfig& c) { c.bands = 3; });
  expect_invalid([](RunConfig& c) { c.payload_mode = "carrier"; });
  expect_invalid([](RunConfig& c) { c.heartbeat_timeout_s = 1.0; });  // < interval
  expect_invalid([](RunConfig& c) { c.run_id = "has space"; });
  expect_invalid([](RunConfig& c) { c.run_id = "a/b"; });
  expect_invalid([](RunConfig& c) { c.run_id = ""; });
  expect_invalid([](RunConfig& c) { c.threads = 0; });
  expect_invalid([](RunConfig& c) { c.retry_budget = 0; });
  expect_invalid([](RunConfig& c) { c.saturation_level = 100.0; });  // below sky
  expect_invalid([](RunConfig& c) { c.alert_sinks = "smoke-signal:hill"; });
}

TEST_CASE("science digest tracks science keys only") {
  RunConfig base = small_cfg();
  const std::string d0 = base.digest();
  CHECK(d0.size() == 16);
  CHECK(d0.find_first_not_of("0123456789abcdef") == std::string::npos);

  auto digest_after = [&](void (*mutate)(RunConfig&)) {
    RunConfig cfg = small_cfg();
    mutate(cfg);
    return cfg.digest();
  };

  // science knobs move the digest
  CHECK(digest_after([](RunConfig& c) { c.width = 128; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.height = 128; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.read_noise = 6.0; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.grid_rows = 4; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.grid_cols = 4; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.halo = 12; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.max_shift = 5; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.n_sigma = 4.0; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.min_run = 4; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.proximity_window = 11; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.k_obj = 6.0; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.m_cr = 9.0; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.n_cr = 3.0; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.cutoff_sigma_px = 7.0; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.trigger_saturation = 58000.0; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.max_reduced_chi2 = 3.0; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.min_delta_chi2 = 30.0; }) != d0);
  CHECK(digest_after([](RunConfig& c) { c.color_threshold = 0.8; }) != d0);

  // operational knobs do not
  CHECK(digest_after([](RunConfig& c) { c.seed = 999; }) == d0);
  CHECK(digest_after([](RunConfig& c) { c.epochs = 32; }) == d0);
  CHECK(digest_after([](RunConfig& c) { c.run_id = "other"; }) == d0);
  CHECK(digest_after([](RunConfig& c) { c.threads = 8; }) == d0);
  CHECK(digest_after([](RunConfig& c) { c.payload_mode = "path"; }) == d0);
  CHECK(digest_after([](RunConfig& c) { c.n_stars = 500; }) == d0);
  CHECK(digest_after([](RunConfig& c) { c.psf_sigma = 2.0; }) == d0);
  CHECK(digest_after([](RunConfig& c) { c.retry_budget = 9; }) == d0);
  CHECK(digest_after([](RunConfig& c) { c.alert_sinks = "file:/tmp/x"; }) == d0);
  CHECK(digest_after([](RunConfig& c) { c.heartbeat_interval_s = 1.0; }) == d0);

  // digest derives from the canonical science serialization
  CHECK(d0 == hex64(fnv1a64(base.canonical_science())));
}

TEST_CASE("trigger config adapters copy the right knobs") {
  RunConfig cfg = small_cfg();
  cfg.n_sigma = 4.5;
  cfg.read_noise = 7.0;
  cfg.trigger_saturation = 51000.0;
  auto t1 = cfg.trigger1_config();
  CHECK(t1.n_sigma == 4.5);
  CHECK(t1.read_noise_sigma == 7.0);
  CHECK(t1.saturation_level == 51000.0);
  CHECK(t1.min_run == cfg.min_run);

  cfg.max_reduced_chi2 = 2.5;
  cfg.min_delta_chi2 = 36.0;
  cfg.color_threshold = 0.65;
  auto t2 = cfg.trigger2_config();
  CHECK(t2.max_reduced_chi2 == 2.5);
  CHECK(t2.min_delta_chi2 == 36.0);
  CHECK(t2.color_threshold == 0.65);
}

TEST_CASE("tile bundles round trip across bands") {
  std::map<Band, pipeline::BandData> bands;
  bands[Band::R] = make_band_data(31, 12, 9, 4, Band::R);
  bands[Band::B] = make_band_data(32, 12, 9, 4, Band::B);

  std::string bytes = pipeline::encode_bundle(bands);
  auto back = pipeline::decode_bundle(bytes);
  REQUIRE(back.size() == 2);
  for (Band b : {Band::R, Band::B}) {
    REQUIRE(back.count(b) == 1);
    const auto& in = bands.at(b);
    const auto& out = back.at(b);
    CHECK(encode_stack(out.stack) == encode_stack(in.stack));
    CHECK(out.masks.width == in.masks.width);
    CHECK(out.masks.height == in.masks.height);
    CHECK(out.masks.planes == in.masks.planes);
  }

  std::map<Band, pipeline::BandData> solo;
  solo[Band::B] = make_band_data(33, 7, 5, 3, Band::B);
  auto back1 = pipeline::decode_bundle(pipeline::encode_bundle(solo));
  REQUIRE(back1.size() == 1);
  CHECK(back1.count(Band::B) == 1);
  CHECK(encode_stack(back1.at(Band::B).stack) == encode_stack(solo.at(Band::B).stack));
}

TEST_CASE("bundle decoding rejects malformed payloads") {
  std::map<Band, pipeline::BandData> one;
  one[Band::R] = make_band_data(41, 8, 8, 3, Band::R);
  const std::string good = pipeline::encode_bundle(one);

  SUBCASE("empty payload") {
    CHECK_THROWS_AS(pipeline::decode_bundle(""), PxError);
  }
  SUBCASE("truncated payload") {
    CHECK_THROWS_AS(pipeline::decode_bundle(std::string_view(good).substr(0, good.size() - 5)),
                    PxError);
  }
  SUBCASE("trailing garbage") {
    CHECK_THROWS_AS(pipeline::decode_bundle(good + "XYZ"), PxError);
  }
  SUBCASE("duplicate band block") {
    try {
      pipeline::decode_bundle(good + good);
      FAIL("duplicate band accepted");
    } catch (const PxError& e) {
      CHECK(e.code() == Err::ProtocolViolation);
    }
  }
  SUBCASE("mask sidecar band disagrees with its stack") {
    std::string bytes = encode_stack(one.at(Band::R).stack) +
                        encode_masks(one.at(Band::R).masks, Band::B);
    try {
      pipeline::decode_bundle(bytes);
      FAIL("band mismatch accepted");
    } catch (const PxError& e) {
      CHECK(e.code() == Err::ProtocolViolation);
    }
  }
  SUBCASE("mask sidecar geometry disagrees with its stack") {
    MaskStack wrong = MaskStack::all_valid(8, 7, 3);
    std::string bytes = encode_stack(one.at(Band::R).stack) + encode_masks(wrong, Band::R);
    try {
      pipeline::decode_bundle(bytes);
      FAIL("geometry mismatch accepted");
    } catch (const PxError& e) {
      CHECK(e.code() == Err::ProtocolViolation);
    }
  }
  SUBCASE("encode refuses a map key that disagrees with the stack band") {
    std::map<Band, pipeline::BandData> bad;
    bad[Band::B] = make_band_data(42, 8, 8, 3, Band::R);  // frames say R, key says B
    CHECK_THROWS_AS(pipeline::encode_bundle(bad), PxError);
  }
}

TEST_CASE("synthetic fixtures are deterministic in the seed") {
  RunConfig cfg = small_cfg();
  testutil::TempDir a("pxnet-fix-a"), b("pxnet-fix-b"), c("pxnet-fix-c");
  pipeline::synthesize_fixture(cfg, a.str());
  pipeline::synthesize_fixture(cfg, b.str());
  RunConfig other = cfg;
  other.seed = cfg.seed + 1;
  pipeline::synthesize_fixture(other, c.str());

  for (const char* name : {"raw_R.pxl", "raw_B.pxl", "bias.pxl", "dark.pxl", "flat.pxl",
                           "truth.jsonl", "config.txt"}) {
    INFO("file ", name);
    CHECK(read_file(a.sub(name)) == read_file(b.sub(name)));
  }
  CHECK(read_file(a.sub("raw_R.pxl")) != read_file(c.sub("raw_R.pxl")));

  // config.txt parses back to the same digest
  RunConfig parsed = RunConfig::parse_file(a.sub("config.txt"));
  CHECK(parsed.digest() == cfg.digest());
  CHECK(parsed.seed == cfg.seed);

  // truth records carry the event parameters
  auto truth = synthgen::read_truth(a.sub("truth.jsonl"));
  REQUIRE(truth.size() == size_t(cfg.n_events));
  for (const auto& ev : truth) {
    CHECK(ev.x > 0);
    CHECK(ev.x < cfg.width);
    CHECK(ev.y < cfg.height);
    CHECK(ev.u0 > 0);
    CHECK(ev.tE > 0);
    CHECK(ev.source_flux > 0);
    CHECK(!ev.truth_id.empty());
  }

  // the raw stack decodes to the declared campaign shape
  FrameStack raw = read_stack(a.sub("raw_R.pxl"));
  CHECK(raw.width() == cfg.width);
  CHECK(raw.height() == cfg.height);
  CHECK(raw.epochs() == cfg.epochs);
  CHECK(raw.band() == Band::R);
}

TEST_CASE("calibrate_fixture writes calibrated stacks with mask sidecars") {
  const auto& fx = fixture();
  testutil::TempDir out("pxnet-calib-out");
  pipeline::calibrate_fixture(fx.cfg, fx.dir.str(), out.str());

  for (Band band : {Band::R, Band::B}) {
    std::string base = out.sub(std::string("calib_") + band_name(band));
    FrameStack st = read_stack(base + ".pxl");
    CHECK(st.width() == fx.cfg.width);
    CHECK(st.height() == fx.cfg.height);
    CHECK(st.epochs() == fx.cfg.epochs);
    CHECK(st.band() == band);
    Band mb = Band::R;
    MaskStack masks = read_masks(base + ".pxm", &mb);
    CHECK(mb == band);
    CHECK(masks.width == fx.cfg.width);
    CHECK(masks.height == fx.cfg.height);
    CHECK(masks.epochs() == fx.cfg.epochs);
  }
}

TEST_CASE("prepare_run tiles the calibrated campaign") {
  const auto& fx = fixture();
  pipeline::PreparedRun pr = pipeline::prepare_run(fx.dir.str(), fx.cfg);

  auto rects = tile_grid(fx.cfg.width, fx.cfg.height, fx.cfg.tiling());
  REQUIRE(pr.rects.size() == rects.size());
  REQUIRE(pr.bundles.size() == rects.size());
  for (size_t i = 0; i < rects.size(); ++i) {
    CHECK(pr.rects[i].tile_row == rects[i].tile_row);
    CHECK(pr.rects[i].tile_col == rects[i].tile_col);
    CHECK(pr.rects[i].core_x == rects[i].core_x);
    CHECK(pr.rects[i].core_w == rects[i].core_w);
    CHECK(pr.rects[i].halo == fx.cfg.halo);
  }

  // every bundle decodes to the tile's data dimensions in both bands
  auto bands0 = pipeline::decode_bundle(pr.bundles[0]);
  REQUIRE(bands0.size() == 2);
  for (const auto& [band, bd] : bands0) {
    CHECK(bd.stack.width() == pr.rects[0].data_w());
    CHECK(bd.stack.height() == pr.rects[0].data_h());
    CHECK(bd.stack.epochs() == fx.cfg.epochs);
    CHECK(bd.stack.band() == band);
    CHECK(bd.masks.width == pr.rects[0].data_w());
    CHECK(bd.masks.epochs() == fx.cfg.epochs);
  }

  uint64_t raw_bytes = fs::file_size(fx.dir.sub("raw_R.pxl")) +
                       fs::file_size(fx.dir.sub("raw_B.pxl"));
  CHECK(pr.raw_input_bytes == raw_bytes);

  CHECK(pr.catalog.run_id == fx.cfg.run_id);
  CHECK(pr.catalog.config_digest == fx.cfg.digest());
  CHECK(pr.catalog.config_snapshot.at("width").get<uint32_t>() == fx.cfg.width);
  REQUIRE(pr.catalog.reports.size() == 3);
  CHECK(pr.catalog.reports[0].stage == "IDAQ");
  CHECK(pr.catalog.reports[1].stage == "CALIB");
  CHECK(pr.catalog.reports[2].stage == "TILE");
  CHECK(pr.catalog.reports[0].items_in == uint64_t(fx.cfg.epochs) * 2);
  CHECK(pr.catalog.reports[2].items_out == rects.size());

  SUBCASE("campaign shape must match the config") {
    RunConfig wrong = fx.cfg;
    wrong.width = 128;
    wrong.height = 128;
    try {
      pipeline::prepare_run(fx.dir.str(), wrong);
      FAIL("geometry mismatch accepted");
    } catch (const PxError& e) {
      CHECK(e.code() == Err::GeometryMismatch);
    }
  }
  SUBCASE("epoch count must match the config") {
    RunConfig wrong = fx.cfg;
    wrong.epochs = 17;
    CHECK_THROWS_AS(pipeline::prepare_run(fx.dir.str(), wrong), PxError);
  }
}

TEST_CASE("process_tile is deterministic and thread-count invariant") {
  const auto& fx = fixture();
  pipeline::PreparedRun pr = pipeline::prepare_run(fx.dir.str(), fx.cfg);

  for (size_t i = 0; i < pr.rects.size(); ++i) {
    auto bands = pipeline::decode_bundle(pr.bundles[i]);
    auto a = pipeline::process_tile(bands, pr.rects[i], fx.cfg, 1);
    auto b = pipeline::process_tile(bands, pr.rects[i], fx.cfg, 1);
    auto c = pipeline::process_tile(bands, pr.rects[i], fx.cfg, 3);

    CHECK(a.candidates == b.candidates);
    CHECK(a.candidates == c.candidates);
    for (const auto* out : {&a, &b, &c}) {
      CHECK(out->stats.curves_built == a.stats.curves_built);
      CHECK(out->stats.peak_curves == a.stats.peak_curves);
      CHECK(out->stats.peaks_found == a.stats.peaks_found);
      CHECK(out->stats.fits_attempted == a.stats.fits_attempted);
      CHECK(out->stats.events_accepted == a.stats.events_accepted);
    }

    // candidates are tile-local, inside the core, and sorted by (y, x, band)
    std::vector<std::tuple<uint32_t, uint32_t, std::string>> order;
    for (const auto& cj : a.candidates) {
      uint32_t x = cj.at("x").get<uint32_t>();
      uint32_t y = cj.at("y").get<uint32_t>();
      CHECK(pr.rects[i].local_in_core(x, y));
      order.emplace_back(y, x, cj.at("band").get<std::string>());
    }
    CHECK(std::is_sorted(order.begin(), order.end()));
  }
}

TEST_CASE("run_local writes a complete catalog") {
  const auto& fx = fixture();
  testutil::TempDir out("pxnet-runlocal");
  RunConfig cfg = fx.cfg;
  cfg.alert_sinks = "file:" + out.sub("alerts.jsonl");

  dispatch::RunCatalog cat = pipeline::run_local(cfg, fx.dir.str(), out.str());

  REQUIRE(fs::exists(out.sub("catalog.jsonl")));
  REQUIRE(fs::exists(out.sub("summary.pxs.z")));
  REQUIRE(fs::exists(out.sub("run_log.jsonl")));

  // catalog file round trips the in-memory result
  dispatch::RunCatalog back = dispatch::read_catalog(out.sub("catalog.jsonl"));
  CHECK(back.run_id == cfg.run_id);
  CHECK(back.config_digest == cfg.digest());
  CHECK(back.candidates.size() == cat.candidates.size());
  CHECK(back.tile_stats.size() == 4);
  CHECK(back.raw_input_bytes == cat.raw_input_bytes);
  CHECK(back.summary_bytes == cat.summary_bytes);
  CHECK(cat.summary_bytes == fs::file_size(out.sub("summary.pxs.z")));

  // one stats record per tile, all locally processed
  std::set<uint64_t> task_ids;
  for (const auto& st : cat.tile_stats) {
    task_ids.insert(st.task_id);
    CHECK(st.worker_id == 0);
  }
  CHECK(task_ids == std::set<uint64_t>{0, 1, 2, 3});

  // the counter funnel is monotone
  dispatch::TileStats tot = cat.totals();
  CHECK(tot.curves_built > 0);
  CHECK(tot.peak_curves <= tot.curves_built);
  CHECK(tot.fits_attempted <= tot.peak_curves);
  CHECK(tot.events_accepted <= tot.fits_attempted);

  size_t accepted = 0;
  for (const auto& c : cat.candidates) accepted += c.accepted;
  CHECK(accepted == tot.events_accepted);
  REQUIRE(accepted > 0);

  // every accepted candidate sits on a true event; each event is recovered
  auto truth = synthgen::read_truth(fx.dir.sub("truth.jsonl"));
  auto near_truth = [&](const dispatch::CandidateRecord& c, double radius) {
    for (const auto& ev : truth) {
      double dx = double(c.x) - ev.x, dy = double(c.y) - ev.y;
      if (std::max(std::abs(dx), std::abs(dy)) <= radius) return true;
    }
    return false;
  };
  for (const auto& c : cat.candidates) {
    if (!c.accepted) continue;
    INFO("accepted candidate at ", c.x, ",", c.y, " band ", c.band);
    CHECK(near_truth(c, 2.0));
    CHECK(c.fit.converged);
    CHECK(c.fit.delta_chi2 >= cfg.min_delta_chi2);
    CHECK(c.curve.has_value());  // accepted records keep the curve
    CHECK(c.reasons.empty());
  }
  for (const auto& ev : truth) {
    bool found = false;
    for (const auto& c : cat.candidates)
      if (c.accepted && std::max(std::abs(double(c.x) - ev.x), std::abs(double(c.y) - ev.y)) <= 2.0)
        found = true;
    INFO("truth event ", ev.truth_id, " at ", ev.x, ",", ev.y);
    CHECK(found);
  }

  // status reports cover every stage of the funnel
  for (const char* stage : {"IDAQ", "CALIB", "TILE", "DAP", "DAU", "MINE"}) {
    INFO("stage ", stage);
    CHECK(has_stage(cat, stage));
  }

  // candidates ordered by (tile_row, tile_col, y, x, band)
  auto key = [](const dispatch::CandidateRecord& c) {
    return std::make_tuple(c.tile_row, c.tile_col, c.y, c.x, c.band);
  };
  for (size_t i = 1; i < cat.candidates.size(); ++i)
    CHECK(key(cat.candidates[i - 1]) <= key(cat.candidates[i]));

  // run log lines all parse and are status or alert records
  std::string log = read_file(out.sub("run_log.jsonl"));
  size_t pos = 0, lines = 0, alerts = 0;
  while (pos < log.size()) {
    size_t nl = log.find('\n', pos);
    if (nl == std::string::npos) nl = log.size();
    nlohmann::json j = nlohmann::json::parse(log.substr(pos, nl - pos));
    std::string type = j.at("type").get<std::string>();
    CHECK((type == "status" || type == "alert"));
    alerts += type == "alert";
    ++lines;
    pos = nl + 1;
  }
  CHECK(lines >= 6);
  CHECK(alerts == accepted);

  // the file sink received one JSON line per accepted candidate
  CHECK(cat.alerts.size() == accepted);
  for (const auto& a : cat.alerts) {
    CHECK(a.sink == "file");
    CHECK(a.status == "delivered");
    CHECK(a.alert.at("run_id").get<std::string>() == cfg.run_id);
  }

  // the compressed summary reads back with the accepted candidates
  auto sum = dispatch::read_summary(out.sub("summary.pxs.z"));
  CHECK(sum.meta.at("run_id").get<std::string>() == cfg.run_id);
  CHECK(sum.tile_stats.size() == 4);
  size_t sum_accepted = 0;
  for (const auto& c : sum.candidates) sum_accepted += c.accepted;
  CHECK(sum_accepted == accepted);
}

TEST_CASE("tiled processing matches the whole-frame decision") {
  const auto& fx = fixture();
  testutil::TempDir out_tiled("pxnet-dm-tiled"), out_whole("pxnet-dm-whole");

  RunConfig tiled = fx.cfg;
  tiled.alert_sinks = "file:" + out_tiled.sub("alerts.jsonl");
  RunConfig whole = tiled;
  whole.grid_rows = 1;
  whole.grid_cols = 1;
  whole.alert_sinks = "file:" + out_whole.sub("alerts.jsonl");

  auto cat_tiled = pipeline::run_local(tiled, fx.dir.str(), out_tiled.str());
  auto cat_whole = pipeline::run_local(whole, fx.dir.str(), out_whole.str());

  CHECK(accepted_keys(cat_tiled) == accepted_keys(cat_whole));
  CHECK(cat_tiled.totals().curves_built == cat_whole.totals().curves_built);
}

TEST_CASE("distributed runs reproduce the local candidate set") {
  const auto& fx = fixture();
  testutil::TempDir out_local("pxnet-dist-local");
  RunConfig cfg = fx.cfg;
  cfg.heartbeat_interval_s = 0.2;
  cfg.heartbeat_timeout_s = 2.0;
  cfg.worker_recv_timeout_s = 30.0;
  cfg.alert_sinks = "file:" + out_local.sub("alerts.jsonl");

  auto cat_local = pipeline::run_local(cfg, fx.dir.str(), out_local.str());

  auto run_distributed = [&](RunConfig server_cfg, const std::string& out_dir,
                             dispatch::RunCatalog& cat_out, size_t& tasks_done) {
    std::promise<uint16_t> pport;
    auto fport = pport.get_future();
    std::exception_ptr serve_err, work_err;
    std::thread server([&] {
      try {
        cat_out = pipeline::run_serve(server_cfg, fx.dir.str(), out_dir, "127.0.0.1", 0,
                                      [&](uint16_t p) { pport.set_value(p); });
      } catch (...) {
        serve_err = std::current_exception();
        try {
          pport.set_value(0);
        } catch (...) {
        }
      }
    });
    REQUIRE(fport.wait_for(std::chrono::seconds(20)) == std::future_status::ready);
    uint16_t port = fport.get();
    REQUIRE(port != 0);
    std::thread worker([&] {
      try {
        tasks_done = pipeline::run_work(server_cfg, "127.0.0.1", port);
      } catch (...) {
        work_err = std::current_exception();
      }
    });
    worker.join();
    server.join();
    if (serve_err) std::rethrow_exception(serve_err);
    if (work_err) std::rethrow_exception(work_err);
  };

  SUBCASE("inline payloads") {
    testutil::TempDir out_serve("pxnet-dist-inline");
    RunConfig scfg = cfg;
    scfg.alert_sinks = "file:" + out_serve.sub("alerts.jsonl");
    dispatch::RunCatalog cat_serve;
    size_t done = 0;
    run_distributed(scfg, out_serve.str(), cat_serve, done);

    CHECK(done == 4);
    CHECK(accepted_keys(cat_serve) == accepted_keys(cat_local));
    REQUIRE(cat_serve.candidates.size() == cat_local.candidates.size());
    for (size_t i = 0; i < cat_serve.candidates.size(); ++i) {
      CHECK(dispatch::candidate_to_json(cat_serve.candidates[i]) ==
            dispatch::candidate_to_json(cat_local.candidates[i]));
    }
    REQUIRE(cat_serve.tile_stats.size() == cat_local.tile_stats.size());
    for (size_t i = 0; i < cat_serve.tile_stats.size(); ++i) {
      const auto& a = cat_serve.tile_stats[i];
      const auto& b = cat_local.tile_stats[i];
      CHECK(a.task_id == b.task_id);
      CHECK(a.curves_built == b.curves_built);
      CHECK(a.peak_curves == b.peak_curves);
      CHECK(a.peaks_found == b.peaks_found);
      CHECK(a.fits_attempted == b.fits_attempted);
      CHECK(a.events_accepted == b.events_accepted);
      CHECK(a.halo_dropped == b.halo_dropped);
      CHECK(a.worker_id == 1);  // single remote worker
    }
    CHECK(fs::exists(out_serve.sub("catalog.jsonl")));
    std::string slog = read_file(out_serve.sub("server_log.txt"));
    CHECK(slog.find("register worker=1") != std::string::npos);
    CHECK(slog.find("complete task=") != std::string::npos);
  }

  SUBCASE("path payloads stage tiles on shared storage") {
    testutil::TempDir out_serve("pxnet-dist-path");
    RunConfig scfg = cfg;
    scfg.payload_mode = "path";
    scfg.alert_sinks = "file:" + out_serve.sub("alerts.jsonl");
    dispatch::RunCatalog cat_serve;
    size_t done = 0;
    run_distributed(scfg, out_serve.str(), cat_serve, done);

    CHECK(done == 4);
    CHECK(accepted_keys(cat_serve) == accepted_keys(cat_local));
    for (int i = 0; i < 4; ++i)
      CHECK(fs::exists(out_serve.sub("tiles/task_" + std::to_string(i) + ".pxt")));
  }
}

TEST_CASE("mixed science configs abort the distributed run") {
  const auto& fx = fixture();
  testutil::TempDir out("pxnet-dist-mixed");
  RunConfig scfg = fx.cfg;
  scfg.heartbeat_interval_s = 0.2;
  scfg.heartbeat_timeout_s = 2.0;
  scfg.retry_budget = 1;
  scfg.alert_sinks = "file:" + out.sub("alerts.jsonl");

  RunConfig wcfg = scfg;
  wcfg.n_sigma = 4.0;  // different science digest
  REQUIRE(wcfg.digest() != scfg.digest());

  std::promise<uint16_t> pport;
  auto fport = pport.get_future();
  std::exception_ptr serve_err, work_err;
  std::thread server([&] {
    try {
      pipeline::run_serve(scfg, fx.dir.str(), out.str(), "127.0.0.1", 0,
                          [&](uint16_t p) { pport.set_value(p); });
    } catch (...) {
      serve_err = std::current_exception();
      try {
        pport.set_value(0);
      } catch (...) {
      }
    }
  });
  REQUIRE(fport.wait_for(std::chrono::seconds(20)) == std::future_status::ready);
  uint16_t port = fport.get();
  REQUIRE(port != 0);
  std::thread worker([&] {
    try {
      pipeline::run_work(wcfg, "127.0.0.1", port);
    } catch (...) {
      work_err = std::current_exception();
    }
  });
  worker.join();
  server.join();

  REQUIRE(work_err);
  try {
    std::rethrow_exception(work_err);
  } catch (const PxError& e) {
    CHECK(e.code() == Err::ConfigError);
  }
  REQUIRE(serve_err);
  try {
    std::rethrow_exception(serve_err);
  } catch (const PxError& e) {
    CHECK(e.code() == Err::RunAborted);
  }
}

TEST_CASE("a serve run with no workers aborts after the idle deadline") {
  const auto& fx = fixture();
  testutil::TempDir out("pxnet-dist-idle");
  RunConfig cfg = fx.cfg;
  cfg.idle_abort_s = 0.3;
  cfg.alert_sinks = "file:" + out.sub("alerts.jsonl");
  try {
    pipeline::run_serve(cfg, fx.dir.str(), out.str(), "127.0.0.1", 0);
    FAIL("idle run did not abort");
  } catch (const PxError& e) {
    CHECK(e.code() == Err::RunAborted);
  }
}

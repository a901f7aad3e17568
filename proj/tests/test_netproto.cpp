#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <chrono>
#include <string>
#include <thread>
#include <vector>

#include "helpers.hpp"
#include "pxnet/netproto_server.hpp"
#include "pxnet/netproto_worker.hpp"
#include "pxnet/util.hpp"

using namespace pxnet;
using namespace pxnet::netproto;
using nlohmann::json;

namespace {

json hello_v(int version) {
  return {{"version", version}, {"capabilities", json::array({"tile-trigger-v1"})}};
}

json good_stats() {
  return {{"curves_built", 100}, {"peak_curves", 10},      {"peaks_found", 12},
          {"fits_attempted", 8}, {"events_accepted", 2},   {"elapsed_s", 0.25}};
}

json result_msg(uint64_t task, uint64_t worker, json stats = good_stats()) {
  return {{"task_id", task},
          {"worker_id", worker},
          {"stats", std::move(stats)},
          {"candidates", json::array({{{"x", 1}}})}};
}

TaskSpec make_task(uint64_t id, uint32_t row, uint32_t col, std::string payload = "PAYLOAD") {
  TaskSpec t;
  t.task_id = id;
  t.run_id = "run-nt";
  t.tile_row = row;
  t.tile_col = col;
  t.config_digest = "digest-1";
  t.payload_mode = "inline";
  t.payload = std::move(payload);
  return t;
}

// One decoded protocol event coming out of the core.
struct Event {
  uint64_t conn = 0;
  bool close = false;
  MsgType type = MsgType::Error;
  json payload;
};

std::vector<Event> decode_actions(const std::vector<ServerCore::Action>& actions) {
  std::vector<Event> out;
  for (const auto& a : actions) {
    if (a.kind == ServerCore::Action::Close) {
      out.push_back({a.conn, true, MsgType::Error, {}});
      continue;
    }
    FrameParser p;
    p.feed(a.bytes);
    while (auto m = p.next()) {
      MsgType t = check_type(m->type);
      out.push_back({a.conn, false, t, validate_payload(t, m->payload)});
    }
  }
  return out;
}

// Drives a ServerCore with an explicit clock and framed messages.
struct Sim {
  ServerCore core;
  explicit Sim(std::vector<TaskSpec> tasks, ServerOptions opt = {})
      : core(std::move(tasks), opt, 0.0) {}

  std::vector<Event> connect(uint64_t conn, double now) {
    return decode_actions(core.on_connect(conn, now));
  }
  std::vector<Event> send(uint64_t conn, MsgType t, const json& j, double now) {
    return decode_actions(core.on_bytes(conn, encode_message(t, j), now));
  }
  std::vector<Event> tick(double now) { return decode_actions(core.on_tick(now)); }

  // register a worker on conn and return its id
  uint64_t register_worker(uint64_t conn, double now) {
    connect(conn, now);
    auto ev = send(conn, MsgType::Hello, hello_v(1), now);
    REQUIRE(ev.size() == 1);
    REQUIRE(ev[0].type == MsgType::Ack);
    return ev[0].payload.at("worker_id").get<uint64_t>();
  }
};

bool log_contains(const ServerCore& core, const std::string& needle) {
  for (const std::string& line : core.event_log())
    if (line.find(needle) != std::string::npos) return true;
  return false;
}

bool has_close(const std::vector<Event>& ev, uint64_t conn) {
  for (const auto& e : ev)
    if (e.close && e.conn == conn) return true;
  return false;
}

const Event* first_of(const std::vector<Event>& ev, MsgType t) {
  for (const auto& e : ev)
    if (!e.close && e.type == t) return &e;
  return nullptr;
}

}  // namespace

// ---------------------------------------------------------------------------
// framing
// ---------------------------------------------------------------------------

TEST_CASE("frames are length-prefixed big-endian with a type byte") {
  std::string f = encode_message(MsgType::Drain, json::object());
  REQUIRE(f.size() == 7);  // 4 + 1 + "{}"
  CHECK(uint8_t(f[0]) == 0);
  CHECK(uint8_t(f[1]) == 0);
  CHECK(uint8_t(f[2]) == 0);
  CHECK(uint8_t(f[3]) == 2);
  CHECK(uint8_t(f[4]) == 0x06);
  CHECK(f.substr(5) == "{}");

  CHECK(uint8_t(encode_message(MsgType::Hello, hello_v(1))[4]) == 0x01);
  CHECK(uint8_t(encode_message(MsgType::Error, {{"code", "x"}, {"detail", "y"}})[4]) == 0x07);
}

TEST_CASE("byte chunking never changes the decoded message sequence") {
  std::vector<std::pair<MsgType, json>> msgs = {
      {MsgType::Hello, hello_v(1)},
      {MsgType::Ack, {{"worker_id", 7}}},
      {MsgType::Heartbeat, {{"worker_id", 7}}},
      {MsgType::Result, result_msg(3, 7)},
      {MsgType::Drain, json::object()},
      {MsgType::Error, {{"code", "RunAborted"}, {"detail", "x"}}},
  };
  std::string wire;
  for (auto& [t, j] : msgs) wire += encode_message(t, j);

  auto decode_with_chunk = [&](size_t chunk) {
    FrameParser p;
    std::vector<RawMessage> got;
    for (size_t off = 0; off < wire.size(); off += chunk) {
      p.feed(std::string_view(wire).substr(off, chunk));
      while (auto m = p.next()) got.push_back(*m);
    }
    return got;
  };

  for (size_t chunk : {size_t(1), size_t(2), size_t(3), size_t(5), size_t(17), wire.size()}) {
    auto got = decode_with_chunk(chunk);
    REQUIRE(got.size() == msgs.size());
    for (size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].type == uint8_t(msgs[i].first));
      CHECK(json::parse(got[i].payload) == msgs[i].second);
    }
  }
}

TEST_CASE("a partial frame yields nothing until completed") {
  std::string f = encode_message(MsgType::Heartbeat, {{"worker_id", 1}});
  FrameParser p;
  p.feed(std::string_view(f).substr(0, 4));  // length only
  CHECK_FALSE(p.next().has_value());
  p.feed(std::string_view(f).substr(4, 1));  // type byte
  CHECK_FALSE(p.next().has_value());
  p.feed(std::string_view(f).substr(5));
  auto m = p.next();
  REQUIRE(m.has_value());
  CHECK(m->type == uint8_t(MsgType::Heartbeat));
  CHECK_FALSE(p.next().has_value());
}

TEST_CASE("oversize payload declarations are rejected at the header") {
  FrameParser p(64);
  std::string header;
  put_u32be(header, 65);
  header.push_back(char(0x05));
  p.feed(header);
  CHECK_THROWS_AS(p.next(), PxError);

  // garbage reads as an absurd length and dies the same way
  FrameParser q(1 << 20);
  q.feed("ABCDEFGH");
  CHECK_THROWS_AS(q.next(), PxError);
}

TEST_CASE("type bytes outside the protocol range are rejected") {
  CHECK_THROWS_AS(check_type(0x00), PxError);
  CHECK_THROWS_AS(check_type(0x08), PxError);
  CHECK_THROWS_AS(check_type(0xFF), PxError);
  for (uint8_t b = 0x01; b <= 0x07; ++b) CHECK(uint8_t(check_type(b)) == b);
}

// ---------------------------------------------------------------------------
// payload schemas
// ---------------------------------------------------------------------------

TEST_CASE("payload schemas accept exactly the documented key sets") {
  auto ok = [](MsgType t, const json& j) {
    CHECK_NOTHROW(validate_payload(t, j.dump()));
  };
  auto no = [](MsgType t, const json& j) {
    CHECK_THROWS_AS(validate_payload(t, j.dump()), PxError);
  };

  ok(MsgType::Hello, hello_v(1));
  no(MsgType::Hello, {{"version", 1}});                                  // missing key
  no(MsgType::Hello, {{"version", 1}, {"capabilities", json::array()}, {"extra", 1}});
  no(MsgType::Hello, {{"version", "one"}, {"capabilities", json::array()}});
  no(MsgType::Hello, {{"version", 1}, {"capabilities", 3}});
  no(MsgType::Hello, {{"version", 1}, {"capabilities", json::array({1})}});

  ok(MsgType::Ack, {{"worker_id", 3}});
  ok(MsgType::Ack, {{"task_id", 9}});
  no(MsgType::Ack, json::object());
  no(MsgType::Ack, {{"worker_id", 1}, {"task_id", 2}});
  no(MsgType::Ack, {{"bogus", 1}});
  no(MsgType::Ack, {{"worker_id", -1}});
  no(MsgType::Ack, {{"worker_id", "7"}});

  json task = {{"task_id", 1},          {"run_id", "r"},        {"tile_row", 0},
               {"tile_col", 2},         {"config_digest", "d"}, {"payload_mode", "inline"},
               {"data_b64", "UEFZ"}};
  ok(MsgType::Task, task);
  json task_path = task;
  task_path.erase("data_b64");
  task_path["payload_mode"] = "path";
  task_path["path"] = "/tmp/bundle";
  ok(MsgType::Task, task_path);
  {
    json bad = task;
    bad["path"] = "/also";  // both carriers at once
    no(MsgType::Task, bad);
  }
  {
    json bad = task;
    bad.erase("data_b64");  // inline without data
    no(MsgType::Task, bad);
  }
  {
    json bad = task;
    bad["payload_mode"] = "carrier-pigeon";
    no(MsgType::Task, bad);
  }
  {
    json bad = task;
    bad.erase("config_digest");
    no(MsgType::Task, bad);
  }
  {
    json bad = task;
    bad["surprise"] = 1;
    no(MsgType::Task, bad);
  }

  ok(MsgType::Result, result_msg(1, 2));
  {
    json bad = result_msg(1, 2);
    bad["stats"].erase("elapsed_s");
    no(MsgType::Result, bad);
  }
  {
    json bad = result_msg(1, 2);
    bad["stats"]["extra"] = 0;
    no(MsgType::Result, bad);
  }
  {
    json bad = result_msg(1, 2);
    bad["stats"]["curves_built"] = -4;
    no(MsgType::Result, bad);
  }
  {
    json bad = result_msg(1, 2);
    bad["candidates"] = "none";
    no(MsgType::Result, bad);
  }
  {
    json bad = result_msg(1, 2);
    bad["stats"] = 7;
    no(MsgType::Result, bad);
  }

  ok(MsgType::Heartbeat, {{"worker_id", 12}});
  no(MsgType::Heartbeat, {{"worker_id", 12}, {"mood", "fine"}});
  no(MsgType::Heartbeat, json::object());

  ok(MsgType::Drain, json::object());
  no(MsgType::Drain, {{"x", 1}});
  no(MsgType::Drain, json::array());

  ok(MsgType::Error, {{"code", "RunAborted"}, {"detail", "x"}});
  no(MsgType::Error, {{"code", "RunAborted"}});
  no(MsgType::Error, {{"code", 3}, {"detail", "x"}});

  CHECK_THROWS_AS(validate_payload(MsgType::Drain, "{"), PxError);
  CHECK_THROWS_AS(validate_payload(MsgType::Hello, "nope"), PxError);
}

// ---------------------------------------------------------------------------
// server state machine (simulated clock)
// ---------------------------------------------------------------------------

TEST_CASE("registration hands out sequential worker ids") {
  Sim sim({make_task(1, 0, 0)});
  CHECK(sim.register_worker(1, 0.0) == 1);
  CHECK(sim.register_worker(2, 0.0) == 2);
  CHECK(sim.core.workers_registered() == 2);
  CHECK(sim.core.worker_status(1) == WorkerStatus::Idle);
  CHECK_FALSE(sim.core.worker_status(99).has_value());
}

TEST_CASE("a version mismatch is refused with an explanatory error") {
  Sim sim({make_task(1, 0, 0)});
  sim.connect(1, 0.0);
  auto ev = sim.send(1, MsgType::Hello, hello_v(99), 0.0);
  REQUIRE(first_of(ev, MsgType::Error) != nullptr);
  CHECK(first_of(ev, MsgType::Error)->payload.at("code") == "VersionMismatch");
  CHECK(has_close(ev, 1));
  CHECK(sim.core.workers_registered() == 0);
}

TEST_CASE("anything before HELLO is a protocol violation") {
  Sim sim({make_task(1, 0, 0)});
  sim.connect(1, 0.0);
  auto ev = sim.send(1, MsgType::Heartbeat, {{"worker_id", 1}}, 0.0);
  REQUIRE(first_of(ev, MsgType::Error) != nullptr);
  CHECK(first_of(ev, MsgType::Error)->payload.at("code") == "ProtocolViolation");
  CHECK(has_close(ev, 1));
}

TEST_CASE("a second HELLO on the same connection is refused") {
  Sim sim({make_task(1, 0, 0)});
  sim.register_worker(1, 0.0);
  auto ev = sim.send(1, MsgType::Hello, hello_v(1), 0.0);
  REQUIRE(first_of(ev, MsgType::Error) != nullptr);
  CHECK(has_close(ev, 1));
}

TEST_CASE("tasks are assigned in order with the payload inline") {
  Sim sim({make_task(1, 0, 0, "alpha"), make_task(2, 0, 1, "beta")});
  uint64_t w = sim.register_worker(1, 0.0);

  auto ev = sim.send(1, MsgType::Ack, {{"worker_id", w}}, 0.1);
  const Event* task = first_of(ev, MsgType::Task);
  REQUIRE(task != nullptr);
  CHECK(task->payload.at("task_id") == 1);
  CHECK(task->payload.at("tile_row") == 0);
  CHECK(task->payload.at("tile_col") == 0);
  CHECK(task->payload.at("run_id") == "run-nt");
  CHECK(task->payload.at("config_digest") == "digest-1");
  CHECK(base64_decode(task->payload.at("data_b64").get<std::string>()) == "alpha");
  CHECK(sim.core.worker_status(w) == WorkerStatus::Busy);

  // a work request while busy is a violation
  auto bad = sim.send(1, MsgType::Ack, {{"worker_id", w}}, 0.2);
  REQUIRE(first_of(bad, MsgType::Error) != nullptr);
  CHECK(has_close(bad, 1));
}

TEST_CASE("path-mode tasks carry the path instead of bytes") {
  TaskSpec t = make_task(5, 1, 2);
  t.payload_mode = "path";
  t.payload = "/data/tile-1-2.bundle";
  Sim sim({t});
  uint64_t w = sim.register_worker(1, 0.0);
  auto ev = sim.send(1, MsgType::Ack, {{"worker_id", w}}, 0.0);
  const Event* task = first_of(ev, MsgType::Task);
  REQUIRE(task != nullptr);
  CHECK(task->payload.at("payload_mode") == "path");
  CHECK(task->payload.at("path") == "/data/tile-1-2.bundle");
  CHECK_FALSE(task->payload.contains("data_b64"));
}

TEST_CASE("the full request-work-result loop completes a run") {
  Sim sim({make_task(1, 0, 0), make_task(2, 0, 1)});
  uint64_t w = sim.register_worker(1, 0.0);

  sim.send(1, MsgType::Ack, {{"worker_id", w}}, 0.1);
  auto ev = sim.send(1, MsgType::Result, result_msg(1, w), 0.2);
  const Event* ack = first_of(ev, MsgType::Ack);
  REQUIRE(ack != nullptr);
  CHECK(ack->payload.at("task_id") == 1);
  CHECK(sim.core.worker_status(w) == WorkerStatus::Idle);
  CHECK_FALSE(sim.core.finished());

  sim.send(1, MsgType::Ack, {{"worker_id", w}}, 0.3);
  sim.send(1, MsgType::Result, result_msg(2, w), 0.4);
  CHECK(sim.core.finished());
  CHECK_FALSE(sim.core.aborted());

  REQUIRE(sim.core.results().size() == 2);
  CHECK(sim.core.results()[0].task_id == 1);
  CHECK(sim.core.results()[1].task_id == 2);
  CHECK(sim.core.results()[0].worker_id == w);
  CHECK(sim.core.results()[0].stats == good_stats());
  CHECK(sim.core.results()[0].candidates == json::array({{{"x", 1}}}));
  CHECK(log_contains(sim.core, "complete task=2"));

  // further work requests drain the worker
  auto drained = sim.send(1, MsgType::Ack, {{"worker_id", w}}, 0.5);
  CHECK(first_of(drained, MsgType::Drain) != nullptr);
}

TEST_CASE("an idle waiter is drained when the last task completes") {
  Sim sim({make_task(1, 0, 0)});
  uint64_t w1 = sim.register_worker(1, 0.0);
  uint64_t w2 = sim.register_worker(2, 0.0);

  sim.send(1, MsgType::Ack, {{"worker_id", w1}}, 0.1);  // takes the only task
  auto waiting = sim.send(2, MsgType::Ack, {{"worker_id", w2}}, 0.2);
  CHECK(waiting.empty());  // parked, nothing to say yet
  CHECK(log_contains(sim.core, "wait worker=" + std::to_string(w2)));

  auto ev = sim.send(1, MsgType::Result, result_msg(1, w1), 0.3);
  bool w2_drained = false;
  for (const auto& e : ev)
    if (!e.close && e.type == MsgType::Drain && e.conn == 2) w2_drained = true;
  CHECK(w2_drained);
  CHECK(sim.core.finished());
}

TEST_CASE("a waiting worker receives work freed by a requeue") {
  Sim sim({make_task(1, 0, 0)});
  uint64_t w1 = sim.register_worker(1, 0.0);
  uint64_t w2 = sim.register_worker(2, 0.0);
  sim.send(1, MsgType::Ack, {{"worker_id", w1}}, 0.1);
  sim.send(2, MsgType::Ack, {{"worker_id", w2}}, 0.2);  // parked

  // w1 goes silent while w2 keeps beating; at t=12 the task moves to w2
  sim.send(2, MsgType::Heartbeat, {{"worker_id", w2}}, 11.0);
  auto ev = sim.tick(12.0);
  const Event* task = nullptr;
  for (const auto& e : ev)
    if (!e.close && e.type == MsgType::Task && e.conn == 2) task = &e;
  REQUIRE(task != nullptr);
  CHECK(task->payload.at("task_id") == 1);
  CHECK(sim.core.worker_status(w1) == WorkerStatus::Dead);
  CHECK(sim.core.worker_status(w2) == WorkerStatus::Busy);
  CHECK(log_contains(sim.core, "requeue task=1"));
}

TEST_CASE("missing heartbeats walk a worker through suspect to dead") {
  ServerOptions opt;
  opt.heartbeat_timeout_s = 5.0;
  Sim sim({make_task(1, 0, 0)}, opt);
  uint64_t w = sim.register_worker(1, 0.0);

  sim.tick(4.0);
  CHECK(sim.core.worker_status(w) == WorkerStatus::Idle);
  sim.tick(6.0);
  CHECK(sim.core.worker_status(w) == WorkerStatus::Suspect);

  // a heartbeat rehabilitates the worker
  sim.send(1, MsgType::Heartbeat, {{"worker_id", w}}, 7.0);
  CHECK(sim.core.worker_status(w) == WorkerStatus::Idle);

  // silence past twice the timeout kills it
  auto ev = sim.tick(18.0);
  CHECK(sim.core.worker_status(w) == WorkerStatus::Dead);
  CHECK(has_close(ev, 1));
  CHECK(log_contains(sim.core, "dead (heartbeat timeout)"));
}

TEST_CASE("a busy worker that goes suspect returns to busy on heartbeat") {
  Sim sim({make_task(1, 0, 0)});
  uint64_t w = sim.register_worker(1, 0.0);
  sim.send(1, MsgType::Ack, {{"worker_id", w}}, 0.0);
  sim.tick(6.0);
  CHECK(sim.core.worker_status(w) == WorkerStatus::Suspect);
  sim.send(1, MsgType::Heartbeat, {{"worker_id", w}}, 6.5);
  CHECK(sim.core.worker_status(w) == WorkerStatus::Busy);
}

TEST_CASE("inconsistent result counters mark the worker suspect and requeue") {
  Sim sim({make_task(1, 0, 0), make_task(2, 0, 1)});
  uint64_t w = sim.register_worker(1, 0.0);
  sim.send(1, MsgType::Ack, {{"worker_id", w}}, 0.1);

  json stats = good_stats();
  stats["events_accepted"] = 50;  // more accepted than fitted
  auto ev = sim.send(1, MsgType::Result, result_msg(1, w, stats), 0.2);
  const Event* err = first_of(ev, MsgType::Error);
  REQUIRE(err != nullptr);
  CHECK(err->payload.at("detail").get<std::string>().find("monotone") != std::string::npos);
  CHECK_FALSE(has_close(ev, 1));  // connection survives, trust does not
  CHECK(sim.core.worker_status(w) == WorkerStatus::Suspect);
  CHECK(sim.core.results().empty());
  CHECK(log_contains(sim.core, "invalid result task=1"));

  // the requeued task went to the front of the queue
  sim.send(1, MsgType::Heartbeat, {{"worker_id", w}}, 0.3);
  CHECK(sim.core.worker_status(w) == WorkerStatus::Idle);
  auto next = sim.send(1, MsgType::Ack, {{"worker_id", w}}, 0.4);
  REQUIRE(first_of(next, MsgType::Task) != nullptr);
  CHECK(first_of(next, MsgType::Task)->payload.at("task_id") == 1);
}

TEST_CASE("a duplicate result after reassignment is acknowledged and discarded") {
  Sim sim({make_task(1, 0, 0)});
  uint64_t w1 = sim.register_worker(1, 0.0);
  uint64_t w2 = sim.register_worker(2, 0.0);
  sim.send(1, MsgType::Ack, {{"worker_id", w1}}, 0.1);
  sim.send(1, MsgType::Result, result_msg(1, w1), 0.2);
  REQUIRE(sim.core.results().size() == 1);

  auto ev = sim.send(2, MsgType::Result, result_msg(1, w2), 0.3);
  const Event* ack = first_of(ev, MsgType::Ack);
  REQUIRE(ack != nullptr);
  CHECK(ack->payload.at("task_id") == 1);
  CHECK(sim.core.results().size() == 1);  // still one
  CHECK(sim.core.results()[0].worker_id == w1);
  CHECK(log_contains(sim.core, "duplicate result task=1"));
}

TEST_CASE("exhausting the retry budget aborts the run") {
  ServerOptions opt;
  opt.retry_budget = 1;
  Sim sim({make_task(1, 0, 0)}, opt);
  uint64_t w1 = sim.register_worker(1, 0.0);
  uint64_t w2 = sim.register_worker(2, 0.0);  // healthy observer
  sim.send(1, MsgType::Ack, {{"worker_id", w1}}, 0.1);
  sim.send(2, MsgType::Heartbeat, {{"worker_id", w2}}, 19.0);

  auto ev = sim.tick(20.0);  // w1 dies, the task requeues, budget hits zero
  CHECK(sim.core.aborted());
  CHECK(sim.core.abort_reason().find("retry budget") != std::string::npos);
  bool run_aborted_sent = false;
  for (const auto& e : ev)
    if (!e.close && e.type == MsgType::Error && e.conn == 2 &&
        e.payload.at("code").get<std::string>() == "RunAborted")
      run_aborted_sent = true;
  CHECK(run_aborted_sent);
  CHECK(has_close(ev, 2));
}

TEST_CASE("a run with no workers aborts after the idle deadline") {
  ServerOptions opt;
  opt.idle_abort_s = 3.0;
  Sim sim({make_task(1, 0, 0)}, opt);
  sim.tick(2.0);
  CHECK_FALSE(sim.core.aborted());
  sim.tick(3.5);
  CHECK(sim.core.aborted());
  CHECK(sim.core.abort_reason().find("no worker") != std::string::npos);
}

TEST_CASE("foreign and mismatched worker ids are rejected") {
  Sim sim({make_task(1, 0, 0)});
  uint64_t w1 = sim.register_worker(1, 0.0);
  sim.register_worker(2, 0.0);

  auto ev = sim.send(1, MsgType::Heartbeat, {{"worker_id", 42}}, 0.1);
  REQUIRE(first_of(ev, MsgType::Error) != nullptr);
  CHECK(first_of(ev, MsgType::Error)->payload.at("code") == "UnknownWorker");

  // conn 2 claiming w1's id is a violation even though w1 exists
  auto ev2 = sim.send(2, MsgType::Heartbeat, {{"worker_id", w1}}, 0.2);
  REQUIRE(first_of(ev2, MsgType::Error) != nullptr);
  CHECK(first_of(ev2, MsgType::Error)->payload.at("code") == "ProtocolViolation");
}

TEST_CASE("a result for an unknown task is rejected") {
  Sim sim({make_task(1, 0, 0)});
  uint64_t w = sim.register_worker(1, 0.0);
  auto ev = sim.send(1, MsgType::Result, result_msg(999, w), 0.1);
  REQUIRE(first_of(ev, MsgType::Error) != nullptr);
  CHECK(first_of(ev, MsgType::Error)->payload.at("code") == "UnknownTask");
}

TEST_CASE("server-only message types are invalid from a worker") {
  for (MsgType t : {MsgType::Task, MsgType::Drain, MsgType::Error}) {
    Sim sim({make_task(1, 0, 0)});
    sim.register_worker(1, 0.0);
    json payload;
    if (t == MsgType::Task)
      payload = {{"task_id", 1},          {"run_id", "r"},          {"tile_row", 0},
                 {"tile_col", 0},         {"config_digest", "d"},   {"payload_mode", "path"},
                 {"path", "/x"}};
    else if (t == MsgType::Drain)
      payload = json::object();
    else
      payload = {{"code", "ConfigError"}, {"detail", "boom"}};
    auto ev = sim.send(1, t, payload, 0.1);
    REQUIRE(first_of(ev, MsgType::Error) != nullptr);
    CHECK(first_of(ev, MsgType::Error)
              ->payload.at("detail")
              .get<std::string>()
              .find("not valid from a worker") != std::string::npos);
    CHECK(has_close(ev, 1));
  }
}

TEST_CASE("disconnecting a busy worker requeues its task") {
  Sim sim({make_task(1, 0, 0)});
  uint64_t w = sim.register_worker(1, 0.0);
  sim.send(1, MsgType::Ack, {{"worker_id", w}}, 0.1);
  sim.core.on_disconnect(1, 0.2);
  CHECK(sim.core.worker_status(w) == WorkerStatus::Dead);
  CHECK(log_contains(sim.core, "connection lost"));
  CHECK(log_contains(sim.core, "requeue task=1"));
  CHECK_FALSE(sim.core.aborted());  // default budget leaves retries

  uint64_t w2 = sim.register_worker(2, 0.3);
  auto ev = sim.send(2, MsgType::Ack, {{"worker_id", w2}}, 0.4);
  CHECK(first_of(ev, MsgType::Task) != nullptr);
}

TEST_CASE("an empty task list drains workers immediately") {
  Sim sim({});
  CHECK(sim.core.finished());
  uint64_t w = sim.register_worker(1, 0.0);
  auto ev = sim.send(1, MsgType::Ack, {{"worker_id", w}}, 0.1);
  CHECK(first_of(ev, MsgType::Drain) != nullptr);
}

TEST_CASE("duplicate task ids are rejected at construction") {
  CHECK_THROWS_AS(ServerCore({make_task(1, 0, 0), make_task(1, 0, 1)}, ServerOptions{}, 0.0),
                  PxError);
}

// ---------------------------------------------------------------------------
// real sockets
// ---------------------------------------------------------------------------

TEST_CASE("a tcp worker completes a run end to end") {
  std::vector<TaskSpec> tasks = {make_task(1, 0, 0, "bundle-a"), make_task(2, 0, 1, "bundle-b"),
                                 make_task(3, 1, 0, "bundle-c")};
  ServerOptions opt;
  opt.heartbeat_timeout_s = 5.0;

  std::atomic<uint16_t> port{0};
  ServeOutcome outcome;
  std::thread server([&] {
    outcome = serve_tasks(tasks, "127.0.0.1", 0, opt,
                          [&](uint16_t p) { port.store(p); });
  });
  while (port.load() == 0) std::this_thread::sleep_for(std::chrono::milliseconds(1));

  WorkerOptions wopt;
  wopt.heartbeat_interval_s = 0.2;
  wopt.recv_timeout_s = 20.0;
  wopt.config_digest = "digest-1";

  std::vector<WorkerTask> seen;
  size_t completed = run_worker("127.0.0.1", port.load(), wopt, [&](const WorkerTask& t) {
    seen.push_back(t);
    json stats = good_stats();
    stats["events_accepted"] = 1;
    return WorkerResult{stats, json::array({{{"task", t.task_id}}})};
  });
  server.join();

  CHECK(completed == 3);
  CHECK_FALSE(outcome.aborted);
  REQUIRE(outcome.results.size() == 3);
  REQUIRE(seen.size() == 3);
  CHECK(seen[0].bundle == "bundle-a");
  CHECK(seen[1].bundle == "bundle-b");
  CHECK(seen[2].bundle == "bundle-c");
  CHECK(seen[0].run_id == "run-nt");
  CHECK(seen[2].tile_row == 1);
  CHECK(outcome.results[2].candidates == json::array({{{"task", 3}}}));
}

TEST_CASE("two tcp workers split the queue without losing tasks") {
  std::vector<TaskSpec> tasks;
  for (uint64_t i = 1; i <= 8; ++i) tasks.push_back(make_task(i, uint32_t(i / 4), uint32_t(i % 4)));
  ServerOptions opt;

  std::atomic<uint16_t> port{0};
  ServeOutcome outcome;
  std::thread server([&] {
    outcome = serve_tasks(tasks, "127.0.0.1", 0, opt, [&](uint16_t p) { port.store(p); });
  });
  while (port.load() == 0) std::this_thread::sleep_for(std::chrono::milliseconds(1));

  WorkerOptions wopt;
  wopt.heartbeat_interval_s = 0.2;
  wopt.recv_timeout_s = 20.0;

  auto work = [&]() {
    return run_worker("127.0.0.1", port.load(), wopt, [&](const WorkerTask& t) {
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
      return WorkerResult{good_stats(), json::array({{{"task", t.task_id}}})};
    });
  };
  size_t done_a = 0, done_b = 0;
  std::thread wa([&] { done_a = work(); });
  std::thread wb([&] { done_b = work(); });
  wa.join();
  wb.join();
  server.join();

  CHECK_FALSE(outcome.aborted);
  CHECK(done_a + done_b == 8);
  REQUIRE(outcome.results.size() == 8);
  std::vector<bool> got(9, false);
  for (const auto& r : outcome.results) got[size_t(r.task_id)] = true;
  for (uint64_t i = 1; i <= 8; ++i) CHECK(got[i]);
}

TEST_CASE("a config digest mismatch is fatal for the worker and the run") {
  ServerOptions opt;
  opt.retry_budget = 1;  // first failure exhausts the task
  std::vector<TaskSpec> tasks = {make_task(1, 0, 0)};

  std::atomic<uint16_t> port{0};
  ServeOutcome outcome;
  std::thread server([&] {
    outcome = serve_tasks(tasks, "127.0.0.1", 0, opt, [&](uint16_t p) { port.store(p); });
  });
  while (port.load() == 0) std::this_thread::sleep_for(std::chrono::milliseconds(1));

  WorkerOptions wopt;
  wopt.heartbeat_interval_s = 0.2;
  wopt.recv_timeout_s = 20.0;
  wopt.config_digest = "something-else";

  bool config_error = false;
  try {
    run_worker("127.0.0.1", port.load(), wopt,
               [&](const WorkerTask&) { return WorkerResult{good_stats(), json::array()}; });
  } catch (const PxError& e) {
    config_error = (e.code() == Err::ConfigError);
  }
  server.join();

  CHECK(config_error);
  CHECK(outcome.aborted);
  CHECK(outcome.abort_reason.find("retry budget") != std::string::npos);
}

#pragma once
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pxnet/netproto_message.hpp"

namespace pxnet::netproto {

struct TaskSpec {
  uint64_t task_id = 0;
  std::string run_id;
  uint32_t tile_row = 0, tile_col = 0;
  std::string config_digest;
  std::string payload_mode = "inline";  // "inline" | "path"
  std::string payload;                  // raw bundle bytes (inline) or a file path
};

struct ServerOptions {
  double heartbeat_timeout_s = 5.0;
  int retry_budget = 3;
  double idle_abort_s = 0.0;  // abort if no worker ever registers within this; 0 = never
  size_t max_payload = size_t(512) << 20;
};

enum class WorkerStatus { Idle, Busy, Suspect, Dead };

const char* worker_status_name(WorkerStatus s);

// Transport-agnostic protocol state machine. The caller owns sockets and a
// clock; the core turns connection events into framed bytes to send or closes.
// Single-threaded by contract (serialized queue mutation).
class ServerCore {
public:
  struct Action {
    enum Kind { Send, Close } kind = Send;
    uint64_t conn = 0;
    std::string bytes;  // framed message for Send
  };

  struct DoneTask {
    uint64_t task_id = 0;
    uint64_t worker_id = 0;
    nlohmann::json stats;
    nlohmann::json candidates;
  };

  ServerCore(std::vector<TaskSpec> tasks, ServerOptions opt, double now);

  std::vector<Action> on_connect(uint64_t conn, double now);
  std::vector<Action> on_bytes(uint64_t conn, std::string_view bytes, double now);
  std::vector<Action> on_disconnect(uint64_t conn, double now);
  std::vector<Action> on_tick(double now);

  bool finished() const { return finished_; }
  bool aborted() const { return aborted_; }
  const std::string& abort_reason() const { return abort_reason_; }

  const std::vector<DoneTask>& results() const { return results_; }
  // assignment/requeue/completion history, one line per transition
  const std::vector<std::string>& event_log() const { return log_; }

  std::optional<WorkerStatus> worker_status(uint64_t worker_id) const;
  size_t workers_registered() const { return next_worker_id_ - 1; }

private:
  struct Conn {
    FrameParser parser;
    bool open = true;
    bool said_hello = false;
    uint64_t worker_id = 0;  // 0 until registered
    explicit Conn(size_t max_payload) : parser(max_payload) {}
  };
  struct Worker {
    uint64_t id = 0;
    uint64_t conn = 0;
    double last_heartbeat = 0;
    WorkerStatus status = WorkerStatus::Idle;
    std::optional<size_t> task_ix;
    bool waiting = false;  // asked for work while none was available
  };
  enum class TaskPhase { Pending, Assigned, Done };
  struct TaskState {
    TaskSpec spec;
    TaskPhase phase = TaskPhase::Pending;
    int retries_left = 0;
    uint64_t owner_worker = 0;
  };

  void handle_message(uint64_t conn_id, const RawMessage& raw, double now,
                      std::vector<Action>& out);
  void protocol_error(uint64_t conn_id, Err code, const std::string& detail,
                      std::vector<Action>& out);
  void assign_or_wait(Worker& w, double now, std::vector<Action>& out);
  void send_task(Worker& w, size_t task_ix, double now, std::vector<Action>& out);
  void requeue_task(size_t task_ix, const std::string& why, double now,
                    std::vector<Action>& out);
  void drop_worker(uint64_t worker_id, const std::string& why, double now,
                   std::vector<Action>& out, bool close_conn);
  void service_waiters(double now, std::vector<Action>& out);
  void check_finished(std::vector<Action>& out);
  void abort_run(const std::string& reason, std::vector<Action>& out);
  void log(double now, const std::string& line);

  std::vector<TaskState> tasks_;
  std::map<uint64_t, size_t> task_by_id_;
  std::deque<size_t> queue_;
  std::map<uint64_t, Conn> conns_;
  std::map<uint64_t, Worker> workers_;
  std::deque<uint64_t> waiters_;
  std::vector<DoneTask> results_;
  std::vector<std::string> log_;
  ServerOptions opt_;
  uint64_t next_worker_id_ = 1;
  size_t done_count_ = 0;
  double start_time_ = 0;
  bool finished_ = false;
  bool aborted_ = false;
  std::string abort_reason_;
};

struct ServeOutcome {
  bool aborted = false;
  std::string abort_reason;
  std::vector<ServerCore::DoneTask> results;
  std::vector<std::string> event_log;
};

// Single-threaded poll() TCP server around ServerCore. Binds host:port
// (port 0 picks one; on_listen reports it), runs until completion or abort.
ServeOutcome serve_tasks(std::vector<TaskSpec> tasks, const std::string& host, uint16_t port,
                         const ServerOptions& opt,
                         const std::function<void(uint16_t)>& on_listen = {});

}  // namespace pxnet::netproto

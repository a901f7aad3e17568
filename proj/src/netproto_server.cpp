#include "pxnet/netproto_server.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include "pxnet/util.hpp"

namespace pxnet::netproto {

const char* worker_status_name(WorkerStatus s) {
  switch (s) {
    case WorkerStatus::Idle: return "Idle";
    case WorkerStatus::Busy: return "Busy";
    case WorkerStatus::Suspect: return "Suspect";
    case WorkerStatus::Dead: return "Dead";
  }
  return "?";
}

ServerCore::ServerCore(std::vector<TaskSpec> tasks, ServerOptions opt, double now)
    : opt_(opt), start_time_(now) {
  tasks_.reserve(tasks.size());
  for (TaskSpec& spec : tasks) {
    require(task_by_id_.count(spec.task_id) == 0, Err::PreconditionViolation,
            "duplicate task_id " + std::to_string(spec.task_id));
    TaskState st;
    st.spec = std::move(spec);
    st.retries_left = opt_.retry_budget;
    task_by_id_[st.spec.task_id] = tasks_.size();
    queue_.push_back(tasks_.size());
    tasks_.push_back(std::move(st));
  }
  finished_ = tasks_.empty();
}

void ServerCore::log(double now, const std::string& line) {
  char stamp[32];
  std::snprintf(stamp, sizeof stamp, "%.3f ", now - start_time_);
  log_.push_back(stamp + line);
}

std::optional<WorkerStatus> ServerCore::worker_status(uint64_t worker_id) const {
  auto it = workers_.find(worker_id);
  if (it == workers_.end()) return std::nullopt;
  return it->second.status;
}

std::vector<ServerCore::Action> ServerCore::on_connect(uint64_t conn, double now) {
  conns_.emplace(conn, Conn(opt_.max_payload));
  log(now, "connect conn=" + std::to_string(conn));
  return {};
}

std::vector<ServerCore::Action> ServerCore::on_bytes(uint64_t conn, std::string_view bytes,
                                                     double now) {
  std::vector<Action> out;
  auto it = conns_.find(conn);
  if (it == conns_.end() || !it->second.open) return out;
  it->second.parser.feed(bytes);
  while (it->second.open) {
    std::optional<RawMessage> m;
    try {
      m = it->second.parser.next();
    } catch (const PxError& e) {
      protocol_error(conn, e.code(), e.what(), out);
      break;
    }
    if (!m) break;
    handle_message(conn, *m, now, out);
  }
  return out;
}

std::vector<ServerCore::Action> ServerCore::on_disconnect(uint64_t conn, double now) {
  std::vector<Action> out;
  auto it = conns_.find(conn);
  if (it == conns_.end()) return out;
  uint64_t wid = it->second.worker_id;
  conns_.erase(it);
  log(now, "disconnect conn=" + std::to_string(conn));
  if (wid != 0) {
    auto w = workers_.find(wid);
    if (w != workers_.end() && w->second.status != WorkerStatus::Dead)
      drop_worker(wid, "connection lost", now, out, false);
  }
  return out;
}

std::vector<ServerCore::Action> ServerCore::on_tick(double now) {
  std::vector<Action> out;
  if (finished_ || aborted_) return out;

  if (opt_.idle_abort_s > 0 && workers_registered() == 0 &&
      now - start_time_ > opt_.idle_abort_s) {
    abort_run("no worker registered within " + std::to_string(opt_.idle_abort_s) + " s", out);
    return out;
  }

  std::vector<uint64_t> to_drop;
  for (auto& [wid, w] : workers_) {
    if (w.status == WorkerStatus::Dead) continue;
    double age = now - w.last_heartbeat;
    if (age > 2 * opt_.heartbeat_timeout_s) {
      to_drop.push_back(wid);
    } else if (age > opt_.heartbeat_timeout_s && w.status != WorkerStatus::Suspect) {
      w.status = WorkerStatus::Suspect;
      log(now, "worker " + std::to_string(wid) + " suspect (no heartbeat for " +
                   std::to_string(age) + " s)");
    }
  }
  for (uint64_t wid : to_drop) {
    if (aborted_) break;
    drop_worker(wid, "heartbeat timeout", now, out, true);
  }
  return out;
}

void ServerCore::protocol_error(uint64_t conn_id, Err code, const std::string& detail,
                                std::vector<Action>& out) {
  auto it = conns_.find(conn_id);
  if (it == conns_.end() || !it->second.open) return;
  nlohmann::json payload{{"code", err_name(code)}, {"detail", detail}};
  out.push_back({Action::Send, conn_id, encode_message(MsgType::Error, payload)});
  out.push_back({Action::Close, conn_id, {}});
  it->second.open = false;
}

void ServerCore::handle_message(uint64_t conn_id, const RawMessage& raw, double now,
                                std::vector<Action>& out) {
  Conn& conn = conns_.at(conn_id);
  MsgType type;
  nlohmann::json j;
  try {
    type = check_type(raw.type);
    j = validate_payload(type, raw.payload);
  } catch (const PxError& e) {
    protocol_error(conn_id, e.code(), e.what(), out);
    return;
  }

  if (!conn.said_hello && type != MsgType::Hello) {
    protocol_error(conn_id, Err::ProtocolViolation,
                   std::string(msg_type_name(type)) + " before HELLO", out);
    return;
  }

  switch (type) {
    case MsgType::Hello: {
      if (conn.said_hello) {
        protocol_error(conn_id, Err::ProtocolViolation, "duplicate HELLO", out);
        return;
      }
      int version = j.at("version").get<int>();
      if (version != kProtocolVersion) {
        nlohmann::json payload{{"code", err_name(Err::VersionMismatch)},
                               {"detail", "protocol version " + std::to_string(version) +
                                              " unsupported, need " +
                                              std::to_string(kProtocolVersion)}};
        out.push_back({Action::Send, conn_id, encode_message(MsgType::Error, payload)});
        out.push_back({Action::Close, conn_id, {}});
        conn.open = false;
        log(now, "reject conn=" + std::to_string(conn_id) + " version=" +
                     std::to_string(version));
        return;
      }
      uint64_t wid = next_worker_id_++;
      conn.said_hello = true;
      conn.worker_id = wid;
      Worker w;
      w.id = wid;
      w.conn = conn_id;
      w.last_heartbeat = now;
      w.status = WorkerStatus::Idle;
      workers_[wid] = w;
      out.push_back(
          {Action::Send, conn_id, encode_message(MsgType::Ack, {{"worker_id", wid}})});
      log(now, "register worker=" + std::to_string(wid) + " conn=" + std::to_string(conn_id));
      return;
    }

    case MsgType::Ack: {  // worker-side ACK {"worker_id"} is the work request
      if (!j.contains("worker_id")) {
        protocol_error(conn_id, Err::ProtocolViolation, "ACK from worker must carry worker_id",
                       out);
        return;
      }
      uint64_t wid = j.at("worker_id").get<uint64_t>();
      if (workers_.find(wid) == workers_.end()) {
        protocol_error(conn_id, Err::UnknownWorker, "worker " + std::to_string(wid), out);
        return;
      }
      if (wid != conn.worker_id) {
        protocol_error(conn_id, Err::ProtocolViolation, "worker_id does not match connection",
                       out);
        return;
      }
      Worker& w = workers_.at(wid);
      w.last_heartbeat = now;
      if (w.status == WorkerStatus::Busy) {
        protocol_error(conn_id, Err::ProtocolViolation, "work request while Busy", out);
        return;
      }
      if (w.status == WorkerStatus::Suspect) w.status = WorkerStatus::Idle;
      assign_or_wait(w, now, out);
      return;
    }

    case MsgType::Heartbeat: {
      uint64_t wid = j.at("worker_id").get<uint64_t>();
      if (workers_.find(wid) == workers_.end()) {
        protocol_error(conn_id, Err::UnknownWorker, "worker " + std::to_string(wid), out);
        return;
      }
      if (wid != conn.worker_id) {
        protocol_error(conn_id, Err::ProtocolViolation, "worker_id does not match connection",
                       out);
        return;
      }
      Worker& w = workers_.at(wid);
      w.last_heartbeat = now;
      if (w.status == WorkerStatus::Suspect)
        w.status = w.task_ix ? WorkerStatus::Busy : WorkerStatus::Idle;
      return;
    }

    case MsgType::Result: {
      uint64_t wid = j.at("worker_id").get<uint64_t>();
      if (workers_.find(wid) == workers_.end()) {
        protocol_error(conn_id, Err::UnknownWorker, "worker " + std::to_string(wid), out);
        return;
      }
      if (wid != conn.worker_id) {
        protocol_error(conn_id, Err::ProtocolViolation, "worker_id does not match connection",
                       out);
        return;
      }
      Worker& w = workers_.at(wid);
      w.last_heartbeat = now;
      uint64_t task_id = j.at("task_id").get<uint64_t>();
      auto t_it = task_by_id_.find(task_id);
      if (t_it == task_by_id_.end()) {
        protocol_error(conn_id, Err::UnknownTask, "task " + std::to_string(task_id), out);
        return;
      }
      size_t ix = t_it->second;
      TaskState& task = tasks_[ix];

      // worker is done with its assignment either way
      if (w.task_ix && *w.task_ix == ix) w.task_ix.reset();

      if (task.phase == TaskPhase::Done) {  // benign duplicate after reassignment
        if (w.status != WorkerStatus::Dead) w.status = WorkerStatus::Idle;
        out.push_back(
            {Action::Send, conn_id, encode_message(MsgType::Ack, {{"task_id", task_id}})});
        log(now, "duplicate result task=" + std::to_string(task_id) +
                     " worker=" + std::to_string(wid) + " discarded");
        return;
      }

      const nlohmann::json& s = j.at("stats");
      uint64_t curves = s.at("curves_built").get<uint64_t>();
      uint64_t peak_curves = s.at("peak_curves").get<uint64_t>();
      uint64_t fits = s.at("fits_attempted").get<uint64_t>();
      uint64_t accepted = s.at("events_accepted").get<uint64_t>();
      if (!(accepted <= fits && fits <= peak_curves && peak_curves <= curves)) {
        nlohmann::json payload{{"code", err_name(Err::ProtocolViolation)},
                               {"detail", "result counters violate monotone consistency"}};
        out.push_back({Action::Send, conn_id, encode_message(MsgType::Error, payload)});
        w.status = WorkerStatus::Suspect;
        log(now, "invalid result task=" + std::to_string(task_id) +
                     " worker=" + std::to_string(wid) + " (counters)");
        if (task.phase == TaskPhase::Assigned && task.owner_worker == wid)
          requeue_task(ix, "invalid result", now, out);
        return;
      }

      task.phase = TaskPhase::Done;
      task.owner_worker = wid;
      queue_.erase(std::remove(queue_.begin(), queue_.end(), ix), queue_.end());
      ++done_count_;
      results_.push_back(DoneTask{task_id, wid, s, j.at("candidates")});
      if (w.status != WorkerStatus::Dead) w.status = WorkerStatus::Idle;
      out.push_back(
          {Action::Send, conn_id, encode_message(MsgType::Ack, {{"task_id", task_id}})});
      log(now, "complete task=" + std::to_string(task_id) + " worker=" + std::to_string(wid));
      check_finished(out);
      return;
    }

    case MsgType::Task:
    case MsgType::Drain:
    case MsgType::Error:
      protocol_error(conn_id, Err::ProtocolViolation,
                     std::string(msg_type_name(type)) + " not valid from a worker", out);
      return;
  }
}

void ServerCore::assign_or_wait(Worker& w, double now, std::vector<Action>& out) {
  if (finished_) {
    out.push_back({Action::Send, w.conn, encode_message(MsgType::Drain, nlohmann::json::object())});
    log(now, "drain worker=" + std::to_string(w.id));
    return;
  }
  if (!queue_.empty()) {
    size_t ix = queue_.front();
    queue_.pop_front();
    send_task(w, ix, now, out);
    return;
  }
  w.waiting = true;
  if (std::find(waiters_.begin(), waiters_.end(), w.id) == waiters_.end())
    waiters_.push_back(w.id);
  log(now, "wait worker=" + std::to_string(w.id));
}

void ServerCore::send_task(Worker& w, size_t task_ix, double now, std::vector<Action>& out) {
  TaskState& task = tasks_[task_ix];
  task.phase = TaskPhase::Assigned;
  task.owner_worker = w.id;
  w.task_ix = task_ix;
  w.status = WorkerStatus::Busy;
  w.waiting = false;

  nlohmann::json payload{{"task_id", task.spec.task_id},
                         {"run_id", task.spec.run_id},
                         {"tile_row", task.spec.tile_row},
                         {"tile_col", task.spec.tile_col},
                         {"config_digest", task.spec.config_digest},
                         {"payload_mode", task.spec.payload_mode}};
  if (task.spec.payload_mode == "inline")
    payload["data_b64"] = base64_encode(task.spec.payload);
  else
    payload["path"] = task.spec.payload;
  out.push_back({Action::Send, w.conn, encode_message(MsgType::Task, payload)});
  log(now, "assign task=" + std::to_string(task.spec.task_id) +
               " worker=" + std::to_string(w.id) +
               " retries_left=" + std::to_string(task.retries_left));
}

void ServerCore::requeue_task(size_t task_ix, const std::string& why, double now,
                              std::vector<Action>& out) {
  TaskState& task = tasks_[task_ix];
  if (task.phase != TaskPhase::Assigned) return;
  task.phase = TaskPhase::Pending;
  task.owner_worker = 0;
  --task.retries_left;
  log(now, "requeue task=" + std::to_string(task.spec.task_id) + " (" + why +
               "), retries_left=" + std::to_string(task.retries_left));
  if (task.retries_left <= 0) {
    abort_run("task " + std::to_string(task.spec.task_id) + " exhausted its retry budget", out);
    return;
  }
  queue_.push_front(task_ix);
  service_waiters(now, out);
}

void ServerCore::drop_worker(uint64_t worker_id, const std::string& why, double now,
                             std::vector<Action>& out, bool close_conn) {
  Worker& w = workers_.at(worker_id);
  if (w.status == WorkerStatus::Dead) return;
  w.status = WorkerStatus::Dead;
  w.waiting = false;
  waiters_.erase(std::remove(waiters_.begin(), waiters_.end(), worker_id), waiters_.end());
  log(now, "worker " + std::to_string(worker_id) + " dead (" + why + ")");

  auto c = conns_.find(w.conn);
  if (c != conns_.end() && c->second.open) {
    c->second.worker_id = 0;
    if (close_conn) {
      out.push_back({Action::Close, w.conn, {}});
      c->second.open = false;
    }
  }
  if (w.task_ix) {
    size_t ix = *w.task_ix;
    w.task_ix.reset();
    requeue_task(ix, "worker " + std::to_string(worker_id) + " dead", now, out);
  }
}

void ServerCore::service_waiters(double now, std::vector<Action>& out) {
  while (!queue_.empty() && !waiters_.empty()) {
    uint64_t wid = waiters_.front();
    waiters_.pop_front();
    auto it = workers_.find(wid);
    if (it == workers_.end() || it->second.status == WorkerStatus::Dead ||
        !it->second.waiting)
      continue;
    size_t ix = queue_.front();
    queue_.pop_front();
    send_task(it->second, ix, now, out);
  }
}

void ServerCore::check_finished(std::vector<Action>& out) {
  if (done_count_ != tasks_.size()) return;
  finished_ = true;
  for (uint64_t wid : waiters_) {
    auto it = workers_.find(wid);
    if (it == workers_.end() || it->second.status == WorkerStatus::Dead) continue;
    it->second.waiting = false;
    out.push_back(
        {Action::Send, it->second.conn, encode_message(MsgType::Drain, nlohmann::json::object())});
  }
  waiters_.clear();
}

void ServerCore::abort_run(const std::string& reason, std::vector<Action>& out) {
  if (aborted_) return;
  aborted_ = true;
  abort_reason_ = reason;
  log_.push_back("abort: " + reason);
  nlohmann::json payload{{"code", err_name(Err::RunAborted)}, {"detail", reason}};
  std::string frame = encode_message(MsgType::Error, payload);
  for (auto& [cid, conn] : conns_) {
    if (!conn.open) continue;
    out.push_back({Action::Send, cid, frame});
    out.push_back({Action::Close, cid, {}});
    conn.open = false;
  }
}

// ---------------------------------------------------------------------------
// poll()-driven TCP front end
// ---------------------------------------------------------------------------

namespace {

double mono_now() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

struct SocketConn {
  int fd = -1;
  std::string outbuf;
  bool close_after_flush = false;
};

void flush_conn(SocketConn& c) {
  while (!c.outbuf.empty()) {
    ssize_t n = ::send(c.fd, c.outbuf.data(), c.outbuf.size(), MSG_NOSIGNAL | MSG_DONTWAIT);
    if (n > 0) {
      c.outbuf.erase(0, size_t(n));
      continue;
    }
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) return;
    c.outbuf.clear();  // peer gone; drop pending bytes
    c.close_after_flush = true;
    return;
  }
}

}  // namespace

ServeOutcome serve_tasks(std::vector<TaskSpec> tasks, const std::string& host, uint16_t port,
                         const ServerOptions& opt,
                         const std::function<void(uint16_t)>& on_listen) {
  int listen_fd = ::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK, 0);
  if (listen_fd < 0) raise(Err::BindFailure, std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(listen_fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd);
    raise(Err::BindFailure, "bad bind address " + host);
  }
  if (::bind(listen_fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    int e = errno;
    ::close(listen_fd);
    raise(Err::BindFailure, host + ":" + std::to_string(port) + ": " + std::strerror(e));
  }
  if (::listen(listen_fd, 64) != 0) {
    int e = errno;
    ::close(listen_fd);
    raise(Err::BindFailure, std::string("listen: ") + std::strerror(e));
  }
  socklen_t alen = sizeof addr;
  ::getsockname(listen_fd, reinterpret_cast<sockaddr*>(&addr), &alen);
  uint16_t actual_port = ntohs(addr.sin_port);
  if (on_listen) on_listen(actual_port);

  ServerCore core(std::move(tasks), opt, mono_now());
  std::map<uint64_t, SocketConn> socks;
  uint64_t next_conn = 1;

  auto apply = [&](const std::vector<ServerCore::Action>& actions) {
    for (const ServerCore::Action& a : actions) {
      auto it = socks.find(a.conn);
      if (it == socks.end()) continue;
      if (a.kind == ServerCore::Action::Send) {
        it->second.outbuf += a.bytes;
        flush_conn(it->second);
      } else {
        it->second.close_after_flush = true;
        flush_conn(it->second);
      }
    }
  };

  char rbuf[65536];
  while (!core.finished() && !core.aborted()) {
    std::vector<pollfd> pfds;
    pfds.push_back({listen_fd, POLLIN, 0});
    std::vector<uint64_t> ids;
    for (auto& [id, c] : socks) {
      short ev = POLLIN;
      if (!c.outbuf.empty()) ev |= POLLOUT;
      pfds.push_back({c.fd, ev, 0});
      ids.push_back(id);
    }
    ::poll(pfds.data(), nfds_t(pfds.size()), 100);
    double now = mono_now();

    if (pfds[0].revents & POLLIN) {
      while (true) {
        int fd = ::accept(listen_fd, nullptr, nullptr);
        if (fd < 0) break;
        int fl = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &fl, sizeof fl);
        // accept() does not inherit O_NONBLOCK portably; rely on poll + MSG_DONTWAIT
        uint64_t id = next_conn++;
        socks[id] = SocketConn{fd, {}, false};
        apply(core.on_connect(id, now));
      }
    }

    for (size_t i = 1; i < pfds.size(); ++i) {
      uint64_t id = ids[i - 1];
      auto it = socks.find(id);
      if (it == socks.end()) continue;
      SocketConn& c = it->second;
      if (pfds[i].revents & (POLLIN | POLLHUP | POLLERR)) {
        bool closed = false;
        while (true) {
          ssize_t n = ::recv(c.fd, rbuf, sizeof rbuf, MSG_DONTWAIT);
          if (n > 0) {
            apply(core.on_bytes(id, std::string_view(rbuf, size_t(n)), now));
            if (socks.find(id) == socks.end()) break;
            continue;
          }
          if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) break;
          closed = true;
          break;
        }
        if (socks.find(id) == socks.end()) continue;
        if (closed) {
          ::close(c.fd);
          socks.erase(id);
          apply(core.on_disconnect(id, now));
          continue;
        }
      }
      if (pfds[i].revents & POLLOUT) flush_conn(c);
      if (c.close_after_flush && c.outbuf.empty()) {
        ::close(c.fd);
        socks.erase(id);
        if (!core.aborted()) apply(core.on_disconnect(id, now));
      }
    }

    apply(core.on_tick(mono_now()));

    // sweep connections whose pending bytes are gone
    for (auto it = socks.begin(); it != socks.end();) {
      if (it->second.close_after_flush && it->second.outbuf.empty()) {
        uint64_t id = it->first;
        ::close(it->second.fd);
        it = socks.erase(it);
        if (!core.aborted()) apply(core.on_disconnect(id, mono_now()));
      } else {
        ++it;
      }
    }
  }

  // Linger so the worker that finished the last task still gets a DRAIN for
  // its trailing work request, and final frames (DRAIN / ERROR) flush out.
  double deadline = mono_now() + 2.0;
  while (mono_now() < deadline && !socks.empty()) {
    std::vector<pollfd> pfds;
    std::vector<uint64_t> ids;
    for (auto& [id, c] : socks) {
      short ev = POLLIN;
      if (!c.outbuf.empty()) ev |= POLLOUT;
      pfds.push_back({c.fd, ev, 0});
      ids.push_back(id);
    }
    ::poll(pfds.data(), nfds_t(pfds.size()), 100);
    double now = mono_now();
    for (size_t i = 0; i < pfds.size(); ++i) {
      uint64_t id = ids[i];
      auto it = socks.find(id);
      if (it == socks.end()) continue;
      SocketConn& c = it->second;
      if (pfds[i].revents & (POLLIN | POLLHUP | POLLERR)) {
        bool closed = false;
        while (true) {
          ssize_t n = ::recv(c.fd, rbuf, sizeof rbuf, MSG_DONTWAIT);
          if (n > 0) {
            apply(core.on_bytes(id, std::string_view(rbuf, size_t(n)), now));
            if (socks.find(id) == socks.end()) break;
            continue;
          }
          if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) break;
          closed = true;
          break;
        }
        if (socks.find(id) == socks.end()) continue;
        if (closed) {
          ::close(c.fd);
          socks.erase(id);
          continue;
        }
      }
      if (pfds[i].revents & POLLOUT) flush_conn(c);
      if (c.close_after_flush && c.outbuf.empty()) {
        ::close(c.fd);
        socks.erase(id);
      }
    }
  }
  for (auto& [id, c] : socks) ::close(c.fd);
  ::close(listen_fd);

  ServeOutcome outcome;
  outcome.aborted = core.aborted();
  outcome.abort_reason = core.abort_reason();
  outcome.results = core.results();
  outcome.event_log = core.event_log();
  return outcome;
}

}  // namespace pxnet::netproto

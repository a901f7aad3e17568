#include "pxnet/netproto_worker.hpp"

#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <mutex>
#include <thread>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include "pxnet/stack_io.hpp"
#include "pxnet/util.hpp"

namespace pxnet::netproto {

namespace {

Err err_from_code(const std::string& code) {
  if (code == "VersionMismatch") return Err::VersionMismatch;
  if (code == "RunAborted") return Err::RunAborted;
  if (code == "UnknownTask") return Err::UnknownTask;
  if (code == "UnknownWorker") return Err::UnknownWorker;
  if (code == "ConfigError") return Err::ConfigError;
  return Err::ProtocolViolation;
}

class Connection {
public:
  Connection(const std::string& host, uint16_t port, double recv_timeout_s,
             size_t max_payload)
      : parser_(max_payload) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) raise(Err::IoFailure, std::string("socket: ") + std::strerror(errno));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd_);
      raise(Err::IoFailure, "bad server address " + host);
    }
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      int e = errno;
      ::close(fd_);
      raise(Err::IoFailure,
            "connect " + host + ":" + std::to_string(port) + ": " + std::strerror(e));
    }
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    timeval tv{};
    tv.tv_sec = long(recv_timeout_s);
    tv.tv_usec = long((recv_timeout_s - double(tv.tv_sec)) * 1e6);
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  }

  ~Connection() {
    if (fd_ >= 0) ::close(fd_);
  }

  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;

  void send_msg(MsgType t, const nlohmann::json& payload) {
    std::string frame = encode_message(t, payload);
    std::lock_guard<std::mutex> lock(write_mutex_);
    size_t off = 0;
    while (off < frame.size()) {
      ssize_t n = ::send(fd_, frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        raise(Err::IoFailure, std::string("send: ") + std::strerror(errno));
      }
      off += size_t(n);
    }
  }

  RawMessage recv_msg() {
    while (true) {
      if (auto m = parser_.next()) return *m;
      char buf[65536];
      ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
      if (n > 0) {
        parser_.feed(std::string_view(buf, size_t(n)));
        continue;
      }
      if (n == 0) raise(Err::IoFailure, "server closed the connection");
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK)
        raise(Err::IoFailure, "timed out waiting for the server");
      raise(Err::IoFailure, std::string("recv: ") + std::strerror(errno));
    }
  }

private:
  int fd_ = -1;
  std::mutex write_mutex_;
  FrameParser parser_;
};

[[noreturn]] void raise_remote(const nlohmann::json& err) {
  std::string code = err.at("code").get<std::string>();
  raise(err_from_code(code), "server error: " + err.at("detail").get<std::string>());
}

}  // namespace

size_t run_worker(const std::string& host, uint16_t port, const WorkerOptions& opt,
                  const std::function<WorkerResult(const WorkerTask&)>& process) {
  Connection conn(host, port, opt.recv_timeout_s, opt.max_payload);

  conn.send_msg(MsgType::Hello,
                {{"version", kProtocolVersion},
                 {"capabilities", nlohmann::json::array({"tile-trigger-v1"})}});
  RawMessage raw = conn.recv_msg();
  MsgType t = check_type(raw.type);
  nlohmann::json j = validate_payload(t, raw.payload);
  if (t == MsgType::Error) raise_remote(j);
  if (t != MsgType::Ack || !j.contains("worker_id"))
    raise(Err::ProtocolViolation, "expected registration ACK, got " +
                                      std::string(msg_type_name(t)));
  uint64_t worker_id = j.at("worker_id").get<uint64_t>();

  // heartbeats on a side thread for the whole session
  std::atomic<bool> stop{false};
  std::mutex hb_mutex;
  std::condition_variable hb_cv;
  std::thread heartbeat([&] {
    nlohmann::json payload{{"worker_id", worker_id}};
    std::unique_lock<std::mutex> lock(hb_mutex);
    while (!stop.load()) {
      if (hb_cv.wait_for(lock, std::chrono::duration<double>(opt.heartbeat_interval_s),
                         [&] { return stop.load(); }))
        break;
      try {
        conn.send_msg(MsgType::Heartbeat, payload);
      } catch (const PxError&) {
        break;  // main loop will see the dead socket
      }
    }
  });
  auto stop_heartbeat = [&] {
    {
      std::lock_guard<std::mutex> lock(hb_mutex);
      stop.store(true);
    }
    hb_cv.notify_all();
    heartbeat.join();
  };

  size_t completed = 0;
  try {
    while (true) {
      conn.send_msg(MsgType::Ack, {{"worker_id", worker_id}});  // work request
      raw = conn.recv_msg();
      t = check_type(raw.type);
      j = validate_payload(t, raw.payload);
      if (t == MsgType::Error) raise_remote(j);
      if (t == MsgType::Drain) break;
      if (t != MsgType::Task)
        raise(Err::ProtocolViolation, "expected TASK or DRAIN, got " +
                                          std::string(msg_type_name(t)));

      WorkerTask task;
      task.task_id = j.at("task_id").get<uint64_t>();
      task.run_id = j.at("run_id").get<std::string>();
      task.tile_row = j.at("tile_row").get<uint32_t>();
      task.tile_col = j.at("tile_col").get<uint32_t>();
      task.config_digest = j.at("config_digest").get<std::string>();
      if (!opt.config_digest.empty() && task.config_digest != opt.config_digest) {
        conn.send_msg(MsgType::Error,
                      {{"code", err_name(Err::ConfigError)},
                       {"detail", "config digest mismatch: task " + task.config_digest +
                                      ", worker " + opt.config_digest}});
        raise(Err::ConfigError, "task config digest " + task.config_digest +
                                    " does not match worker config " + opt.config_digest);
      }
      if (j.at("payload_mode").get<std::string>() == "inline")
        task.bundle = base64_decode(j.at("data_b64").get<std::string>());
      else
        task.bundle = read_file(j.at("path").get<std::string>());

      WorkerResult result = process(task);
      conn.send_msg(MsgType::Result, {{"task_id", task.task_id},
                                      {"worker_id", worker_id},
                                      {"stats", result.stats},
                                      {"candidates", result.candidates}});

      raw = conn.recv_msg();
      t = check_type(raw.type);
      j = validate_payload(t, raw.payload);
      if (t == MsgType::Error) raise_remote(j);
      if (t != MsgType::Ack || !j.contains("task_id"))
        raise(Err::ProtocolViolation, "expected result ACK, got " +
                                          std::string(msg_type_name(t)));
      ++completed;
    }
  } catch (...) {
    stop_heartbeat();
    throw;
  }
  stop_heartbeat();
  return completed;
}

}  // namespace pxnet::netproto

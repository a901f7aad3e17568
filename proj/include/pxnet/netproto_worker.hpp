#pragma once
#include <cstdint>
#include <functional>
#include <string>

#include <nlohmann/json.hpp>

#include "pxnet/netproto_message.hpp"

namespace pxnet::netproto {

struct WorkerTask {
  uint64_t task_id = 0;
  std::string run_id;
  uint32_t tile_row = 0, tile_col = 0;
  std::string config_digest;
  std::string bundle;  // decoded tile payload bytes
};

struct WorkerResult {
  nlohmann::json stats;
  nlohmann::json candidates;
};

struct WorkerOptions {
  double heartbeat_interval_s = 2.0;
  double recv_timeout_s = 60.0;
  std::string config_digest;  // tasks with a different digest are refused
  size_t max_payload = size_t(512) << 20;
};

// Connects, registers, then pulls tasks until DRAIN. Returns the number of
// completed tasks. Heartbeats run on a side thread for the whole session.
// Protocol or transport failures raise PxError.
size_t run_worker(const std::string& host, uint16_t port, const WorkerOptions& opt,
                  const std::function<WorkerResult(const WorkerTask&)>& process);

}  // namespace pxnet::netproto

#include "pxnet/netproto_message.hpp"

#include <limits>

#include "pxnet/util.hpp"

namespace pxnet::netproto {

const char* msg_type_name(MsgType t) {
  switch (t) {
    case MsgType::Hello: return "HELLO";
    case MsgType::Ack: return "ACK";
    case MsgType::Task: return "TASK";
    case MsgType::Result: return "RESULT";
    case MsgType::Heartbeat: return "HEARTBEAT";
    case MsgType::Drain: return "DRAIN";
    case MsgType::Error: return "ERROR";
  }
  return "?";
}

MsgType check_type(uint8_t raw) {
  if (raw < 0x01 || raw > 0x07)
    raise(Err::ProtocolViolation, "unknown message type " + std::to_string(raw));
  return MsgType(raw);
}

std::string encode_message(MsgType t, const nlohmann::json& payload) {
  std::string body = payload.dump();
  require(body.size() <= std::numeric_limits<uint32_t>::max(), Err::ProtocolViolation,
          "payload too large to frame");
  std::string out;
  out.reserve(5 + body.size());
  put_u32be(out, uint32_t(body.size()));
  put_u8(out, uint8_t(t));
  out += body;
  return out;
}

std::optional<RawMessage> FrameParser::next() {
  size_t avail = buf_.size() - consumed_;
  if (avail < 5) return std::nullopt;
  const uint8_t* p = reinterpret_cast<const uint8_t*>(buf_.data()) + consumed_;
  uint32_t len = (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) |
                 uint32_t(p[3]);
  if (size_t(len) > max_payload_)
    raise(Err::ProtocolViolation, "declared payload of " + std::to_string(len) + " bytes");
  if (avail < 5 + size_t(len)) return std::nullopt;
  RawMessage m;
  m.type = p[4];
  m.payload.assign(buf_, consumed_ + 5, len);
  consumed_ += 5 + size_t(len);
  if (consumed_ > (size_t(1) << 20) && consumed_ * 2 > buf_.size()) {
    buf_.erase(0, consumed_);
    consumed_ = 0;
  }
  return m;
}

namespace {

[[noreturn]] void bad(MsgType t, const std::string& why) {
  raise(Err::ProtocolViolation, std::string(msg_type_name(t)) + " payload: " + why);
}

void check_keys(MsgType t, const nlohmann::json& j,
                std::initializer_list<const char*> required,
                std::initializer_list<const char*> optional = {}) {
  if (!j.is_object()) bad(t, "not a JSON object");
  for (const char* k : required)
    if (!j.contains(k)) bad(t, std::string("missing key \"") + k + "\"");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : required)
      if (item.key() == k) known = true;
    for (const char* k : optional)
      if (item.key() == k) known = true;
    if (!known) bad(t, "unknown key \"" + item.key() + "\"");
  }
}

uint64_t require_u64(MsgType t, const nlohmann::json& j, const char* key) {
  if (!j.at(key).is_number_unsigned()) bad(t, std::string("\"") + key + "\" must be unsigned");
  return j.at(key).get<uint64_t>();
}

void require_string(MsgType t, const nlohmann::json& j, const char* key) {
  if (!j.at(key).is_string()) bad(t, std::string("\"") + key + "\" must be a string");
}

}  // namespace

nlohmann::json validate_payload(MsgType t, std::string_view payload) {
  nlohmann::json j = nlohmann::json::parse(payload, nullptr, false);
  if (j.is_discarded()) bad(t, "invalid JSON");

  switch (t) {
    case MsgType::Hello: {
      check_keys(t, j, {"version", "capabilities"});
      if (!j.at("version").is_number_integer()) bad(t, "\"version\" must be an integer");
      if (!j.at("capabilities").is_array()) bad(t, "\"capabilities\" must be an array");
      for (const auto& c : j.at("capabilities"))
        if (!c.is_string()) bad(t, "capabilities must be strings");
      break;
    }
    case MsgType::Ack: {
      if (!j.is_object()) bad(t, "not a JSON object");
      if (j.size() != 1) bad(t, "exactly one of \"worker_id\"/\"task_id\" expected");
      if (j.contains("worker_id"))
        require_u64(t, j, "worker_id");
      else if (j.contains("task_id"))
        require_u64(t, j, "task_id");
      else
        bad(t, "unknown key \"" + j.items().begin().key() + "\"");
      break;
    }
    case MsgType::Task: {
      check_keys(t, j,
                 {"task_id", "run_id", "tile_row", "tile_col", "config_digest", "payload_mode"},
                 {"data_b64", "path"});
      require_u64(t, j, "task_id");
      require_u64(t, j, "tile_row");
      require_u64(t, j, "tile_col");
      require_string(t, j, "run_id");
      require_string(t, j, "config_digest");
      require_string(t, j, "payload_mode");
      std::string mode = j.at("payload_mode").get<std::string>();
      if (mode == "inline") {
        if (!j.contains("data_b64") || j.contains("path")) bad(t, "inline mode needs \"data_b64\"");
        require_string(t, j, "data_b64");
      } else if (mode == "path") {
        if (!j.contains("path") || j.contains("data_b64")) bad(t, "path mode needs \"path\"");
        require_string(t, j, "path");
      } else {
        bad(t, "payload_mode must be \"inline\" or \"path\"");
      }
      break;
    }
    case MsgType::Result: {
      check_keys(t, j, {"task_id", "worker_id", "stats", "candidates"});
      require_u64(t, j, "task_id");
      require_u64(t, j, "worker_id");
      if (!j.at("candidates").is_array()) bad(t, "\"candidates\" must be an array");
      const nlohmann::json& s = j.at("stats");
      if (!s.is_object()) bad(t, "\"stats\" must be an object");
      for (const char* k :
           {"curves_built", "peak_curves", "peaks_found", "fits_attempted", "events_accepted"}) {
        if (!s.contains(k)) bad(t, std::string("stats missing \"") + k + "\"");
        if (!s.at(k).is_number_unsigned()) bad(t, std::string("stats \"") + k + "\" must be unsigned");
      }
      if (!s.contains("elapsed_s") || !s.at("elapsed_s").is_number())
        bad(t, "stats missing numeric \"elapsed_s\"");
      if (s.size() != 6) bad(t, "stats carries unknown keys");
      break;
    }
    case MsgType::Heartbeat: {
      check_keys(t, j, {"worker_id"});
      require_u64(t, j, "worker_id");
      break;
    }
    case MsgType::Drain: {
      if (!j.is_object() || !j.empty()) bad(t, "payload must be {}");
      break;
    }
    case MsgType::Error: {
      check_keys(t, j, {"code", "detail"});
      require_string(t, j, "code");
      require_string(t, j, "detail");
      break;
    }
  }
  return j;
}

}  // namespace pxnet::netproto

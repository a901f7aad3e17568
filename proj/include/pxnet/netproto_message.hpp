#pragma once
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "pxnet/error.hpp"

namespace pxnet::netproto {

// Wire framing, version 1: u32be payload_length, u8 message_type, payload.
// Payloads are UTF-8 JSON with exact key sets (unknown keys rejected).
enum class MsgType : uint8_t {
  Hello = 0x01,
  Ack = 0x02,
  Task = 0x03,
  Result = 0x04,
  Heartbeat = 0x05,
  Drain = 0x06,
  Error = 0x07,
};

constexpr int kProtocolVersion = 1;

const char* msg_type_name(MsgType t);

std::string encode_message(MsgType t, const nlohmann::json& payload);

struct RawMessage {
  uint8_t type = 0;
  std::string payload;
};

// Incremental splitter; byte-chunking must never change the message sequence.
class FrameParser {
public:
  explicit FrameParser(size_t max_payload = size_t(512) << 20) : max_payload_(max_payload) {}

  void feed(std::string_view bytes) { buf_.append(bytes.data(), bytes.size()); }

  // next complete message, if any; oversize declarations raise ProtocolViolation
  std::optional<RawMessage> next();

private:
  std::string buf_;
  size_t consumed_ = 0;
  size_t max_payload_;
};

// Parses and validates a payload against the exact schema for its type.
// Any deviation (bad JSON, wrong type, missing/unknown keys) raises ProtocolViolation.
nlohmann::json validate_payload(MsgType t, std::string_view payload);

// Raises ProtocolViolation for an out-of-range type byte.
MsgType check_type(uint8_t raw);

}  // namespace pxnet::netproto

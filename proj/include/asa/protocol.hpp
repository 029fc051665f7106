#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "asa/json.hpp"
#include "asa/record.hpp"
#include "asa/scenario.hpp"

/// Wire protocol shared by manager, handler and node.
///
/// Frame layout (big-endian):
///   u32 length | u8 version (=1) | u8 msg_type | body (UTF-8 canonical JSON)
/// where length counts everything after the length field.
namespace asa::protocol {

inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 6;
inline constexpr std::size_t kMaxFrameLength = 16u * 1024u * 1024u;
inline constexpr std::uint16_t kDefaultPort = 4810;

using Bytes = std::vector<std::uint8_t>;

enum class MsgType : std::uint8_t {
  Hello = 1,
  Heartbeat = 2,
  Assign = 3,
  AssignAck = 4,
  Control = 5,
  RunStateChange = 6,
  RecordBatch = 7,
  RecordAck = 8,
  Bye = 9,
  Error = 10,
};

// Control commands.
struct Play {
  bool operator==(const Play&) const = default;
};
struct Pause {
  bool operator==(const Pause&) const = default;
};
struct Resume {
  bool operator==(const Resume&) const = default;
};
struct Stop {
  bool operator==(const Stop&) const = default;
};
/// Real-time multiplier; 0 runs unconstrained.
struct SetSpeed {
  double factor = 0.0;
  bool operator==(const SetSpeed&) const = default;
};
struct SetParam {
  std::string agent_id;
  std::string param_path;
  Json value;
  bool operator==(const SetParam&) const = default;
};

using ControlCommand = std::variant<Play, Pause, Resume, Stop, SetSpeed, SetParam>;

std::string command_name(const ControlCommand& c);
Json command_to_json(const ControlCommand& c);
/// Accepts the object form {"type": ...} or a bare command name string.
ControlCommand command_from_json(const Json& j);

// Messages.
struct Hello {
  std::string node_id;
  std::uint32_t capacity = 1;
  bool operator==(const Hello&) const = default;
};
struct Heartbeat {
  std::string node_id;
  std::vector<std::string> running_run_ids;
  bool operator==(const Heartbeat&) const = default;
};
struct Assign {
  ExecutionRequest execution_request;
  /// Initial pacing; optional on the wire, defaults to 0.
  double speed_factor = 0.0;
  bool operator==(const Assign&) const = default;
};
struct AssignAck {
  std::string run_id;
  bool accepted = false;
  std::string reason;
  bool operator==(const AssignAck&) const = default;
};
struct Control {
  std::string run_id;
  ControlCommand command;
  bool operator==(const Control&) const = default;
};
struct RunStateChange {
  std::string run_id;
  std::string state;
  std::string detail;
  bool operator==(const RunStateChange&) const = default;
};
struct RecordBatch {
  std::string run_id;
  std::vector<StepRecord> records;
  bool operator==(const RecordBatch&) const = default;
};
struct RecordAck {
  std::string run_id;
  std::int64_t through_step = -1;
  bool operator==(const RecordAck&) const = default;
};
struct Bye {
  std::string node_id;
  bool operator==(const Bye&) const = default;
};
struct ErrorMsg {
  std::string code;
  std::string text;
  bool operator==(const ErrorMsg&) const = default;
};

using Message =
    std::variant<Hello, Heartbeat, Assign, AssignAck, Control, RunStateChange, RecordBatch, RecordAck, Bye, ErrorMsg>;

MsgType type_of(const Message& m);
std::string type_name(MsgType t);

Json body_to_json(const Message& m);
/// Throws SchemaError naming the offending field.
Message body_from_json(MsgType type, const Json& body);

/// One complete frame.
Bytes encode(const Message& m);

enum class DecodeStatus { Ok, NeedMoreBytes, BadVersion, UnknownType, BadBody, FrameTooLarge };

std::string to_string(DecodeStatus s);

struct DecodeResult {
  DecodeStatus status = DecodeStatus::NeedMoreBytes;
  std::optional<Message> message;
  /// Bytes the frame occupies (0 for NeedMoreBytes and FrameTooLarge).
  std::size_t consumed = 0;
  /// Declared length field; valid once 4 bytes are present.
  std::size_t declared_length = 0;
  std::string detail;
};

/// Decode the frame at the start of `bytes`. Never throws.
DecodeResult decode(std::span<const std::uint8_t> bytes);

/// Per-connection reassembly buffer. Single owner.
class FrameReader {
 public:
  struct Item {
    DecodeStatus status = DecodeStatus::Ok;
    std::optional<Message> message;
    std::string detail;
  };

  /// Consume one chunk; returns every frame completed by it, in order.
  /// Bad frames are reported and skipped by their declared length.
  std::vector<Item> feed(std::span<const std::uint8_t> chunk);

  std::size_t buffered() const { return buffer_.size() - offset_; }

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t offset_ = 0;
  std::size_t skip_remaining_ = 0;
};

}  // namespace asa::protocol

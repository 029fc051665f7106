#include "asa/protocol.hpp"

#include <cmath>

#include "asa/error.hpp"

namespace asa::protocol {

namespace {

const char* const kStates[] = {"INITIALIZING", "RUNNING", "PAUSED", "STOPPING", "COMPLETED", "STOPPED", "FAILED"};

bool known_state(const std::string& s) {
  for (const char* k : kStates) {
    if (s == k) return true;
  }
  return false;
}

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

}  // namespace

std::string command_name(const ControlCommand& c) {
  return std::visit(Overloaded{[](const Play&) { return std::string("play"); },
                               [](const Pause&) { return std::string("pause"); },
                               [](const Resume&) { return std::string("resume"); },
                               [](const Stop&) { return std::string("stop"); },
                               [](const SetSpeed&) { return std::string("set_speed"); },
                               [](const SetParam&) { return std::string("set_param"); }},
                    c);
}

Json command_to_json(const ControlCommand& c) {
  Json j{{"type", command_name(c)}};
  if (const auto* s = std::get_if<SetSpeed>(&c)) j["factor"] = s->factor;
  if (const auto* p = std::get_if<SetParam>(&c)) {
    j["agent_id"] = p->agent_id;
    j["param_path"] = p->param_path;
    j["value"] = p->value;
  }
  return j;
}

ControlCommand command_from_json(const Json& j) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "play") return Play{};
    if (name == "pause") return Pause{};
    if (name == "resume") return Resume{};
    if (name == "stop") return Stop{};
    throw SchemaError("command: '" + name + "' needs arguments or is unknown");
  }
  JsonReader in(j, "command");
  const std::string type = in.string("type");
  ControlCommand out;
  if (type == "play") {
    out = Play{};
  } else if (type == "pause") {
    out = Pause{};
  } else if (type == "resume") {
    out = Resume{};
  } else if (type == "stop") {
    out = Stop{};
  } else if (type == "set_speed") {
    const double f = in.number("factor");
    if (!(f >= 0.0) || !std::isfinite(f)) throw SchemaError("command: field 'factor' must be a finite number >= 0");
    out = SetSpeed{f};
  } else if (type == "set_param") {
    SetParam p;
    p.agent_id = in.string("agent_id");
    p.param_path = in.string("param_path");
    p.value = in.required("value");
    const auto path = parse_param_path(p.param_path);
    if (!path) throw SchemaError("command: field 'param_path' is not a dotted param path");
    if (path->agent_id() != p.agent_id) {
      throw SchemaError("command: field 'agent_id' does not match the agent addressed by 'param_path'");
    }
    out = std::move(p);
  } else {
    throw SchemaError("command: unknown type '" + type + "'");
  }
  in.finish();
  return out;
}

MsgType type_of(const Message& m) { return static_cast<MsgType>(m.index() + 1); }

std::string type_name(MsgType t) {
  switch (t) {
    case MsgType::Hello: return "Hello";
    case MsgType::Heartbeat: return "Heartbeat";
    case MsgType::Assign: return "Assign";
    case MsgType::AssignAck: return "AssignAck";
    case MsgType::Control: return "Control";
    case MsgType::RunStateChange: return "RunStateChange";
    case MsgType::RecordBatch: return "RecordBatch";
    case MsgType::RecordAck: return "RecordAck";
    case MsgType::Bye: return "Bye";
    case MsgType::Error: return "Error";
  }
  return "Unknown";
}

Json body_to_json(const Message& m) {
  return std::visit(
      Overloaded{
          [](const Hello& x) { return Json{{"node_id", x.node_id}, {"capacity", x.capacity}}; },
          [](const Heartbeat& x) { return Json{{"node_id", x.node_id}, {"running_run_ids", x.running_run_ids}}; },
          [](const Assign& x) {
            return Json{{"execution_request", Json(x.execution_request)}, {"speed_factor", x.speed_factor}};
          },
          [](const AssignAck& x) { return Json{{"run_id", x.run_id}, {"accepted", x.accepted}, {"reason", x.reason}}; },
          [](const Control& x) { return Json{{"run_id", x.run_id}, {"command", command_to_json(x.command)}}; },
          [](const RunStateChange& x) { return Json{{"run_id", x.run_id}, {"state", x.state}, {"detail", x.detail}}; },
          [](const RecordBatch& x) {
            Json records = Json::array();
            for (const auto& r : x.records) records.push_back(Json(r));
            return Json{{"run_id", x.run_id}, {"records", std::move(records)}};
          },
          [](const RecordAck& x) { return Json{{"run_id", x.run_id}, {"through_step", x.through_step}}; },
          [](const Bye& x) { return Json{{"node_id", x.node_id}}; },
          [](const ErrorMsg& x) { return Json{{"code", x.code}, {"text", x.text}}; },
      },
      m);
}

Message body_from_json(MsgType type, const Json& body) {
  JsonReader in(body, type_name(type));
  Message out;
  switch (type) {
    case MsgType::Hello: {
      Hello x;
      x.node_id = in.string("node_id");
      const auto cap = in.u64("capacity");
      if (cap < 1 || cap > UINT32_MAX) throw SchemaError("Hello: field 'capacity' must be >= 1");
      x.capacity = static_cast<std::uint32_t>(cap);
      out = std::move(x);
      break;
    }
    case MsgType::Heartbeat: {
      Heartbeat x;
      x.node_id = in.string("node_id");
      const Json& ids = in.required("running_run_ids");
      if (!ids.is_array()) throw SchemaError("Heartbeat: field 'running_run_ids' must be a list");
      for (const auto& id : ids) {
        if (!id.is_string()) throw SchemaError("Heartbeat: field 'running_run_ids' must hold strings");
        x.running_run_ids.push_back(id.get<std::string>());
      }
      out = std::move(x);
      break;
    }
    case MsgType::Assign: {
      Assign x;
      x.execution_request = in.required("execution_request").get<ExecutionRequest>();
      if (in.optional("speed_factor") != nullptr) {
        x.speed_factor = in.number("speed_factor");
        if (!(x.speed_factor >= 0.0) || !std::isfinite(x.speed_factor)) {
          throw SchemaError("Assign: field 'speed_factor' must be a finite number >= 0");
        }
      }
      out = std::move(x);
      break;
    }
    case MsgType::AssignAck: {
      AssignAck x;
      x.run_id = in.string("run_id");
      x.accepted = in.boolean("accepted");
      x.reason = in.string("reason");
      out = std::move(x);
      break;
    }
    case MsgType::Control: {
      Control x;
      x.run_id = in.string("run_id");
      x.command = command_from_json(in.required("command"));
      out = std::move(x);
      break;
    }
    case MsgType::RunStateChange: {
      RunStateChange x;
      x.run_id = in.string("run_id");
      x.state = in.string("state");
      if (!known_state(x.state)) throw SchemaError("RunStateChange: field 'state' has unknown value '" + x.state + "'");
      x.detail = in.string("detail");
      out = std::move(x);
      break;
    }
    case MsgType::RecordBatch: {
      RecordBatch x;
      x.run_id = in.string("run_id");
      const Json& records = in.required("records");
      if (!records.is_array()) throw SchemaError("RecordBatch: field 'records' must be a list");
      for (const auto& rj : records) {
        auto r = rj.get<StepRecord>();
        if (r.run_id != x.run_id) throw SchemaError("RecordBatch: field 'records' mixes run ids");
        if (!x.records.empty() && !(key_of(x.records.back()) < key_of(r))) {
          throw SchemaError("RecordBatch: field 'records' not strictly ordered by (step, agent_id, tag)");
        }
        x.records.push_back(std::move(r));
      }
      out = std::move(x);
      break;
    }
    case MsgType::RecordAck: {
      RecordAck x;
      x.run_id = in.string("run_id");
      x.through_step = in.i64("through_step");
      out = std::move(x);
      break;
    }
    case MsgType::Bye: {
      Bye x;
      x.node_id = in.string("node_id");
      out = std::move(x);
      break;
    }
    case MsgType::Error: {
      ErrorMsg x;
      x.code = in.string("code");
      x.text = in.string("text");
      out = std::move(x);
      break;
    }
  }
  in.finish();
  return out;
}

Bytes encode(const Message& m) {
  const std::string body = canonical(body_to_json(m));
  const std::size_t length = body.size() + 2;
  Bytes out;
  out.reserve(4 + length);
  out.push_back(static_cast<std::uint8_t>(length >> 24));
  out.push_back(static_cast<std::uint8_t>(length >> 16));
  out.push_back(static_cast<std::uint8_t>(length >> 8));
  out.push_back(static_cast<std::uint8_t>(length));
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(type_of(m)));
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

std::string to_string(DecodeStatus s) {
  switch (s) {
    case DecodeStatus::Ok: return "Ok";
    case DecodeStatus::NeedMoreBytes: return "NeedMoreBytes";
    case DecodeStatus::BadVersion: return "BadVersion";
    case DecodeStatus::UnknownType: return "UnknownType";
    case DecodeStatus::BadBody: return "BadBody";
    case DecodeStatus::FrameTooLarge: return "FrameTooLarge";
  }
  return "Unknown";
}

DecodeResult decode(std::span<const std::uint8_t> bytes) {
  DecodeResult r;
  if (bytes.size() < 4) return r;
  r.declared_length = (std::size_t{bytes[0]} << 24) | (std::size_t{bytes[1]} << 16) |
                      (std::size_t{bytes[2]} << 8) | std::size_t{bytes[3]};
  if (r.declared_length > kMaxFrameLength) {
    r.status = DecodeStatus::FrameTooLarge;
    r.detail = "declared length " + std::to_string(r.declared_length) + " exceeds 16 MiB";
    return r;
  }
  if (bytes.size() < 4 + r.declared_length) return r;
  r.consumed = 4 + r.declared_length;
  if (r.declared_length < 2) {
    r.status = DecodeStatus::BadBody;
    r.detail = "frame shorter than version and type bytes";
    return r;
  }
  if (bytes[4] != kVersion) {
    r.status = DecodeStatus::BadVersion;
    r.detail = "version " + std::to_string(bytes[4]);
    return r;
  }
  const std::uint8_t raw_type = bytes[5];
  if (raw_type < 1 || raw_type > 10) {
    r.status = DecodeStatus::UnknownType;
    r.detail = "msg_type " + std::to_string(raw_type);
    return r;
  }
  const auto body_begin = bytes.begin() + kHeaderSize;
  const auto body_end = bytes.begin() + static_cast<std::ptrdiff_t>(r.consumed);
  Json body = Json::parse(body_begin, body_end, nullptr, false);
  if (body.is_discarded()) {
    r.status = DecodeStatus::BadBody;
    r.detail = "body is not valid UTF-8 JSON";
    return r;
  }
  try {
    r.message = body_from_json(static_cast<MsgType>(raw_type), body);
    r.status = DecodeStatus::Ok;
  } catch (const std::exception& e) {
    r.status = DecodeStatus::BadBody;
    r.detail = e.what();
  }
  return r;
}

std::vector<FrameReader::Item> FrameReader::feed(std::span<const std::uint8_t> chunk) {
  std::vector<Item> out;
  std::size_t pos = 0;
  if (skip_remaining_ > 0) {
    const std::size_t n = std::min(skip_remaining_, chunk.size());
    skip_remaining_ -= n;
    pos = n;
  }
  buffer_.insert(buffer_.end(), chunk.begin() + static_cast<std::ptrdiff_t>(pos), chunk.end());
  for (;;) {
    const std::span<const std::uint8_t> view(buffer_.data() + offset_, buffer_.size() - offset_);
    DecodeResult r = decode(view);
    if (r.status == DecodeStatus::NeedMoreBytes) break;
    if (r.status == DecodeStatus::FrameTooLarge) {
      out.push_back({r.status, std::nullopt, r.detail});
      // Drop the body as it streams past without ever holding it.
      const std::size_t available = view.size() - 4;
      const std::size_t drop = std::min(available, r.declared_length);
      offset_ += 4 + drop;
      skip_remaining_ = r.declared_length - drop;
      if (skip_remaining_ > 0) break;
      continue;
    }
    out.push_back({r.status, std::move(r.message), std::move(r.detail)});
    offset_ += r.consumed;
  }
  if (offset_ > 0 && (offset_ == buffer_.size() || offset_ > 65536)) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(offset_));
    offset_ = 0;
  }
  return out;
}

}  // namespace asa::protocol

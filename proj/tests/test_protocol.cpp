#include <doctest.h>

#include "asa/protocol.hpp"
#include "message_gen.hpp"

using namespace asa;
using namespace asa::protocol;

namespace {

Message roundtrip(const Message& m) {
  const Bytes frame = encode(m);
  const DecodeResult r = decode(frame);
  REQUIRE(r.status == DecodeStatus::Ok);
  REQUIRE(r.consumed == frame.size());
  return *r.message;
}

Bytes raw_frame(std::uint8_t version, std::uint8_t type, const std::string& body) {
  const std::size_t len = body.size() + 2;
  Bytes out{static_cast<std::uint8_t>(len >> 24), static_cast<std::uint8_t>(len >> 16),
            static_cast<std::uint8_t>(len >> 8), static_cast<std::uint8_t>(len), version, type};
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

}  // namespace

TEST_CASE("hello frame layout") {
  const Message hello = Hello{"n1", 2};
  const Bytes frame = encode(hello);
  const std::string body = R"({"capacity":2,"node_id":"n1"})";
  REQUIRE(frame.size() == 4 + 2 + body.size());
  CHECK(frame[0] == 0);
  CHECK(frame[3] == body.size() + 2);
  CHECK(frame[4] == 0x01);
  CHECK(frame[5] == static_cast<std::uint8_t>(MsgType::Hello));
  CHECK(std::string(frame.begin() + 6, frame.end()) == body);
  CHECK(roundtrip(hello) == hello);
}

TEST_CASE("control round trip") {
  const Message pause = Control{"r1", Pause{}};
  CHECK(roundtrip(pause) == pause);
  const Message set = Control{"r1", SetParam{"blue1", "agents.blue1.params.speed_mps", 250}};
  CHECK(roundtrip(set) == set);
}

TEST_CASE("random messages are byte stable") {
  testing::MessageGen gen(20240601);
  for (int i = 0; i < 2000; ++i) {
    const Message m = gen.message();
    const Bytes a = encode(m);
    const DecodeResult r = decode(a);
    REQUIRE_MESSAGE(r.status == DecodeStatus::Ok, r.detail);
    CHECK(*r.message == m);
    CHECK(encode(*r.message) == a);
  }
}

TEST_CASE("short prefixes need more bytes") {
  const Bytes frame = encode(Bye{"n1"});
  for (std::size_t n = 0; n < frame.size(); ++n) {
    const auto r = decode(std::span(frame.data(), n));
    CHECK(r.status == DecodeStatus::NeedMoreBytes);
    CHECK(r.consumed == 0);
  }
}

TEST_CASE("version other than 1 is rejected") {
  Bytes frame = encode(Bye{"n1"});
  frame[4] = 0x02;
  const auto r = decode(frame);
  CHECK(r.status == DecodeStatus::BadVersion);
  CHECK(r.consumed == frame.size());
}

TEST_CASE("unknown message type") {
  for (std::uint8_t t : {std::uint8_t{0}, std::uint8_t{11}, std::uint8_t{255}}) {
    CHECK(decode(raw_frame(1, t, "{}")).status == DecodeStatus::UnknownType);
  }
}

TEST_CASE("missing required fields name the field") {
  // Delete each required field of each message kind in turn.
  const std::vector<Message> samples = {
      Hello{"n1", 2},
      Heartbeat{"n1", {"r1"}},
      Assign{ExecutionRequest{"r1", ScenarioSpec{"s", "", {0.1, 10, 1}, {}}, 7, {"b", 0}}, 0.0},
      AssignAck{"r1", true, ""},
      Control{"r1", Stop{}},
      RunStateChange{"r1", "RUNNING", ""},
      RecordBatch{"r1", {}},
      RecordAck{"r1", 5},
      Bye{"n1"},
      ErrorMsg{"X", "y"},
  };
  for (const auto& m : samples) {
    const Json body = body_to_json(m);
    for (const auto& [field, _] : body.items()) {
      if (field == "speed_factor") continue;  // optional
      Json broken = body;
      broken.erase(field);
      const auto r = decode(raw_frame(1, static_cast<std::uint8_t>(type_of(m)), broken.dump()));
      CHECK(r.status == DecodeStatus::BadBody);
      CHECK_MESSAGE(r.detail.find("'" + field + "'") != std::string::npos, r.detail);
    }
  }
}

TEST_CASE("bodies reject foreign fields and bad values") {
  CHECK(decode(raw_frame(1, 9, R"({"node_id":"n","extra":1})")).status == DecodeStatus::BadBody);
  CHECK(decode(raw_frame(1, 9, R"({"node_id":)")).status == DecodeStatus::BadBody);
  CHECK(decode(raw_frame(1, 9, "\xff\xfe")).status == DecodeStatus::BadBody);
  CHECK(decode(raw_frame(1, 1, R"({"node_id":"n","capacity":0})")).status == DecodeStatus::BadBody);
  CHECK(decode(raw_frame(1, 5, R"({"run_id":"r","command":{"type":"set_speed","factor":-1}})")).status ==
        DecodeStatus::BadBody);
  CHECK(decode(raw_frame(1, 6, R"({"run_id":"r","state":"DANCING","detail":""})")).status == DecodeStatus::BadBody);
  CHECK(decode(raw_frame(1, 5,
                         R"({"run_id":"r","command":{"type":"set_param","agent_id":"x",)"
                         R"("param_path":"agents.y.params.k","value":1}})"))
            .status == DecodeStatus::BadBody);
}

TEST_CASE("record batches must be ordered and single-run") {
  StepRecord a{"r1", 1, 0.1, "status", "a", {}};
  StepRecord b{"r1", 1, 0.1, "status", "b", {}};
  CHECK(decode(encode(RecordBatch{"r1", {a, b}})).status == DecodeStatus::Ok);
  CHECK(decode(encode(RecordBatch{"r1", {b, a}})).status == DecodeStatus::BadBody);
  CHECK(decode(encode(RecordBatch{"r1", {a, a}})).status == DecodeStatus::BadBody);
  StepRecord other = b;
  other.run_id = "r2";
  CHECK(decode(encode(RecordBatch{"r1", {a, other}})).status == DecodeStatus::BadBody);
}

TEST_CASE("feed: byte-by-byte delivery") {
  const Bytes f1 = encode(Hello{"n1", 2});
  const Bytes f2 = encode(Control{"r1", Pause{}});
  Bytes stream = f1;
  stream.insert(stream.end(), f2.begin(), f2.end());
  FrameReader reader;
  std::vector<Message> got;
  for (auto byte : stream) {
    for (auto& item : reader.feed(std::span(&byte, 1))) {
      REQUIRE(item.status == DecodeStatus::Ok);
      got.push_back(*item.message);
    }
  }
  REQUIRE(got.size() == 2);
  CHECK(got[0] == Message{Hello{"n1", 2}});
  CHECK(got[1] == Message{Control{"r1", Pause{}}});
  CHECK(reader.buffered() == 0);
}

TEST_CASE("feed: one frame across 7 chunks") {
  const Bytes f = encode(Heartbeat{"n1", {"a", "b", "c"}});
  FrameReader reader;
  std::size_t count = 0;
  const std::size_t step = (f.size() + 6) / 7;
  int chunks = 0;
  for (std::size_t pos = 0; pos < f.size(); pos += step, ++chunks) {
    const std::size_t n = std::min(step, f.size() - pos);
    count += reader.feed(std::span(f.data() + pos, n)).size();
  }
  CHECK(chunks == 7);
  CHECK(count == 1);
}

TEST_CASE("feed: bad body then valid frame resynchronizes") {
  Bytes stream = raw_frame(1, 1, R"({"capacity":"two"})");
  const Bytes good = encode(Bye{"n2"});
  stream.insert(stream.end(), good.begin(), good.end());
  FrameReader reader;
  const auto items = reader.feed(stream);
  REQUIRE(items.size() == 2);
  CHECK(items[0].status == DecodeStatus::BadBody);
  CHECK(items[1].status == DecodeStatus::Ok);
  CHECK(*items[1].message == Message{Bye{"n2"}});
}

TEST_CASE("feed: oversized frame is rejected before buffering") {
  const std::size_t declared = kMaxFrameLength + 100;
  Bytes header{static_cast<std::uint8_t>(declared >> 24), static_cast<std::uint8_t>(declared >> 16),
               static_cast<std::uint8_t>(declared >> 8), static_cast<std::uint8_t>(declared)};
  FrameReader reader;
  auto items = reader.feed(header);
  REQUIRE(items.size() == 1);
  CHECK(items[0].status == DecodeStatus::FrameTooLarge);
  // Stream the body in 1 MiB pieces; nothing accumulates.
  Bytes chunk(1u << 20, 0xAB);
  std::size_t left = declared;
  while (left > 0) {
    const std::size_t n = std::min(left, chunk.size());
    CHECK(reader.feed(std::span(chunk.data(), n)).empty());
    CHECK(reader.buffered() == 0);
    left -= n;
  }
  const Bytes good = encode(Bye{"after"});
  items = reader.feed(good);
  REQUIRE(items.size() == 1);
  CHECK(*items[0].message == Message{Bye{"after"}});
}

TEST_CASE("stream split invariance") {
  testing::MessageGen gen(99);
  Bytes stream;
  std::vector<Message> sent;
  for (int i = 0; i < 50; ++i) {
    sent.push_back(gen.message());
    const Bytes f = encode(sent.back());
    stream.insert(stream.end(), f.begin(), f.end());
  }
  for (int trial = 0; trial < 20; ++trial) {
    FrameReader reader;
    std::vector<Message> got;
    std::size_t pos = 0;
    while (pos < stream.size()) {
      const std::size_t n = std::min<std::size_t>(1 + gen.rng().below(300), stream.size() - pos);
      for (auto& item : reader.feed(std::span(stream.data() + pos, n))) got.push_back(*item.message);
      pos += n;
    }
    CHECK(got == sent);
  }
}

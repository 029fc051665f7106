// Test extension: flies straight legs, alternating left and right of its base heading.
#include <cmath>

#include "asa/model.hpp"

namespace {

class ZigzagPlatform final : public asa::ModelBehavior {
 public:
  void init(const asa::Json& params, asa::SplitMix64&, asa::AgentState& self) override {
    const auto& p = params.at("position");
    self.position = {p.at(0).get<double>(), p.at(1).get<double>(), p.size() > 2 ? p.at(2).get<double>() : 0.0};
    self.speed = params.at("speed_mps").get<double>();
    base_ = params.at("heading_rad").get<double>();
    zig_ = params.at("zig_rad").get<double>();
    leg_steps_ = params.at("leg_steps").get<std::int64_t>();
    self.heading = base_ + zig_;
  }

  void step(double dt, const asa::PerceptionView&, asa::AgentState& self, asa::StepContext& ctx) override {
    if (++count_ % leg_steps_ == 0) {
      ++leg_;
      self.heading = base_ + (leg_ % 2 == 0 ? zig_ : -zig_);
      ctx.emit("leg_change", {{"leg", leg_}});
    }
    self.position.x += self.speed * dt * std::cos(self.heading);
    self.position.y += self.speed * dt * std::sin(self.heading);
  }

  bool on_set_param(const std::string& key, const asa::Json& value, asa::AgentState&) override {
    if (key != "zig_rad" || !value.is_number()) return false;
    zig_ = value.get<double>();
    return true;
  }

 private:
  double base_ = 0.0;
  double zig_ = 0.0;
  std::int64_t leg_steps_ = 1;
  std::int64_t count_ = 0;
  std::int64_t leg_ = 0;
};

}  // namespace

ASA_EXTENSION(ZigzagPlatform)

// Starting point for an out-of-tree model. Rename the class, edit my_model.json
// to match the params and tags it uses, then build with the CMakeLists.txt here.
#include "asa/model.hpp"

namespace {

class MyModel final : public asa::ModelBehavior {
 public:
  void init(const asa::Json& params, asa::SplitMix64&, asa::AgentState& self) override {
    const auto& p = params.at("position");
    self.position = {p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()};
    self.speed = params.at("speed_mps").get<double>();
  }

  void step(double dt, const asa::PerceptionView& view, asa::AgentState& self, asa::StepContext& ctx) override {
    self.position.x += self.speed * dt * std::cos(self.heading);
    self.position.y += self.speed * dt * std::sin(self.heading);
    std::int64_t neighbours = 0;
    for (const asa::AgentState* other : view.alive_agents()) {
      if (other->agent_id != self.agent_id && asa::norm(other->position - self.position) < 1000.0) ++neighbours;
    }
    if (neighbours > 0) ctx.emit("nearby", {{"count", neighbours}});
  }
};

}  // namespace

ASA_EXTENSION(MyModel)

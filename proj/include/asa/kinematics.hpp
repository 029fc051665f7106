#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

#include "asa/model.hpp"

namespace asa::kinematics {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Into [0, 2pi).
inline double normalize_heading(double h) {
  h = std::fmod(h, kTwoPi);
  if (h < 0.0) h += kTwoPi;
  if (h >= kTwoPi) h = 0.0;
  return h;
}

/// Into (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a, kTwoPi);
  if (a <= -std::numbers::pi) a += kTwoPi;
  if (a > std::numbers::pi) a -= kTwoPi;
  return a;
}

inline double bearing(Vec3 from, Vec3 to) { return normalize_heading(std::atan2(to.y - from.y, to.x - from.x)); }

/// Turn `heading` toward `desired` by at most `max_turn` radians.
inline double turn_toward(double heading, double desired, double max_turn) {
  const double diff = wrap_angle(desired - heading);
  return normalize_heading(heading + std::clamp(diff, -max_turn, max_turn));
}

/// Turn-rate-limited pure pursuit of `target` at constant speed. The climb
/// angle points straight at the target; total displacement is speed * dt.
inline void pursuit_step(AgentState& self, Vec3 target, double speed, double turn_rate, double dt) {
  const double desired = bearing(self.position, target);
  if (horizontal_distance(self.position, target) > 0.0) {
    self.heading = turn_toward(self.heading, desired, turn_rate * dt);
  }
  const double climb = std::atan2(target.z - self.position.z, horizontal_distance(self.position, target));
  const double step = speed * dt;
  self.position.x += step * std::cos(climb) * std::cos(self.heading);
  self.position.y += step * std::cos(climb) * std::sin(self.heading);
  self.position.z = std::max(0.0, self.position.z + step * std::sin(climb));
  self.speed = speed;
}

/// Minimum distance between two points moving linearly over one step from
/// (a0, b0) to (a1, b1).
inline double closest_approach(Vec3 a0, Vec3 a1, Vec3 b0, Vec3 b1) {
  const Vec3 r0 = a0 - b0;
  const Vec3 dr = (a1 - b1) - r0;
  const double dd = dot(dr, dr);
  double s = dd > 0.0 ? -dot(r0, dr) / dd : 0.0;
  s = std::clamp(s, 0.0, 1.0);
  return norm(r0 + s * dr);
}

/// Whole steps needed to cover `seconds`.
inline std::uint64_t steps_for(double seconds, double dt) {
  return static_cast<std::uint64_t>(std::ceil(seconds / dt - 1e-9));
}

}  // namespace asa::kinematics

#include "asa/wez.hpp"

#include <cmath>

#include "asa/kinematics.hpp"

namespace asa {

bool flyout_hits(double range, double target_speed, double aspect, const WeaponParams& weapon) {
  AgentState missile;
  missile.heading = 0.0;
  missile.speed = weapon.missile_speed_mps;
  Vec3 target{range, 0.0, 0.0};
  const Vec3 target_velocity{target_speed * std::cos(aspect), target_speed * std::sin(aspect), 0.0};
  const std::uint64_t max_steps = kinematics::steps_for(weapon.max_flight_s, weapon.dt);
  for (std::uint64_t k = 1; k <= max_steps; ++k) {
    const Vec3 m0 = missile.position;
    const Vec3 t0 = target;
    kinematics::pursuit_step(missile, t0, weapon.missile_speed_mps, weapon.missile_turn_rate_rad_s, weapon.dt);
    target = target + weapon.dt * target_velocity;
    if (kinematics::closest_approach(m0, missile.position, t0, target) < weapon.hit_radius_m) return true;
  }
  return false;
}

double estimate_wez_max_range(double target_speed, double aspect, const WeaponParams& weapon) {
  if (!flyout_hits(0.0, target_speed, aspect, weapon)) {
    throw Error("NoHitAtAnyRange", "fly-out misses even at point-blank range");
  }
  double lo = 0.0;
  double hi = 2.0 * weapon.launch_range_m;
  if (flyout_hits(hi, target_speed, aspect, weapon)) return hi;
  while (hi - lo > 10.0) {
    const double mid = 0.5 * (lo + hi);
    if (flyout_hits(mid, target_speed, aspect, weapon)) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return lo;
}

}  // namespace asa

#pragma once

#include "asa/error.hpp"

namespace asa {

struct WeaponParams {
  double launch_range_m = 30000.0;
  double missile_speed_mps = 1000.0;
  double missile_turn_rate_rad_s = 0.5;
  double hit_radius_m = 50.0;
  double max_flight_s = 60.0;
  double dt = 0.1;
};

/// Single-shot fly-out: shooter at the origin, target `range` meters down the
/// line of sight, flying straight with heading `aspect` relative to it
/// (0 = receding, pi = head-on). Same kinematics and hit test as the engine.
bool flyout_hits(double range, double target_speed, double aspect, const WeaponParams& weapon);

/// Largest launch range that still hits, to 10 m, by bisection over
/// [0, 2 * launch_range_m]. Throws Error("NoHitAtAnyRange").
double estimate_wez_max_range(double target_speed, double aspect, const WeaponParams& weapon);

}  // namespace asa

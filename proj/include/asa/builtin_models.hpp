#pragma once

#include "asa/engine.hpp"

namespace asa::builtin {

inline constexpr const char* kVersion = "1.0";
inline constexpr const char* kWaypointPlatform = "waypoint_platform";
inline constexpr const char* kRangeSensor = "range_sensor";
inline constexpr const char* kWezWeapon = "wez_weapon";
inline constexpr const char* kMissile = "missile";

ModelManifest waypoint_platform_manifest();
ModelManifest range_sensor_manifest();
ModelManifest wez_weapon_manifest();
ModelManifest missile_manifest();

BehaviorPtr make_waypoint_platform();
BehaviorPtr make_range_sensor();
BehaviorPtr make_wez_weapon();
BehaviorPtr make_missile();

void register_all(ModelRegistry& registry);

}  // namespace asa::builtin

#pragma once

#include <string>

namespace asa::log {

enum class Level { Debug, Info, Warn, Error };

/// Messages below this level are dropped. Default Info; ASA_LOG=debug|info|warn|error overrides.
void set_level(Level level);
Level level();

/// One line to stderr: `<iso time> <LEVEL> <component>: <message>`.
void write(Level level, const std::string& component, const std::string& message);

inline void debug(const std::string& c, const std::string& m) { write(Level::Debug, c, m); }
inline void info(const std::string& c, const std::string& m) { write(Level::Info, c, m); }
inline void warn(const std::string& c, const std::string& m) { write(Level::Warn, c, m); }
inline void error(const std::string& c, const std::string& m) { write(Level::Error, c, m); }

}  // namespace asa::log

namespace asa::log {

/// UTC wall time, ISO-8601 with milliseconds.
std::string timestamp();

}  // namespace asa::log

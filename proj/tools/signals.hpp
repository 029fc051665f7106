#pragma once

#include <csignal>
#include <functional>
#include <pthread.h>
#include <thread>

namespace asa::tools {

/// Blocks SIGINT, SIGTERM and SIGHUP in every thread created afterwards and
/// returns the blocked set for a dedicated sigwait loop.
inline sigset_t block_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGHUP);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  return set;
}

/// Waits for signals on a helper thread. `on_hup` runs for SIGHUP; the first
/// SIGINT or SIGTERM calls `on_stop` and ends the loop.
inline std::thread signal_thread(sigset_t set, std::function<void()> on_stop, std::function<void()> on_hup) {
  return std::thread([set, on_stop = std::move(on_stop), on_hup = std::move(on_hup)] {
    for (;;) {
      int sig = 0;
      if (sigwait(&set, &sig) != 0) continue;
      if (sig == SIGHUP) {
        if (on_hup) on_hup();
        continue;
      }
      on_stop();
      return;
    }
  });
}

}  // namespace asa::tools

#include <cstdlib>
#include <iostream>

#include "asa/cli.hpp"

int main(int argc, char** argv) {
  const char* env = std::getenv("ASA_MANAGER");
  return asa::cli::run(argc, argv, std::cout, std::cerr, env ? env : "");
}

#include <iostream>
#include <string>
#include <vector>

#include "diablo/cli/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return diablo::cli::run_cli(args, std::cout, std::cerr);
}

#include <iostream>

#include "ctlab_cli/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ctlab::cli::run(args, std::cout, std::cerr);
}

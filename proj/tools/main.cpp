#include <iostream>
#include <string>
#include <vector>

#include "ftpg/runner.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ftpg::run_experiment(args, std::cout, std::cerr);
}

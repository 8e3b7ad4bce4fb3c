#include <string>
#include <vector>

#include "pso/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return pso::cli::main_impl(args);
}

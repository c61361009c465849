#include <iostream>
#include <string>
#include <vector>

#include "mamba_spike/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mamba_spike::cli::run(std::move(args), std::cout, std::cerr);
}

#include <iostream>

#include "enprompt/cli.hpp"

int main(int argc, char** argv) {
  return enprompt::cli::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}

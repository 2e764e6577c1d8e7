#include <string>
#include <vector>

#include "specdc/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return specdc::cli::run(std::move(args));
}

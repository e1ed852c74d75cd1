#include <vector>

#include "contraseq/cli.hpp"

int main(int argc, char** argv) {
  return contraseq::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

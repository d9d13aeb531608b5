#include "dmil/cli.hpp"

int main(int argc, char** argv) {
  return dmil::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}

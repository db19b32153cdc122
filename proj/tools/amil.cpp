#include "amil/cli.hpp"

int main(int argc, char** argv) {
  return amil::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}

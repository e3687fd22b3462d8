#include "multifuse/cli.hpp"

int main(int argc, char** argv) {
  return multifuse::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}

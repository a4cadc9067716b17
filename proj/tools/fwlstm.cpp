#include "fwlstm/cli.hpp"

int main(int argc, char** argv) {
  return fwlstm::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

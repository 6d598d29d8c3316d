#include <iostream>
#include <string>
#include <vector>

#include "geclip/service/cli.h"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return geclip::service::run_cli(args, std::cout, std::cerr);
}

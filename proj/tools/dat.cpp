#include <iostream>

#include "dat/cli.hpp"

int main(int argc, char** argv) {
  return dat::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}

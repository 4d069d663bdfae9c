#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) {
  greskit::cli::configure_logging();
  return greskit::cli::run({argv, argv + argc}, std::cout, std::cerr);
}

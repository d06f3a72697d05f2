#include <iostream>

#include "mixdiv/cli.hpp"

int main(int argc, char** argv) { return mixdiv::run_cli(argc, argv, std::cout, std::cerr); }

#include <iostream>

#include "cfsim/cli.hpp"

int main(int argc, char** argv) { return cfsim::run_cli(argc, argv, std::cout, std::cerr); }

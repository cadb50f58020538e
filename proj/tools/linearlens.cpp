#include <iostream>

#include "linearlens/cli.hpp"

int main(int argc, char** argv) { return linearlens::run_cli(argc, argv, std::cout, std::cerr); }

#include <iostream>

#include "stpp/cli.hpp"

int main(int argc, char** argv) { return stpp::run_cli(argc, argv, std::cout, std::cerr); }
